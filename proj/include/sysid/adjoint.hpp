#pragma once

// Reverse-mode sensitivities of dx/dt = f(x, c, theta) integrated over a time
// grid, where c is a constant context (e.g. the initial latent state fed to a
// data-controlled field). Two gradient paths:
//
//   adjoint_backward   continuous adjoint solved backward in time with dopri5
//   rk4_backward       exact reverse pass through fixed-step classical RK4
//
// A Field provides, for the grid interval k (piecewise-constant inputs live there):
//
//   Index theta_size() const;
//   Index ctx_rows() const;
//   Matrix eval(const Matrix& x, double t, Index k) const;
//   FieldVjp vjp(const Matrix& x, const Matrix& a, double t, Index k) const;
//
// States are column-batched (n_x x B); vjp returns a^T df/dx, a^T df/dtheta
// summed over the batch, and a^T df/dc.

#include "sysid/odeint.hpp"

#include <Eigen/Dense>

#include <vector>

namespace sysid {

struct FieldVjp {
    Eigen::MatrixXd dx;
    Eigen::VectorXd dtheta;
    Eigen::MatrixXd dctx;
    Eigen::MatrixXd value;  // f(x) itself when the field computes it anyway; may be left empty
};

struct Sensitivity {
    Eigen::MatrixXd x0;      // dL/dx(t_0)
    Eigen::VectorXd theta;   // dL/dtheta
    Eigen::MatrixXd ctx;     // dL/dc
    ode::IntervalStats stats;
};

/// Integrates the field over every grid interval; returns the state at each grid point.
template <typename Field>
std::vector<Eigen::MatrixXd> integrate_field(const Field& f, const Eigen::MatrixXd& x0, const std::vector<double>& grid,
                                             const ode::SolverConfig& cfg, ode::IntervalStats* stats = nullptr) {
    ode::check(cfg);
    const auto n = static_cast<Eigen::Index>(grid.size());
    if (n < 2) throw ParameterError("integrate_field: grid needs at least two points");
    const ode::StepBounds bounds = ode::resolve(cfg, grid[1] - grid[0], grid.back() - grid.front());
    std::vector<Eigen::MatrixXd> xs;
    xs.reserve(grid.size());
    xs.push_back(x0);
    double h = bounds.h_init;
    long steps_left = cfg.max_steps;
    for (Eigen::Index k = 0; k + 1 < n; ++k) {
        const auto rhs = [&](const Eigen::MatrixXd& x, double t) -> Eigen::MatrixXd { return f.eval(x, t, k); };
        xs.push_back(ode::integrate_interval(rhs, xs.back(), grid[k], grid[k + 1], cfg, bounds, h, steps_left, stats));
    }
    return xs;
}

/// Continuous adjoint. `states` are the forward states at the grid points and
/// `dl_dx[k]` the loss gradient with respect to the state at grid point k.
/// Between observations the augmented system (x, a, g_theta, g_ctx) is solved
/// backward in time; x is reset to the stored forward state at every grid point.
template <typename Field>
Sensitivity adjoint_backward(const Field& f, const std::vector<Eigen::MatrixXd>& states, const std::vector<double>& grid,
                             const std::vector<Eigen::MatrixXd>& dl_dx, const ode::SolverConfig& cfg) {
    using Eigen::Index;
    using Eigen::MatrixXd;
    using Eigen::VectorXd;
    ode::check(cfg);
    const auto n = static_cast<Index>(grid.size());
    if (n < 2 || states.size() != grid.size() || dl_dx.size() != grid.size())
        throw ShapeError("adjoint_backward: states, gradients and grid must have equal length");
    const Index nx = states[0].rows(), b = states[0].cols();
    const Index np = f.theta_size(), nc = f.ctx_rows();
    const Index sx = nx * b, sc = nc * b;

    const ode::StepBounds bounds = ode::resolve(cfg, grid[n - 1] - grid[n - 2], grid.back() - grid.front());
    double h = bounds.h_init;
    long steps_left = cfg.max_steps;

    Sensitivity out;
    MatrixXd a = dl_dx[n - 1];
    VectorXd g_theta = VectorXd::Zero(np);
    MatrixXd g_ctx = MatrixXd::Zero(nc, b);
    VectorXd aug(2 * sx + np + sc);
    for (Index k = n - 1; k > 0; --k) {
        const double t_hi = grid[k];
        aug.segment(0, sx) = Eigen::Map<const VectorXd>(states[k].data(), sx);
        aug.segment(sx, sx) = Eigen::Map<const VectorXd>(a.data(), sx);
        aug.segment(2 * sx, np).setZero();
        aug.segment(2 * sx + np, sc).setZero();
        // reversed time tau = t_hi - t runs from 0 to t_hi - t_lo
        const auto rhs = [&](const VectorXd& z, double tau) -> VectorXd {
            const double t = t_hi - tau;
            const MatrixXd x = Eigen::Map<const MatrixXd>(z.data(), nx, b);
            const MatrixXd adj = Eigen::Map<const MatrixXd>(z.data() + sx, nx, b);
            FieldVjp v = f.vjp(x, adj, t, k - 1);
            const MatrixXd dx = v.value.size() == x.size() ? v.value : f.eval(x, t, k - 1);
            VectorXd d(z.size());
            d.segment(0, sx) = -Eigen::Map<const VectorXd>(dx.data(), sx);
            d.segment(sx, sx) = Eigen::Map<const VectorXd>(v.dx.data(), sx);
            d.segment(2 * sx, np) = v.dtheta;
            d.segment(2 * sx + np, sc) = Eigen::Map<const VectorXd>(v.dctx.data(), sc);
            return d;
        };
        aug = ode::integrate_interval(rhs, aug, 0.0, t_hi - grid[k - 1], cfg, bounds, h, steps_left, &out.stats);
        a = Eigen::Map<const MatrixXd>(aug.data() + sx, nx, b) + dl_dx[k - 1];
        g_theta += aug.segment(2 * sx, np);
        g_ctx += Eigen::Map<const MatrixXd>(aug.data() + 2 * sx + np, nc, b);
    }
    out.x0 = std::move(a);
    out.theta = std::move(g_theta);
    out.ctx = std::move(g_ctx);
    return out;
}

/// Fixed-step RK4 trajectory with the stage inputs recorded for rk4_backward.
struct Rk4Tape {
    std::vector<double> grid;
    Eigen::Index substeps = 1;
    std::vector<Eigen::MatrixXd> states;       // at grid points
    std::vector<std::vector<Eigen::MatrixXd>> stage_inputs;  // per interval: 4 stage inputs per substep
};

template <typename Field>
Rk4Tape rk4_forward(const Field& f, const Eigen::MatrixXd& x0, const std::vector<double>& grid, Eigen::Index substeps) {
    using Eigen::MatrixXd;
    if (grid.size() < 2) throw ParameterError("rk4_forward: grid needs at least two points");
    if (substeps < 1) throw ParameterError("rk4_forward: substeps must be >= 1");
    Rk4Tape tape;
    tape.grid = grid;
    tape.substeps = substeps;
    tape.states.push_back(x0);
    MatrixXd x = x0;
    for (std::size_t k = 0; k + 1 < grid.size(); ++k) {
        const double h = (grid[k + 1] - grid[k]) / static_cast<double>(substeps);
        const auto ki = static_cast<Eigen::Index>(k);
        std::vector<MatrixXd> stages;
        stages.reserve(static_cast<std::size_t>(4 * substeps));
        for (Eigen::Index s = 0; s < substeps; ++s) {
            const double t = grid[k] + static_cast<double>(s) * h;
            stages.push_back(x);
            const MatrixXd k1 = f.eval(x, t, ki);
            MatrixXd s2 = x + 0.5 * h * k1;
            const MatrixXd k2 = f.eval(s2, t + 0.5 * h, ki);
            MatrixXd s3 = x + 0.5 * h * k2;
            const MatrixXd k3 = f.eval(s3, t + 0.5 * h, ki);
            MatrixXd s4 = x + h * k3;
            const MatrixXd k4 = f.eval(s4, t + h, ki);
            stages.push_back(std::move(s2));
            stages.push_back(std::move(s3));
            stages.push_back(std::move(s4));
            x += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            if (!x.allFinite()) throw DivergenceError("rk4_forward: non-finite state", static_cast<long>(k));
        }
        tape.stage_inputs.push_back(std::move(stages));
        tape.states.push_back(x);
    }
    return tape;
}

/// Exact gradient of the discrete RK4 map; `dl_dx` as in adjoint_backward.
template <typename Field>
Sensitivity rk4_backward(const Field& f, const Rk4Tape& tape, const std::vector<Eigen::MatrixXd>& dl_dx) {
    using Eigen::Index;
    using Eigen::MatrixXd;
    if (dl_dx.size() != tape.states.size()) throw ShapeError("rk4_backward: one gradient per grid point required");
    const Index b = tape.states[0].cols();
    Sensitivity out;
    out.theta = Eigen::VectorXd::Zero(f.theta_size());
    out.ctx = MatrixXd::Zero(f.ctx_rows(), b);
    MatrixXd a = dl_dx.back();
    for (std::size_t k = tape.stage_inputs.size(); k-- > 0;) {
        const double h = (tape.grid[k + 1] - tape.grid[k]) / static_cast<double>(tape.substeps);
        const auto ki = static_cast<Index>(k);
        const auto& st = tape.stage_inputs[k];
        for (Index s = tape.substeps; s-- > 0;) {
            const double t = tape.grid[k] + static_cast<double>(s) * h;
            const auto base = static_cast<std::size_t>(4 * s);
            MatrixXd xbar = a;
            MatrixXd k3bar = (h / 3.0) * a, k2bar = (h / 3.0) * a, k1bar = (h / 6.0) * a;
            FieldVjp v4 = f.vjp(st[base + 3], MatrixXd((h / 6.0) * a), t + h, ki);
            xbar += v4.dx;
            k3bar += h * v4.dx;
            FieldVjp v3 = f.vjp(st[base + 2], k3bar, t + 0.5 * h, ki);
            xbar += v3.dx;
            k2bar += 0.5 * h * v3.dx;
            FieldVjp v2 = f.vjp(st[base + 1], k2bar, t + 0.5 * h, ki);
            xbar += v2.dx;
            k1bar += 0.5 * h * v2.dx;
            FieldVjp v1 = f.vjp(st[base], k1bar, t, ki);
            xbar += v1.dx;
            out.theta += v1.dtheta + v2.dtheta + v3.dtheta + v4.dtheta;
            out.ctx += v1.dctx + v2.dctx + v3.dctx + v4.dctx;
            a = std::move(xbar);
        }
        a += dl_dx[k];
    }
    out.x0 = std::move(a);
    return out;
}

}  // namespace sysid
