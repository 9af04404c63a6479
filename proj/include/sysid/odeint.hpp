#pragma once

// Explicit Runge-Kutta integrators. States are any Eigen dense object (vector
// or matrix, the latter used for column-batched integration); the error norm
// is the RMS over all coefficients.

#include "sysid/error.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

namespace sysid::ode {

enum class Method { euler, rk4, dopri5 };

/// Step bounds <= 0 mean "derive from the integration interval" (see resolve()).
struct SolverConfig {
    Method method = Method::dopri5;
    double rtol = 1e-6;
    double atol = 1e-8;
    double h_init = 0.0;
    double h_min = 0.0;
    double h_max = 0.0;
    long max_steps = 100000;
};

/// Concrete step bounds for integration over [t0, t_end] whose first grid interval is `first_interval`.
struct StepBounds {
    double h_init, h_min, h_max;
};

inline StepBounds resolve(const SolverConfig& cfg, double first_interval, double span) {
    StepBounds b{};
    b.h_max = cfg.h_max > 0 ? cfg.h_max : span;
    b.h_init = cfg.h_init > 0 ? cfg.h_init : first_interval / 100.0;
    b.h_min = cfg.h_min > 0 ? cfg.h_min : 1e-10 * span;
    b.h_init = std::clamp(b.h_init, b.h_min, b.h_max);
    return b;
}

inline void check(const SolverConfig& cfg) {
    if (!(cfg.rtol > 0) || !(cfg.atol > 0)) throw ParameterError("solver: rtol and atol must be positive");
    if (cfg.max_steps < 1) throw ParameterError("solver: max_steps must be >= 1");
    if (cfg.h_min > 0 && cfg.h_init > 0 && cfg.h_min > cfg.h_init)
        throw ParameterError("solver: h_min must not exceed h_init");
    if (cfg.h_init > 0 && cfg.h_max > 0 && cfg.h_init > cfg.h_max)
        throw ParameterError("solver: h_init must not exceed h_max");
}

template <typename State>
using Plain = typename State::PlainObject;

namespace detail {

template <typename State>
void require_finite(const State& s, double t) {
    if (!s.allFinite()) throw DivergenceError("integration diverged: non-finite stage at t=" + std::to_string(t));
}

}  // namespace detail

template <typename F, typename State>
Plain<State> step_euler(F&& f, const State& x, double t, double h) {
    Plain<State> k = f(x, t);
    detail::require_finite(k, t);
    return x + h * k;
}

template <typename F, typename State>
Plain<State> step_rk4(F&& f, const State& x, double t, double h) {
    using S = Plain<State>;
    const S k1 = f(x, t);
    detail::require_finite(k1, t);
    const S k2 = f(S(x + 0.5 * h * k1), t + 0.5 * h);
    detail::require_finite(k2, t);
    const S k3 = f(S(x + 0.5 * h * k2), t + 0.5 * h);
    detail::require_finite(k3, t);
    const S k4 = f(S(x + h * k3), t + h);
    detail::require_finite(k4, t);
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

/// Dormand-Prince 5(4) tableau.
struct Dopri5Tableau {
    static constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
    static constexpr double a21 = 1.0 / 5;
    static constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
    static constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
    static constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561, a54 = -212.0 / 729;
    static constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247, a64 = 49.0 / 176,
                            a65 = -5103.0 / 18656;
    static constexpr double b1 = 35.0 / 384, b3 = 500.0 / 1113, b4 = 125.0 / 192, b5 = -2187.0 / 6784, b6 = 11.0 / 84;
    // b - b*, where b* is the embedded 4th-order solution
    static constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920, e5 = -17253.0 / 339200,
                            e6 = 22.0 / 525, e7 = -1.0 / 40;
};

template <typename State>
struct Dopri5Result {
    State x5;
    State k7;  // f(x5, t+h), reusable as the first stage of the next step
    double err_est = 0.0;
    double h_next = 0.0;
};

inline double next_step_size(double h, double err) {
    const double factor = err == 0.0 ? 5.0 : std::clamp(0.9 * std::pow(err, -0.2), 0.2, 5.0);
    return h * factor;
}

/// One Dormand-Prince attempt from (x, t) with step h, given k1 = f(x, t).
template <typename F, typename State, typename K1>
Dopri5Result<Plain<State>> dopri5_attempt(F&& f, const State& x, double t, double h, const K1& k1, double rtol,
                                          double atol) {
    using S = Plain<State>;
    using T = Dopri5Tableau;
    const S k2 = f(S(x + h * (T::a21 * k1)), t + T::c2 * h);
    detail::require_finite(k2, t);
    const S k3 = f(S(x + h * (T::a31 * k1 + T::a32 * k2)), t + T::c3 * h);
    detail::require_finite(k3, t);
    const S k4 = f(S(x + h * (T::a41 * k1 + T::a42 * k2 + T::a43 * k3)), t + T::c4 * h);
    detail::require_finite(k4, t);
    const S k5 = f(S(x + h * (T::a51 * k1 + T::a52 * k2 + T::a53 * k3 + T::a54 * k4)), t + T::c5 * h);
    detail::require_finite(k5, t);
    const S k6 = f(S(x + h * (T::a61 * k1 + T::a62 * k2 + T::a63 * k3 + T::a64 * k4 + T::a65 * k5)), t + h);
    detail::require_finite(k6, t);
    Dopri5Result<S> r;
    r.x5 = x + h * (T::b1 * k1 + T::b3 * k3 + T::b4 * k4 + T::b5 * k5 + T::b6 * k6);
    r.k7 = f(r.x5, t + h);
    detail::require_finite(r.k7, t);
    const S err = h * (T::e1 * k1 + T::e3 * k3 + T::e4 * k4 + T::e5 * k5 + T::e6 * k6 + T::e7 * r.k7);
    const auto scale = atol + rtol * x.array().abs().max(r.x5.array().abs());
    const double n = static_cast<double>(err.size());
    r.err_est = n > 0 ? std::sqrt((err.array() / scale).square().sum() / n) : 0.0;
    r.h_next = next_step_size(h, r.err_est);
    return r;
}

/// Single Dormand-Prince step: 5th-order solution, RMS error estimate and proposed next step.
template <typename F, typename State>
Dopri5Result<Plain<State>> step_dopri5(F&& f, const State& x, double t, double h, double rtol, double atol) {
    const Plain<State> k1 = f(x, t);
    detail::require_finite(k1, t);
    return dopri5_attempt(f, x, t, h, k1, rtol, atol);
}

struct IntervalStats {
    long accepted = 0;
    long rejected = 0;
    double max_accepted_err = 0.0;
};

/// Advances x from ta to tb, landing exactly on tb. `h` carries the proposed
/// adaptive step size across calls; `steps_left` is decremented per attempt.
template <typename F, typename State>
Plain<State> integrate_interval(F&& f, const State& x0, double ta, double tb, const SolverConfig& cfg,
                                const StepBounds& bounds, double& h, long& steps_left, IntervalStats* stats = nullptr) {
    using S = Plain<State>;
    S x = x0;
    const double span = tb - ta;
    if (!(span > 0)) throw ParameterError("integrate: time grid must be strictly increasing");

    if (cfg.method != Method::dopri5) {
        const double hf = std::min(bounds.h_init, bounds.h_max);
        const long n = std::max<long>(1, static_cast<long>(std::ceil(span / hf - 1e-9)));
        const double step = span / static_cast<double>(n);
        for (long i = 0; i < n; ++i) {
            if (--steps_left < 0) throw NonConvergenceError("integrate: max_steps exceeded", ta + i * step);
            const double t = ta + static_cast<double>(i) * step;
            x = cfg.method == Method::euler ? step_euler(f, x, t, step) : step_rk4(f, x, t, step);
            if (stats) ++stats->accepted;
        }
        return x;
    }

    double t = ta;
    S k1 = f(x, t);
    detail::require_finite(k1, t);
    while (t < tb) {
        h = std::clamp(h, bounds.h_min, bounds.h_max);
        double step = h;
        bool lands = false;
        if (t + step >= tb - 1e-12 * std::max(std::abs(tb), span)) {
            step = tb - t;
            lands = true;
        }
        if (--steps_left < 0) throw NonConvergenceError("integrate: max_steps exceeded", t);
        auto r = dopri5_attempt(f, x, t, step, k1, cfg.rtol, cfg.atol);
        if (r.err_est <= 1.0) {
            t = lands ? tb : t + step;
            x = std::move(r.x5);
            k1 = std::move(r.k7);
            if (stats) {
                ++stats->accepted;
                stats->max_accepted_err = std::max(stats->max_accepted_err, r.err_est);
            }
            // a truncated landing step keeps the previous proposal for the next interval
            if (!(lands && step < h)) h = r.h_next;
        } else {
            if (stats) ++stats->rejected;
            if (step <= bounds.h_min * (1.0 + 1e-12))
                throw NonConvergenceError("integrate: step size underflow", t);
            h = std::max(r.h_next, bounds.h_min);
            if (lands) h = std::min(h, step);
        }
    }
    return x;
}

template <typename State>
struct Solution {
    std::vector<State> states;  // one per grid point
    IntervalStats stats;
};

/// Solution of dx/dt = f(x, t) at every point of the strictly increasing grid.
template <typename F, typename State, typename Grid>
Solution<Plain<State>> integrate(F&& f, const State& x0, const Grid& t_grid, const SolverConfig& cfg) {
    check(cfg);
    const Eigen::Index n = static_cast<Eigen::Index>(t_grid.size());
    if (n < 2) throw ParameterError("integrate: time grid needs at least two points");
    const double t0 = t_grid[0];
    const double t_end = t_grid[n - 1];
    const StepBounds bounds = resolve(cfg, t_grid[1] - t0, t_end - t0);
    Solution<Plain<State>> sol;
    sol.states.reserve(static_cast<std::size_t>(n));
    sol.states.emplace_back(x0);
    double h = bounds.h_init;
    long steps_left = cfg.max_steps;
    for (Eigen::Index k = 1; k < n; ++k) {
        sol.states.push_back(
            integrate_interval(f, sol.states.back(), t_grid[k - 1], t_grid[k], cfg, bounds, h, steps_left, &sol.stats));
    }
    return sol;
}

/// Stacks vector-valued states as rows.
inline Eigen::MatrixXd as_rows(const std::vector<Eigen::VectorXd>& states) {
    if (states.empty()) return {};
    Eigen::MatrixXd out(static_cast<Eigen::Index>(states.size()), states.front().size());
    for (std::size_t k = 0; k < states.size(); ++k) out.row(static_cast<Eigen::Index>(k)) = states[k].transpose();
    return out;
}

const char* to_string(Method m);
Method method_from_string(const std::string& s);

}  // namespace sysid::ode
