#include "sysid/systems.hpp"

#include "sysid/error.hpp"
#include "sysid/odeint.hpp"

#include <cmath>
#include <cstdio>
#include <map>
#include <random>
#include <sstream>

namespace sysid {

namespace {

using Param = std::pair<std::string, double>;

double param(const std::vector<Param>& ps, const std::string& key) {
    for (const auto& [k, v] : ps)
        if (k == key) return v;
    throw LookupError("missing parameter " + key);
}

Vector vec(std::initializer_list<double> v) {
    Vector out(static_cast<Index>(v.size()));
    Index i = 0;
    for (double x : v) out(i++) = x;
    return out;
}

InputPolicy steps(Vector low, Vector high, Index hold) {
    InputPolicy p;
    p.kind = InputPolicy::Kind::prbs_steps;
    p.low = std::move(low);
    p.high = std::move(high);
    p.hold_steps = hold;
    return p;
}

// Exothermic CSTR (A -> B), states: reactant concentration Ca [mol/m3], temperature T [K];
// input: coolant temperature Tc [K]; outputs: product concentration Caf - Ca and T.
// Damped oscillatory around the operating point for Tc in [297, 303].
SystemSpec cstr() {
    SystemSpec s;
    s.name = "cstr";
    s.summary = "continuous stirred tank reactor, exothermic first-order reaction";
    s.n_x = 2;
    s.n_u = 1;
    s.n_y = 2;
    s.params = {{"q", 100.0},      {"V", 100.0},   {"rho", 1000.0}, {"Cp", 0.239}, {"mdelH", 5e4},
                {"EoverR", 8750.0}, {"k0", 7.2e10}, {"UA", 5e4},     {"Tf", 350.0}, {"Caf", 1.0}};
    const auto& p = s.params;
    const double q = param(p, "q"), V = param(p, "V"), rho = param(p, "rho"), Cp = param(p, "Cp"),
                 mdelH = param(p, "mdelH"), EoR = param(p, "EoverR"), k0 = param(p, "k0"), UA = param(p, "UA"),
                 Tf = param(p, "Tf"), Caf = param(p, "Caf");
    s.rhs = [=](const Vector& x, const Vector& u, double) {
        const double ca = x(0), temp = x(1);
        const double rate = k0 * std::exp(-EoR / temp) * ca;
        Vector d(2);
        d(0) = q / V * (Caf - ca) - rate;
        d(1) = q / V * (Tf - temp) + mdelH / (rho * Cp) * rate + UA / (V * rho * Cp) * (u(0) - temp);
        return d;
    };
    s.observe = [=](const Vector& x) {
        Vector y(2);
        y << Caf - x(0), x(1);
        return y;
    };
    // steady state at Tc = 300 K
    s.x0_default = vec({0.877252946080967, 324.475443431599});
    s.delta_default = 0.1;
    s.n_samples_default = 12000;
    s.input_policy = steps(vec({297.0}), vec({303.0}), 40);
    s.state_names = {"Ca", "T"};
    s.input_names = {"Tc"};
    s.output_names = {"Cb", "T"};
    return s;
}

// Frictionless double pendulum with point masses; states theta1, theta2, omega1, omega2.
SystemSpec double_pendulum() {
    SystemSpec s;
    s.name = "double_pendulum";
    s.summary = "planar double pendulum, point masses on massless rods, frictionless";
    s.n_x = 4;
    s.n_u = 0;
    s.n_y = 4;
    s.params = {{"m1", 1.0}, {"m2", 1.0}, {"l1", 1.0}, {"l2", 1.0}, {"g", 9.81}};
    const double m1 = 1.0, m2 = 1.0, l1 = 1.0, l2 = 1.0, g = 9.81;
    s.rhs = [=](const Vector& x, const Vector&, double) {
        const double th1 = x(0), th2 = x(1), w1 = x(2), w2 = x(3);
        const double dl = th2 - th1;
        const double c = std::cos(dl), sn = std::sin(dl);
        const double den1 = (m1 + m2) * l1 - m2 * l1 * c * c;
        const double den2 = (l2 / l1) * den1;
        Vector d(4);
        d(0) = w1;
        d(1) = w2;
        d(2) = (m2 * l1 * w1 * w1 * sn * c + m2 * g * std::sin(th2) * c + m2 * l2 * w2 * w2 * sn -
                (m1 + m2) * g * std::sin(th1)) /
               den1;
        d(3) = (-m2 * l2 * w2 * w2 * sn * c +
                (m1 + m2) * (g * std::sin(th1) * c - l1 * w1 * w1 * sn - g * std::sin(th2))) /
               den2;
        return d;
    };
    s.observe = [](const Vector& x) { return x; };
    s.x0_default = vec({2.0, 0.5, 0.0, 0.0});
    s.delta_default = 0.01;
    s.n_samples_default = 2000;
    s.state_names = {"theta1", "theta2", "omega1", "omega2"};
    s.output_names = s.state_names;
    return s;
}

// Planar vehicle with four independently slipping wheels and front steering.
// States: longitudinal velocity vx, lateral velocity vy, yaw rate r (body frame).
// Inputs: longitudinal slip ratio of each tire (fl, fr, rl, rr) and the front steering angle.
SystemSpec vehicle() {
    SystemSpec s;
    s.name = "vehicle";
    s.summary = "planar four-wheel vehicle, linear longitudinal and saturating lateral tire forces";
    s.n_x = 3;
    s.n_u = 5;
    s.n_y = 3;
    s.params = {{"m", 1500.0},       {"Iz", 2500.0}, {"a", 1.2},       {"b", 1.4},          {"track", 1.6},
                {"Cx", 5e4},         {"Calpha", 8e4}, {"mu", 0.9},      {"c_air", 1.2},       {"c_roll", 0.015},
                {"g", 9.81},         {"vx_min", 1.0}};
    const auto& p = s.params;
    const double m = param(p, "m"), Iz = param(p, "Iz"), a = param(p, "a"), b = param(p, "b"),
                 w = param(p, "track"), Cx = param(p, "Cx"), Ca = param(p, "Calpha"), mu = param(p, "mu"),
                 c_air = param(p, "c_air"), c_roll = param(p, "c_roll"), g = param(p, "g"),
                 vx_min = param(p, "vx_min");
    s.rhs = [=](const Vector& x, const Vector& u, double) {
        const double vx = x(0), vy = x(1), r = x(2);
        const double delta = u(4);
        const double vxs = std::max(vx, vx_min);
        const double fz = m * g / 4.0;
        const double fmax = mu * fz;
        auto lateral = [&](double alpha) { return fmax * std::tanh(Ca * alpha / fmax); };
        const double alpha_f = delta - std::atan2(vy + a * r, vxs);
        const double alpha_r = -std::atan2(vy - b * r, vxs);
        const double fy_f = lateral(alpha_f);  // per front tire
        const double fy_r = lateral(alpha_r);  // per rear tire
        const double fx_fl = Cx * u(0), fx_fr = Cx * u(1), fx_rl = Cx * u(2), fx_rr = Cx * u(3);
        const double cd = std::cos(delta), sd = std::sin(delta);
        const double resist = c_air * vx * std::abs(vx) + c_roll * m * g * std::tanh(vx);
        const double fx = (fx_fl + fx_fr) * cd - 2.0 * fy_f * sd + fx_rl + fx_rr - resist;
        const double fy = (fx_fl + fx_fr) * sd + 2.0 * fy_f * cd + 2.0 * fy_r;
        const double mz = a * ((fx_fl + fx_fr) * sd + 2.0 * fy_f * cd) - b * 2.0 * fy_r +
                          0.5 * w * ((fx_fr - fx_fl) * cd + (fx_rr - fx_rl));
        Vector d(3);
        d(0) = fx / m + vy * r;
        d(1) = fy / m - vx * r;
        d(2) = mz / Iz;
        return d;
    };
    s.observe = [](const Vector& x) {
        Vector y(3);
        y << x(2), x(0), x(1);  // yaw rate, longitudinal, lateral velocity
        return y;
    };
    s.x0_default = vec({20.0, 0.0, 0.0});
    s.delta_default = 0.05;
    s.n_samples_default = 2501;
    s.input_policy = steps(vec({-0.005, -0.005, -0.005, -0.005, -0.05}), vec({0.015, 0.015, 0.015, 0.015, 0.05}), 40);
    s.state_names = {"vx", "vy", "r"};
    s.input_names = {"slip_fl", "slip_fr", "slip_rl", "slip_rr", "steer"};
    s.output_names = {"yaw_rate", "vx", "vy"};
    return s;
}

// Two cascaded tanks fed by a pump into the upper tank (cm, s). Output: lower tank level.
SystemSpec tank() {
    SystemSpec s;
    s.name = "tank";
    s.summary = "cascaded two-tank process, pump voltage in, lower level out (SISO)";
    s.n_x = 2;
    s.n_u = 1;
    s.n_y = 1;
    s.params = {{"A1", 15.5}, {"A2", 15.5}, {"a1", 0.178}, {"a2", 0.178}, {"kp", 3.3}, {"g", 981.0}};
    const auto& p = s.params;
    const double A1 = param(p, "A1"), A2 = param(p, "A2"), a1 = param(p, "a1"), a2 = param(p, "a2"),
                 kp = param(p, "kp"), g = param(p, "g");
    s.rhs = [=](const Vector& x, const Vector& u, double) {
        const double q1 = a1 * std::sqrt(2.0 * g * std::max(x(0), 0.0));
        const double q2 = a2 * std::sqrt(2.0 * g * std::max(x(1), 0.0));
        Vector d(2);
        d(0) = (kp * u(0) - q1) / A1;
        d(1) = (q1 - q2) / A2;
        return d;
    };
    s.observe = [](const Vector& x) {
        Vector y(1);
        y(0) = x(1);
        return y;
    };
    s.project = [](Vector& x) { x = x.cwiseMax(0.0); };
    s.x0_default = vec({2.8, 2.8});
    s.delta_default = 0.25;
    s.n_samples_default = 3000;
    s.input_policy = steps(vec({1.0}), vec({8.0}), 80);
    s.state_names = {"h1", "h2"};
    s.input_names = {"pump_voltage"};
    s.output_names = {"h2"};
    return s;
}

// Two tanks; a pump feeds both, a valve splits the flow between them, tank 1 drains into tank 2.
SystemSpec two_tank() {
    SystemSpec s;
    s.name = "two_tank";
    s.summary = "two coupled tanks, pump speed and valve opening in, both levels out";
    s.n_x = 2;
    s.n_u = 2;
    s.n_y = 2;
    s.params = {{"c1", 0.08}, {"c2", 0.04}};
    const double c1 = 0.08, c2 = 0.04;
    s.rhs = [=](const Vector& x, const Vector& u, double) {
        const double pump = u(0), valve = u(1);
        const double out1 = c2 * std::sqrt(std::max(x(0), 0.0));
        const double out2 = c2 * std::sqrt(std::max(x(1), 0.0));
        Vector d(2);
        d(0) = c1 * (1.0 - valve) * pump - out1;
        d(1) = c1 * valve * pump + out1 - out2;
        return d;
    };
    s.observe = [](const Vector& x) { return x; };
    s.project = [](Vector& x) { x = x.cwiseMax(0.0); };
    s.x0_default = vec({0.5, 1.0});
    s.delta_default = 1.0;
    s.n_samples_default = 12000;
    s.input_policy = steps(vec({0.1, 0.0}), vec({0.6, 0.6}), 100);
    s.state_names = {"h1", "h2"};
    s.input_names = {"pump", "valve"};
    s.output_names = {"h1", "h2"};
    return s;
}

// Ideal pendulum; outputs angle, angular velocity and angular acceleration.
SystemSpec pendulum() {
    SystemSpec s;
    s.name = "pendulum";
    s.summary = "ideal frictionless pendulum";
    s.n_x = 2;
    s.n_u = 0;
    s.n_y = 3;
    s.params = {{"g", 9.81}, {"L", 1.0}};
    const double g = 9.81, L = 1.0;
    s.rhs = [=](const Vector& x, const Vector&, double) {
        Vector d(2);
        d << x(1), -g / L * std::sin(x(0));
        return d;
    };
    s.observe = [=](const Vector& x) {
        Vector y(3);
        y << x(0), x(1), -g / L * std::sin(x(0));
        return y;
    };
    s.x0_default = vec({1.0, 0.0});
    s.delta_default = 0.05;
    s.n_samples_default = 493;
    s.state_names = {"theta", "omega"};
    s.output_names = {"theta", "omega", "alpha"};
    return s;
}

// Spring-mass oscillator with light viscous damping; outputs position, velocity, acceleration.
SystemSpec linear_oscillator() {
    SystemSpec s;
    s.name = "linear_oscillator";
    s.summary = "spring-mass oscillator with light viscous damping";
    s.n_x = 2;
    s.n_u = 0;
    s.n_y = 3;
    s.params = {{"m", 1.0}, {"k", 1.0}, {"c", 0.02}};
    const double m = 1.0, k = 1.0, c = 0.02;
    s.rhs = [=](const Vector& x, const Vector&, double) {
        Vector d(2);
        d << x(1), (-k * x(0) - c * x(1)) / m;
        return d;
    };
    s.observe = [=](const Vector& x) {
        Vector y(3);
        y << x(0), x(1), (-k * x(0) - c * x(1)) / m;
        return y;
    };
    s.x0_default = vec({1.0, 0.0});
    s.delta_default = 0.1;
    s.n_samples_default = 870;
    s.state_names = {"position", "velocity"};
    s.output_names = {"position", "velocity", "acceleration"};
    return s;
}

}  // namespace

std::vector<std::string> builtin_names() {
    return {"cstr", "double_pendulum", "vehicle", "tank", "two_tank", "pendulum", "linear_oscillator"};
}

SystemSpec builtin(const std::string& name) {
    static const std::map<std::string, SystemSpec (*)()> table{
        {"cstr", &cstr},        {"double_pendulum", &double_pendulum}, {"vehicle", &vehicle},
        {"tank", &tank},        {"two_tank", &two_tank},               {"pendulum", &pendulum},
        {"linear_oscillator", &linear_oscillator}};
    auto it = table.find(name);
    if (it == table.end()) throw LookupError("unknown system '" + name + "'");
    return it->second();
}

Vector rhs_eval(const SystemSpec& spec, const Vector& x, const Vector& u, double t) {
    if (x.size() != spec.n_x || u.size() != spec.n_u)
        throw ShapeError(spec.name + ": state/input dimension mismatch");
    return spec.rhs(x, u, t);
}

Vector observe(const SystemSpec& spec, const Vector& x) {
    if (x.size() != spec.n_x) throw ShapeError(spec.name + ": state dimension mismatch");
    return spec.observe(x);
}

Matrix excitation(const InputPolicy& policy, Index n_u, Index n_samples, std::uint64_t seed) {
    Matrix u = Matrix::Zero(n_samples, n_u);
    if (n_u == 0) return u;
    if (policy.kind == InputPolicy::Kind::none) return u;
    if (policy.hold_steps < 1) throw ParameterError("input policy: hold_steps must be >= 1");
    if (policy.low.size() != n_u || policy.high.size() != n_u)
        throw ShapeError("input policy: bounds must have one entry per input");
    if ((policy.low.array() > policy.high.array()).any()) throw ParameterError("input policy: low > high");
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    Vector level(n_u);
    for (Index k = 0; k < n_samples; ++k) {
        if (k % policy.hold_steps == 0)
            for (Index j = 0; j < n_u; ++j) level(j) = policy.low(j) + (policy.high(j) - policy.low(j)) * unit(rng);
        u.row(k) = level.transpose();
    }
    return u;
}

Trajectory generate(const SystemSpec& spec, Index n_samples, double delta, const InputPolicy& policy,
                    std::uint64_t seed, const GenerateOptions& opts) {
    if (n_samples < 2) throw TooShortError("generate: n_samples must be >= 2");
    if (!(delta > 0)) throw ParameterError("generate: delta must be positive");
    if (opts.substeps < 10) throw ParameterError("generate: at least 10 substeps per interval");
    const Matrix u = excitation(policy, spec.n_u, n_samples, seed);
    Vector x = opts.x0 ? *opts.x0 : spec.x0_default;
    if (x.size() != spec.n_x) throw ShapeError("generate: initial state dimension mismatch");
    Matrix y(n_samples, spec.n_y);
    const double h = delta / static_cast<double>(opts.substeps);
    for (Index k = 0; k < n_samples; ++k) {
        y.row(k) = spec.observe(x).transpose();
        if (k + 1 == n_samples) break;
        const Vector uk = u.row(k).transpose();
        const auto field = [&](const Vector& s, double t) -> Vector { return spec.rhs(s, uk, t); };
        try {
            for (Index i = 0; i < opts.substeps; ++i) {
                x = ode::step_rk4(field, x, static_cast<double>(k) * delta + static_cast<double>(i) * h, h);
                if (spec.project) spec.project(x);
            }
        } catch (const DivergenceError&) {
            throw DivergenceError(spec.name + ": generation diverged at step " + std::to_string(k),
                                  static_cast<long>(k));
        }
        if (!x.allFinite())
            throw DivergenceError(spec.name + ": generation diverged at step " + std::to_string(k),
                                  static_cast<long>(k));
    }
    return make_trajectory(delta, u, y);
}

Trajectory generate(const SystemSpec& spec, std::uint64_t seed) {
    return generate(spec, spec.n_samples_default, spec.delta_default, spec.input_policy, seed);
}

std::string describe(const SystemSpec& spec) {
    std::ostringstream os;
    auto join = [](const std::vector<std::string>& v) {
        std::string s;
        for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + v[i];
        return s.empty() ? std::string("(none)") : s;
    };
    os << spec.name << ": " << spec.summary << "\n";
    os << "  states:  " << join(spec.state_names) << "\n";
    os << "  inputs:  " << join(spec.input_names) << "\n";
    os << "  outputs: " << join(spec.output_names) << "\n";
    os << "  default samples " << spec.n_samples_default << ", delta " << spec.delta_default << "\n";
    os << "  parameters:\n";
    char buf[96];
    for (const auto& [k, v] : spec.params) {
        std::snprintf(buf, sizeof buf, "    %-10s %.6g\n", k.c_str(), v);
        os << buf;
    }
    os << "  initial state:";
    for (Index i = 0; i < spec.x0_default.size(); ++i) os << " " << spec.x0_default(i);
    os << "\n";
    if (spec.input_policy.kind == InputPolicy::Kind::prbs_steps) {
        os << "  excitation: uniform random steps held " << spec.input_policy.hold_steps << " samples, range";
        for (Index i = 0; i < spec.n_u; ++i)
            os << " [" << spec.input_policy.low(i) << ", " << spec.input_policy.high(i) << "]";
        os << "\n";
    }
    return os.str();
}

}  // namespace sysid
