#pragma once

// Ground-truth ODE emulators used to produce benchmark trajectories.

#include "sysid/data.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace sysid {

/// Excitation signal: piecewise-constant uniform random levels held for `hold_steps` samples.
struct InputPolicy {
    enum class Kind { none, prbs_steps };
    Kind kind = Kind::none;
    Index hold_steps = 1;
    Vector low, high;  // per channel
    std::uint64_t seed = 0;
};

struct SystemSpec {
    std::string name;
    std::string summary;
    Index n_x = 0, n_u = 0, n_y = 0;
    std::vector<std::pair<std::string, double>> params;
    std::vector<std::string> state_names, input_names, output_names;
    std::function<Vector(const Vector& x, const Vector& u, double t)> rhs;
    std::function<Vector(const Vector& x)> observe;
    std::function<void(Vector& x)> project;  // maps a state back into the physical domain; may be empty
    Vector x0_default;
    double delta_default = 0.0;
    Index n_samples_default = 0;
    InputPolicy input_policy;

    [[nodiscard]] bool autonomous() const { return n_u == 0; }
};

std::vector<std::string> builtin_names();

/// One of: cstr, double_pendulum, vehicle, tank, two_tank, pendulum, linear_oscillator.
SystemSpec builtin(const std::string& name);

Vector rhs_eval(const SystemSpec& spec, const Vector& x, const Vector& u, double t);
Vector observe(const SystemSpec& spec, const Vector& x);

/// Input sequence (n_samples x n_u) drawn from `policy` with the given seed.
Matrix excitation(const InputPolicy& policy, Index n_u, Index n_samples, std::uint64_t seed);

struct GenerateOptions {
    Index substeps = 20;  // RK4 steps per sampling interval, at least 10
    const Vector* x0 = nullptr;  // overrides spec.x0_default
};

/// Samples y = observe(x) on the grid k*delta; inputs are held constant over each interval.
Trajectory generate(const SystemSpec& spec, Index n_samples, double delta, const InputPolicy& policy,
                    std::uint64_t seed, const GenerateOptions& opts = {});

/// Default sample count, sampling time and excitation of the system.
Trajectory generate(const SystemSpec& spec, std::uint64_t seed);

/// Human-readable parameter table.
std::string describe(const SystemSpec& spec);

}  // namespace sysid
