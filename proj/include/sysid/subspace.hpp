#pragma once

// Linear subspace identification (N4SID, MOESP, CVA) of innovation-form models
//
//   x_{t+1} = A x_t + B u_t + K e_t,   y_t = C x_t + e_t
//
// and their open-loop / one-step-predictor simulation.

#include "sysid/data.hpp"

#include "json.hpp"

#include <string>
#include <vector>

namespace sysid {

enum class SubspaceMethod { n4sid, moesp, cva };

const char* to_string(SubspaceMethod m);
SubspaceMethod subspace_method_from_string(const std::string& s);

struct SubspaceConfig {
    SubspaceMethod method = SubspaceMethod::n4sid;
    Index n_x = 10;
    Index horizon = 10;  // block rows of the future (and past) Hankel blocks
};

struct Lssm {
    Matrix A, B, C, K;
    Vector singular_values;  // of the weighted oblique projection
    std::vector<std::string> warnings;

    [[nodiscard]] Index n_x() const { return A.rows(); }
    [[nodiscard]] Index n_u() const { return B.cols(); }
    [[nodiscard]] Index n_y() const { return C.rows(); }
    [[nodiscard]] double spectral_radius() const;
};

/// Column j stacks series rows [j, j+rows); result is (rows*d) x (N-rows+1).
Matrix block_hankel(const Matrix& series, Index rows);

Lssm identify(const Trajectory& data, const SubspaceConfig& cfg);

enum class SimulationMode { open_loop, innovation };

/// Output sequence (N x n_y) for inputs u (N x n_u). Innovation mode corrects the
/// state with measurements y_meas: x_{t+1} = A x_t + B u_t + K (y_t - C x_t).
Matrix lssm_simulate(const Lssm& model, const Vector& x0, const Matrix& u, SimulationMode mode = SimulationMode::open_loop,
                     const Matrix* y_meas = nullptr);

/// Least-squares initial state from a window of at least n_x samples.
Vector estimate_x0(const Lssm& model, const Matrix& y, const Matrix& u, std::vector<std::string>* warnings = nullptr);

/// Propagates a state through `u` rows without measurement correction.
Vector propagate(const Lssm& model, Vector x, const Matrix& u);

/// C A^k B for k = 0..count-1.
std::vector<Matrix> markov_parameters(const Lssm& model, Index count);

nlohmann::json to_json(const Lssm& m);
Lssm lssm_from_json(const nlohmann::json& j);

}  // namespace sysid
