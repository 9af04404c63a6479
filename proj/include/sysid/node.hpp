#pragma once

// Data-controlled neural ODE for system identification:
//
//   x(t0) = g_x(y0, u0),   dx/dt = f(x(t), x(t0), u(t); theta),   y(t) = g_y x(t)
//
// with u held constant between samples, g_x and f one-hidden-layer MLPs and
// g_y a bias-free linear map.

#include "sysid/data.hpp"
#include "sysid/neural.hpp"
#include "sysid/odeint.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

namespace sysid {

/// Where u(t) enters the model: the field input (and the encoder), or only the encoder at t0.
enum class UInjection { field, encoder_only };

const char* to_string(UInjection u);
UInjection u_injection_from_string(const std::string& s);

struct NodeConfig {
    Index n_y = 1;
    Index n_u = 0;
    Index latent_multiplier = 1;   // n_x = latent_multiplier * n_y
    Index encoder_hidden = 32;     // 0: affine encoder
    Index field_hidden = 64;
    Activation activation = Activation::tanh;
    UInjection u_injection = UInjection::field;
    bool time_feature = false;     // append t to the field input
    bool data_control = true;      // feed x(t0) to the field
    ode::SolverConfig solver{};
    std::uint64_t seed = 0;
};

struct NodeModel {
    Index n_y = 0, n_u = 0, n_x = 0, latent_multiplier = 1;
    UInjection u_injection = UInjection::field;
    bool time_feature = false;
    bool data_control = true;
    DenseNet<double> g_x;    // (n_y + n_u) -> n_x
    DenseNet<double> field;  // (n_x [+ n_x] [+ n_u] [+ 1]) -> n_x
    Matrix g_y;              // n_y x n_x
    ode::SolverConfig solver;

    [[nodiscard]] Index field_input_size() const {
        return (data_control ? 2 : 1) * n_x + (u_injection == UInjection::field ? n_u : 0) + (time_feature ? 1 : 0);
    }
    [[nodiscard]] Index parameter_count() const {
        return g_x.parameter_count() + field.parameter_count() + g_y.size();
    }
};

NodeModel make_node_model(const NodeConfig& cfg);

/// Flat parameters: g_x, then the field, then g_y row-major.
Vector node_parameters(const NodeModel& m);
void set_node_parameters(NodeModel& m, const Vector& p);

/// x0 = g_x([y0; u0]); column-batched.
Matrix encode(const NodeModel& m, const Matrix& y0, const Matrix& u0);

/// Field value at latent x with data control x0 and input u (column-batched).
Matrix field_eval(const NodeModel& m, const Matrix& x, const Matrix& x0, const Matrix& u, double t);

/// Open-loop forecast from a single initial observation y0 (row 0 of the horizon).
/// u_traj row k is held over [t_k, t_{k+1}); the result has u_traj.rows() rows with
/// y_hat[0] = g_y x0. Autonomous models take an N x 0 input matrix.
Matrix forecast(const NodeModel& m, const Vector& y0, const Matrix& u_traj, double delta,
                ode::IntervalStats* stats = nullptr);

enum class GradientMethod { adjoint, backprop_rk4 };

const char* to_string(GradientMethod g);
GradientMethod gradient_method_from_string(const std::string& s);

/// One-step (or n-step) windows for the NODE: the state is encoded from the last
/// past observation and integrated over one interval per future target.
struct NodeBatch {
    Matrix y0;                 // n_y x B
    std::vector<Matrix> u;     // per interval, n_u x B (interval 0 starts at y0)
    std::vector<Matrix> y;     // per target, n_y x B
    [[nodiscard]] Index batch() const { return y0.cols(); }
};

NodeBatch node_batch(const WindowBatch& wb);

struct LossGrad {
    double loss = 0.0;
    Vector grad;
    ode::IntervalStats stats;
};

/// Mean squared error over targets and its gradient with respect to node_parameters().
LossGrad node_loss_grad(const NodeModel& m, const NodeBatch& b, double delta, GradientMethod method,
                        Index rk4_substeps = 10);

/// Loss only, integrated with the model's solver.
double node_loss(const NodeModel& m, const NodeBatch& b, double delta);

struct NodeTrainConfig {
    double lr = 0.01;
    Index epochs = 100;
    Index n_p = 1;
    Index n_steps = 1;
    Index stride = 1;
    Index batch_size = 0;   // 0: full batch
    Index eval_every = 10;  // dev open-loop evaluation period (also at the first and last epoch)
    GradientMethod gradient = GradientMethod::adjoint;
    std::uint64_t seed = 0;
};

struct EpochRecord {
    Index epoch = 0;
    double train_loss = 0.0;
    double dev_mse = std::numeric_limits<double>::quiet_NaN();  // NaN when not evaluated
};

struct TrainResult {
    std::vector<EpochRecord> history;
    Index best_epoch = 0;
    double best_dev_mse = std::numeric_limits<double>::infinity();
};

/// Open-loop MSE of the forecast from row 0 of `tr` against all its rows.
double node_open_loop_mse(const NodeModel& m, const Trajectory& tr);

/// Forecast of every row of `target`, encoded from the last sample of `history`.
Matrix node_predict(const NodeModel& m, const Trajectory& history, const Trajectory& target);

/// MSE of node_predict against target.outputs.
double node_open_loop_mse(const NodeModel& m, const Trajectory& history, const Trajectory& target);

/// Adam on the window loss of split.train; dev open loop starts from the last train sample.
/// `m` is replaced by the dev-best parameters.
TrainResult train_node(NodeModel& m, const DatasetSplit& split, const NodeTrainConfig& cfg);

nlohmann::json to_json(const NodeModel& m);
NodeModel node_from_json(const nlohmann::json& j);

nlohmann::json solver_to_json(const ode::SolverConfig& s);
ode::SolverConfig solver_from_json(const nlohmann::json& j);

}  // namespace sysid
