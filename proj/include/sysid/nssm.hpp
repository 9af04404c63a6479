#pragma once

// Block neural state-space model:
//
//   x_0 = f_o(y_{1-N_p}; ...; y_0),   x_{t+1} = f_x(x_t) + f_u(u_t),   y_{t+1} = f_y x_{t+1}
//
// f_x and f_u share one block kind (linear map or MLP); f_y is linear. With the
// soft-SVD linear map every weight matrix of f_x, f_u and f_y is stored as
// U diag(sigma) V with sigma squashed into [sigma_min, sigma_max].

#include "sysid/data.hpp"
#include "sysid/neural.hpp"

#include "json.hpp"

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

namespace sysid {

enum class LinearMapKind { plain, soft_svd };
enum class BlockKind { linear, mlp };

const char* to_string(LinearMapKind k);
const char* to_string(BlockKind k);
LinearMapKind linear_map_from_string(const std::string& s);
BlockKind block_kind_from_string(const std::string& s);

struct SoftSvdFactors {
    Matrix U;             // rows x r
    Vector sigma_params;  // r unconstrained reals
    Matrix V;             // r x cols
    double sigma_min = 0.1;
    double sigma_max = 1.0;

    [[nodiscard]] Vector sigma() const;
    [[nodiscard]] Matrix reconstruct() const;
};

SoftSvdFactors make_soft_svd(Index rows, Index cols, std::uint64_t seed, double sigma_min = 0.1, double sigma_max = 1.0);

/// ||U^T U - I||_F^2 + ||V V^T - I||_F^2
double soft_svd_penalty(const SoftSvdFactors& f);

/// A dense net whose weight matrices may be soft-SVD factorized (one factor set per layer).
struct Block {
    DenseNet<double> net;  // weights hold the reconstructed maps when factorized
    std::vector<SoftSvdFactors> factors;

    [[nodiscard]] bool factorized() const { return !factors.empty(); }
    [[nodiscard]] Index parameter_count() const;
};

struct NssmConfig {
    Index n_y = 1;
    Index n_u = 0;
    Index latent_multiplier = 10;  // N_x; n_x = N_x * n_y
    Index n_p = 1;                 // history length fed to f_o
    LinearMapKind linear_map = LinearMapKind::plain;
    BlockKind block = BlockKind::mlp;
    Index hidden = 0;              // MLP hidden width; 0: n_x
    Activation activation = Activation::tanh;
    double sigma_min = 0.1;
    double sigma_max = 1.0;
    std::uint64_t seed = 0;
};

struct NssmModel {
    Index n_y = 0, n_u = 0, n_x = 0, latent_multiplier = 1, n_p = 1;
    LinearMapKind linear_map = LinearMapKind::plain;
    BlockKind block = BlockKind::mlp;
    DenseNet<double> f_o;  // N_p*n_y -> n_x
    Block f_x;             // n_x -> n_x
    Block f_u;             // n_u -> n_x; no layers for autonomous models
    Block f_y;             // n_x -> n_y, single bias-free layer

    [[nodiscard]] bool has_input() const { return n_u > 0; }
    [[nodiscard]] Index parameter_count() const {
        return f_o.parameter_count() + f_x.parameter_count() + (has_input() ? f_u.parameter_count() : 0) +
               f_y.parameter_count();
    }
};

NssmModel make_nssm_model(const NssmConfig& cfg);

/// Linear model with plain maps A, B, C and a default tanh encoder.
NssmModel make_linear_nssm(const Matrix& A, const Matrix& B, const Matrix& C, Index n_p = 1);

/// Flat parameters: f_o, f_x, f_u, f_y. A factorized layer contributes U (row-major),
/// sigma_params, V (row-major), then its bias.
Vector nssm_parameters(const NssmModel& m);
void set_nssm_parameters(NssmModel& m, const Vector& p);

/// Sum of the soft-SVD penalties of every factorized layer (0 for plain maps).
double nssm_svd_penalty(const NssmModel& m);

/// x_0 from an N_p x n_y history (oldest row first).
Vector encode_history(const NssmModel& m, const Matrix& past);

/// Column-batched x' = f_x(x) + f_u(u); u is ignored for autonomous models.
Matrix step(const NssmModel& m, const Matrix& x, const Matrix& u);

Matrix decode(const NssmModel& m, const Matrix& x);

/// Open loop from a given state: row k of the result is f_y x_{k+1}, x_{k+1} = step(x_k, u_k).
/// Throws DivergenceError (index k+1) when the state becomes non-finite or exceeds 1e12.
Matrix rollout_from(const NssmModel& m, const Vector& x0, const Matrix& u_seq);

/// Open loop from an N_p x n_y history; u_seq row 0 is the input at the last history sample.
Matrix rollout(const NssmModel& m, const Matrix& past, const Matrix& u_seq);

struct NssmLossConfig {
    double q_dx = 0.0;
    Vector y_min, y_max;  // empty: no output bounds
};

struct NssmLossParts {
    double reference = 0.0;
    double smoothing = 0.0;  // before the Q_dx weight
    double svd = 0.0;
    double bounds = 0.0;
    [[nodiscard]] double total(double q_dx) const { return reference + q_dx * smoothing + svd + bounds; }
};

struct NssmLossGrad {
    double loss = 0.0;
    NssmLossParts parts;
    Vector grad;
};

/// N-step loss over a window batch (N_p past rows, N_steps future rows per column):
/// reference MSE + Q_dx * mean (x_{t+1} - x_t)^2 + soft-SVD penalty + output-bound penalty.
NssmLossGrad nssm_loss_grad(const NssmModel& m, const WindowBatch& b, const NssmLossConfig& cfg, bool with_grad = true);

double nssm_loss(const NssmModel& m, const WindowBatch& b, const NssmLossConfig& cfg);

struct NssmTrainConfig {
    double lr = 0.003;
    double weight_decay = 0.01;
    Index epochs = 5000;
    Index n_steps = 1;      // N_p = N_steps
    double q_dx = 0.0;
    bool output_bounds = false;
    Index stride = 1;
    Index batch_size = 0;   // 0: full batch
    Index eval_every = 10;
    std::uint64_t seed = 0;
};

struct NssmEpochRecord {
    Index epoch = 0;
    double train_loss = 0.0;
    double dev_mse = std::numeric_limits<double>::quiet_NaN();
};

struct NssmTrainResult {
    std::vector<NssmEpochRecord> history;
    Index best_epoch = 0;
    double best_dev_mse = std::numeric_limits<double>::infinity();
    Vector y_min, y_max;  // output bounds used (empty when off)
};

/// Open-loop prediction of every row of `target`; the history is the last N_p rows of `history`.
Matrix nssm_predict(const NssmModel& m, const Trajectory& history, const Trajectory& target);

/// MSE of the open-loop prediction of every row of `target`, with the model's
/// history taken from the last N_p rows of `history`.
double nssm_open_loop_mse(const NssmModel& m, const Trajectory& history, const Trajectory& target);

/// AdamW on the N-step loss over split.train; dev open loop starts from the train tail.
/// `m` is replaced by the dev-best parameters.
NssmTrainResult train_nssm(NssmModel& m, const DatasetSplit& split, const NssmTrainConfig& cfg);

nlohmann::json to_json(const NssmModel& m);
NssmModel nssm_from_json(const nlohmann::json& j);

}  // namespace sysid
