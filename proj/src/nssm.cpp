#include "sysid/nssm.hpp"

#include "sysid/error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace sysid {

namespace {

constexpr double kDivergenceNorm = 1e12;

double sigmoid(double p) { return 1.0 / (1.0 + std::exp(-p)); }

void write_row_major(Vector& out, Index& pos, const Matrix& m) {
    for (Index i = 0; i < m.rows(); ++i) {
        out.segment(pos, m.cols()) = m.row(i).transpose();
        pos += m.cols();
    }
}

void read_row_major(const Vector& in, Index& pos, Matrix& m) {
    for (Index i = 0; i < m.rows(); ++i) {
        m.row(i) = in.segment(pos, m.cols()).transpose();
        pos += m.cols();
    }
}

Matrix orthonormal_columns(Index rows, Index cols, std::mt19937_64& rng) {
    std::normal_distribution<double> n01(0.0, 1.0);
    Matrix g(rows, cols);
    for (Index j = 0; j < cols; ++j)
        for (Index i = 0; i < rows; ++i) g(i, j) = n01(rng);
    Eigen::HouseholderQR<Matrix> qr(g);
    return qr.householderQ() * Matrix::Identity(rows, cols);
}

Block make_block(std::vector<Index> sizes, Activation act, bool bias, LinearMapKind kind, double smin, double smax,
                 std::uint64_t seed) {
    Block b;
    b.net = make_dense_net<double>(std::move(sizes), act, seed, bias);
    if (kind == LinearMapKind::soft_svd) {
        for (std::size_t k = 0; k < b.net.layers(); ++k) {
            const auto& w = b.net.weights[k];
            b.factors.push_back(make_soft_svd(w.rows(), w.cols(), seed + 1000 + k, smin, smax));
            b.net.weights[k] = b.factors.back().reconstruct();
        }
    }
    return b;
}

Vector block_parameters(const Block& b) {
    if (!b.factorized()) return flatten(b.net);
    Vector out(b.parameter_count());
    Index pos = 0;
    for (std::size_t k = 0; k < b.net.layers(); ++k) {
        const auto& f = b.factors[k];
        write_row_major(out, pos, f.U);
        out.segment(pos, f.sigma_params.size()) = f.sigma_params;
        pos += f.sigma_params.size();
        write_row_major(out, pos, f.V);
        if (b.net.use_bias) {
            out.segment(pos, b.net.biases[k].size()) = b.net.biases[k];
            pos += b.net.biases[k].size();
        }
    }
    return out;
}

Index set_block_parameters(Block& b, const Vector& p, Index offset) {
    if (!b.factorized()) return unflatten(b.net, p, offset);
    if (p.size() - offset < b.parameter_count()) throw ShapeError("nssm: parameter vector too short");
    Index pos = offset;
    for (std::size_t k = 0; k < b.net.layers(); ++k) {
        auto& f = b.factors[k];
        read_row_major(p, pos, f.U);
        f.sigma_params = p.segment(pos, f.sigma_params.size());
        pos += f.sigma_params.size();
        read_row_major(p, pos, f.V);
        if (b.net.use_bias) {
            b.net.biases[k] = p.segment(pos, b.net.biases[k].size());
            pos += b.net.biases[k].size();
        }
        b.net.weights[k] = f.reconstruct();
    }
    return pos - offset;
}

/// Flat gradient of a block from the gradient of its reconstructed net, plus
/// the soft-SVD penalty gradient.
Vector block_gradient(const Block& b, const Gradients<double>& g) {
    if (!b.factorized()) return flatten(b.net, g);
    Vector out(b.parameter_count());
    Index pos = 0;
    for (std::size_t k = 0; k < b.net.layers(); ++k) {
        const auto& f = b.factors[k];
        const Matrix& gw = g.weights[k];
        const Vector s = f.sigma();
        const Index r = s.size();
        Matrix du = (gw * f.V.transpose()) * s.asDiagonal();
        Matrix dv = s.asDiagonal() * (f.U.transpose() * gw);
        const Vector ds = (f.U.transpose() * gw * f.V.transpose()).diagonal();
        Vector dp(r);
        for (Index i = 0; i < r; ++i) {
            const double q = sigmoid(f.sigma_params(i));
            dp(i) = ds(i) * (f.sigma_max - f.sigma_min) * q * (1.0 - q);
        }
        du += 4.0 * f.U * (f.U.transpose() * f.U - Matrix::Identity(r, r));
        dv += 4.0 * (f.V * f.V.transpose() - Matrix::Identity(r, r)) * f.V;
        write_row_major(out, pos, du);
        out.segment(pos, r) = dp;
        pos += r;
        write_row_major(out, pos, dv);
        if (b.net.use_bias) {
            out.segment(pos, g.biases[k].size()) = g.biases[k];
            pos += g.biases[k].size();
        }
    }
    return out;
}

double block_penalty(const Block& b) {
    double p = 0.0;
    for (const auto& f : b.factors) p += soft_svd_penalty(f);
    return p;
}

void add_into(Gradients<double>& acc, const Gradients<double>& g) {
    if (acc.weights.empty()) {
        acc = g;
        return;
    }
    for (std::size_t k = 0; k < acc.weights.size(); ++k) {
        acc.weights[k] += g.weights[k];
        acc.biases[k] += g.biases[k];
    }
}

Gradients<double> zero_gradients(const DenseNet<double>& net) {
    Gradients<double> g;
    for (std::size_t k = 0; k < net.layers(); ++k) {
        g.weights.push_back(Matrix::Zero(net.weights[k].rows(), net.weights[k].cols()));
        g.biases.push_back(Vector::Zero(net.weights[k].rows()));
    }
    return g;
}

nlohmann::json block_to_json(const Block& b) {
    nlohmann::json f = nlohmann::json::array();
    for (const auto& s : b.factors)
        f.push_back({{"U", matrix_to_json(s.U)},
                     {"sigma_params", matrix_to_json(s.sigma_params)},
                     {"V", matrix_to_json(s.V)},
                     {"sigma_min", s.sigma_min},
                     {"sigma_max", s.sigma_max}});
    return {{"net", to_json(b.net)}, {"factors", f}};
}

Block block_from_json(const nlohmann::json& j) {
    Block b;
    b.net = dense_net_from_json(j.at("net"));
    for (const auto& s : j.at("factors")) {
        SoftSvdFactors f;
        f.U = matrix_from_json(s.at("U"));
        f.sigma_params = matrix_from_json(s.at("sigma_params"));
        f.V = matrix_from_json(s.at("V"));
        f.sigma_min = s.at("sigma_min").get<double>();
        f.sigma_max = s.at("sigma_max").get<double>();
        b.factors.push_back(std::move(f));
    }
    if (b.factorized()) {
        if (b.factors.size() != b.net.layers()) throw SchemaError("nssm checkpoint: one factor set per layer required");
        for (std::size_t k = 0; k < b.net.layers(); ++k) {
            const auto& f = b.factors[k];
            if (f.U.rows() != b.net.weights[k].rows() || f.V.cols() != b.net.weights[k].cols() ||
                f.U.cols() != f.sigma_params.size() || f.V.rows() != f.sigma_params.size())
                throw SchemaError("nssm checkpoint: factor shapes do not match the layer");
            b.net.weights[k] = f.reconstruct();
        }
    }
    return b;
}

void check_divergence(const Matrix& x, Index k) {
    if (!x.allFinite() || x.cwiseAbs().maxCoeff() > kDivergenceNorm)
        throw DivergenceError("nssm: rollout diverged at step " + std::to_string(k), static_cast<long>(k));
}

}  // namespace

const char* to_string(LinearMapKind k) { return k == LinearMapKind::plain ? "plain" : "soft_svd"; }
const char* to_string(BlockKind k) { return k == BlockKind::linear ? "linear" : "mlp"; }

LinearMapKind linear_map_from_string(const std::string& s) {
    if (s == "plain" || s == "linear") return LinearMapKind::plain;
    if (s == "soft_svd") return LinearMapKind::soft_svd;
    throw ParameterError("unknown linear map kind: " + s);
}

BlockKind block_kind_from_string(const std::string& s) {
    if (s == "linear") return BlockKind::linear;
    if (s == "mlp") return BlockKind::mlp;
    throw ParameterError("unknown block kind: " + s);
}

Vector SoftSvdFactors::sigma() const {
    Vector s(sigma_params.size());
    for (Index i = 0; i < s.size(); ++i) s(i) = sigma_min + (sigma_max - sigma_min) * sigmoid(sigma_params(i));
    return s;
}

Matrix SoftSvdFactors::reconstruct() const { return U * sigma().asDiagonal() * V; }

SoftSvdFactors make_soft_svd(Index rows, Index cols, std::uint64_t seed, double sigma_min, double sigma_max) {
    if (rows < 1 || cols < 1) throw ParameterError("soft_svd: empty map");
    if (!(sigma_min >= 0.0) || !(sigma_max > sigma_min)) throw ParameterError("soft_svd: need 0 <= sigma_min < sigma_max");
    std::mt19937_64 rng(seed);
    const Index r = std::min(rows, cols);
    SoftSvdFactors f;
    f.U = orthonormal_columns(rows, r, rng);
    f.V = orthonormal_columns(cols, r, rng).transpose();
    f.sigma_params = Vector::Zero(r);
    f.sigma_min = sigma_min;
    f.sigma_max = sigma_max;
    return f;
}

double soft_svd_penalty(const SoftSvdFactors& f) {
    const Index r = f.sigma_params.size();
    return (f.U.transpose() * f.U - Matrix::Identity(r, r)).squaredNorm() +
           (f.V * f.V.transpose() - Matrix::Identity(r, r)).squaredNorm();
}

Index Block::parameter_count() const {
    if (!factorized()) return net.parameter_count();
    Index n = 0;
    for (std::size_t k = 0; k < net.layers(); ++k) {
        n += factors[k].U.size() + factors[k].sigma_params.size() + factors[k].V.size();
        if (net.use_bias) n += net.biases[k].size();
    }
    return n;
}

NssmModel make_nssm_model(const NssmConfig& cfg) {
    if (cfg.n_y < 1 || cfg.n_u < 0) throw ParameterError("nssm: need n_y >= 1 and n_u >= 0");
    if (cfg.latent_multiplier < 1) throw ParameterError("nssm: latent multiplier must be >= 1");
    if (cfg.n_p < 1) throw ParameterError("nssm: history length must be >= 1");
    if (cfg.hidden < 0) throw ParameterError("nssm: negative hidden width");
    NssmModel m;
    m.n_y = cfg.n_y;
    m.n_u = cfg.n_u;
    m.latent_multiplier = cfg.latent_multiplier;
    m.n_x = cfg.latent_multiplier * cfg.n_y;
    m.n_p = cfg.n_p;
    m.linear_map = cfg.linear_map;
    m.block = cfg.block;
    const Index h = cfg.hidden > 0 ? cfg.hidden : m.n_x;
    m.f_o = make_dense_net<double>({m.n_p * m.n_y, m.n_x, m.n_x}, cfg.activation, cfg.seed);
    const bool mlp = cfg.block == BlockKind::mlp;
    const auto sizes = [&](Index in, Index out) {
        return mlp ? std::vector<Index>{in, h, out} : std::vector<Index>{in, out};
    };
    m.f_x = make_block(sizes(m.n_x, m.n_x), cfg.activation, mlp, cfg.linear_map, cfg.sigma_min, cfg.sigma_max, cfg.seed + 1);
    if (m.has_input())
        m.f_u = make_block(sizes(m.n_u, m.n_x), cfg.activation, mlp, cfg.linear_map, cfg.sigma_min, cfg.sigma_max,
                           cfg.seed + 2);
    m.f_y = make_block({m.n_x, m.n_y}, Activation::identity, false, cfg.linear_map, cfg.sigma_min, cfg.sigma_max,
                       cfg.seed + 3);
    return m;
}

NssmModel make_linear_nssm(const Matrix& A, const Matrix& B, const Matrix& C, Index n_p) {
    if (A.rows() != A.cols() || B.rows() != A.rows() || C.cols() != A.rows())
        throw ShapeError("make_linear_nssm: inconsistent A, B, C");
    NssmModel m;
    m.n_x = A.rows();
    m.n_u = B.cols();
    m.n_y = C.rows();
    m.latent_multiplier = 1;
    m.n_p = n_p;
    m.block = BlockKind::linear;
    m.f_o = make_dense_net<double>({n_p * m.n_y, m.n_x, m.n_x}, Activation::tanh, 0);
    m.f_x.net = make_dense_net<double>({m.n_x, m.n_x}, Activation::identity, 0, false);
    m.f_x.net.weights[0] = A;
    if (m.has_input()) {
        m.f_u.net = make_dense_net<double>({m.n_u, m.n_x}, Activation::identity, 0, false);
        m.f_u.net.weights[0] = B;
    }
    m.f_y.net = make_dense_net<double>({m.n_x, m.n_y}, Activation::identity, 0, false);
    m.f_y.net.weights[0] = C;
    return m;
}

Vector nssm_parameters(const NssmModel& m) {
    Vector out(m.parameter_count());
    Index pos = 0;
    const auto put = [&](const Vector& v) {
        out.segment(pos, v.size()) = v;
        pos += v.size();
    };
    put(flatten(m.f_o));
    put(block_parameters(m.f_x));
    if (m.has_input()) put(block_parameters(m.f_u));
    put(block_parameters(m.f_y));
    return out;
}

void set_nssm_parameters(NssmModel& m, const Vector& p) {
    if (p.size() != m.parameter_count()) throw ShapeError("set_nssm_parameters: wrong parameter count");
    Index pos = unflatten(m.f_o, p, 0);
    pos += set_block_parameters(m.f_x, p, pos);
    if (m.has_input()) pos += set_block_parameters(m.f_u, p, pos);
    set_block_parameters(m.f_y, p, pos);
}

double nssm_svd_penalty(const NssmModel& m) {
    return block_penalty(m.f_x) + (m.has_input() ? block_penalty(m.f_u) : 0.0) + block_penalty(m.f_y);
}

Vector encode_history(const NssmModel& m, const Matrix& past) {
    if (past.rows() != m.n_p || past.cols() != m.n_y)
        throw ShapeError("encode_history: expected " + std::to_string(m.n_p) + " x " + std::to_string(m.n_y) + " history");
    Vector flat(m.n_p * m.n_y);
    for (Index r = 0; r < m.n_p; ++r) flat.segment(r * m.n_y, m.n_y) = past.row(r).transpose();
    return forward(m.f_o, flat);
}

Matrix step(const NssmModel& m, const Matrix& x, const Matrix& u) {
    if (x.rows() != m.n_x) throw ShapeError("nssm step: state dimension mismatch");
    Matrix next = forward(m.f_x.net, x);
    if (m.has_input()) {
        if (u.rows() != m.n_u || u.cols() != x.cols()) throw ShapeError("nssm step: input shape mismatch");
        next += forward(m.f_u.net, u);
    }
    return next;
}

Matrix decode(const NssmModel& m, const Matrix& x) {
    if (x.rows() != m.n_x) throw ShapeError("nssm decode: state dimension mismatch");
    return m.f_y.net.weights[0] * x;
}

Matrix rollout_from(const NssmModel& m, const Vector& x0, const Matrix& u_seq) {
    if (x0.size() != m.n_x) throw ShapeError("rollout: state dimension mismatch");
    if (u_seq.cols() != m.n_u) throw ShapeError("rollout: input dimension mismatch");
    const Index n = u_seq.rows();
    Matrix out(n, m.n_y);
    Matrix x = x0;
    // the input map is memoryless, so it is evaluated for the whole sequence at once
    Matrix fu;
    if (m.has_input() && n > 0) fu = forward(m.f_u.net, u_seq.transpose());
    for (Index k = 0; k < n; ++k) {
        Matrix next = forward(m.f_x.net, x);
        if (m.has_input()) next += fu.col(k);
        x = std::move(next);
        check_divergence(x, k + 1);
        out.row(k) = decode(m, x).transpose();
    }
    return out;
}

Matrix rollout(const NssmModel& m, const Matrix& past, const Matrix& u_seq) {
    return rollout_from(m, encode_history(m, past), u_seq);
}

NssmLossGrad nssm_loss_grad(const NssmModel& m, const WindowBatch& b, const NssmLossConfig& cfg, bool with_grad) {
    const Index steps = b.steps();
    const Index batch = b.batch();
    if (steps < 1 || batch < 1) throw ShapeError("nssm_loss: empty window batch");
    if (b.past_outputs.rows() != m.n_p * m.n_y) throw ShapeError("nssm_loss: history length differs from the model");
    if (b.future_outputs[0].rows() != m.n_y || b.future_inputs[0].rows() != m.n_u)
        throw ShapeError("nssm_loss: window dimensions differ from the model");
    if (cfg.q_dx < 0) throw ParameterError("nssm_loss: Q_dx must be >= 0");
    const bool bounded = cfg.y_min.size() > 0;
    if (bounded && (cfg.y_min.size() != m.n_y || cfg.y_max.size() != m.n_y))
        throw ShapeError("nssm_loss: output bounds need one value per channel");

    const Index nx = m.n_x;
    const Index sb = steps * batch;
    Tape<double> tape_o;
    const Matrix x0 = forward(m.f_o, b.past_outputs, with_grad ? &tape_o : nullptr);

    // u_0 is the input at the last history sample, u_k (k >= 1) the (k-1)-th future input
    Matrix fu;
    Tape<double> tape_u;
    Matrix u_all;
    if (m.has_input()) {
        u_all.resize(m.n_u, sb);
        u_all.leftCols(batch) = b.past_inputs.bottomRows(m.n_u);
        for (Index k = 1; k < steps; ++k) u_all.middleCols(k * batch, batch) = b.future_inputs[k - 1];
        fu = forward(m.f_u.net, u_all, with_grad ? &tape_u : nullptr);
    }

    std::vector<Matrix> xs;
    xs.reserve(static_cast<std::size_t>(steps + 1));
    xs.push_back(x0);
    std::vector<Tape<double>> tapes_x(with_grad ? static_cast<std::size_t>(steps) : 0);
    Matrix x_all(nx, sb);
    for (Index k = 0; k < steps; ++k) {
        Matrix next = forward(m.f_x.net, xs.back(), with_grad ? &tapes_x[static_cast<std::size_t>(k)] : nullptr);
        if (m.has_input()) next += fu.middleCols(k * batch, batch);
        check_divergence(next, k + 1);
        x_all.middleCols(k * batch, batch) = next;
        xs.push_back(std::move(next));
    }
    const Matrix& cy = m.f_y.net.weights[0];
    const Matrix yhat = cy * x_all;
    Matrix y_all(m.n_y, sb);
    for (Index k = 0; k < steps; ++k) y_all.middleCols(k * batch, batch) = b.future_outputs[k];

    NssmLossGrad out;
    const double ny_count = static_cast<double>(m.n_y * sb);
    const double nx_count = static_cast<double>(nx * sb);
    const Matrix err = yhat - y_all;
    out.parts.reference = err.squaredNorm() / ny_count;
    Matrix over, under;
    if (bounded) {
        over = (yhat.colwise() - cfg.y_max).cwiseMax(0.0);
        under = ((-yhat).colwise() + cfg.y_min).cwiseMax(0.0);
        out.parts.bounds = (over.squaredNorm() + under.squaredNorm()) / ny_count;
    }
    for (Index k = 0; k < steps; ++k) out.parts.smoothing += (xs[k + 1] - xs[k]).squaredNorm();
    out.parts.smoothing /= nx_count;
    out.parts.svd = nssm_svd_penalty(m);
    out.loss = out.parts.total(cfg.q_dx);
    if (!with_grad) return out;

    Matrix dyhat = (2.0 / ny_count) * err;
    if (bounded) dyhat += (2.0 / ny_count) * (over - under);
    Gradients<double> g_y;
    g_y.weights.push_back(dyhat * x_all.transpose());
    g_y.biases.push_back(Vector::Zero(m.n_y));
    const Matrix dx_all = cy.transpose() * dyhat;

    const double sw = 2.0 * cfg.q_dx / nx_count;
    Gradients<double> g_x = zero_gradients(m.f_x.net);
    Matrix dfu(m.has_input() ? nx : 0, m.has_input() ? sb : 0);
    Matrix a = dx_all.middleCols((steps - 1) * batch, batch);
    for (Index k = steps; k-- > 0;) {
        // a holds dL/dx_{k+1}; add the smoothing term coupling x_{k+1} and x_k
        const Matrix diff = sw * (xs[k + 1] - xs[k]);
        a += diff;
        if (m.has_input()) dfu.middleCols(k * batch, batch) = a;
        BackwardResult<double> br = backward(m.f_x.net, tapes_x[static_cast<std::size_t>(k)], a);
        add_into(g_x, br.grads);
        a = std::move(br.input_grad);
        a -= diff;
        if (k > 0) a += dx_all.middleCols((k - 1) * batch, batch);
    }
    const BackwardResult<double> bo = backward(m.f_o, tape_o, a);

    out.grad.resize(m.parameter_count());
    Index pos = 0;
    const auto put = [&](const Vector& v) {
        out.grad.segment(pos, v.size()) = v;
        pos += v.size();
    };
    put(flatten(m.f_o, bo.grads));
    put(block_gradient(m.f_x, g_x));
    if (m.has_input()) put(block_gradient(m.f_u, backward(m.f_u.net, tape_u, dfu).grads));
    put(block_gradient(m.f_y, g_y));
    return out;
}

double nssm_loss(const NssmModel& m, const WindowBatch& b, const NssmLossConfig& cfg) {
    return nssm_loss_grad(m, b, cfg, false).loss;
}

Matrix nssm_predict(const NssmModel& m, const Trajectory& history, const Trajectory& target) {
    if (history.size() < m.n_p) throw TooShortError("nssm_predict: history shorter than N_p");
    const Index n = target.size();
    if (n < 1) throw TooShortError("nssm_predict: empty target");
    Matrix u(n, m.n_u);
    if (m.n_u > 0) {
        u.row(0) = history.inputs.row(history.size() - 1);
        u.bottomRows(n - 1) = target.inputs.topRows(n - 1);
    }
    return rollout(m, history.outputs.bottomRows(m.n_p), u);
}

double nssm_open_loop_mse(const NssmModel& m, const Trajectory& history, const Trajectory& target) {
    const Matrix yhat = nssm_predict(m, history, target);
    return (yhat - target.outputs).squaredNorm() / static_cast<double>(target.outputs.size());
}

namespace {

WindowBatch select_columns(const WindowBatch& b, const std::vector<Index>& cols) {
    WindowBatch out;
    out.past_outputs = b.past_outputs(Eigen::all, cols);
    out.past_inputs = b.past_inputs(Eigen::all, cols);
    for (const auto& m : b.future_inputs) out.future_inputs.emplace_back(m(Eigen::all, cols));
    for (const auto& m : b.future_outputs) out.future_outputs.emplace_back(m(Eigen::all, cols));
    return out;
}

}  // namespace

NssmTrainResult train_nssm(NssmModel& m, const DatasetSplit& split, const NssmTrainConfig& cfg) {
    if (cfg.epochs < 1) throw ParameterError("train_nssm: epochs must be >= 1");
    if (cfg.eval_every < 1) throw ParameterError("train_nssm: eval_every must be >= 1");
    if (cfg.n_steps < 1) throw ParameterError("train_nssm: N_steps must be >= 1");
    if (cfg.q_dx < 0) throw ParameterError("train_nssm: Q_dx must be >= 0");
    if (split.train.n_y() != m.n_y || split.train.n_u() != m.n_u)
        throw ShapeError("train_nssm: data dimensions differ from the model");
    const WindowBatch all = stack(windows(split.train, m.n_p, cfg.n_steps, cfg.stride));
    const Index total = all.batch();
    const Index bs = cfg.batch_size > 0 ? std::min(cfg.batch_size, total) : total;

    NssmTrainResult result;
    NssmLossConfig lc;
    lc.q_dx = cfg.q_dx;
    if (cfg.output_bounds) {
        const Vector lo = split.train.outputs.colwise().minCoeff();
        const Vector hi = split.train.outputs.colwise().maxCoeff();
        const Vector pad = 0.1 * (hi - lo);
        lc.y_min = lo - pad;
        lc.y_max = hi + pad;
        result.y_min = lc.y_min;
        result.y_max = lc.y_max;
    }

    std::vector<Index> order(static_cast<std::size_t>(total));
    std::iota(order.begin(), order.end(), Index{0});
    std::mt19937_64 rng(cfg.seed);

    Vector params = nssm_parameters(m);
    OptState opt = make_optimizer(OptimizerKind::adamw, cfg.lr, params.size(), cfg.weight_decay);
    Vector best = params;
    for (Index epoch = 1; epoch <= cfg.epochs; ++epoch) {
        if (bs < total) std::shuffle(order.begin(), order.end(), rng);
        double loss_sum = 0.0;
        for (Index start = 0; start < total; start += bs) {
            const Index count = std::min(bs, total - start);
            NssmLossGrad lg;
            try {
                if (count == total) {
                    lg = nssm_loss_grad(m, all, lc);
                } else {
                    const std::vector<Index> cols(order.begin() + start, order.begin() + start + count);
                    lg = nssm_loss_grad(m, select_columns(all, cols), lc);
                }
            } catch (const DivergenceError& e) {
                throw DivergenceError("train_nssm: diverged at epoch " + std::to_string(epoch) + ": " + e.what(),
                                      static_cast<long>(epoch));
            }
            if (!std::isfinite(lg.loss) || !lg.grad.allFinite())
                throw DivergenceError("train_nssm: non-finite loss at epoch " + std::to_string(epoch),
                                      static_cast<long>(epoch));
            loss_sum += lg.loss * static_cast<double>(count);
            opt_step(opt, params, lg.grad);
            set_nssm_parameters(m, params);
        }
        NssmEpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = loss_sum / static_cast<double>(total);
        if (epoch == 1 || epoch % cfg.eval_every == 0 || epoch == cfg.epochs) {
            try {
                rec.dev_mse = nssm_open_loop_mse(m, split.train, split.dev);
            } catch (const Error&) {
                rec.dev_mse = std::numeric_limits<double>::infinity();
            }
            if (!std::isfinite(rec.dev_mse)) rec.dev_mse = std::numeric_limits<double>::infinity();
            if (rec.dev_mse < result.best_dev_mse) {
                result.best_dev_mse = rec.dev_mse;
                result.best_epoch = epoch;
                best = params;
            }
        }
        result.history.push_back(rec);
    }
    if (result.best_epoch > 0) set_nssm_parameters(m, best);
    return result;
}

nlohmann::json to_json(const NssmModel& m) {
    nlohmann::json j = {{"format", "sysid-nssm"},
                        {"version", 1},
                        {"n_y", m.n_y},
                        {"n_u", m.n_u},
                        {"n_x", m.n_x},
                        {"latent_multiplier", m.latent_multiplier},
                        {"n_p", m.n_p},
                        {"linear_map", to_string(m.linear_map)},
                        {"block", to_string(m.block)},
                        {"f_o", to_json(m.f_o)},
                        {"f_x", block_to_json(m.f_x)},
                        {"f_y", block_to_json(m.f_y)}};
    if (m.has_input()) j["f_u"] = block_to_json(m.f_u);
    return j;
}

NssmModel nssm_from_json(const nlohmann::json& j) {
    NssmModel m;
    try {
        if (j.at("format").get<std::string>() != "sysid-nssm") throw SchemaError("nssm checkpoint: wrong format tag");
        if (j.at("version").get<int>() != 1) throw SchemaError("nssm checkpoint: unsupported version");
        m.n_y = j.at("n_y").get<Index>();
        m.n_u = j.at("n_u").get<Index>();
        m.n_x = j.at("n_x").get<Index>();
        m.latent_multiplier = j.at("latent_multiplier").get<Index>();
        m.n_p = j.at("n_p").get<Index>();
        m.linear_map = linear_map_from_string(j.at("linear_map").get<std::string>());
        m.block = block_kind_from_string(j.at("block").get<std::string>());
        m.f_o = dense_net_from_json(j.at("f_o"));
        m.f_x = block_from_json(j.at("f_x"));
        if (m.has_input()) m.f_u = block_from_json(j.at("f_u"));
        m.f_y = block_from_json(j.at("f_y"));
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("nssm checkpoint: ") + e.what());
    } catch (const ParameterError& e) {
        throw SchemaError(std::string("nssm checkpoint: ") + e.what());
    }
    const auto io = [](const Block& b, Index in, Index out) {
        return b.net.input_size() == in && b.net.output_size() == out;
    };
    if (m.f_o.input_size() != m.n_p * m.n_y || m.f_o.output_size() != m.n_x || !io(m.f_x, m.n_x, m.n_x) ||
        (m.has_input() && !io(m.f_u, m.n_u, m.n_x)) || !io(m.f_y, m.n_x, m.n_y) || m.f_y.net.layers() != 1 ||
        m.f_y.net.use_bias)
        throw SchemaError("nssm checkpoint: inconsistent dimensions");
    return m;
}

}  // namespace sysid
