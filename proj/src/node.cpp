#include "sysid/node.hpp"

#include "sysid/adjoint.hpp"
#include "sysid/error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace sysid {

namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// The NODE vector field over a batch: x0 is the data-control context and
/// u[k] the input held over grid interval k.
struct NodeField {
    const NodeModel& m;
    Matrix x0;
    const std::vector<Matrix>* u = nullptr;

    [[nodiscard]] Index theta_size() const { return m.field.parameter_count(); }
    [[nodiscard]] Index ctx_rows() const { return m.data_control ? m.n_x : 0; }

    [[nodiscard]] Matrix input(const Matrix& x, double t, Index k) const {
        const Index b = x.cols();
        const bool with_u = m.u_injection == UInjection::field && m.n_u > 0;
        Matrix in(m.field_input_size(), b);
        in.topRows(m.n_x) = x;
        Index row = m.n_x;
        if (m.data_control) {
            in.middleRows(row, m.n_x) = x0;
            row += m.n_x;
        }
        if (with_u) {
            in.middleRows(row, m.n_u) = (*u)[static_cast<std::size_t>(k)];
            row += m.n_u;
        }
        if (m.time_feature) in.row(row).setConstant(t);
        return in;
    }

    [[nodiscard]] Matrix eval(const Matrix& x, double t, Index k) const { return forward(m.field, input(x, t, k)); }

    [[nodiscard]] FieldVjp vjp(const Matrix& x, const Matrix& a, double t, Index k) const {
        Tape<double> tape;
        FieldVjp out;
        out.value = forward(m.field, input(x, t, k), &tape);
        auto r = backward(m.field, tape, a);
        out.dtheta = flatten(m.field, r.grads);
        out.dx = r.input_grad.topRows(m.n_x);
        out.dctx = r.input_grad.middleRows(m.n_x, ctx_rows());
        return out;
    }
};

Matrix encoder_input(const NodeModel& m, const Matrix& y0, const Matrix& u0) {
    if (y0.rows() != m.n_y || u0.rows() != m.n_u || u0.cols() != y0.cols())
        throw ShapeError("node encode: observation/input dimension mismatch");
    Matrix in(m.n_y + m.n_u, y0.cols());
    in << y0, u0;
    return in;
}

std::vector<double> uniform_grid(Index intervals, double delta) {
    std::vector<double> g(static_cast<std::size_t>(intervals + 1));
    for (Index k = 0; k <= intervals; ++k) g[static_cast<std::size_t>(k)] = static_cast<double>(k) * delta;
    return g;
}

NodeBatch select_columns(const NodeBatch& b, const std::vector<Index>& cols) {
    NodeBatch out;
    out.y0 = b.y0(Eigen::all, cols);
    for (const auto& u : b.u) out.u.push_back(u(Eigen::all, cols));
    for (const auto& y : b.y) out.y.push_back(y(Eigen::all, cols));
    return out;
}

}  // namespace

const char* to_string(UInjection u) { return u == UInjection::field ? "field" : "encoder_only"; }

UInjection u_injection_from_string(const std::string& s) {
    if (s == "field") return UInjection::field;
    if (s == "encoder_only") return UInjection::encoder_only;
    throw ParameterError("unknown u injection '" + s + "'");
}

const char* to_string(GradientMethod g) { return g == GradientMethod::adjoint ? "adjoint" : "backprop_rk4"; }

GradientMethod gradient_method_from_string(const std::string& s) {
    if (s == "adjoint") return GradientMethod::adjoint;
    if (s == "backprop_rk4") return GradientMethod::backprop_rk4;
    throw ParameterError("unknown gradient method '" + s + "'");
}

NodeModel make_node_model(const NodeConfig& cfg) {
    if (cfg.n_y < 1 || cfg.n_u < 0) throw ParameterError("node: n_y must be >= 1 and n_u >= 0");
    if (cfg.latent_multiplier < 1) throw ParameterError("node: latent multiplier must be >= 1");
    if (cfg.field_hidden < 1 || cfg.encoder_hidden < 0) throw ParameterError("node: invalid hidden sizes");
    ode::check(cfg.solver);
    NodeModel m;
    m.n_y = cfg.n_y;
    m.n_u = cfg.n_u;
    m.latent_multiplier = cfg.latent_multiplier;
    m.n_x = cfg.latent_multiplier * cfg.n_y;
    m.u_injection = cfg.u_injection;
    m.time_feature = cfg.time_feature;
    m.data_control = cfg.data_control;
    m.solver = cfg.solver;
    std::vector<Index> enc{m.n_y + m.n_u};
    if (cfg.encoder_hidden > 0) enc.push_back(cfg.encoder_hidden);
    enc.push_back(m.n_x);
    m.g_x = make_dense_net<double>(enc, cfg.activation, cfg.seed);
    m.field = make_dense_net<double>({m.field_input_size(), cfg.field_hidden, m.n_x}, cfg.activation, cfg.seed + 1);
    std::mt19937_64 rng(cfg.seed + 2);
    const double limit = std::sqrt(6.0 / static_cast<double>(m.n_x + m.n_y));
    std::uniform_real_distribution<double> dist(-limit, limit);
    m.g_y.resize(m.n_y, m.n_x);
    for (Index i = 0; i < m.n_y; ++i)
        for (Index j = 0; j < m.n_x; ++j) m.g_y(i, j) = dist(rng);
    return m;
}

Vector node_parameters(const NodeModel& m) {
    Vector p(m.parameter_count());
    const Index a = m.g_x.parameter_count(), b = m.field.parameter_count();
    p.head(a) = flatten(m.g_x);
    p.segment(a, b) = flatten(m.field);
    p.tail(m.g_y.size()) = Eigen::Map<const Vector>(RowMajor(m.g_y).data(), m.g_y.size());
    return p;
}

void set_node_parameters(NodeModel& m, const Vector& p) {
    if (p.size() != m.parameter_count()) throw ShapeError("node: parameter vector has the wrong length");
    Index pos = unflatten(m.g_x, p, 0);
    pos += unflatten(m.field, p, pos);
    const Vector tail = p.tail(m.g_y.size());
    m.g_y = Eigen::Map<const RowMajor>(tail.data(), m.n_y, m.n_x);
}

Matrix encode(const NodeModel& m, const Matrix& y0, const Matrix& u0) { return forward(m.g_x, encoder_input(m, y0, u0)); }

Matrix field_eval(const NodeModel& m, const Matrix& x, const Matrix& x0, const Matrix& u, double t) {
    if (x.rows() != m.n_x || x0.rows() != m.n_x || x0.cols() != x.cols()) throw ShapeError("node field: latent dimension mismatch");
    if (u.rows() != m.n_u || (m.n_u > 0 && u.cols() != x.cols())) throw ShapeError("node field: input dimension mismatch");
    std::vector<Matrix> us{u};
    NodeField f{m, x0, &us};
    return f.eval(x, t, 0);
}

Matrix forecast(const NodeModel& m, const Vector& y0, const Matrix& u_traj, double delta, ode::IntervalStats* stats) {
    if (!(delta > 0)) throw ParameterError("forecast: delta must be positive");
    if (u_traj.cols() != m.n_u) throw ShapeError("forecast: input dimension mismatch");
    if (y0.size() != m.n_y) throw ShapeError("forecast: observation dimension mismatch");
    const Index n = u_traj.rows();
    if (n < 1) throw TooShortError("forecast: empty horizon");
    const Matrix x0 = encode(m, y0, u_traj.row(0).transpose());
    Matrix out(n, m.n_y);
    out.row(0) = (m.g_y * x0).transpose();
    if (n == 1) return out;
    std::vector<Matrix> us;
    us.reserve(static_cast<std::size_t>(n));
    for (Index k = 0; k < n; ++k) us.emplace_back(u_traj.row(k).transpose());
    NodeField f{m, x0, &us};
    const auto xs = integrate_field(f, x0, uniform_grid(n - 1, delta), m.solver, stats);
    for (Index k = 1; k < n; ++k) out.row(k) = (m.g_y * xs[static_cast<std::size_t>(k)]).transpose();
    return out;
}

NodeBatch node_batch(const WindowBatch& wb) {
    NodeBatch b;
    const Index n_y = wb.future_outputs.empty() ? 0 : wb.future_outputs[0].rows();
    const Index n_u = wb.future_inputs.empty() ? 0 : wb.future_inputs[0].rows();
    if (wb.steps() < 1 || wb.past_outputs.rows() < n_y) throw ShapeError("node_batch: empty window batch");
    b.y0 = wb.past_outputs.bottomRows(n_y);
    b.u.push_back(wb.past_inputs.bottomRows(n_u));
    for (Index k = 0; k + 1 < wb.steps(); ++k) b.u.push_back(wb.future_inputs[static_cast<std::size_t>(k)]);
    b.y = wb.future_outputs;
    return b;
}

double node_loss(const NodeModel& m, const NodeBatch& b, double delta) {
    const Matrix x0 = encode(m, b.y0, b.u.at(0));
    NodeField f{m, x0, &b.u};
    const auto xs = integrate_field(f, x0, uniform_grid(static_cast<Index>(b.y.size()), delta), m.solver);
    double sse = 0.0;
    for (std::size_t k = 0; k < b.y.size(); ++k) sse += (m.g_y * xs[k + 1] - b.y[k]).squaredNorm();
    return sse / static_cast<double>(b.y.size() * static_cast<std::size_t>(b.batch() * m.n_y));
}

LossGrad node_loss_grad(const NodeModel& m, const NodeBatch& b, double delta, GradientMethod method, Index rk4_substeps) {
    const Index steps = static_cast<Index>(b.y.size());
    if (steps < 1 || static_cast<Index>(b.u.size()) != steps) throw ShapeError("node_loss_grad: malformed batch");
    Tape<double> enc_tape;
    const Matrix x0 = forward(m.g_x, encoder_input(m, b.y0, b.u[0]), &enc_tape);
    NodeField f{m, x0, &b.u};
    const auto grid = uniform_grid(steps, delta);

    LossGrad out;
    std::vector<Matrix> xs;
    Rk4Tape tape;
    if (method == GradientMethod::adjoint) {
        xs = integrate_field(f, x0, grid, m.solver, &out.stats);
    } else {
        tape = rk4_forward(f, x0, grid, rk4_substeps);
        xs = tape.states;
    }

    const double count = static_cast<double>(steps * b.batch() * m.n_y);
    std::vector<Matrix> dl_dx(xs.size(), Matrix::Zero(m.n_x, b.batch()));
    Matrix g_gy = Matrix::Zero(m.n_y, m.n_x);
    double sse = 0.0;
    for (Index k = 1; k <= steps; ++k) {
        const auto ks = static_cast<std::size_t>(k);
        const Matrix r = m.g_y * xs[ks] - b.y[ks - 1];
        sse += r.squaredNorm();
        const Matrix dy = (2.0 / count) * r;
        dl_dx[ks] = m.g_y.transpose() * dy;
        g_gy += dy * xs[ks].transpose();
    }
    out.loss = sse / count;

    const Sensitivity s =
        method == GradientMethod::adjoint ? adjoint_backward(f, xs, grid, dl_dx, m.solver) : rk4_backward(f, tape, dl_dx);
    if (method == GradientMethod::adjoint) {
        out.stats.accepted += s.stats.accepted;
        out.stats.rejected += s.stats.rejected;
    }
    const auto enc = backward(m.g_x, enc_tape, m.data_control ? Matrix(s.x0 + s.ctx) : s.x0);

    out.grad.resize(m.parameter_count());
    const Index a = m.g_x.parameter_count(), nb = m.field.parameter_count();
    out.grad.head(a) = flatten(m.g_x, enc.grads);
    out.grad.segment(a, nb) = s.theta;
    out.grad.tail(m.g_y.size()) = Eigen::Map<const Vector>(RowMajor(g_gy).data(), g_gy.size());
    return out;
}

double node_open_loop_mse(const NodeModel& m, const Trajectory& tr) {
    const Matrix yhat = forecast(m, tr.outputs.row(0).transpose(), tr.inputs, tr.delta);
    return (yhat - tr.outputs).squaredNorm() / static_cast<double>(tr.outputs.size());
}

Matrix node_predict(const NodeModel& m, const Trajectory& history, const Trajectory& target) {
    if (history.size() < 1) throw TooShortError("node_predict: empty history");
    const Index n = target.size();
    if (n < 1) throw TooShortError("node_predict: empty target");
    Matrix u(n + 1, m.n_u);
    u.row(0) = history.inputs.row(history.size() - 1);
    u.bottomRows(n) = target.inputs;
    const Matrix yhat = forecast(m, history.outputs.row(history.size() - 1).transpose(), u, target.delta);
    return yhat.bottomRows(n);
}

double node_open_loop_mse(const NodeModel& m, const Trajectory& history, const Trajectory& target) {
    const Matrix yhat = node_predict(m, history, target);
    return (yhat - target.outputs).squaredNorm() / static_cast<double>(target.outputs.size());
}

TrainResult train_node(NodeModel& m, const DatasetSplit& split, const NodeTrainConfig& cfg) {
    if (cfg.epochs < 1) throw ParameterError("train_node: epochs must be >= 1");
    if (cfg.eval_every < 1) throw ParameterError("train_node: eval_every must be >= 1");
    if (split.train.n_y() != m.n_y || split.train.n_u() != m.n_u) throw ShapeError("train_node: data dimensions differ from the model");
    const NodeBatch all = node_batch(stack(windows(split.train, cfg.n_p, cfg.n_steps, cfg.stride)));
    const double delta = split.train.delta;
    const Index total = all.batch();
    const Index bs = cfg.batch_size > 0 ? std::min(cfg.batch_size, total) : total;

    std::vector<Index> order(static_cast<std::size_t>(total));
    std::iota(order.begin(), order.end(), Index{0});
    std::mt19937_64 rng(cfg.seed);

    Vector params = node_parameters(m);
    OptState opt = make_optimizer(OptimizerKind::adam, cfg.lr, params.size());
    Vector best = params;
    TrainResult result;
    for (Index epoch = 1; epoch <= cfg.epochs; ++epoch) {
        if (bs < total) std::shuffle(order.begin(), order.end(), rng);
        double loss_sum = 0.0;
        for (Index start = 0; start < total; start += bs) {
            const Index count = std::min(bs, total - start);
            LossGrad lg;
            try {
                if (count == total) {
                    lg = node_loss_grad(m, all, delta, cfg.gradient);
                } else {
                    const std::vector<Index> cols(order.begin() + start, order.begin() + start + count);
                    lg = node_loss_grad(m, select_columns(all, cols), delta, cfg.gradient);
                }
            } catch (const NonConvergenceError& e) {
                throw DivergenceError("train_node: solver failed at epoch " + std::to_string(epoch) + ": " + e.what(),
                                      static_cast<long>(epoch));
            } catch (const DivergenceError& e) {
                throw DivergenceError("train_node: diverged at epoch " + std::to_string(epoch) + ": " + e.what(),
                                      static_cast<long>(epoch));
            }
            if (!std::isfinite(lg.loss) || !lg.grad.allFinite())
                throw DivergenceError("train_node: non-finite loss at epoch " + std::to_string(epoch),
                                      static_cast<long>(epoch));
            loss_sum += lg.loss * static_cast<double>(count);
            opt_step(opt, params, lg.grad);
            set_node_parameters(m, params);
        }
        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = loss_sum / static_cast<double>(total);
        if (epoch == 1 || epoch % cfg.eval_every == 0 || epoch == cfg.epochs) {
            try {
                rec.dev_mse = node_open_loop_mse(m, split.train, split.dev);
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
    if (result.best_epoch > 0) set_node_parameters(m, best);
    return result;
}

nlohmann::json solver_to_json(const ode::SolverConfig& s) {
    return {{"method", ode::to_string(s.method)}, {"rtol", s.rtol},   {"atol", s.atol},          {"h_init", s.h_init},
            {"h_min", s.h_min},                   {"h_max", s.h_max}, {"max_steps", s.max_steps}};
}

ode::SolverConfig solver_from_json(const nlohmann::json& j) {
    ode::SolverConfig s;
    s.method = ode::method_from_string(j.value("method", std::string("dopri5")));
    s.rtol = j.value("rtol", s.rtol);
    s.atol = j.value("atol", s.atol);
    s.h_init = j.value("h_init", s.h_init);
    s.h_min = j.value("h_min", s.h_min);
    s.h_max = j.value("h_max", s.h_max);
    s.max_steps = j.value("max_steps", s.max_steps);
    ode::check(s);
    return s;
}

nlohmann::json to_json(const NodeModel& m) {
    return {{"format", "sysid-node"},
            {"version", 1},
            {"n_y", m.n_y},
            {"n_u", m.n_u},
            {"n_x", m.n_x},
            {"latent_multiplier", m.latent_multiplier},
            {"u_injection", to_string(m.u_injection)},
            {"time_feature", m.time_feature},
            {"data_control", m.data_control},
            {"solver", solver_to_json(m.solver)},
            {"g_x", to_json(m.g_x)},
            {"field", to_json(m.field)},
            {"g_y", matrix_to_json(m.g_y)}};
}

NodeModel node_from_json(const nlohmann::json& j) {
    NodeModel m;
    try {
        if (j.at("format").get<std::string>() != "sysid-node") throw SchemaError("node checkpoint: wrong format tag");
        if (j.at("version").get<int>() != 1) throw SchemaError("node checkpoint: unsupported version");
        m.n_y = j.at("n_y").get<Index>();
        m.n_u = j.at("n_u").get<Index>();
        m.n_x = j.at("n_x").get<Index>();
        m.latent_multiplier = j.at("latent_multiplier").get<Index>();
        m.u_injection = u_injection_from_string(j.at("u_injection").get<std::string>());
        m.time_feature = j.at("time_feature").get<bool>();
        m.data_control = j.value("data_control", true);
        m.solver = solver_from_json(j.at("solver"));
        m.g_x = dense_net_from_json(j.at("g_x"));
        m.field = dense_net_from_json(j.at("field"));
        m.g_y = matrix_from_json(j.at("g_y"));
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("node checkpoint: ") + e.what());
    } catch (const ParameterError& e) {
        throw SchemaError(std::string("node checkpoint: ") + e.what());
    }
    if (m.n_x != m.latent_multiplier * m.n_y || m.g_x.input_size() != m.n_y + m.n_u || m.g_x.output_size() != m.n_x ||
        m.field.input_size() != m.field_input_size() || m.field.output_size() != m.n_x || m.g_y.rows() != m.n_y ||
        m.g_y.cols() != m.n_x)
        throw SchemaError("node checkpoint: inconsistent dimensions");
    return m;
}

}  // namespace sysid
