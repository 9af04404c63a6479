#include "sysid/neural.hpp"

namespace sysid {

const char* to_string(Activation a) {
    switch (a) {
        case Activation::tanh: return "tanh";
        case Activation::relu: return "relu";
        case Activation::identity: return "identity";
    }
    return "?";
}

Activation activation_from_string(const std::string& s) {
    if (s == "tanh") return Activation::tanh;
    if (s == "relu") return Activation::relu;
    if (s == "identity") return Activation::identity;
    throw ParameterError("unknown activation '" + s + "'");
}

OptState make_optimizer(OptimizerKind kind, double lr, Eigen::Index n_params, double weight_decay) {
    if (!(lr > 0)) throw ParameterError("optimizer: learning rate must be positive");
    OptState s;
    s.kind = kind;
    s.lr = lr;
    s.weight_decay = kind == OptimizerKind::adamw ? weight_decay : 0.0;
    s.m = Eigen::VectorXd::Zero(n_params);
    s.v = Eigen::VectorXd::Zero(n_params);
    return s;
}

void opt_step(OptState& s, Eigen::VectorXd& params, const Eigen::VectorXd& grads) {
    if (params.size() != grads.size() || s.m.size() != params.size())
        throw ShapeError("opt_step: parameter, gradient and moment sizes differ");
    if (!grads.allFinite()) throw DivergenceError("opt_step: non-finite gradient, step rejected", s.step);
    ++s.step;
    s.m = s.beta1 * s.m + (1.0 - s.beta1) * grads;
    s.v = s.beta2 * s.v + (1.0 - s.beta2) * grads.cwiseAbs2();
    const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
    const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
    if (s.kind == OptimizerKind::adamw && s.weight_decay != 0.0) params *= 1.0 - s.lr * s.weight_decay;
    params.array() -= s.lr * (s.m.array() / c1) / ((s.v.array() / c2).sqrt() + s.eps);
}

nlohmann::json matrix_to_json(const Eigen::MatrixXd& m) {
    nlohmann::json j;
    j["rows"] = m.rows();
    j["cols"] = m.cols();
    std::vector<double> data;
    data.reserve(static_cast<std::size_t>(m.size()));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index k = 0; k < m.cols(); ++k) data.push_back(m(i, k));
    j["data"] = std::move(data);
    return j;
}

Eigen::MatrixXd matrix_from_json(const nlohmann::json& j) {
    const auto rows = j.at("rows").get<Eigen::Index>();
    const auto cols = j.at("cols").get<Eigen::Index>();
    const auto data = j.at("data").get<std::vector<double>>();
    if (static_cast<Eigen::Index>(data.size()) != rows * cols) throw SchemaError("matrix: data length mismatch");
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index k = 0; k < cols; ++k) m(i, k) = data[static_cast<std::size_t>(i * cols + k)];
    return m;
}

nlohmann::json to_json(const DenseNet<double>& net) {
    nlohmann::json j;
    j["layer_sizes"] = net.layer_sizes;
    j["activation"] = to_string(net.activation);
    j["use_bias"] = net.use_bias;
    j["weights"] = nlohmann::json::array();
    j["biases"] = nlohmann::json::array();
    for (std::size_t k = 0; k < net.layers(); ++k) {
        j["weights"].push_back(matrix_to_json(net.weights[k]));
        j["biases"].push_back(std::vector<double>(net.biases[k].data(), net.biases[k].data() + net.biases[k].size()));
    }
    return j;
}

DenseNet<double> dense_net_from_json(const nlohmann::json& j) {
    try {
        DenseNet<double> net;
        net.layer_sizes = j.at("layer_sizes").get<std::vector<Eigen::Index>>();
        net.activation = activation_from_string(j.at("activation").get<std::string>());
        net.use_bias = j.at("use_bias").get<bool>();
        const auto& ws = j.at("weights");
        const auto& bs = j.at("biases");
        if (net.layer_sizes.size() < 2 || ws.size() + 1 != net.layer_sizes.size() || bs.size() != ws.size())
            throw SchemaError("dense net: layer count mismatch");
        for (std::size_t k = 0; k < ws.size(); ++k) {
            Eigen::MatrixXd w = matrix_from_json(ws[k]);
            if (w.rows() != net.layer_sizes[k + 1] || w.cols() != net.layer_sizes[k])
                throw SchemaError("dense net: weight shape mismatch in layer " + std::to_string(k));
            auto b = bs[k].get<std::vector<double>>();
            if (static_cast<Eigen::Index>(b.size()) != w.rows()) throw SchemaError("dense net: bias length mismatch");
            net.weights.push_back(std::move(w));
            net.biases.push_back(Eigen::Map<Eigen::VectorXd>(b.data(), static_cast<Eigen::Index>(b.size())));
        }
        return net;
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("dense net: ") + e.what());
    }
}

}  // namespace sysid
