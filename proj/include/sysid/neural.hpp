#pragma once

// Dense feed-forward networks with hand-written reverse-mode gradients, and
// the Adam/AdamW optimizers that train every network in the library.
//
// Inputs are column-batched: a d0 x B matrix evaluates B samples at once.
// Parameter gradients are summed over the batch.

#include "sysid/error.hpp"

#include <Eigen/Dense>
#include "json.hpp"

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace sysid {

enum class Activation { tanh, relu, identity };

const char* to_string(Activation a);
Activation activation_from_string(const std::string& s);

template <typename Scalar>
struct DenseNet {
    using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
    using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

    std::vector<Eigen::Index> layer_sizes;
    std::vector<Mat> weights;  // weights[k] is d_{k+1} x d_k
    std::vector<Vec> biases;
    Activation activation = Activation::tanh;  // hidden layers; the output layer is affine
    bool use_bias = true;

    [[nodiscard]] Eigen::Index input_size() const { return layer_sizes.front(); }
    [[nodiscard]] Eigen::Index output_size() const { return layer_sizes.back(); }
    [[nodiscard]] std::size_t layers() const { return weights.size(); }
    [[nodiscard]] Eigen::Index parameter_count() const {
        Eigen::Index n = 0;
        for (std::size_t k = 0; k < weights.size(); ++k) n += weights[k].size() + (use_bias ? biases[k].size() : 0);
        return n;
    }
};

template <typename Scalar>
struct Tape {
    using Mat = typename DenseNet<Scalar>::Mat;
    std::vector<Mat> inputs;  // input of each layer
    std::vector<Mat> pre;     // pre-activation of each layer
};

/// Same layout as the parameters of the DenseNet it was computed for.
template <typename Scalar>
struct Gradients {
    std::vector<typename DenseNet<Scalar>::Mat> weights;
    std::vector<typename DenseNet<Scalar>::Vec> biases;
};

template <typename Scalar>
struct BackwardResult {
    Gradients<Scalar> grads;
    typename DenseNet<Scalar>::Mat input_grad;
};

namespace detail {

template <typename Derived>
auto activate(const Eigen::MatrixBase<Derived>& z, Activation a) {
    using Mat = typename Derived::PlainObject;
    switch (a) {
        case Activation::tanh: return Mat(z.array().tanh());
        case Activation::relu: return Mat(z.array().max(typename Derived::Scalar(0)));
        case Activation::identity: break;
    }
    return Mat(z);
}

/// Multiplies `g` in place by the activation derivative evaluated at pre-activation `z`.
template <typename Mat>
void scale_by_derivative(Mat& g, const Mat& z, Activation a) {
    using S = typename Mat::Scalar;
    switch (a) {
        case Activation::tanh: g.array() *= S(1) - z.array().tanh().square(); break;
        case Activation::relu: g.array() *= (z.array() > S(0)).template cast<S>(); break;
        case Activation::identity: break;
    }
}

}  // namespace detail

/// Xavier-uniform init for tanh/identity, He-uniform for relu, zero biases.
template <typename Scalar>
DenseNet<Scalar> make_dense_net(std::vector<Eigen::Index> sizes, Activation act, std::uint64_t seed,
                                bool use_bias = true) {
    if (sizes.size() < 2) throw ParameterError("dense net: need at least input and output sizes");
    for (auto s : sizes)
        if (s < 0) throw ParameterError("dense net: negative layer size");
    DenseNet<Scalar> net;
    net.layer_sizes = std::move(sizes);
    net.activation = act;
    net.use_bias = use_bias;
    std::mt19937_64 rng(seed);
    for (std::size_t k = 0; k + 1 < net.layer_sizes.size(); ++k) {
        const auto fan_in = net.layer_sizes[k];
        const auto fan_out = net.layer_sizes[k + 1];
        const bool hidden_relu = act == Activation::relu && k + 2 < net.layer_sizes.size();
        const double limit = fan_in + fan_out == 0
                                 ? 0.0
                                 : (hidden_relu ? std::sqrt(6.0 / std::max<double>(1.0, static_cast<double>(fan_in)))
                                                : std::sqrt(6.0 / static_cast<double>(fan_in + fan_out)));
        std::uniform_real_distribution<double> dist(-limit, limit);
        typename DenseNet<Scalar>::Mat w(fan_out, fan_in);
        for (Eigen::Index j = 0; j < w.cols(); ++j)
            for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = Scalar(dist(rng));
        net.weights.push_back(std::move(w));
        net.biases.push_back(DenseNet<Scalar>::Vec::Zero(fan_out));
    }
    return net;
}

template <typename Scalar>
void check_input(const DenseNet<Scalar>& net, Eigen::Index rows) {
    if (rows != net.input_size())
        throw ShapeError("dense net: input has " + std::to_string(rows) + " rows, expected " +
                         std::to_string(net.input_size()));
}

/// Column-batched forward pass; records what backward() needs when `tape` is given.
template <typename Scalar, typename Derived>
typename DenseNet<Scalar>::Mat forward(const DenseNet<Scalar>& net, const Eigen::MatrixBase<Derived>& x,
                                       Tape<Scalar>* tape = nullptr) {
    using Mat = typename DenseNet<Scalar>::Mat;
    check_input(net, x.rows());
    if (tape) {
        tape->inputs.clear();
        tape->pre.clear();
    }
    Mat h = x;
    for (std::size_t k = 0; k < net.layers(); ++k) {
        Mat z = net.weights[k] * h;
        if (net.use_bias) z.colwise() += net.biases[k];
        const bool last = k + 1 == net.layers();
        Mat next = last ? z : detail::activate(z, net.activation);
        if (tape) {
            tape->inputs.push_back(std::move(h));
            tape->pre.push_back(std::move(z));
        }
        h = std::move(next);
    }
    return h;
}

/// Exact chain-rule gradients of <upstream, forward(x)> with respect to the parameters and the input.
template <typename Scalar, typename Derived>
BackwardResult<Scalar> backward(const DenseNet<Scalar>& net, const Tape<Scalar>& tape,
                                const Eigen::MatrixBase<Derived>& upstream) {
    using Mat = typename DenseNet<Scalar>::Mat;
    if (tape.inputs.size() != net.layers()) throw ShapeError("backward: tape does not match network depth");
    if (upstream.rows() != net.output_size() || upstream.cols() != tape.inputs.front().cols())
        throw ShapeError("backward: upstream gradient shape mismatch");
    for (std::size_t k = 0; k < net.layers(); ++k)
        if (tape.inputs[k].rows() != net.weights[k].cols()) throw ShapeError("backward: stale tape");
    BackwardResult<Scalar> out;
    out.grads.weights.resize(net.layers());
    out.grads.biases.resize(net.layers());
    Mat g = upstream;
    for (std::size_t kk = net.layers(); kk-- > 0;) {
        if (kk + 1 != net.layers()) {
            // the next layer's recorded input is this layer's activation
            if (net.activation == Activation::tanh)
                g.array() *= Scalar(1) - tape.inputs[kk + 1].array().square();
            else
                detail::scale_by_derivative(g, tape.pre[kk], net.activation);
        }
        out.grads.weights[kk] = g * tape.inputs[kk].transpose();
        out.grads.biases[kk] = net.use_bias ? typename DenseNet<Scalar>::Vec(g.rowwise().sum())
                                            : DenseNet<Scalar>::Vec::Zero(g.rows());
        g = net.weights[kk].transpose() * g;
    }
    out.input_grad = std::move(g);
    return out;
}

/// vᵀ·∂net/∂x at x (column-batched; column j of v pairs with column j of x).
template <typename Scalar, typename D1, typename D2>
typename DenseNet<Scalar>::Mat vjp_input(const DenseNet<Scalar>& net, const Eigen::MatrixBase<D1>& x,
                                         const Eigen::MatrixBase<D2>& v) {
    using Mat = typename DenseNet<Scalar>::Mat;
    check_input(net, x.rows());
    if (v.rows() != net.output_size() || v.cols() != x.cols()) throw ShapeError("vjp_input: cotangent shape mismatch");
    std::vector<Mat> pre;
    pre.reserve(net.layers());
    Mat h = x;
    for (std::size_t k = 0; k < net.layers(); ++k) {
        Mat z = net.weights[k] * h;
        if (net.use_bias) z.colwise() += net.biases[k];
        if (k + 1 < net.layers()) h = detail::activate(z, net.activation);
        pre.push_back(std::move(z));
    }
    Mat g = v;
    for (std::size_t kk = net.layers(); kk-- > 0;) {
        if (kk + 1 != net.layers()) detail::scale_by_derivative(g, pre[kk], net.activation);
        g = net.weights[kk].transpose() * g;
    }
    return g;
}

/// ∂net/∂x · v at x (forward-mode).
template <typename Scalar, typename D1, typename D2>
typename DenseNet<Scalar>::Mat jvp_input(const DenseNet<Scalar>& net, const Eigen::MatrixBase<D1>& x,
                                         const Eigen::MatrixBase<D2>& v) {
    using Mat = typename DenseNet<Scalar>::Mat;
    check_input(net, x.rows());
    if (v.rows() != x.rows() || v.cols() != x.cols()) throw ShapeError("jvp_input: tangent shape mismatch");
    Mat h = x;
    Mat dh = v;
    for (std::size_t k = 0; k < net.layers(); ++k) {
        Mat z = net.weights[k] * h;
        if (net.use_bias) z.colwise() += net.biases[k];
        Mat dz = net.weights[k] * dh;
        if (k + 1 < net.layers()) {
            detail::scale_by_derivative(dz, z, net.activation);
            h = detail::activate(z, net.activation);
        } else {
            h = std::move(z);
        }
        dh = std::move(dz);
    }
    return dh;
}

// Flat parameter vectors: per layer, the weight matrix row-major, then the bias (if used).

template <typename Scalar>
typename DenseNet<Scalar>::Vec flatten(const DenseNet<Scalar>& net) {
    typename DenseNet<Scalar>::Vec out(net.parameter_count());
    Eigen::Index pos = 0;
    for (std::size_t k = 0; k < net.layers(); ++k) {
        const auto& w = net.weights[k];
        for (Eigen::Index i = 0; i < w.rows(); ++i) {
            out.segment(pos, w.cols()) = w.row(i).transpose();
            pos += w.cols();
        }
        if (net.use_bias) {
            out.segment(pos, net.biases[k].size()) = net.biases[k];
            pos += net.biases[k].size();
        }
    }
    return out;
}

template <typename Scalar>
typename DenseNet<Scalar>::Vec flatten(const DenseNet<Scalar>& net, const Gradients<Scalar>& g) {
    typename DenseNet<Scalar>::Vec out(net.parameter_count());
    Eigen::Index pos = 0;
    for (std::size_t k = 0; k < net.layers(); ++k) {
        const auto& w = g.weights[k];
        for (Eigen::Index i = 0; i < w.rows(); ++i) {
            out.segment(pos, w.cols()) = w.row(i).transpose();
            pos += w.cols();
        }
        if (net.use_bias) {
            out.segment(pos, g.biases[k].size()) = g.biases[k];
            pos += g.biases[k].size();
        }
    }
    return out;
}

/// Overwrites the parameters of `net` from params[offset, offset+count); returns count.
template <typename Scalar, typename Derived>
Eigen::Index unflatten(DenseNet<Scalar>& net, const Eigen::MatrixBase<Derived>& params, Eigen::Index offset = 0) {
    if (params.size() - offset < net.parameter_count()) throw ShapeError("unflatten: parameter vector too short");
    Eigen::Index pos = offset;
    for (std::size_t k = 0; k < net.layers(); ++k) {
        auto& w = net.weights[k];
        for (Eigen::Index i = 0; i < w.rows(); ++i) {
            w.row(i) = params.segment(pos, w.cols()).transpose();
            pos += w.cols();
        }
        if (net.use_bias) {
            net.biases[k] = params.segment(pos, net.biases[k].size());
            pos += net.biases[k].size();
        }
    }
    return pos - offset;
}

enum class OptimizerKind { adam, adamw };

struct OptState {
    OptimizerKind kind = OptimizerKind::adam;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;  // adamw only
    Eigen::VectorXd m, v;
    long step = 0;
};

OptState make_optimizer(OptimizerKind kind, double lr, Eigen::Index n_params, double weight_decay = 0.0);

/// One Adam/AdamW update of `params` in place. Throws (leaving state and params untouched) on non-finite gradients.
void opt_step(OptState& state, Eigen::VectorXd& params, const Eigen::VectorXd& grads);

// Checkpoint layout: {"layer_sizes", "activation", "use_bias", "weights": [row-major arrays], "biases"}.
nlohmann::json to_json(const DenseNet<double>& net);
DenseNet<double> dense_net_from_json(const nlohmann::json& j);
nlohmann::json matrix_to_json(const Eigen::MatrixXd& m);
Eigen::MatrixXd matrix_from_json(const nlohmann::json& j);

}  // namespace sysid
