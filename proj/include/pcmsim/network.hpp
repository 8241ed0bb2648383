// SPDX-License-Identifier: Apache-2.0
#pragma once

// A small feed-forward graph engine: convolution, dense, batch norm, ReLU,
// residual add and average pooling, trained with softmax cross-entropy.
// Activations are NCHW doubles. Every weighted layer stores its weights as a
// (fan_in x outputs) matrix, i.e. the crossbar layout: conv filters are
// flattened row-major over (in-channel, kernel-row, kernel-col) into one
// column each.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "pcmsim/batchnorm.hpp"
#include "pcmsim/crossbar.hpp"
#include "pcmsim/error.hpp"
#include "pcmsim/matrix.hpp"
#include "pcmsim/rng.hpp"

namespace pcmsim {

struct Shape {
    std::size_t c = 0;
    std::size_t h = 1;
    std::size_t w = 1;

    std::size_t size() const noexcept { return c * h * w; }
    std::size_t spatial() const noexcept { return h * w; }
    bool operator==(const Shape&) const = default;
};

enum class LayerKind { Input, Conv, Dense, BatchNorm, Relu, Add, AvgPool, GlobalAvgPool };

inline const char* to_string(LayerKind k) {
    switch (k) {
        case LayerKind::Input: return "input";
        case LayerKind::Conv: return "conv";
        case LayerKind::Dense: return "dense";
        case LayerKind::BatchNorm: return "batchnorm";
        case LayerKind::Relu: return "relu";
        case LayerKind::Add: return "add";
        case LayerKind::AvgPool: return "avgpool";
        case LayerKind::GlobalAvgPool: return "gap";
    }
    return "?";
}

inline LayerKind layer_kind_from_string(const std::string& s) {
    for (auto k : {LayerKind::Input, LayerKind::Conv, LayerKind::Dense, LayerKind::BatchNorm,
                   LayerKind::Relu, LayerKind::Add, LayerKind::AvgPool, LayerKind::GlobalAvgPool})
        if (s == to_string(k)) return k;
    throw DomainError("unknown layer kind '" + s + "'");
}

struct LayerDesc {
    LayerKind kind = LayerKind::Input;
    std::string name;
    std::vector<std::size_t> inputs;
    // conv / avgpool
    std::size_t out_channels = 0;
    std::size_t kernel = 0;
    std::size_t stride = 1;
    std::size_t pad = 0;
    // dense
    std::size_t out_features = 0;
    bool bias = false;
    // input
    Shape shape{};

    bool weighted() const noexcept { return kind == LayerKind::Conv || kind == LayerKind::Dense; }
    bool operator==(const LayerDesc&) const = default;
};

/// Ordered layer graph. Node 0 is the input; every other node names the
/// earlier nodes it consumes, so residual junctions are ordinary Add nodes.
/// The last node produces the class scores.
class NetworkSpec {
public:
    NetworkSpec() = default;
    explicit NetworkSpec(Shape input) {
        LayerDesc d;
        d.kind = LayerKind::Input;
        d.name = "input";
        d.shape = input;
        push(std::move(d));
    }

    std::size_t conv(std::size_t from, std::size_t out_channels, std::size_t kernel,
                     std::size_t stride = 1, std::size_t pad = 0, std::string name = {}) {
        LayerDesc d;
        d.kind = LayerKind::Conv;
        d.inputs = {from};
        d.out_channels = out_channels;
        d.kernel = kernel;
        d.stride = stride;
        d.pad = pad;
        d.name = std::move(name);
        return push(std::move(d));
    }
    std::size_t dense(std::size_t from, std::size_t out_features, bool bias = true, std::string name = {}) {
        LayerDesc d;
        d.kind = LayerKind::Dense;
        d.inputs = {from};
        d.out_features = out_features;
        d.bias = bias;
        d.name = std::move(name);
        return push(std::move(d));
    }
    std::size_t batchnorm(std::size_t from, std::string name = {}) { return simple(LayerKind::BatchNorm, {from}, std::move(name)); }
    std::size_t relu(std::size_t from, std::string name = {}) { return simple(LayerKind::Relu, {from}, std::move(name)); }
    std::size_t add(std::size_t a, std::size_t b, std::string name = {}) { return simple(LayerKind::Add, {a, b}, std::move(name)); }
    std::size_t global_avgpool(std::size_t from, std::string name = {}) { return simple(LayerKind::GlobalAvgPool, {from}, std::move(name)); }
    std::size_t avgpool(std::size_t from, std::size_t kernel, std::string name = {}) {
        LayerDesc d;
        d.kind = LayerKind::AvgPool;
        d.inputs = {from};
        d.kernel = kernel;
        d.stride = kernel;
        d.name = std::move(name);
        return push(std::move(d));
    }

    /// Appends a raw descriptor after checking it against the existing graph.
    std::size_t push(LayerDesc d) {
        if (d.name.empty()) d.name = std::string(to_string(d.kind)) + std::to_string(layers_.size());
        shapes_.push_back(infer_shape(d));
        layers_.push_back(std::move(d));
        return layers_.size() - 1;
    }

    const std::vector<LayerDesc>& layers() const noexcept { return layers_; }
    const LayerDesc& layer(std::size_t i) const { return layers_.at(i); }
    const Shape& shape(std::size_t i) const { return shapes_.at(i); }
    std::size_t size() const noexcept { return layers_.size(); }
    Shape input_shape() const { return shapes_.at(0); }
    std::size_t output() const noexcept { return layers_.size() - 1; }
    std::size_t num_classes() const { return shapes_.back().size(); }

    /// Fan-in (crossbar rows) of a weighted node.
    std::size_t fan_in(std::size_t i) const {
        const auto& d = layers_.at(i);
        const auto& in = shapes_.at(d.inputs.at(0));
        return d.kind == LayerKind::Conv ? in.c * d.kernel * d.kernel : in.size();
    }
    std::size_t fan_out(std::size_t i) const { return shapes_.at(i).c; }

    /// Indices of conv and dense nodes, in graph order.
    std::vector<std::size_t> weighted() const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < layers_.size(); ++i)
            if (layers_[i].weighted()) out.push_back(i);
        return out;
    }

    /// Checks the graph is a usable classifier (ends in a dense layer).
    void validate() const {
        if (layers_.empty() || layers_[0].kind != LayerKind::Input)
            throw DomainError("network: first node must be the input");
        if (layers_.back().kind != LayerKind::Dense)
            throw DomainError("network: last node must be a dense layer producing class scores");
    }

    bool operator==(const NetworkSpec& o) const { return layers_ == o.layers_; }

private:
    std::size_t simple(LayerKind k, std::vector<std::size_t> inputs, std::string name) {
        LayerDesc d;
        d.kind = k;
        d.inputs = std::move(inputs);
        d.name = std::move(name);
        return push(std::move(d));
    }

    Shape infer_shape(const LayerDesc& d) const {
        auto fail = [&](const std::string& m) -> Shape {
            throw DomainError("network: layer '" + d.name + "': " + m);
        };
        if (d.kind == LayerKind::Input) {
            if (!layers_.empty()) fail("input must be the first node");
            if (d.shape.size() == 0) fail("empty input shape");
            return d.shape;
        }
        if (layers_.empty()) fail("graph has no input node");
        const std::size_t arity = d.kind == LayerKind::Add ? 2 : 1;
        if (d.inputs.size() != arity) fail("wrong number of inputs");
        for (auto i : d.inputs)
            if (i >= layers_.size()) fail("input refers to a later or missing node");
        const Shape in = shapes_[d.inputs[0]];
        switch (d.kind) {
            case LayerKind::Conv: {
                if (d.out_channels == 0 || d.kernel == 0 || d.stride == 0) fail("bad conv geometry");
                if (in.h + 2 * d.pad < d.kernel || in.w + 2 * d.pad < d.kernel) fail("kernel larger than padded input");
                return Shape{d.out_channels, (in.h + 2 * d.pad - d.kernel) / d.stride + 1,
                             (in.w + 2 * d.pad - d.kernel) / d.stride + 1};
            }
            case LayerKind::Dense:
                if (d.out_features == 0) fail("dense layer needs outputs");
                return Shape{d.out_features, 1, 1};
            case LayerKind::BatchNorm:
            case LayerKind::Relu:
                return in;
            case LayerKind::Add:
                if (!(shapes_[d.inputs[1]] == in)) fail("residual add joins tensors of different shape");
                return in;
            case LayerKind::AvgPool:
                if (d.kernel == 0 || in.h < d.kernel || in.w < d.kernel) fail("bad pooling window");
                return Shape{in.c, in.h / d.kernel, in.w / d.kernel};
            case LayerKind::GlobalAvgPool:
                return Shape{in.c, 1, 1};
            case LayerKind::Input:
                break;
        }
        return fail("unsupported layer");
    }

    std::vector<LayerDesc> layers_;
    std::vector<Shape> shapes_;
};

/// Desk-scale residual network: 3x3 stem conv, three residual blocks of two
/// 3x3 convs (stride-2 entry, 1x1 projection shortcut), global average pool
/// and a dense classifier. Every conv is followed by batch norm; the ReLU of
/// a block is applied after the residual sum.
inline NetworkSpec mini_resnet(Shape input, std::size_t classes = 10,
                               std::vector<std::size_t> block_channels = {8, 16, 16},
                               std::size_t stem_channels = 8) {
    NetworkSpec s(input);
    std::size_t x = s.relu(s.batchnorm(s.conv(0, stem_channels, 3, 1, 1, "stem"), "stem_bn"));
    for (std::size_t b = 0; b < block_channels.size(); ++b) {
        const std::string p = "block" + std::to_string(b + 1);
        const std::size_t c = block_channels[b];
        std::size_t y = s.relu(s.batchnorm(s.conv(x, c, 3, 2, 1, p + "_conv1"), p + "_bn1"));
        y = s.batchnorm(s.conv(y, c, 3, 1, 1, p + "_conv2"), p + "_bn2");
        std::size_t sc = s.batchnorm(s.conv(x, c, 1, 2, 0, p + "_proj"), p + "_proj_bn");
        x = s.relu(s.add(y, sc, p + "_add"));
    }
    x = s.global_avgpool(x, "gap");
    s.dense(x, classes, true, "fc");
    return s;
}

struct LayerParams {
    Matrix weight;              ///< conv / dense
    std::vector<double> bias;   ///< dense with bias
    BatchNormState bn;          ///< batchnorm

    bool operator==(const LayerParams&) const = default;
};

/// Trainable state of a network, one entry per graph node.
using NetworkParams = std::vector<LayerParams>;

/// He-normal weights, zero biases, identity batch norm.
inline NetworkParams init_params(const NetworkSpec& spec, Rng& rng, double bn_momentum = 0.9) {
    NetworkParams params(spec.size());
    for (std::size_t i = 0; i < spec.size(); ++i) {
        const auto& d = spec.layer(i);
        if (d.weighted()) {
            const std::size_t fan_in = spec.fan_in(i);
            params[i].weight = Matrix(fan_in, spec.fan_out(i));
            const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
            for (auto& w : params[i].weight.data) w = rng.normal(0.0, sd);
            if (d.kind == LayerKind::Dense && d.bias) params[i].bias.assign(spec.fan_out(i), 0.0);
        } else if (d.kind == LayerKind::BatchNorm) {
            params[i].bn = BatchNormState::identity(spec.shape(i).c, bn_momentum);
        }
    }
    return params;
}

enum class BnMode {
    Running,  ///< normalize with running (mu, sigma2)
    Batch,    ///< normalize with mini-batch statistics
};

/// Per-node substitutions applied to a weighted layer during forward.
struct LayerHook {
    /// Weights used instead of the stored ones (perturbed or device-read).
    const Matrix* weight = nullptr;
    Quantizer in_q;
    Quantizer out_q;
    /// Applied to the crossbar output after quantization (e.g. 1 / alpha_hat).
    double out_scale = 1.0;
    /// Replaces W^T x entirely (e.g. a fresh analog read per product).
    std::function<std::vector<double>(std::span<const double>)> matvec;
};

struct ForwardOptions {
    BnMode bn_mode = BnMode::Running;
    /// Either empty or one entry per graph node.
    std::vector<LayerHook> hooks;
};

struct ForwardCache {
    std::size_t n = 0;
    BnMode bn_mode = BnMode::Running;
    std::vector<std::vector<double>> out;      ///< per node output
    std::vector<std::vector<double>> xhat;     ///< batchnorm nodes
    std::vector<std::vector<double>> inv_std;  ///< batchnorm nodes, per channel
    std::vector<BatchStats> batch_stats;       ///< batchnorm nodes in Batch mode
    std::vector<const Matrix*> weights;        ///< weights actually used
    std::vector<double> out_scale;

    std::span<const double> logits() const { return out.back(); }
};

namespace detail {

inline void gather_patch(const double* x, const Shape& in, const LayerDesc& d, std::size_t oy,
                         std::size_t ox, double* patch) {
    const std::size_t k = d.kernel;
    for (std::size_t ci = 0; ci < in.c; ++ci)
        for (std::size_t kr = 0; kr < k; ++kr) {
            const long iy = static_cast<long>(oy * d.stride + kr) - static_cast<long>(d.pad);
            for (std::size_t kc = 0; kc < k; ++kc) {
                const long ix = static_cast<long>(ox * d.stride + kc) - static_cast<long>(d.pad);
                const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<long>(in.h) &&
                                    ix < static_cast<long>(in.w);
                *patch++ = inside ? x[(ci * in.h + static_cast<std::size_t>(iy)) * in.w +
                                      static_cast<std::size_t>(ix)]
                                  : 0.0;
            }
        }
}

inline void scatter_patch(double* dx, const Shape& in, const LayerDesc& d, std::size_t oy,
                          std::size_t ox, const double* dpatch) {
    const std::size_t k = d.kernel;
    for (std::size_t ci = 0; ci < in.c; ++ci)
        for (std::size_t kr = 0; kr < k; ++kr) {
            const long iy = static_cast<long>(oy * d.stride + kr) - static_cast<long>(d.pad);
            for (std::size_t kc = 0; kc < k; ++kc, ++dpatch) {
                const long ix = static_cast<long>(ox * d.stride + kc) - static_cast<long>(d.pad);
                if (iy >= 0 && ix >= 0 && iy < static_cast<long>(in.h) && ix < static_cast<long>(in.w))
                    dx[(ci * in.h + static_cast<std::size_t>(iy)) * in.w + static_cast<std::size_t>(ix)] += *dpatch;
            }
        }
}

/// y[o] = sum_f x[f] * W(f, o)
inline void matvec_t(const Matrix& w, const double* x, double* y) {
    std::fill(y, y + w.cols, 0.0);
    for (std::size_t f = 0; f < w.rows; ++f) {
        const double a = x[f];
        if (a == 0.0) continue;
        const double* wr = w.data.data() + f * w.cols;
        for (std::size_t o = 0; o < w.cols; ++o) y[o] += a * wr[o];
    }
}

}  // namespace detail

/// Runs the graph on `n` samples laid out NCHW in `input`.
inline ForwardCache forward(const NetworkSpec& spec, const NetworkParams& params,
                            std::span<const double> input, std::size_t n,
                            const ForwardOptions& opts = {}) {
    const std::size_t L = spec.size();
    if (params.size() != L) throw DomainError("forward: parameter count does not match network");
    if (input.size() != n * spec.input_shape().size())
        throw DomainError("forward: input size does not match n x input shape");
    if (!opts.hooks.empty() && opts.hooks.size() != L)
        throw DomainError("forward: hooks must be empty or one per node");
    if (opts.bn_mode == BnMode::Batch && n < 2)
        throw DomainError("forward: batch-statistics mode needs at least 2 samples");

    ForwardCache c;
    c.n = n;
    c.bn_mode = opts.bn_mode;
    c.out.resize(L);
    c.xhat.resize(L);
    c.inv_std.resize(L);
    c.batch_stats.resize(L);
    c.weights.assign(L, nullptr);
    c.out_scale.assign(L, 1.0);
    c.out[0].assign(input.begin(), input.end());

    static const LayerHook no_hook{};
    for (std::size_t i = 1; i < L; ++i) {
        const auto& d = spec.layer(i);
        const Shape os = spec.shape(i);
        const Shape is = spec.shape(d.inputs[0]);
        const auto& x = c.out[d.inputs[0]];
        auto& y = c.out[i];
        y.assign(n * os.size(), 0.0);
        switch (d.kind) {
            case LayerKind::Conv:
            case LayerKind::Dense: {
                const LayerHook& hook = opts.hooks.empty() ? no_hook : opts.hooks[i];
                const Matrix& w = hook.weight ? *hook.weight : params[i].weight;
                if (w.rows != spec.fan_in(i) || w.cols != spec.fan_out(i))
                    throw DomainError("forward: weight shape mismatch at '" + d.name + "'");
                c.weights[i] = &w;
                c.out_scale[i] = hook.out_scale;
                std::vector<double> xq;
                const double* xin = x.data();
                if (hook.in_q.enabled) {
                    xq = quantize(hook.in_q, x);
                    xin = xq.data();
                }
                const std::size_t fan_in = w.rows, outs = w.cols;
                std::vector<double> patch(fan_in), acc(outs);
                const std::size_t opix = os.spatial();
                for (std::size_t s = 0; s < n; ++s) {
                    const double* xs = xin + s * is.size();
                    for (std::size_t py = 0; py < os.h; ++py)
                        for (std::size_t px = 0; px < os.w; ++px) {
                            const double* p = xs;
                            if (d.kind == LayerKind::Conv) {
                                detail::gather_patch(xs, is, d, py, px, patch.data());
                                p = patch.data();
                            }
                            if (hook.matvec) {
                                auto r = hook.matvec(std::span<const double>(p, fan_in));
                                std::copy(r.begin(), r.end(), acc.begin());
                            } else {
                                detail::matvec_t(w, p, acc.data());
                            }
                            quantize_inplace(hook.out_q, acc);
                            const std::size_t pix = py * os.w + px;
                            for (std::size_t o = 0; o < outs; ++o) {
                                double v = acc[o] * hook.out_scale;
                                if (!params[i].bias.empty()) v += params[i].bias[o];
                                y[(s * outs + o) * opix + pix] = v;
                            }
                        }
                }
                break;
            }
            case LayerKind::BatchNorm: {
                const auto& st = params[i].bn;
                const std::size_t C = os.c, S = os.spatial();
                std::vector<double> mean, var;
                if (opts.bn_mode == BnMode::Batch) {
                    auto bs = detail::channel_stats(x, n, C, S);
                    mean = bs.mean;
                    var = bs.var;
                    c.batch_stats[i] = std::move(bs);
                } else {
                    mean = st.mu;
                    var = st.sigma2;
                }
                detail::normalize(x, y, n, C, S, mean, var, st);
                auto& xh = c.xhat[i];
                xh.resize(y.size());
                c.inv_std[i].resize(C);
                for (std::size_t ch = 0; ch < C; ++ch) {
                    const double inv = 1.0 / std::sqrt(var[ch] + st.eps);
                    c.inv_std[i][ch] = inv;
                    for (std::size_t s = 0; s < n; ++s) {
                        const std::size_t off = (s * C + ch) * S;
                        for (std::size_t k = 0; k < S; ++k) xh[off + k] = (x[off + k] - mean[ch]) * inv;
                    }
                }
                break;
            }
            case LayerKind::Relu:
                for (std::size_t k = 0; k < y.size(); ++k) y[k] = x[k] > 0.0 ? x[k] : 0.0;
                break;
            case LayerKind::Add: {
                const auto& x2 = c.out[d.inputs[1]];
                for (std::size_t k = 0; k < y.size(); ++k) y[k] = x[k] + x2[k];
                break;
            }
            case LayerKind::GlobalAvgPool: {
                const std::size_t S = is.spatial();
                for (std::size_t s = 0; s < n; ++s)
                    for (std::size_t ch = 0; ch < is.c; ++ch) {
                        const double* p = x.data() + (s * is.c + ch) * S;
                        double sum = 0.0;
                        for (std::size_t k = 0; k < S; ++k) sum += p[k];
                        y[s * is.c + ch] = sum / static_cast<double>(S);
                    }
                break;
            }
            case LayerKind::AvgPool: {
                const std::size_t k = d.kernel;
                const double inv = 1.0 / static_cast<double>(k * k);
                for (std::size_t s = 0; s < n; ++s)
                    for (std::size_t ch = 0; ch < is.c; ++ch)
                        for (std::size_t oy = 0; oy < os.h; ++oy)
                            for (std::size_t ox = 0; ox < os.w; ++ox) {
                                double sum = 0.0;
                                for (std::size_t a = 0; a < k; ++a)
                                    for (std::size_t b = 0; b < k; ++b)
                                        sum += x[((s * is.c + ch) * is.h + oy * k + a) * is.w + ox * k + b];
                                y[((s * os.c + ch) * os.h + oy) * os.w + ox] = sum * inv;
                            }
                break;
            }
            case LayerKind::Input:
                throw DomainError("forward: input node in the middle of the graph");
        }
    }
    return c;
}

/// Mean softmax cross-entropy over the batch. Fills `dlogits` (d loss / d
/// logits) when non-null.
inline double softmax_cross_entropy(std::span<const double> logits, std::span<const int> labels,
                                    std::size_t classes, std::vector<double>* dlogits = nullptr) {
    const std::size_t n = labels.size();
    if (logits.size() != n * classes) throw DomainError("softmax_cross_entropy: shape mismatch");
    if (dlogits) dlogits->assign(logits.size(), 0.0);
    double loss = 0.0;
    std::vector<double> prob(classes);
    for (std::size_t s = 0; s < n; ++s) {
        const double* z = logits.data() + s * classes;
        const double zmax = *std::max_element(z, z + classes);
        double sum = 0.0;
        for (std::size_t k = 0; k < classes; ++k) sum += (prob[k] = std::exp(z[k] - zmax));
        const auto y = static_cast<std::size_t>(labels[s]);
        if (y >= classes) throw DomainError("softmax_cross_entropy: label out of range");
        loss += -(z[y] - zmax - std::log(sum));
        if (dlogits)
            for (std::size_t k = 0; k < classes; ++k)
                (*dlogits)[s * classes + k] = (prob[k] / sum - (k == y ? 1.0 : 0.0)) / static_cast<double>(n);
    }
    return loss / static_cast<double>(n);
}

struct LayerGrads {
    Matrix weight;
    std::vector<double> bias;
    std::vector<double> gamma;
    std::vector<double> beta;
};

using Gradients = std::vector<LayerGrads>;

/// Exact gradients of the mean softmax cross-entropy w.r.t. every weight,
/// bias and batch-norm scale/shift, for the forward pass recorded in `c`.
/// Weight gradients are taken at the weights used in that pass. Quantizers
/// are treated as the identity.
inline Gradients backward(const NetworkSpec& spec, const NetworkParams& params,
                          const ForwardCache& c, std::span<const int> labels, double* loss = nullptr) {
    const std::size_t L = spec.size();
    const std::size_t n = c.n;
    if (labels.size() != n) throw DomainError("backward: label count does not match batch");
    Gradients g(L);
    std::vector<std::vector<double>> dout(L);
    std::vector<double> dlogits;
    const double l = softmax_cross_entropy(c.logits(), labels, spec.num_classes(), &dlogits);
    if (loss) *loss = l;
    dout[L - 1] = std::move(dlogits);

    auto grad_of = [&](std::size_t node) -> std::vector<double>& {
        if (dout[node].empty()) dout[node].assign(c.out[node].size(), 0.0);
        return dout[node];
    };

    for (std::size_t i = L - 1; i >= 1; --i) {
        if (dout[i].empty()) continue;  // node does not influence the loss
        const auto& d = spec.layer(i);
        const Shape os = spec.shape(i);
        const Shape is = spec.shape(d.inputs[0]);
        const auto& dy = dout[i];
        const auto& x = c.out[d.inputs[0]];
        switch (d.kind) {
            case LayerKind::Conv:
            case LayerKind::Dense: {
                const Matrix& w = *c.weights[i];
                const double scale = c.out_scale[i];
                g[i].weight = Matrix(w.rows, w.cols);
                if (!params[i].bias.empty()) g[i].bias.assign(w.cols, 0.0);
                auto& dx = grad_of(d.inputs[0]);
                const std::size_t fan_in = w.rows, outs = w.cols, opix = os.spatial();
                std::vector<double> patch(fan_in), dpatch(fan_in), dys(outs);
                for (std::size_t s = 0; s < n; ++s) {
                    const double* xs = x.data() + s * is.size();
                    double* dxs = dx.data() + s * is.size();
                    for (std::size_t py = 0; py < os.h; ++py)
                        for (std::size_t px = 0; px < os.w; ++px) {
                            const std::size_t pix = py * os.w + px;
                            for (std::size_t o = 0; o < outs; ++o) dys[o] = dy[(s * outs + o) * opix + pix];
                            if (!g[i].bias.empty())
                                for (std::size_t o = 0; o < outs; ++o) g[i].bias[o] += dys[o];
                            for (auto& v : dys) v *= scale;
                            const double* p = xs;
                            if (d.kind == LayerKind::Conv) {
                                detail::gather_patch(xs, is, d, py, px, patch.data());
                                p = patch.data();
                            }
                            double* gw = g[i].weight.data.data();
                            const double* wd = w.data.data();
                            for (std::size_t f = 0; f < fan_in; ++f) {
                                const double a = p[f];
                                double acc = 0.0;
                                double* gr = gw + f * outs;
                                const double* wr = wd + f * outs;
                                for (std::size_t o = 0; o < outs; ++o) {
                                    gr[o] += a * dys[o];
                                    acc += wr[o] * dys[o];
                                }
                                dpatch[f] = acc;
                            }
                            if (d.kind == LayerKind::Conv) {
                                detail::scatter_patch(dxs, is, d, py, px, dpatch.data());
                            } else {
                                for (std::size_t f = 0; f < fan_in; ++f) dxs[f] += dpatch[f];
                            }
                        }
                }
                break;
            }
            case LayerKind::BatchNorm: {
                const auto& st = params[i].bn;
                const std::size_t C = os.c, S = os.spatial();
                const double m = static_cast<double>(n * S);
                const auto& xh = c.xhat[i];
                auto& dx = grad_of(d.inputs[0]);
                g[i].gamma.assign(C, 0.0);
                g[i].beta.assign(C, 0.0);
                for (std::size_t ch = 0; ch < C; ++ch) {
                    double sum_dy = 0.0, sum_dy_xh = 0.0;
                    for (std::size_t s = 0; s < n; ++s) {
                        const std::size_t off = (s * C + ch) * S;
                        for (std::size_t k = 0; k < S; ++k) {
                            sum_dy += dy[off + k];
                            sum_dy_xh += dy[off + k] * xh[off + k];
                        }
                    }
                    g[i].gamma[ch] = sum_dy_xh;
                    g[i].beta[ch] = sum_dy;
                    const double gi = st.gamma[ch] * c.inv_std[i][ch];
                    for (std::size_t s = 0; s < n; ++s) {
                        const std::size_t off = (s * C + ch) * S;
                        for (std::size_t k = 0; k < S; ++k) {
                            if (c.bn_mode == BnMode::Batch)
                                dx[off + k] += gi * (dy[off + k] - sum_dy / m - xh[off + k] * sum_dy_xh / m);
                            else
                                dx[off + k] += gi * dy[off + k];
                        }
                    }
                }
                break;
            }
            case LayerKind::Relu: {
                auto& dx = grad_of(d.inputs[0]);
                const auto& y = c.out[i];
                for (std::size_t k = 0; k < dy.size(); ++k)
                    if (y[k] > 0.0) dx[k] += dy[k];
                break;
            }
            case LayerKind::Add: {
                for (auto src : d.inputs) {
                    auto& dx = grad_of(src);
                    for (std::size_t k = 0; k < dy.size(); ++k) dx[k] += dy[k];
                }
                break;
            }
            case LayerKind::GlobalAvgPool: {
                auto& dx = grad_of(d.inputs[0]);
                const std::size_t S = is.spatial();
                const double inv = 1.0 / static_cast<double>(S);
                for (std::size_t s = 0; s < n; ++s)
                    for (std::size_t ch = 0; ch < is.c; ++ch) {
                        const double v = dy[s * is.c + ch] * inv;
                        double* p = dx.data() + (s * is.c + ch) * S;
                        for (std::size_t k = 0; k < S; ++k) p[k] += v;
                    }
                break;
            }
            case LayerKind::AvgPool: {
                auto& dx = grad_of(d.inputs[0]);
                const std::size_t k = d.kernel;
                const double inv = 1.0 / static_cast<double>(k * k);
                for (std::size_t s = 0; s < n; ++s)
                    for (std::size_t ch = 0; ch < is.c; ++ch)
                        for (std::size_t oy = 0; oy < os.h; ++oy)
                            for (std::size_t ox = 0; ox < os.w; ++ox) {
                                const double v = dy[((s * os.c + ch) * os.h + oy) * os.w + ox] * inv;
                                for (std::size_t a = 0; a < k; ++a)
                                    for (std::size_t b = 0; b < k; ++b)
                                        dx[((s * is.c + ch) * is.h + oy * k + a) * is.w + ox * k + b] += v;
                            }
                break;
            }
            case LayerKind::Input:
                break;
        }
    }
    return g;
}

/// Index of the largest score of each sample.
inline std::vector<int> predict(std::span<const double> logits, std::size_t classes) {
    std::vector<int> out(logits.size() / classes);
    for (std::size_t s = 0; s < out.size(); ++s) {
        const double* z = logits.data() + s * classes;
        out[s] = static_cast<int>(std::max_element(z, z + classes) - z);
    }
    return out;
}

/// Class scores for `n` samples, evaluated in chunks of `batch` samples.
inline std::vector<double> scores(const NetworkSpec& spec, const NetworkParams& params,
                                  std::span<const double> input, std::size_t n,
                                  const ForwardOptions& opts = {}, std::size_t batch = 256) {
    const std::size_t in_size = spec.input_shape().size();
    const std::size_t classes = spec.num_classes();
    std::vector<double> out;
    out.reserve(n * classes);
    for (std::size_t s = 0; s < n; s += batch) {
        const std::size_t m = std::min(batch, n - s);
        auto c = forward(spec, params, input.subspan(s * in_size, m * in_size), m, opts);
        out.insert(out.end(), c.out.back().begin(), c.out.back().end());
    }
    return out;
}

/// Fraction of samples whose top-scoring class equals the label.
inline double accuracy(const NetworkSpec& spec, const NetworkParams& params,
                       std::span<const double> input, std::span<const int> labels,
                       const ForwardOptions& opts = {}, std::size_t batch = 256) {
    if (labels.empty()) return 0.0;
    auto z = scores(spec, params, input, labels.size(), opts, batch);
    auto pred = predict(z, spec.num_classes());
    std::size_t correct = 0;
    for (std::size_t s = 0; s < labels.size(); ++s) correct += pred[s] == labels[s];
    return static_cast<double>(correct) / static_cast<double>(labels.size());
}

}  // namespace pcmsim
