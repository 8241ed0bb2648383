// SPDX-License-Identifier: Apache-2.0
#pragma once

// Hardware-aware training: Gaussian weight noise in the forward pass only,
// clean-weight SGD with momentum, per-layer clipping to alpha standard
// deviations, and learning-rate replication from a baseline run.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <vector>

#include "pcmsim/error.hpp"
#include "pcmsim/network.hpp"
#include "pcmsim/rng.hpp"

namespace pcmsim {

struct NoisePolicy {
    double eta_tr = 0.038;  ///< training noise, relative to max|W| of the layer
    double eta_inf = 0.0;   ///< inference perturbation, relative to max|W|
    /// First and last weighted layers receive no noise (kept digital).
    bool exempt_first_last = false;
    double clip_alpha = 2.0;  ///< infinity disables clipping

    /// Plain training: no noise, no clipping.
    static NoisePolicy clean() {
        NoisePolicy p;
        p.eta_tr = 0.0;
        p.clip_alpha = std::numeric_limits<double>::infinity();
        return p;
    }

    void validate() const {
        if (!(eta_tr >= 0.0) || !std::isfinite(eta_tr)) throw ConfigError("noise policy: eta_tr must be finite and >= 0");
        if (!(eta_inf >= 0.0) || !std::isfinite(eta_inf)) throw ConfigError("noise policy: eta_inf must be finite and >= 0");
        if (!(clip_alpha > 0.0)) throw ConfigError("noise policy: clip_alpha must be > 0");
    }
};

/// Population standard deviation of the entries of `w`.
inline double weight_std(const Matrix& w) {
    if (w.data.empty()) return 0.0;
    double mean = 0.0;
    for (double v : w.data) mean += v;
    mean /= static_cast<double>(w.data.size());
    double sq = 0.0;
    for (double v : w.data) sq += (v - mean) * (v - mean);
    return std::sqrt(sq / static_cast<double>(w.data.size()));
}

/// eta * max|W|. Zero eta needs no weights; otherwise an all-zero layer has
/// no scale to be relative to.
inline double noise_sigma(double eta, const Matrix& w) {
    if (eta == 0.0) return 0.0;
    const double wmax = max_abs(w.data);
    if (!(wmax > 0.0)) throw DegenerateError("noise sigma: layer weights are all zero");
    return eta * wmax;
}

inline double noise_sigma_for_layer(const NoisePolicy& policy, const Matrix& w) {
    return noise_sigma(policy.eta_tr, w);
}

/// True when `node` is the first or last weighted layer and the policy keeps
/// those layers noise-free.
inline bool noise_exempt(const NetworkSpec& spec, std::size_t node, const NoisePolicy& policy) {
    if (!policy.exempt_first_last) return false;
    const auto w = spec.weighted();
    return !w.empty() && (node == w.front() || node == w.back());
}

/// Copies of every weighted layer with N(0, eta * max|W|) added elementwise.
/// Exempt and untouched layers stay empty.
inline std::vector<Matrix> sample_weight_noise(const NetworkSpec& spec, const NetworkParams& params,
                                               double eta, bool honour_exemption,
                                               const NoisePolicy& policy, Rng& rng) {
    std::vector<Matrix> out(spec.size());
    if (eta == 0.0) return out;
    for (auto i : spec.weighted()) {
        if (honour_exemption && noise_exempt(spec, i, policy)) continue;
        const double sigma = noise_sigma(eta, params[i].weight);
        out[i] = params[i].weight;
        for (auto& v : out[i].data) v += rng.normal(0.0, sigma);
    }
    return out;
}

/// Forward pass through freshly perturbed weights. The noisy copies live in
/// `noisy`; `cache.weights` points into it, so the struct must outlive any
/// use of the cache (moving it keeps the pointers valid).
struct NoisyForward {
    std::vector<Matrix> noisy;
    ForwardCache cache;
    double loss = 0.0;
};

inline NoisyForward forward_with_weight_noise(const NetworkSpec& spec, const NetworkParams& params,
                                              const NoisePolicy& policy, std::span<const double> input,
                                              std::span<const int> labels, Rng& rng,
                                              BnMode bn_mode = BnMode::Batch) {
    NoisyForward r;
    r.noisy = sample_weight_noise(spec, params, policy.eta_tr, true, policy, rng);
    ForwardOptions opts;
    opts.bn_mode = bn_mode;
    opts.hooks.resize(spec.size());
    for (std::size_t i = 0; i < spec.size(); ++i)
        if (!r.noisy[i].data.empty()) opts.hooks[i].weight = &r.noisy[i];
    r.cache = forward(spec, params, input, labels.size(), opts);
    r.loss = softmax_cross_entropy(r.cache.logits(), labels, spec.num_classes());
    return r;
}

struct SgdConfig {
    double lr = 0.1;
    double momentum = 0.9;
    double weight_decay = 0.0;  ///< L2 coefficient on conv / dense weights
};

/// Momentum buffers, shaped like the gradients.
struct OptimizerState {
    Gradients velocity;
};

namespace detail {

inline void sgd_update(std::vector<double>& w, const std::vector<double>& g, std::vector<double>& v,
                       const SgdConfig& cfg, double decay) {
    if (g.empty()) return;
    if (v.size() != w.size()) v.assign(w.size(), 0.0);
    for (std::size_t k = 0; k < w.size(); ++k) {
        v[k] = cfg.momentum * v[k] + g[k] + decay * w[k];
        w[k] -= cfg.lr * v[k];
    }
}

}  // namespace detail

/// Clamps every weighted layer to [-alpha * std(W), alpha * std(W)], with the
/// standard deviation taken before clamping.
inline void clip_weights(const NetworkSpec& spec, NetworkParams& params, double alpha) {
    if (std::isinf(alpha)) return;
    for (auto i : spec.weighted()) {
        auto& w = params[i].weight;
        const double bound = alpha * weight_std(w);
        for (auto& v : w.data) v = std::clamp(v, -bound, bound);
    }
}

/// Applies `grads` to the clean parameters: momentum SGD on weights, biases
/// and batch-norm scale/shift. Momentum buffers are never clipped.
inline void apply_gradients(const NetworkSpec& spec, NetworkParams& params, const Gradients& grads,
                            OptimizerState& state, const SgdConfig& cfg) {
    if (state.velocity.size() != spec.size()) state.velocity.assign(spec.size(), LayerGrads{});
    for (std::size_t i = 0; i < spec.size(); ++i) {
        auto& v = state.velocity[i];
        detail::sgd_update(params[i].weight.data, grads[i].weight.data, v.weight.data, cfg, cfg.weight_decay);
        detail::sgd_update(params[i].bias, grads[i].bias, v.bias, cfg, 0.0);
        detail::sgd_update(params[i].bn.gamma, grads[i].gamma, v.gamma, cfg, 0.0);
        detail::sgd_update(params[i].bn.beta, grads[i].beta, v.beta, cfg, 0.0);
    }
}

struct StepResult {
    double loss = 0.0;
    std::size_t correct = 0;  ///< under the noisy forward pass
};

/// One training step: noisy forward with mini-batch normalization, gradients
/// through the perturbed pass applied to the clean weights, running-stat
/// update, then clipping.
inline StepResult train_step(const NetworkSpec& spec, NetworkParams& params, const NoisePolicy& policy,
                             const SgdConfig& cfg, OptimizerState& state, std::span<const double> input,
                             std::span<const int> labels, Rng& rng) {
    auto nf = forward_with_weight_noise(spec, params, policy, input, labels, rng, BnMode::Batch);
    StepResult r;
    const auto grads = backward(spec, params, nf.cache, labels, &r.loss);
    const auto pred = predict(nf.cache.logits(), spec.num_classes());
    for (std::size_t s = 0; s < labels.size(); ++s) r.correct += pred[s] == labels[s];
    for (std::size_t i = 0; i < spec.size(); ++i)
        if (spec.layer(i).kind == LayerKind::BatchNorm) update_running_stats(params[i].bn, nf.cache.batch_stats[i]);
    apply_gradients(spec, params, grads, state, cfg);
    clip_weights(spec, params, policy.clip_alpha);
    return r;
}

/// One-shot perturbation of every weighted layer by eta_inf * max|W|.
/// Exempt layers are treated as digital and left exact.
inline NetworkParams perturb_for_inference(const NetworkSpec& spec, const NetworkParams& params,
                                           const NoisePolicy& policy, Rng& rng) {
    auto noisy = sample_weight_noise(spec, params, policy.eta_inf, true, policy, rng);
    NetworkParams out = params;
    for (std::size_t i = 0; i < spec.size(); ++i)
        if (!noisy[i].data.empty()) out[i].weight = std::move(noisy[i]);
    return out;
}

/// Step decay: initial * factor^floor(epoch / every), one entry per epoch.
inline std::vector<double> step_lr_schedule(double initial, double factor, std::size_t every,
                                            std::size_t epochs) {
    if (every == 0) throw ConfigError("lr schedule: decay interval must be > 0");
    std::vector<double> lr(epochs);
    for (std::size_t e = 0; e < epochs; ++e) lr[e] = initial * std::pow(factor, static_cast<double>(e / every));
    return lr;
}

struct EpochRecord {
    std::size_t epoch = 0;
    double lr = 0.0;
    double train_accuracy = 0.0;
};

struct ReplicatedSchedule {
    std::size_t start_epoch = 0;  ///< baseline epoch the sequence starts from
    std::vector<double> lr;
};

/// Locates the first baseline epoch whose training accuracy reaches
/// `current_accuracy` and returns the baseline learning rates from there to
/// the end. An accuracy beyond the whole history yields the final rate only.
inline ReplicatedSchedule replicate_lr_schedule(std::span<const EpochRecord> history,
                                                double current_accuracy) {
    if (history.empty()) throw DomainError("replicate_lr_schedule: empty baseline history");
    for (std::size_t k = 1; k < history.size(); ++k)
        if (history[k].epoch <= history[k - 1].epoch)
            throw DomainError("replicate_lr_schedule: history epochs must increase");
    for (std::size_t k = 0; k < history.size(); ++k) {
        if (history[k].train_accuracy >= current_accuracy) {
            ReplicatedSchedule r{history[k].epoch, {}};
            for (std::size_t j = k; j < history.size(); ++j) r.lr.push_back(history[j].lr);
            return r;
        }
    }
    return {history.back().epoch, {history.back().lr}};
}

}  // namespace pcmsim
