// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "pcmsim/error.hpp"
#include "pcmsim/matrix.hpp"

namespace pcmsim {

/// Per-channel batch-norm parameters and running statistics.
struct BatchNormState {
    std::vector<double> mu;
    std::vector<double> sigma2;
    std::vector<double> gamma;
    std::vector<double> beta;
    double p = 0.9;  ///< running-statistics momentum
    double eps = 1e-5;

    static BatchNormState identity(std::size_t channels, double momentum = 0.9) {
        BatchNormState s;
        s.mu.assign(channels, 0.0);
        s.sigma2.assign(channels, 1.0);
        s.gamma.assign(channels, 1.0);
        s.beta.assign(channels, 0.0);
        s.p = momentum;
        return s;
    }

    std::size_t channels() const noexcept { return gamma.size(); }

    bool operator==(const BatchNormState&) const = default;
};

struct BatchStats {
    std::vector<double> mean;
    std::vector<double> var;  ///< biased (1/m) variance
};

namespace detail {

/// Statistics of x laid out as [n][channels][spatial].
inline BatchStats channel_stats(std::span<const double> x, std::size_t n, std::size_t channels,
                                std::size_t spatial) {
    BatchStats s{std::vector<double>(channels, 0.0), std::vector<double>(channels, 0.0)};
    const double m = static_cast<double>(n * spatial);
    for (std::size_t c = 0; c < channels; ++c) {
        double sum = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double* p = x.data() + (i * channels + c) * spatial;
            for (std::size_t k = 0; k < spatial; ++k) sum += p[k];
        }
        const double mean = sum / m;
        double sq = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double* p = x.data() + (i * channels + c) * spatial;
            for (std::size_t k = 0; k < spatial; ++k) sq += (p[k] - mean) * (p[k] - mean);
        }
        s.mean[c] = mean;
        s.var[c] = sq / m;
    }
    return s;
}

/// y = gamma * (x - mean) / sqrt(var + eps) + beta, channel-wise.
inline void normalize(std::span<const double> x, std::span<double> y, std::size_t n,
                      std::size_t channels, std::size_t spatial, std::span<const double> mean,
                      std::span<const double> var, const BatchNormState& st) {
    for (std::size_t c = 0; c < channels; ++c) {
        const double inv = 1.0 / std::sqrt(var[c] + st.eps);
        const double a = st.gamma[c] * inv;
        const double b = st.beta[c] - a * mean[c];
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t off = (i * channels + c) * spatial;
            for (std::size_t k = 0; k < spatial; ++k) y[off + k] = a * x[off + k] + b;
        }
    }
}

}  // namespace detail

struct BatchNormTrainResult {
    Matrix outputs;
    BatchStats stats;
};

/// Training-mode normalization of a (batch x channels) preactivation matrix
/// using the mini-batch mean and biased variance.
inline BatchNormTrainResult batchnorm_train(const BatchNormState& state, const Matrix& batch) {
    if (batch.rows < 2) throw DomainError("batchnorm_train: batch size must be >= 2");
    if (batch.cols != state.channels()) throw DomainError("batchnorm_train: channel mismatch");
    BatchNormTrainResult r;
    r.stats = detail::channel_stats(batch.data, batch.rows, batch.cols, 1);
    r.outputs = Matrix(batch.rows, batch.cols);
    detail::normalize(batch.data, r.outputs.data, batch.rows, batch.cols, 1, r.stats.mean,
                      r.stats.var, state);
    return r;
}

/// mu <- p*mu + (1-p)*mu_B ; sigma2 <- p*sigma2 + (1-p)*sigma2_B
inline void update_running_stats(BatchNormState& state, const BatchStats& stats) {
    if (stats.mean.size() != state.channels() || stats.var.size() != state.channels())
        throw DomainError("update_running_stats: channel mismatch");
    const double p = state.p;
    for (std::size_t c = 0; c < state.channels(); ++c) {
        state.mu[c] = p * state.mu[c] + (1.0 - p) * stats.mean[c];
        state.sigma2[c] = p * state.sigma2[c] + (1.0 - p) * stats.var[c];
    }
}

/// Inference-mode normalization with the running statistics.
inline Matrix batchnorm_infer(const BatchNormState& state, const Matrix& x) {
    if (x.cols != state.channels()) throw DomainError("batchnorm_infer: channel mismatch");
    Matrix y(x.rows, x.cols);
    detail::normalize(x.data, y.data, x.rows, x.cols, 1, state.mu, state.sigma2, state);
    return y;
}

}  // namespace pcmsim
