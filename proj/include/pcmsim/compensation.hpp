// SPDX-License-Identifier: Apache-2.0
#pragma once

// Accuracy retention for drifting analog weights: global drift compensation
// (one output scale per layer from summed column reads) and adaptive
// batch-norm statistics (running mean and variance re-estimated on the
// analog network).

#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "pcmsim/analog_network.hpp"
#include "pcmsim/error.hpp"
#include "pcmsim/network.hpp"
#include "pcmsim/rng.hpp"
#include "pcmsim/weight_mapping.hpp"

namespace pcmsim {

struct GdcState {
    std::vector<std::size_t> columns;  ///< physical columns summed
    double reference_sum = 0.0;        ///< summed conductance at t0 (uS)
    double alpha_hat = 1.0;
    /// Calibration read voltage. Currents are V * G, so it cancels in the ratio.
    double v_cal = 0.2;
};

/// Records the t0 reference over `columns` (all physical columns when empty).
inline GdcState gdc_reference(const AnalogLayer& layer, const LayerReading& at_t0,
                              std::vector<std::size_t> columns = {}) {
    GdcState s;
    s.columns = columns.empty() ? all_physical_columns(layer) : std::move(columns);
    s.reference_sum = summed_column_conductance(at_t0, s.columns);
    if (!(s.reference_sum > 0.0)) throw DegenerateError("gdc: reference conductance sum is zero");
    return s;
}

/// alpha_hat = sum of column currents now / (V_cal * reference sum).
inline double gdc_calibrate(const LayerReading& reading, GdcState& state) {
    if (!(state.reference_sum > 0.0)) throw DegenerateError("gdc: no reference sum recorded");
    const double current = state.v_cal * summed_column_conductance(reading, state.columns);
    const double alpha = current / (state.v_cal * state.reference_sum);
    if (!(alpha > 0.0)) throw DegenerateError("gdc: summed conductance vanished");
    state.alpha_hat = alpha;
    return alpha;
}

/// Reads the calibration columns of `layer` at time `t` and updates `state`.
inline double gdc_calibrate(const AnalogLayer& layer, GdcState& state, const DeviceParams& params,
                            double t, Rng& rng) {
    return gdc_calibrate(read_layer(layer, params, t, rng), state);
}

inline double gdc_apply(double x, double alpha_hat) {
    if (!(alpha_hat > 0.0)) throw DomainError("gdc_apply: alpha_hat must be > 0");
    return x / alpha_hat;
}

inline std::vector<double> gdc_apply(std::span<const double> x, double alpha_hat) {
    std::vector<double> y(x.size());
    for (std::size_t k = 0; k < x.size(); ++k) y[k] = gdc_apply(x[k], alpha_hat);
    return y;
}

/// Per-layer GDC for a whole analog network.
struct NetworkGdc {
    std::vector<GdcState> layers;  ///< in weighted-layer order

    static NetworkGdc reference(const AnalogNetwork& net, const std::vector<LayerReading>& at_t0) {
        NetworkGdc g;
        for (std::size_t k = 0; k < net.layers().size(); ++k)
            g.layers.push_back(gdc_reference(net.layers()[k], at_t0.at(k)));
        return g;
    }

    /// Updates every alpha_hat from `readings` and folds 1/alpha_hat into `view`.
    void calibrate(const AnalogNetwork& net, const std::vector<LayerReading>& readings, AnalogView& view) {
        const auto w = net.spec().weighted();
        for (std::size_t k = 0; k < w.size(); ++k)
            view.out_scale.at(w[k]) = 1.0 / gdc_calibrate(readings.at(k), layers.at(k));
    }
};

/// p = base^(1/n), the running-statistics momentum for n calibration batches.
inline double optimal_momentum(std::size_t n, double base = 0.015) {
    if (n < 1) throw DomainError("optimal_momentum: n must be >= 1");
    if (!(base > 0.0 && base < 1.0)) throw DomainError("optimal_momentum: base must lie in (0, 1)");
    return std::pow(base, 1.0 / static_cast<double>(n));
}

struct AdabsSettings {
    std::size_t batch_size = 200;   ///< m
    std::size_t batch_count = 13;   ///< n
    double momentum_base = 0.015;
};

/// Change of one batch-norm node during calibration.
struct AdabsLayerChange {
    std::size_t node = 0;
    double delta_mu_norm = 0.0;
    double delta_sigma2_norm = 0.0;
};

/// Re-estimates running mean and variance of every batch-norm node by
/// forwarding n mini-batches of m calibration samples, drawn uniformly without
/// replacement, through the network described by `options` in mini-batch
/// mode. Updates start from the current running statistics and use
/// p = optimal_momentum(n); gamma and beta are left alone.
inline std::vector<AdabsLayerChange> adabs_calibrate(const NetworkSpec& spec, NetworkParams& params,
                                                     const ForwardOptions& options,
                                                     std::span<const double> calibration, std::size_t available,
                                                     const AdabsSettings& settings, Rng& rng) {
    const std::size_t m = settings.batch_size, n = settings.batch_count;
    if (m < 2) throw DomainError("adabs: batch size must be >= 2");
    if (n < 1) throw DomainError("adabs: batch count must be >= 1");
    const std::size_t in_size = spec.input_shape().size();
    if (calibration.size() != available * in_size) throw DomainError("adabs: calibration size mismatch");
    if (m * n > available)
        throw DataError("adabs: " + std::to_string(m * n) + " calibration samples requested, " +
                        std::to_string(available) + " available");

    // Partial Fisher-Yates: the first m*n entries are a uniform sample without replacement.
    std::vector<std::size_t> order(available);
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t k = 0; k < m * n; ++k) std::swap(order[k], order[k + rng.index(available - k)]);

    const double p = optimal_momentum(n, settings.momentum_base);
    std::vector<BatchNormState> before;
    std::vector<std::size_t> bn_nodes;
    for (std::size_t i = 0; i < spec.size(); ++i)
        if (spec.layer(i).kind == LayerKind::BatchNorm) {
            bn_nodes.push_back(i);
            before.push_back(params[i].bn);
        }

    ForwardOptions opts = options;
    opts.bn_mode = BnMode::Batch;
    std::vector<double> batch(m * in_size);
    for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t s = 0; s < m; ++s) {
            const auto src = calibration.subspan(order[b * m + s] * in_size, in_size);
            std::copy(src.begin(), src.end(), batch.begin() + static_cast<std::ptrdiff_t>(s * in_size));
        }
        const auto c = forward(spec, params, batch, m, opts);
        for (auto i : bn_nodes) {
            const double keep = params[i].bn.p;
            params[i].bn.p = p;
            update_running_stats(params[i].bn, c.batch_stats[i]);
            params[i].bn.p = keep;
        }
    }

    std::vector<AdabsLayerChange> changes;
    for (std::size_t k = 0; k < bn_nodes.size(); ++k) {
        const auto& now = params[bn_nodes[k]].bn;
        double dm = 0.0, dv = 0.0;
        for (std::size_t c = 0; c < now.channels(); ++c) {
            dm += (now.mu[c] - before[k].mu[c]) * (now.mu[c] - before[k].mu[c]);
            dv += (now.sigma2[c] - before[k].sigma2[c]) * (now.sigma2[c] - before[k].sigma2[c]);
        }
        changes.push_back({bn_nodes[k], std::sqrt(dm), std::sqrt(dv)});
    }
    return changes;
}

}  // namespace pcmsim
