// SPDX-License-Identifier: Apache-2.0
#pragma once

// Analog matrix-vector multiplication through a differential-pair crossbar,
// with uniform input (DAC) and output (ADC) quantizers.

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "pcmsim/error.hpp"
#include "pcmsim/weight_mapping.hpp"

namespace pcmsim {

/// Uniform quantizer with 2^bits levels spanning [lo, hi] inclusive.
struct Quantizer {
    int bits = 8;
    double lo = 0.0;
    double hi = 1.0;
    bool enabled = false;

    static Quantizer disabled() { return {}; }
    bool operator==(const Quantizer&) const = default;
    static Quantizer uniform(int bits, double lo, double hi) {
        Quantizer q{bits, lo, hi, true};
        q.validate();
        return q;
    }

    void validate() const {
        if (!enabled) return;
        if (bits < 1 || bits > 52) throw DomainError("Quantizer: bits must be in [1, 52]");
        if (!(hi > lo)) throw DomainError("Quantizer: hi must exceed lo");
    }

    double step() const noexcept { return (hi - lo) / (std::ldexp(1.0, bits) - 1.0); }

    /// Clamp to [lo, hi] then round to the nearest level, ties away from zero.
    double apply(double x) const noexcept {
        if (!enabled) return x;
        const double c = std::clamp(x, lo, hi);
        const double pos = (c - lo) / step();
        const double below = std::floor(pos);
        const double frac = pos - below;
        double k = frac < 0.5 ? below : below + 1.0;
        // An exact tie takes the level of larger magnitude.
        if (frac == 0.5 && std::abs(lo + below * step()) > std::abs(lo + (below + 1.0) * step())) k = below;
        return std::min(hi, lo + k * step());
    }
};

inline std::vector<double> quantize(const Quantizer& q, std::span<const double> x) {
    q.validate();
    std::vector<double> out(x.begin(), x.end());
    if (q.enabled)
        for (auto& v : out) v = q.apply(v);
    return out;
}

inline void quantize_inplace(const Quantizer& q, std::span<double> x) {
    if (!q.enabled) return;
    for (auto& v : x) v = q.apply(v);
}

/// Linearly interpolated empirical quantile, `fraction` in [0, 1].
/// Sorts `values` in place.
inline double empirical_quantile(std::vector<double>& values, double fraction) {
    if (values.empty()) throw DomainError("empirical_quantile: no values");
    std::sort(values.begin(), values.end());
    const double pos = fraction * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, values.size() - 1);
    const double w = pos - static_cast<double>(lo);
    return values[lo] + w * (values[hi] - values[lo]);
}

struct Range {
    double lo = 0.0;
    double hi = 0.0;
};

/// Quantization range covering `percentile` of the distribution. One-sided
/// data (all values >= 0) gives [0, q(p)]; otherwise each tail is cut at its
/// own percentile, [q(1 - p), q(p)]. percentile == 100 yields the exact
/// observed min/max.
inline Range percentile_range(std::vector<double> values, double percentile) {
    if (values.empty()) throw DomainError("percentile_range: no values");
    if (!(percentile > 50.0 && percentile <= 100.0))
        throw DomainError("percentile_range: percentile must lie in (50, 100]");
    const double p = percentile / 100.0;
    const bool one_sided = *std::min_element(values.begin(), values.end()) >= 0.0;
    Range r;
    r.hi = empirical_quantile(values, p);
    r.lo = one_sided ? 0.0 : empirical_quantile(values, 1.0 - p);
    if (!(r.hi > r.lo)) throw DegenerateError("percentile_range: degenerate (constant) distribution");
    return r;
}

namespace detail {

inline std::vector<double> differential_product(const Matrix& g_pos, const Matrix& g_neg,
                                                std::span<const double> a, double scale) {
    std::vector<double> y(g_pos.cols, 0.0);
    for (std::size_t r = 0; r < g_pos.rows; ++r) {
        const double ar = a[r];
        if (ar == 0.0) continue;
        const double* gp = g_pos.data.data() + r * g_pos.cols;
        const double* gn = g_neg.data.data() + r * g_neg.cols;
        for (std::size_t c = 0; c < y.size(); ++c) y[c] += (gp[c] - gn[c]) * ar;
    }
    for (auto& v : y) v *= scale;
    return y;
}

}  // namespace detail

/// y = Q_out((G+ - G-)^T Q_in(a) * w_max / g_max) using an existing reading
/// (frozen-read mode).
inline std::vector<double> analog_matvec(const AnalogLayer& layer, const LayerReading& reading,
                                         std::span<const double> input, const Quantizer& in_q,
                                         const Quantizer& out_q) {
    if (input.size() != layer.rows)
        throw DomainError("analog_matvec: input length " + std::to_string(input.size()) +
                          " != crossbar rows " + std::to_string(layer.rows));
    auto a = quantize(in_q, input);
    auto y = detail::differential_product(reading.g_pos, reading.g_neg, a, layer.w_max / layer.g_max);
    out_q.validate();
    quantize_inplace(out_q, y);
    return y;
}

/// Same as above, but every device is read afresh at time t (one physical
/// read event per call).
inline std::vector<double> analog_matvec(const AnalogLayer& layer, std::span<const double> input,
                                         double t, const Quantizer& in_q, const Quantizer& out_q,
                                         const DeviceParams& params, Rng& rng) {
    if (input.size() != layer.rows)
        throw DomainError("analog_matvec: input length " + std::to_string(input.size()) +
                          " != crossbar rows " + std::to_string(layer.rows));
    return analog_matvec(layer, read_layer(layer, params, t, rng), input, in_q, out_q);
}

}  // namespace pcmsim
