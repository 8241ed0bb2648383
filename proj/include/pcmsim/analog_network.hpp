// SPDX-License-Identifier: Apache-2.0
#pragma once

// A trained network whose conv and dense layers live on simulated PCM
// differential pairs. Batch norm, biases and pooling stay digital.

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "pcmsim/crossbar.hpp"
#include "pcmsim/error.hpp"
#include "pcmsim/network.hpp"
#include "pcmsim/pcm_device.hpp"
#include "pcmsim/rng.hpp"
#include "pcmsim/weight_mapping.hpp"

namespace pcmsim {

enum class ReadMode {
    Frozen,   ///< every device read once per evaluation timestamp
    PerCall,  ///< fresh read noise on every matrix-vector product
};

struct LayerQuantizers {
    Quantizer in;
    Quantizer out;
    bool operator==(const LayerQuantizers&) const = default;
};

/// One entry per graph node; only weighted nodes are consulted.
using QuantizerSet = std::vector<LayerQuantizers>;

/// Records percentile ranges of each weighted layer's input activations and
/// bias-free preactivations on the digital network (running batch-norm
/// statistics) and returns enabled quantizers spanning them.
inline QuantizerSet calibrate_ranges(const NetworkSpec& spec, const NetworkParams& params,
                                     std::span<const double> inputs, std::size_t n, double percentile,
                                     unsigned bits = 8, std::size_t batch = 256) {
    if (n == 0 || inputs.empty()) throw DomainError("calibrate_ranges: empty calibration set");
    const std::size_t in_size = spec.input_shape().size();
    if (inputs.size() != n * in_size) throw DomainError("calibrate_ranges: input size does not match n");
    const auto weighted = spec.weighted();
    std::vector<std::vector<double>> acts(spec.size()), pre(spec.size());
    for (std::size_t s = 0; s < n; s += batch) {
        const std::size_t m = std::min(batch, n - s);
        auto c = forward(spec, params, inputs.subspan(s * in_size, m * in_size), m);
        for (auto i : weighted) {
            const auto& x = c.out[spec.layer(i).inputs[0]];
            acts[i].insert(acts[i].end(), x.begin(), x.end());
            const auto& y = c.out[i];
            const auto& bias = params[i].bias;
            const std::size_t outs = spec.fan_out(i), pix = spec.shape(i).spatial();
            for (std::size_t k = 0; k < y.size(); ++k)
                pre[i].push_back(bias.empty() ? y[k] : y[k] - bias[(k / pix) % outs]);
        }
    }
    QuantizerSet q(spec.size());
    for (auto i : weighted) {
        const auto ri = percentile_range(acts[i], percentile);
        const auto ro = percentile_range(pre[i], percentile);
        q[i].in = Quantizer::uniform(bits, ri.lo, ri.hi);
        q[i].out = Quantizer::uniform(bits, ro.lo, ro.hi);
    }
    return q;
}

/// Everything a forward pass needs at one timestamp in frozen-read mode.
struct AnalogView {
    std::vector<Matrix> weights;    ///< effective weights per node (weighted nodes only)
    std::vector<double> out_scale;  ///< per node, applied after output quantization
};

class AnalogNetwork {
public:
    /// Programs every weighted layer of `params` onto fresh devices.
    AnalogNetwork(NetworkSpec spec, NetworkParams params, DeviceParams device, ProgrammingMode mode,
                  IterativeSettings iterative, Rng& rng, double t_prog = 0.0)
        : spec_(std::move(spec)), params_(std::move(params)), device_(std::move(device)) {
        device_.validate();
        if (params_.size() != spec_.size()) throw DomainError("analog network: parameter count mismatch");
        for (auto i : spec_.weighted())
            layers_.push_back(map_layer(params_[i].weight, device_, mode, rng, iterative, t_prog, spec_.layer(i).name));
        index_nodes();
    }

    /// Adopts already programmed layers, e.g. from a device snapshot.
    AnalogNetwork(NetworkSpec spec, NetworkParams params, DeviceParams device, std::vector<AnalogLayer> layers)
        : spec_(std::move(spec)), params_(std::move(params)), device_(std::move(device)), layers_(std::move(layers)) {
        device_.validate();
        const auto w = spec_.weighted();
        if (layers_.size() != w.size()) throw DataError("analog network: snapshot layer count does not match network");
        for (std::size_t k = 0; k < w.size(); ++k)
            if (layers_[k].rows != spec_.fan_in(w[k]) || layers_[k].cols != spec_.fan_out(w[k]) ||
                layers_[k].name != spec_.layer(w[k]).name)
                throw DataError("analog network: snapshot layer '" + layers_[k].name + "' does not match network");
        index_nodes();
    }

    const NetworkSpec& spec() const noexcept { return spec_; }
    const NetworkParams& params() const noexcept { return params_; }
    NetworkParams& params() noexcept { return params_; }
    const DeviceParams& device() const noexcept { return device_; }
    const std::vector<AnalogLayer>& layers() const noexcept { return layers_; }
    /// Programmed layer backing graph node `node`.
    const AnalogLayer& layer_of(std::size_t node) const { return layers_.at(slot_.at(node)); }

    /// Reads every device once at time `t`, in layer order.
    std::vector<LayerReading> read(double t, Rng& rng) const {
        std::vector<LayerReading> r;
        r.reserve(layers_.size());
        for (const auto& l : layers_) r.push_back(read_layer(l, device_, t, rng));
        return r;
    }

    /// Effective weights of a frozen reading, with unit output scale.
    AnalogView view(const std::vector<LayerReading>& readings) const {
        if (readings.size() != layers_.size()) throw DomainError("analog network: reading count mismatch");
        AnalogView v{std::vector<Matrix>(spec_.size()), std::vector<double>(spec_.size(), 1.0)};
        const auto w = spec_.weighted();
        for (std::size_t k = 0; k < w.size(); ++k) v.weights[w[k]] = effective_weights(layers_[k], readings[k]);
        return v;
    }

    /// Forward options routing each weighted node through `view`. The view
    /// must outlive the options.
    ForwardOptions options(const AnalogView& view, const QuantizerSet& q = {},
                           BnMode bn_mode = BnMode::Running) const {
        ForwardOptions o;
        o.bn_mode = bn_mode;
        o.hooks.resize(spec_.size());
        for (auto i : spec_.weighted()) {
            o.hooks[i].weight = &view.weights.at(i);
            o.hooks[i].out_scale = view.out_scale.at(i);
            if (!q.empty()) {
                o.hooks[i].in_q = q.at(i).in;
                o.hooks[i].out_q = q.at(i).out;
            }
        }
        return o;
    }

    /// Forward options that read every device afresh for each product at
    /// time `t`. `rng` and `out_scale` are captured by reference.
    ForwardOptions per_call_options(double t, Rng& rng, const std::vector<double>& out_scale,
                                    const QuantizerSet& q = {}, BnMode bn_mode = BnMode::Running) const {
        ForwardOptions o;
        o.bn_mode = bn_mode;
        o.hooks.resize(spec_.size());
        const Quantizer off;
        for (auto i : spec_.weighted()) {
            const AnalogLayer* layer = &layer_of(i);
            const DeviceParams* dev = &device_;
            Rng* r = &rng;
            o.hooks[i].matvec = [layer, dev, r, t, off](std::span<const double> x) {
                return analog_matvec(*layer, x, t, off, off, *dev, *r);
            };
            o.hooks[i].out_scale = out_scale.empty() ? 1.0 : out_scale.at(i);
            if (!q.empty()) {
                o.hooks[i].in_q = q.at(i).in;
                o.hooks[i].out_q = q.at(i).out;
            }
        }
        return o;
    }

private:
    void index_nodes() {
        slot_.assign(spec_.size(), static_cast<std::size_t>(-1));
        const auto w = spec_.weighted();
        for (std::size_t k = 0; k < w.size(); ++k) slot_[w[k]] = k;
    }

    NetworkSpec spec_;
    NetworkParams params_;
    DeviceParams device_;
    std::vector<AnalogLayer> layers_;
    std::vector<std::size_t> slot_;
};

}  // namespace pcmsim
