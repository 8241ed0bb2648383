// SPDX-License-Identifier: Apache-2.0
#pragma once

// Signed weights <-> differential pairs of PCM devices. A weight W of a layer
// with maximum absolute weight w_max targets |W| * g_max / w_max on the
// device matching its sign; the partner device targets 0 uS.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "pcmsim/error.hpp"
#include "pcmsim/matrix.hpp"
#include "pcmsim/pcm_device.hpp"
#include "pcmsim/rng.hpp"

namespace pcmsim {

enum class ProgrammingMode { Direct, Iterative };

struct IterativeSettings {
    double tolerance = 0.25;  ///< uS
    int max_iter = 55;
};

/// A layer's weights realized on a crossbar of differential device pairs.
/// Device matrices are row-major with the layer's (rows x cols) shape; rows
/// are crossbar inputs, columns are outputs.
struct AnalogLayer {
    std::string name;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<ProgrammedDevice> pos;
    std::vector<ProgrammedDevice> neg;
    double w_max = 0.0;
    double g_max = 0.0;
    /// Devices that went through program-and-verify, and how many converged.
    std::size_t iterative_devices = 0;
    std::size_t converged_devices = 0;

    const ProgrammedDevice& pos_at(std::size_t r, std::size_t c) const { return pos[r * cols + c]; }
    const ProgrammedDevice& neg_at(std::size_t r, std::size_t c) const { return neg[r * cols + c]; }
    /// Physical columns: [0, cols) are the G+ columns, [cols, 2*cols) the G- columns.
    std::size_t physical_columns() const noexcept { return 2 * cols; }

    bool operator==(const AnalogLayer&) const = default;
};

/// Device conductances of a whole layer sampled at one instant.
struct LayerReading {
    Matrix g_pos;
    Matrix g_neg;
};

/// Conductance target for weight `w` on a layer with scale `w_max`.
/// Computed as (|w| / w_max) * g_max so that |w| == w_max yields g_max exactly.
inline double weight_to_target(double w, double w_max, double g_max) noexcept {
    return (std::abs(w) / w_max) * g_max;
}

inline double max_abs(std::span<const double> values) noexcept {
    double m = 0.0;
    for (double v : values) m = std::max(m, std::abs(v));
    return m;
}

inline AnalogLayer map_layer(const Matrix& weights, const DeviceParams& params,
                             ProgrammingMode mode, Rng& rng, IterativeSettings iterative = {},
                             double t_prog = 0.0, std::string name = {}) {
    if (weights.empty()) throw DomainError("map_layer: empty weight matrix");
    const double w_max = max_abs(weights.data);
    if (!(w_max > 0.0)) throw DegenerateError("map_layer: all-zero weight matrix has no scale");

    AnalogLayer layer;
    layer.name = std::move(name);
    layer.rows = weights.rows;
    layer.cols = weights.cols;
    layer.w_max = w_max;
    layer.g_max = params.g_max;
    layer.pos.resize(weights.size());
    layer.neg.resize(weights.size());

    // The sign-matching device is programmed per `mode`; the partner device
    // receives a single RESET-style shot towards 0 uS.
    auto write = [&](double target) {
        if (mode == ProgrammingMode::Iterative && target > 0.0) {
            auto r = program_iterative(params, target, iterative.tolerance, iterative.max_iter,
                                       rng, t_prog);
            ++layer.iterative_devices;
            if (r.converged) ++layer.converged_devices;
            return r.device;
        }
        return program(params, target, rng, t_prog);
    };

    for (std::size_t i = 0; i < weights.size(); ++i) {
        const double w = weights.data[i];
        const double target = weight_to_target(w, w_max, params.g_max);
        layer.pos[i] = write(w > 0.0 ? target : 0.0);
        layer.neg[i] = write(w < 0.0 ? target : 0.0);
    }
    return layer;
}

/// Reads every device of the layer once at absolute time t.
inline LayerReading read_layer(const AnalogLayer& layer, const DeviceParams& params, double t,
                               Rng& rng) {
    LayerReading out{Matrix(layer.rows, layer.cols), Matrix(layer.rows, layer.cols)};
    for (std::size_t i = 0; i < layer.pos.size(); ++i) {
        out.g_pos.data[i] = read(layer.pos[i], params, t, rng);
        out.g_neg.data[i] = read(layer.neg[i], params, t, rng);
    }
    return out;
}

/// (G+ - G-) * w_max / g_max for a reading already taken.
inline Matrix effective_weights(const AnalogLayer& layer, const LayerReading& reading) {
    Matrix w(layer.rows, layer.cols);
    const double scale = layer.w_max / layer.g_max;
    for (std::size_t i = 0; i < w.size(); ++i)
        w.data[i] = (reading.g_pos.data[i] - reading.g_neg.data[i]) * scale;
    return w;
}

inline Matrix effective_weights(const AnalogLayer& layer, const DeviceParams& params, double t,
                                Rng& rng) {
    return effective_weights(layer, read_layer(layer, params, t, rng));
}

inline std::vector<std::size_t> all_physical_columns(const AnalogLayer& layer) {
    std::vector<std::size_t> cols(layer.physical_columns());
    for (std::size_t i = 0; i < cols.size(); ++i) cols[i] = i;
    return cols;
}

/// Sum of every device conductance in the selected physical columns.
inline double summed_column_conductance(const LayerReading& reading,
                                        std::span<const std::size_t> columns) {
    if (columns.empty()) throw DomainError("summed_column_conductance: empty column selection");
    const std::size_t cols = reading.g_pos.cols;
    double total = 0.0;
    for (std::size_t pc : columns) {
        if (pc >= 2 * cols) throw DomainError("summed_column_conductance: column out of range");
        const Matrix& g = pc < cols ? reading.g_pos : reading.g_neg;
        const std::size_t c = pc < cols ? pc : pc - cols;
        for (std::size_t r = 0; r < g.rows; ++r) total += g(r, c);
    }
    return total;
}

/// Reads only the selected physical columns at time t and sums them.
inline double summed_column_conductance(const AnalogLayer& layer, std::span<const std::size_t> columns,
                                        const DeviceParams& params, double t, Rng& rng) {
    if (columns.empty()) throw DomainError("summed_column_conductance: empty column selection");
    double total = 0.0;
    for (std::size_t pc : columns) {
        if (pc >= layer.physical_columns())
            throw DomainError("summed_column_conductance: column out of range");
        const bool positive = pc < layer.cols;
        const std::size_t c = positive ? pc : pc - layer.cols;
        for (std::size_t r = 0; r < layer.rows; ++r)
            total += read(positive ? layer.pos_at(r, c) : layer.neg_at(r, c), params, t, rng);
    }
    return total;
}

// ---------------------------------------------------------------------------
// Snapshot format (text, exact):
//
//   pcmsim-snapshot 1
//   layers <count>
//   layer <name> <rows> <cols> <w_max> <g_max> <iterative_devices> <converged_devices>
//   <g_target> <g_prog> <nu> <t_prog>      x rows*cols   (G+ devices, row-major)
//   <g_target> <g_prog> <nu> <t_prog>      x rows*cols   (G- devices, row-major)
//   ... next layer ...
//   end
//
// Reals are C99 hexadecimal floating literals so a snapshot reloads
// bit-identically. Layer names must not contain whitespace.
// ---------------------------------------------------------------------------

namespace detail {

inline std::string hexfloat(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%a", v);
    return buf;
}

class TokenReader {
public:
    explicit TokenReader(std::istream& in) : in_(in) {}

    std::string next(const char* what) {
        std::string tok;
        const auto pos = offset();
        if (!(in_ >> tok)) throw ParseError(std::string("snapshot: expected ") + what, pos);
        return tok;
    }

    void expect(const std::string& literal) {
        const auto pos = offset();
        auto tok = next(literal.c_str());
        if (tok != literal)
            throw ParseError("snapshot: expected '" + literal + "', found '" + tok + "'", pos);
    }

    double real(const char* what) {
        const auto pos = offset();
        auto tok = next(what);
        char* end = nullptr;
        const double v = std::strtod(tok.c_str(), &end);
        if (end == tok.c_str() || *end != '\0')
            throw ParseError(std::string("snapshot: bad real for ") + what + ": '" + tok + "'", pos);
        return v;
    }

    std::size_t count(const char* what) {
        const auto pos = offset();
        auto tok = next(what);
        std::size_t used = 0;
        unsigned long long v = 0;
        try {
            v = std::stoull(tok, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used != tok.size())
            throw ParseError(std::string("snapshot: bad count for ") + what + ": '" + tok + "'", pos);
        return static_cast<std::size_t>(v);
    }

    std::uint64_t offset() {
        in_ >> std::ws;
        const auto p = in_.tellg();
        return p < 0 ? 0 : static_cast<std::uint64_t>(p);
    }

private:
    std::istream& in_;
};

}  // namespace detail

inline void write_snapshot(std::ostream& out, std::span<const AnalogLayer> layers) {
    out << "pcmsim-snapshot 1\nlayers " << layers.size() << '\n';
    for (const auto& l : layers) {
        out << "layer " << (l.name.empty() ? std::string("-") : l.name) << ' ' << l.rows << ' '
            << l.cols << ' ' << detail::hexfloat(l.w_max) << ' ' << detail::hexfloat(l.g_max)
            << ' ' << l.iterative_devices << ' ' << l.converged_devices << '\n';
        for (const auto* devs : {&l.pos, &l.neg})
            for (const auto& d : *devs)
                out << detail::hexfloat(d.g_target) << ' ' << detail::hexfloat(d.g_prog) << ' '
                    << detail::hexfloat(d.nu) << ' ' << detail::hexfloat(d.t_prog) << '\n';
    }
    out << "end\n";
}

inline std::vector<AnalogLayer> read_snapshot(std::istream& in) {
    detail::TokenReader tr(in);
    tr.expect("pcmsim-snapshot");
    const auto version_pos = tr.offset();
    if (tr.count("version") != 1) throw ParseError("snapshot: unsupported version", version_pos);
    tr.expect("layers");
    const std::size_t n = tr.count("layer count");
    std::vector<AnalogLayer> layers(n);
    for (auto& l : layers) {
        tr.expect("layer");
        l.name = tr.next("layer name");
        if (l.name == "-") l.name.clear();
        l.rows = tr.count("rows");
        l.cols = tr.count("cols");
        l.w_max = tr.real("w_max");
        l.g_max = tr.real("g_max");
        l.iterative_devices = tr.count("iterative_devices");
        l.converged_devices = tr.count("converged_devices");
        for (auto* devs : {&l.pos, &l.neg}) {
            devs->resize(l.rows * l.cols);
            for (auto& d : *devs) {
                d.g_target = tr.real("g_target");
                d.g_prog = tr.real("g_prog");
                d.nu = tr.real("nu");
                d.t_prog = tr.real("t_prog");
            }
        }
    }
    tr.expect("end");
    return layers;
}

}  // namespace pcmsim
