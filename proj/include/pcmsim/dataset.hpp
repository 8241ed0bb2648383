// SPDX-License-Identifier: Apache-2.0
#pragma once

// Image datasets in NCHW double layout: the CIFAR-10 binary batch format, a
// seeded synthetic generator, per-channel standardization and training-time
// augmentation.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "pcmsim/error.hpp"
#include "pcmsim/network.hpp"
#include "pcmsim/rng.hpp"

namespace pcmsim {

struct Dataset {
    Shape shape;
    std::vector<double> x;  ///< size() * shape.size() values
    std::vector<int> y;
    std::size_t classes = 0;

    std::size_t size() const noexcept { return y.size(); }
    std::span<const double> sample(std::size_t i) const {
        return std::span<const double>(x).subspan(i * shape.size(), shape.size());
    }
    /// Samples `indices` in the given order.
    Dataset subset(std::span<const std::size_t> indices) const {
        Dataset d{shape, {}, {}, classes};
        d.x.reserve(indices.size() * shape.size());
        for (auto i : indices) {
            const auto s = sample(i);
            d.x.insert(d.x.end(), s.begin(), s.end());
            d.y.push_back(y.at(i));
        }
        return d;
    }
    Dataset head(std::size_t n) const {
        n = std::min(n, size());
        Dataset d{shape, std::vector<double>(x.begin(), x.begin() + static_cast<std::ptrdiff_t>(n * shape.size())),
                  std::vector<int>(y.begin(), y.begin() + static_cast<std::ptrdiff_t>(n)), classes};
        return d;
    }
    bool operator==(const Dataset&) const = default;
};

struct DataSplit {
    Dataset train;
    Dataset test;
};

// --- CIFAR-10 binary batches -------------------------------------------------

inline constexpr std::size_t kCifarSide = 32;
inline constexpr std::size_t kCifarPixels = 3 * kCifarSide * kCifarSide;
inline constexpr std::size_t kCifarRecord = 1 + kCifarPixels;

/// Parses records of one label byte followed by 3072 pixel bytes (1024 per
/// colour plane, row-major). Pixels are scaled to [0, 1]. `source` prefixes
/// error messages.
inline Dataset parse_cifar10(std::span<const std::uint8_t> bytes, const std::string& source = "cifar10") {
    if (bytes.size() % kCifarRecord != 0) {
        const std::size_t full = bytes.size() / kCifarRecord;
        throw ParseError(source + ": truncated record " + std::to_string(full) + ": expected " +
                             std::to_string((full + 1) * kCifarRecord) + " bytes, got " +
                             std::to_string(bytes.size()),
                         full * kCifarRecord);
    }
    Dataset d{Shape{3, kCifarSide, kCifarSide}, {}, {}, 10};
    const std::size_t n = bytes.size() / kCifarRecord;
    d.x.reserve(n * kCifarPixels);
    d.y.reserve(n);
    for (std::size_t r = 0; r < n; ++r) {
        const std::size_t off = r * kCifarRecord;
        const int label = bytes[off];
        if (label > 9)
            throw ParseError(source + ": label " + std::to_string(label) + " out of range", off);
        d.y.push_back(label);
        for (std::size_t k = 0; k < kCifarPixels; ++k) d.x.push_back(bytes[off + 1 + k] / 255.0);
    }
    return d;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open '" + path.string() + "'");
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline Dataset load_cifar10_file(const std::filesystem::path& path) {
    return parse_cifar10(read_file_bytes(path), path.string());
}

inline void append(Dataset& into, const Dataset& more) {
    if (into.size() == 0) {
        into = more;
        return;
    }
    if (!(into.shape == more.shape)) throw DataError("dataset: cannot append samples of a different shape");
    into.x.insert(into.x.end(), more.x.begin(), more.x.end());
    into.y.insert(into.y.end(), more.y.begin(), more.y.end());
}

/// Loads data_batch_1..5.bin and test_batch.bin from `dir`, keeping the first
/// `max_train` / `max_test` samples (0 keeps all).
inline DataSplit load_cifar10_dir(const std::filesystem::path& dir, std::size_t max_train = 0,
                                  std::size_t max_test = 0) {
    DataSplit s;
    for (int b = 1; b <= 5; ++b) {
        if (max_train && s.train.size() >= max_train) break;
        append(s.train, load_cifar10_file(dir / ("data_batch_" + std::to_string(b) + ".bin")));
    }
    s.test = load_cifar10_file(dir / "test_batch.bin");
    if (max_train) s.train = s.train.head(max_train);
    if (max_test) s.test = s.test.head(max_test);
    return s;
}

/// Directory named by PCMSIM_DATA_ROOT, or `fallback` when unset.
inline std::filesystem::path data_root(const std::filesystem::path& fallback = "data") {
    const char* env = std::getenv("PCMSIM_DATA_ROOT");
    return env && *env ? std::filesystem::path(env) : fallback;
}

// --- synthetic -----------------------------------------------------------------

struct SyntheticSpec {
    std::size_t classes = 10;
    Shape shape{3, 8, 8};
    std::size_t train = 4000;
    std::size_t test = 1000;
    std::size_t prototypes_per_class = 2;
    double noise = 1.0;           ///< per-pixel Gaussian noise around a prototype
    double contrast_jitter = 0.2; ///< sample amplitude ~ U(1 - j, 1 + j)
    std::uint64_t seed = 1;
};

/// Each class is a mixture of smooth random prototype images; a sample is a
/// prototype with random contrast plus white noise. Labels cycle through the
/// classes so every split is balanced.
inline DataSplit make_synthetic(const SyntheticSpec& spec) {
    if (spec.classes < 2 || spec.prototypes_per_class < 1 || spec.shape.size() == 0)
        throw ConfigError("synthetic dataset: need >= 2 classes, >= 1 prototype and a non-empty shape");
    Rng root(spec.seed);
    const Shape sh = spec.shape;
    // Prototypes: white noise blurred by a 3x3 box, then standardized.
    std::vector<std::vector<double>> protos;
    Rng prng = root.child({1});
    for (std::size_t k = 0; k < spec.classes * spec.prototypes_per_class; ++k) {
        std::vector<double> raw(sh.size()), p(sh.size(), 0.0);
        for (auto& v : raw) v = prng.normal(0.0, 1.0);
        for (std::size_t c = 0; c < sh.c; ++c)
            for (std::size_t i = 0; i < sh.h; ++i)
                for (std::size_t j = 0; j < sh.w; ++j) {
                    double sum = 0.0;
                    int cnt = 0;
                    for (int di = -1; di <= 1; ++di)
                        for (int dj = -1; dj <= 1; ++dj) {
                            const long ii = static_cast<long>(i) + di, jj = static_cast<long>(j) + dj;
                            if (ii < 0 || jj < 0 || ii >= static_cast<long>(sh.h) || jj >= static_cast<long>(sh.w)) continue;
                            sum += raw[(c * sh.h + static_cast<std::size_t>(ii)) * sh.w + static_cast<std::size_t>(jj)];
                            ++cnt;
                        }
                    p[(c * sh.h + i) * sh.w + j] = sum / cnt;
                }
        double m = 0.0, q = 0.0;
        for (double v : p) m += v;
        m /= static_cast<double>(p.size());
        for (double v : p) q += (v - m) * (v - m);
        const double sd = std::sqrt(q / static_cast<double>(p.size()));
        for (auto& v : p) v = (v - m) / sd;
        protos.push_back(std::move(p));
    }
    auto draw = [&](std::size_t n, Rng rng) {
        Dataset d{sh, {}, {}, spec.classes};
        d.x.reserve(n * sh.size());
        for (std::size_t s = 0; s < n; ++s) {
            const std::size_t label = s % spec.classes;
            const auto& p = protos[label * spec.prototypes_per_class + rng.index(spec.prototypes_per_class)];
            const double a = rng.uniform(1.0 - spec.contrast_jitter, 1.0 + spec.contrast_jitter);
            for (double v : p) d.x.push_back(a * v + rng.normal(0.0, spec.noise));
            d.y.push_back(static_cast<int>(label));
        }
        return d;
    };
    return {draw(spec.train, root.child({2})), draw(spec.test, root.child({3}))};
}

// --- preprocessing ---------------------------------------------------------------

struct ChannelStats {
    std::vector<double> mean;
    std::vector<double> std;
};

inline ChannelStats channel_stats(const Dataset& d) {
    if (d.size() == 0) throw DataError("dataset: no samples for channel statistics");
    const auto s = detail::channel_stats(d.x, d.size(), d.shape.c, d.shape.spatial());
    ChannelStats r{s.mean, {}};
    for (double v : s.var) r.std.push_back(v > 0.0 ? std::sqrt(v) : 1.0);
    return r;
}

/// Per-channel (x - mean) / std.
inline void normalize(Dataset& d, const ChannelStats& s) {
    const std::size_t C = d.shape.c, S = d.shape.spatial();
    if (s.mean.size() != C || s.std.size() != C) throw DataError("dataset: channel statistics do not match");
    for (std::size_t i = 0; i < d.size(); ++i)
        for (std::size_t c = 0; c < C; ++c) {
            double* p = d.x.data() + (i * C + c) * S;
            for (std::size_t k = 0; k < S; ++k) p[k] = (p[k] - s.mean[c]) / s.std[c];
        }
}

/// Standardizes both splits with the training-set statistics.
inline ChannelStats normalize_split(DataSplit& s) {
    auto st = channel_stats(s.train);
    normalize(s.train, st);
    normalize(s.test, st);
    return st;
}

struct Augmentation {
    std::size_t crop_pad = 0;  ///< random crop after zero padding; 0 disables
    bool flip = false;         ///< random horizontal flip
    std::size_t cutout = 0;    ///< side of a zeroed square; 0 disables
};

/// Augments one CHW sample in place.
inline void augment(std::span<double> x, const Shape& sh, const Augmentation& a, Rng& rng) {
    if (a.crop_pad) {
        const long p = static_cast<long>(a.crop_pad);
        const long dy = static_cast<long>(rng.index(2 * a.crop_pad + 1)) - p;
        const long dx = static_cast<long>(rng.index(2 * a.crop_pad + 1)) - p;
        std::vector<double> src(x.begin(), x.end());
        for (std::size_t c = 0; c < sh.c; ++c)
            for (std::size_t i = 0; i < sh.h; ++i)
                for (std::size_t j = 0; j < sh.w; ++j) {
                    const long si = static_cast<long>(i) + dy, sj = static_cast<long>(j) + dx;
                    const bool in = si >= 0 && sj >= 0 && si < static_cast<long>(sh.h) && sj < static_cast<long>(sh.w);
                    x[(c * sh.h + i) * sh.w + j] =
                        in ? src[(c * sh.h + static_cast<std::size_t>(si)) * sh.w + static_cast<std::size_t>(sj)] : 0.0;
                }
    }
    if (a.flip && rng.index(2) == 1)
        for (std::size_t c = 0; c < sh.c; ++c)
            for (std::size_t i = 0; i < sh.h; ++i) {
                double* row = x.data() + (c * sh.h + i) * sh.w;
                std::reverse(row, row + sh.w);
            }
    if (a.cutout) {
        const long half = static_cast<long>(a.cutout / 2);
        const long cy = static_cast<long>(rng.index(sh.h)), cx = static_cast<long>(rng.index(sh.w));
        for (std::size_t c = 0; c < sh.c; ++c)
            for (long i = std::max(0L, cy - half); i < std::min(static_cast<long>(sh.h), cy - half + static_cast<long>(a.cutout)); ++i)
                for (long j = std::max(0L, cx - half); j < std::min(static_cast<long>(sh.w), cx - half + static_cast<long>(a.cutout)); ++j)
                    x[(c * sh.h + static_cast<std::size_t>(i)) * sh.w + static_cast<std::size_t>(j)] = 0.0;
    }
}

}  // namespace pcmsim
