// SPDX-License-Identifier: Apache-2.0
#pragma once

// Experiment configuration, read from JSON. Every key is optional and
// defaults to the desk-scale preset; unknown keys are rejected so typos do
// not silently fall back to defaults.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>
#include <string>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "pcmsim/analog_network.hpp"
#include "pcmsim/compensation.hpp"
#include "pcmsim/dataset.hpp"
#include "pcmsim/error.hpp"
#include "pcmsim/noisy_training.hpp"
#include "pcmsim/pcm_device.hpp"
#include "pcmsim/weight_mapping.hpp"

namespace pcmsim {

enum class Compensation { None, Gdc, Adabs, GdcAdabs };

inline const char* to_string(Compensation c) {
    switch (c) {
        case Compensation::None: return "none";
        case Compensation::Gdc: return "gdc";
        case Compensation::Adabs: return "adabs";
        case Compensation::GdcAdabs: return "gdc+adabs";
    }
    return "?";
}

inline Compensation compensation_from_string(const std::string& s) {
    for (auto c : {Compensation::None, Compensation::Gdc, Compensation::Adabs, Compensation::GdcAdabs})
        if (s == to_string(c)) return c;
    throw ConfigError("unknown compensation mode '" + s + "' (expected none, gdc, adabs or gdc+adabs)");
}

/// How the spread between inference runs is produced.
enum class BandMode {
    Reprogram,  ///< each run programs fresh devices
    Reread,     ///< one programming, each run draws fresh reads
};

struct NetworkConfig {
    std::string name = "mini_resnet";
    std::vector<std::size_t> block_channels{8, 16, 16};
    std::size_t stem_channels = 8;
};

struct DatasetConfig {
    std::string source = "synthetic";  ///< "synthetic" or "cifar10"
    std::string path;                  ///< cifar10 directory; empty uses the data root
    std::size_t max_train = 2000;      ///< cifar10 subset sizes, 0 keeps all
    std::size_t max_test = 1000;
    /// Desk preset: noise 2.2 keeps a clean MiniResNet near 98% rather than 100%,
    /// so weight perturbations have room to show.
    SyntheticSpec synthetic = [] {
        SyntheticSpec s;
        s.noise = 2.2;
        return s;
    }();
};

struct TrainingConfig {
    std::size_t epochs = 15;
    std::size_t batch_size = 64;
    double lr = 0.1;
    double lr_decay = 0.1;
    std::size_t lr_step = 5;  ///< epochs between decays
    double momentum = 0.9;
    double weight_decay = 1e-4;
    Augmentation augment{};
};

struct RetrainingConfig {
    std::size_t epochs = 8;
    bool replicate_lr = true;  ///< otherwise the last baseline rate throughout
};

struct QuantizationConfig {
    bool enabled = false;
    unsigned bits = 8;
    double percentile = 99.995;
    std::size_t calibration_samples = 1000;
};

struct Seeds {
    std::uint64_t training = 1;
    std::uint64_t programming = 2;
    std::uint64_t read = 3;
    std::uint64_t calibration = 4;
    std::uint64_t perturbation = 5;
};

struct ExperimentConfig {
    NetworkConfig network;
    DatasetConfig dataset;
    TrainingConfig training;
    RetrainingConfig retraining;
    NoisePolicy noise;
    DeviceParams device;
    ProgrammingMode programming = ProgrammingMode::Iterative;
    IterativeSettings iterative;
    QuantizationConfig quantization;
    std::vector<double> times;  ///< seconds since programming
    std::vector<Compensation> compensation{Compensation::None};
    AdabsSettings adabs;
    ReadMode read_mode = ReadMode::Frozen;
    BandMode band_mode = BandMode::Reprogram;
    std::size_t runs = 1;
    Seeds seeds;
    std::string output_dir = "out";

    ExperimentConfig() : times(log_time_grid(25.0, 86400.0, 25)) {}

    /// `points` log-spaced times from `start` to `stop` inclusive.
    static std::vector<double> log_time_grid(double start, double stop, std::size_t points) {
        if (!(start > 0.0) || !(stop > start) || points < 2) throw ConfigError("time grid: need 0 < start < stop and >= 2 points");
        std::vector<double> t(points);
        const double a = std::log(start), b = std::log(stop);
        for (std::size_t k = 0; k < points; ++k) t[k] = std::exp(a + (b - a) * static_cast<double>(k) / static_cast<double>(points - 1));
        t.front() = start;
        t.back() = stop;
        return t;
    }

    void validate() const {
        device.validate();
        noise.validate();
        if (network.name != "mini_resnet") throw ConfigError("network: only 'mini_resnet' is available");
        if (network.block_channels.empty() || network.stem_channels == 0) throw ConfigError("network: channels must be positive");
        for (auto c : network.block_channels)
            if (c == 0) throw ConfigError("network: channels must be positive");
        if (dataset.source != "synthetic" && dataset.source != "cifar10")
            throw ConfigError("dataset.source must be 'synthetic' or 'cifar10'");
        if (training.batch_size < 2) throw ConfigError("training.batch_size must be >= 2");
        if (training.lr_step == 0) throw ConfigError("training.lr_step must be > 0");
        if (!(training.lr > 0.0)) throw ConfigError("training.lr must be > 0");
        if (iterative.max_iter < 1 || !(iterative.tolerance > 0.0)) throw ConfigError("programming: bad iterative settings");
        if (quantization.bits < 1 || quantization.bits > 24) throw ConfigError("quantization.bits must lie in [1, 24]");
        if (!(quantization.percentile > 50.0 && quantization.percentile <= 100.0))
            throw ConfigError("quantization.percentile must lie in (50, 100]");
        if (times.empty()) throw ConfigError("time grid must not be empty");
        if (times.front() < device.t0) throw ConfigError("time grid must start at or after t0");
        for (std::size_t k = 1; k < times.size(); ++k)
            if (!(times[k] > times[k - 1])) throw ConfigError("time grid must be strictly increasing");
        if (compensation.empty()) throw ConfigError("at least one compensation mode is required");
        if (adabs.batch_size < 2 || adabs.batch_count < 1) throw ConfigError("adabs: need batch_size >= 2 and batch_count >= 1");
        if (!(adabs.momentum_base > 0.0 && adabs.momentum_base < 1.0)) throw ConfigError("adabs.momentum_base must lie in (0, 1)");
        if (runs < 1) throw ConfigError("runs must be >= 1");
    }
};

namespace detail {

using nlohmann::json;

/// Rejects keys of `j` outside `allowed`.
inline void check_keys(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
    if (!j.is_object()) throw ConfigError(where + ": expected an object");
    std::set<std::string> ok(allowed.begin(), allowed.end());
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!ok.count(it.key())) throw ConfigError(where + ": unknown key '" + it.key() + "'");
}

template <class T>
void get_to(const json& j, const char* key, T& out, const std::string& where) {
    if (!j.contains(key)) return;
    if constexpr (std::is_unsigned_v<T> && !std::is_same_v<T, bool>) {
        if (!j.at(key).is_number_unsigned())
            throw ConfigError(where + "." + key + ": expected a non-negative integer");
    }
    try {
        j.at(key).get_to(out);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(where + "." + key + ": " + e.what());
    }
}

}  // namespace detail

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
    using detail::check_keys;
    using detail::get_to;
    ExperimentConfig c;
    check_keys(j, "config", {"network", "dataset", "training", "retraining", "noise", "device", "programming",
                             "quantization", "time_grid", "compensation", "adabs", "read_mode", "band_mode", "runs",
                             "seeds", "output_dir"});
    if (j.contains("network")) {
        const auto& n = j["network"];
        check_keys(n, "network", {"name", "block_channels", "stem_channels"});
        get_to(n, "name", c.network.name, "network");
        get_to(n, "block_channels", c.network.block_channels, "network");
        get_to(n, "stem_channels", c.network.stem_channels, "network");
    }
    if (j.contains("dataset")) {
        const auto& d = j["dataset"];
        check_keys(d, "dataset", {"source", "path", "max_train", "max_test", "classes", "shape", "train", "test",
                                  "prototypes_per_class", "noise", "contrast_jitter", "seed"});
        get_to(d, "source", c.dataset.source, "dataset");
        get_to(d, "path", c.dataset.path, "dataset");
        get_to(d, "max_train", c.dataset.max_train, "dataset");
        get_to(d, "max_test", c.dataset.max_test, "dataset");
        auto& s = c.dataset.synthetic;
        get_to(d, "classes", s.classes, "dataset");
        if (d.contains("shape")) {
            std::vector<std::size_t> sh;
            get_to(d, "shape", sh, "dataset");
            if (sh.size() != 3) throw ConfigError("dataset.shape: expected [channels, height, width]");
            s.shape = Shape{sh[0], sh[1], sh[2]};
        }
        get_to(d, "train", s.train, "dataset");
        get_to(d, "test", s.test, "dataset");
        get_to(d, "prototypes_per_class", s.prototypes_per_class, "dataset");
        get_to(d, "noise", s.noise, "dataset");
        get_to(d, "contrast_jitter", s.contrast_jitter, "dataset");
        get_to(d, "seed", s.seed, "dataset");
    }
    if (j.contains("training")) {
        const auto& t = j["training"];
        check_keys(t, "training", {"epochs", "batch_size", "lr", "lr_decay", "lr_step", "momentum", "weight_decay", "augment"});
        get_to(t, "epochs", c.training.epochs, "training");
        get_to(t, "batch_size", c.training.batch_size, "training");
        get_to(t, "lr", c.training.lr, "training");
        get_to(t, "lr_decay", c.training.lr_decay, "training");
        get_to(t, "lr_step", c.training.lr_step, "training");
        get_to(t, "momentum", c.training.momentum, "training");
        get_to(t, "weight_decay", c.training.weight_decay, "training");
        if (t.contains("augment")) {
            const auto& a = t["augment"];
            check_keys(a, "training.augment", {"crop_pad", "flip", "cutout"});
            get_to(a, "crop_pad", c.training.augment.crop_pad, "training.augment");
            get_to(a, "flip", c.training.augment.flip, "training.augment");
            get_to(a, "cutout", c.training.augment.cutout, "training.augment");
        }
    }
    if (j.contains("retraining")) {
        const auto& r = j["retraining"];
        check_keys(r, "retraining", {"epochs", "replicate_lr"});
        get_to(r, "epochs", c.retraining.epochs, "retraining");
        get_to(r, "replicate_lr", c.retraining.replicate_lr, "retraining");
    }
    if (j.contains("noise")) {
        const auto& n = j["noise"];
        check_keys(n, "noise", {"eta_tr", "eta_inf", "exempt_first_last", "clip_alpha"});
        get_to(n, "eta_tr", c.noise.eta_tr, "noise");
        get_to(n, "eta_inf", c.noise.eta_inf, "noise");
        get_to(n, "exempt_first_last", c.noise.exempt_first_last, "noise");
        if (n.contains("clip_alpha") && n["clip_alpha"].is_null())
            c.noise.clip_alpha = std::numeric_limits<double>::infinity();
        else
            get_to(n, "clip_alpha", c.noise.clip_alpha, "noise");
    }
    if (j.contains("device")) {
        const auto& d = j["device"];
        if (d.is_string() && d.get<std::string>() == "ideal") {
            c.device = DeviceParams::ideal();
        } else {
            check_keys(d, "device", {"g_max", "prog_noise_coeffs", "prog_noise_floor", "drift_nu_mean_coeffs",
                                     "drift_nu_std", "read_noise_scale", "read_noise_exponent", "read_noise_law", "t0",
                                     "write_noise_factor"});
            auto& p = c.device;
            get_to(d, "g_max", p.g_max, "device");
            get_to(d, "prog_noise_coeffs", p.prog_noise_coeffs, "device");
            get_to(d, "prog_noise_floor", p.prog_noise_floor, "device");
            get_to(d, "drift_nu_mean_coeffs", p.drift_nu_mean_coeffs, "device");
            get_to(d, "drift_nu_std", p.drift_nu_std, "device");
            get_to(d, "read_noise_scale", p.read_noise_scale, "device");
            get_to(d, "read_noise_exponent", p.read_noise_exponent, "device");
            get_to(d, "t0", p.t0, "device");
            get_to(d, "write_noise_factor", p.write_noise_factor, "device");
            if (d.contains("read_noise_law")) {
                std::string law;
                get_to(d, "read_noise_law", law, "device");
                if (law == "log") p.read_noise_law = ReadNoiseLaw::LogIntegrated;
                else if (law == "power") p.read_noise_law = ReadNoiseLaw::PowerIntegrated;
                else throw ConfigError("device.read_noise_law must be 'log' or 'power'");
            }
        }
    }
    if (j.contains("programming")) {
        const auto& p = j["programming"];
        check_keys(p, "programming", {"mode", "tolerance", "max_iter"});
        if (p.contains("mode")) {
            std::string m;
            get_to(p, "mode", m, "programming");
            if (m == "iterative") c.programming = ProgrammingMode::Iterative;
            else if (m == "direct") c.programming = ProgrammingMode::Direct;
            else throw ConfigError("programming.mode must be 'iterative' or 'direct'");
        }
        get_to(p, "tolerance", c.iterative.tolerance, "programming");
        get_to(p, "max_iter", c.iterative.max_iter, "programming");
    }
    if (j.contains("quantization")) {
        const auto& q = j["quantization"];
        check_keys(q, "quantization", {"enabled", "bits", "percentile", "calibration_samples"});
        get_to(q, "enabled", c.quantization.enabled, "quantization");
        get_to(q, "bits", c.quantization.bits, "quantization");
        get_to(q, "percentile", c.quantization.percentile, "quantization");
        get_to(q, "calibration_samples", c.quantization.calibration_samples, "quantization");
    }
    if (j.contains("time_grid")) {
        const auto& t = j["time_grid"];
        if (t.is_array()) {
            get_to(j, "time_grid", c.times, "config");
        } else {
            check_keys(t, "time_grid", {"start", "stop", "points", "extra"});
            double start = 25.0, stop = 86400.0;
            std::size_t points = 25;
            std::vector<double> extra;
            get_to(t, "start", start, "time_grid");
            get_to(t, "stop", stop, "time_grid");
            get_to(t, "points", points, "time_grid");
            get_to(t, "extra", extra, "time_grid");
            c.times = ExperimentConfig::log_time_grid(start, stop, points);
            c.times.insert(c.times.end(), extra.begin(), extra.end());
        }
    }
    if (j.contains("compensation")) {
        const auto& m = j["compensation"];
        c.compensation.clear();
        if (m.is_string()) {
            c.compensation.push_back(compensation_from_string(m.get<std::string>()));
        } else if (m.is_array()) {
            for (const auto& e : m) {
                if (!e.is_string()) throw ConfigError("compensation: expected mode names");
                c.compensation.push_back(compensation_from_string(e.get<std::string>()));
            }
        } else {
            throw ConfigError("compensation: expected a mode name or a list of them");
        }
    }
    if (j.contains("adabs")) {
        const auto& a = j["adabs"];
        check_keys(a, "adabs", {"batch_size", "batch_count", "momentum_base"});
        get_to(a, "batch_size", c.adabs.batch_size, "adabs");
        get_to(a, "batch_count", c.adabs.batch_count, "adabs");
        get_to(a, "momentum_base", c.adabs.momentum_base, "adabs");
    }
    if (j.contains("read_mode")) {
        std::string m;
        get_to(j, "read_mode", m, "config");
        if (m == "frozen") c.read_mode = ReadMode::Frozen;
        else if (m == "per-call") c.read_mode = ReadMode::PerCall;
        else throw ConfigError("read_mode must be 'frozen' or 'per-call'");
    }
    if (j.contains("band_mode")) {
        std::string m;
        get_to(j, "band_mode", m, "config");
        if (m == "reprogram") c.band_mode = BandMode::Reprogram;
        else if (m == "reread") c.band_mode = BandMode::Reread;
        else throw ConfigError("band_mode must be 'reprogram' or 'reread'");
    }
    get_to(j, "runs", c.runs, "config");
    if (j.contains("seeds")) {
        const auto& s = j["seeds"];
        check_keys(s, "seeds", {"training", "programming", "read", "calibration", "perturbation"});
        get_to(s, "training", c.seeds.training, "seeds");
        get_to(s, "programming", c.seeds.programming, "seeds");
        get_to(s, "read", c.seeds.read, "seeds");
        get_to(s, "calibration", c.seeds.calibration, "seeds");
        get_to(s, "perturbation", c.seeds.perturbation, "seeds");
    }
    get_to(j, "output_dir", c.output_dir, "config");
    c.validate();
    return c;
}

inline ExperimentConfig config_from_string(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    return config_from_json(j);
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return config_from_string(text);
}

}  // namespace pcmsim
