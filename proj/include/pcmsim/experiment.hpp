// SPDX-License-Identifier: Apache-2.0
#pragma once

// Experiment orchestration: clean baseline training, noise-injection
// retraining, inference over time on simulated devices with optional drift
// compensation, and noise-robustness sweeps. Every random stream is derived
// from the explicit seeds of the config, keyed by what it is used for, so
// any single timestamp or sweep cell can be recomputed in isolation.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "pcmsim/analog_network.hpp"
#include "pcmsim/checkpoint.hpp"
#include "pcmsim/compensation.hpp"
#include "pcmsim/config.hpp"
#include "pcmsim/dataset.hpp"
#include "pcmsim/network.hpp"
#include "pcmsim/noisy_training.hpp"
#include "pcmsim/rng.hpp"
#include "pcmsim/weight_mapping.hpp"

namespace pcmsim {

// Stream purposes, the first key of every derived generator.
namespace stream {
inline constexpr std::uint64_t init = 0;
inline constexpr std::uint64_t baseline_epoch = 1;
inline constexpr std::uint64_t retrain_epoch = 2;
inline constexpr std::uint64_t retrain_probe = 3;
inline constexpr std::uint64_t per_call = 4;
inline constexpr std::uint64_t per_call_adabs = 5;
}  // namespace stream

inline std::uint64_t key_of(double v) noexcept { return std::bit_cast<std::uint64_t>(v); }

/// %.10g, the number format of every CSV the harness writes.
inline std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

// --- data and network ----------------------------------------------------------

/// Loads the configured dataset and standardizes both splits per channel with
/// training-set statistics.
inline DataSplit load_dataset(const ExperimentConfig& cfg) {
    DataSplit s;
    if (cfg.dataset.source == "synthetic") {
        s = make_synthetic(cfg.dataset.synthetic);
    } else {
        const std::filesystem::path dir = cfg.dataset.path.empty() ? data_root() : std::filesystem::path(cfg.dataset.path);
        s = load_cifar10_dir(dir, cfg.dataset.max_train, cfg.dataset.max_test);
    }
    if (s.train.size() == 0 || s.test.size() == 0) throw DataError("dataset: empty training or test split");
    normalize_split(s);
    return s;
}

inline NetworkSpec build_network(const ExperimentConfig& cfg, const Shape& input, std::size_t classes) {
    return mini_resnet(input, classes, cfg.network.block_channels, cfg.network.stem_channels);
}

inline double test_accuracy(const NetworkSpec& spec, const NetworkParams& params, const Dataset& d,
                            const ForwardOptions& opts = {}) {
    return accuracy(spec, params, d.x, d.y, opts);
}

// --- training ------------------------------------------------------------------

struct EpochStats {
    double loss = 0.0;
    double accuracy = 0.0;  ///< under the training-time forward pass
};

/// One pass over a shuffled training set. A trailing batch of one sample is
/// dropped since mini-batch statistics need two.
inline EpochStats train_epoch(const NetworkSpec& spec, NetworkParams& params, const NoisePolicy& policy,
                              const SgdConfig& sgd, OptimizerState& state, const Dataset& data,
                              std::size_t batch_size, const Augmentation& aug, Rng& rng) {
    const std::size_t n = data.size(), in = data.shape.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t k = n; k > 1; --k) std::swap(order[k - 1], order[rng.index(k)]);
    const bool augmenting = aug.crop_pad || aug.flip || aug.cutout;
    double loss = 0.0;
    std::size_t correct = 0, seen = 0;
    std::vector<double> x;
    std::vector<int> y;
    for (std::size_t s = 0; s + 1 < n; s += batch_size) {
        const std::size_t m = std::min(batch_size, n - s);
        if (m < 2) break;
        x.resize(m * in);
        y.resize(m);
        for (std::size_t k = 0; k < m; ++k) {
            const auto src = data.sample(order[s + k]);
            std::span<double> dst(x.data() + k * in, in);
            std::copy(src.begin(), src.end(), dst.begin());
            if (augmenting) augment(dst, data.shape, aug, rng);
            y[k] = data.y[order[s + k]];
        }
        const auto r = train_step(spec, params, policy, sgd, state, x, y, rng);
        loss += r.loss * static_cast<double>(m);
        correct += r.correct;
        seen += m;
    }
    if (seen == 0) throw DataError("training: fewer than two training samples");
    return {loss / static_cast<double>(seen), static_cast<double>(correct) / static_cast<double>(seen)};
}

/// Trains the clean network from He-normal initialization with a step-decay
/// learning rate. Zero epochs returns the initialization.
inline Checkpoint train_baseline(const ExperimentConfig& cfg, const DataSplit& data) {
    const auto& tc = cfg.training;
    Checkpoint ck;
    ck.spec = build_network(cfg, data.train.shape, data.train.classes);
    Rng init = Rng::derive(cfg.seeds.training, {stream::init});
    ck.params = init_params(ck.spec, init);
    ck.seed = cfg.seeds.training;
    const auto policy = NoisePolicy::clean();
    ck.clip_alpha = policy.clip_alpha;
    const auto lrs = step_lr_schedule(tc.lr, tc.lr_decay, tc.lr_step, tc.epochs);
    OptimizerState state;
    for (std::size_t e = 0; e < tc.epochs; ++e) {
        Rng rng = Rng::derive(cfg.seeds.training, {stream::baseline_epoch, e});
        const SgdConfig sgd{lrs[e], tc.momentum, tc.weight_decay};
        const auto st = train_epoch(ck.spec, ck.params, policy, sgd, state, data.train, tc.batch_size, tc.augment, rng);
        ck.history.push_back({e, lrs[e], st.loss, st.accuracy, test_accuracy(ck.spec, ck.params, data.test)});
        ck.epoch = e + 1;
    }
    return ck;
}

/// Training accuracy of `params` under one weight-noise draw per mini-batch,
/// in mini-batch normalization mode: what the first retraining epoch sees.
inline double noisy_train_accuracy(const NetworkSpec& spec, const NetworkParams& params, const NoisePolicy& policy,
                                   const Dataset& data, std::size_t batch_size, Rng& rng) {
    const std::size_t n = data.size(), in = data.shape.size();
    std::size_t correct = 0, seen = 0;
    for (std::size_t s = 0; s + 1 < n; s += batch_size) {
        const std::size_t m = std::min(batch_size, n - s);
        const auto x = std::span<const double>(data.x).subspan(s * in, m * in);
        const auto y = std::span<const int>(data.y).subspan(s, m);
        const auto nf = forward_with_weight_noise(spec, params, policy, x, y, rng, BnMode::Batch);
        const auto pred = predict(nf.cache.logits(), spec.num_classes());
        for (std::size_t k = 0; k < m; ++k) correct += pred[k] == y[k];
        seen += m;
    }
    return seen ? static_cast<double>(correct) / static_cast<double>(seen) : 0.0;
}

/// Learning rates for retraining: the baseline schedule replayed from the
/// first epoch whose training accuracy matches the noisy accuracy of the
/// baseline, padded with its last rate or truncated to `epochs`.
inline std::vector<double> retraining_schedule(const Checkpoint& baseline, double start_accuracy,
                                               std::size_t epochs, bool replicate) {
    if (baseline.history.empty()) throw DataError("retraining: baseline checkpoint has no training history");
    std::vector<double> lr;
    if (replicate) lr = replicate_lr_schedule(baseline.lr_history(), start_accuracy).lr;
    else lr = {baseline.history.back().lr};
    lr.resize(epochs, lr.back());
    return lr;
}

/// Resumes from `baseline` and retrains with weight noise eta_tr, clipping and
/// the replicated learning-rate schedule. eta_tr = 0 still clips and retrains.
inline Checkpoint run_noisy_retraining(const ExperimentConfig& cfg, const Checkpoint& baseline,
                                       const DataSplit& data, double eta_tr) {
    if (baseline.spec.size() == 0 || baseline.params.size() != baseline.spec.size())
        throw DataError("retraining: baseline checkpoint is empty");
    const auto& tc = cfg.training;
    NoisePolicy policy = cfg.noise;
    policy.eta_tr = eta_tr;
    policy.validate();
    Checkpoint ck;
    ck.spec = baseline.spec;
    ck.params = baseline.params;
    ck.eta_tr = eta_tr;
    ck.clip_alpha = policy.clip_alpha;
    ck.seed = cfg.seeds.training;
    // Training clips after every update, so retraining starts from the clipped
    // baseline; the learning-rate probe sees that network too.
    clip_weights(ck.spec, ck.params, policy.clip_alpha);
    Rng probe = Rng::derive(cfg.seeds.training, {stream::retrain_probe, key_of(eta_tr)});
    const double start = noisy_train_accuracy(ck.spec, ck.params, policy, data.train, tc.batch_size, probe);
    const auto lrs = retraining_schedule(baseline, start, cfg.retraining.epochs, cfg.retraining.replicate_lr);
    OptimizerState state;
    for (std::size_t e = 0; e < cfg.retraining.epochs; ++e) {
        Rng rng = Rng::derive(cfg.seeds.training, {stream::retrain_epoch, key_of(eta_tr), e});
        const SgdConfig sgd{lrs[e], tc.momentum, tc.weight_decay};
        const auto st = train_epoch(ck.spec, ck.params, policy, sgd, state, data.train, tc.batch_size, tc.augment, rng);
        ck.history.push_back({e, lrs[e], st.loss, st.accuracy, test_accuracy(ck.spec, ck.params, data.test)});
        ck.epoch = e + 1;
    }
    return ck;
}

inline void write_training_log(std::ostream& out, const Checkpoint& ck) {
    out << "epoch,lr,train_loss,train_accuracy,test_accuracy,eta_tr\n";
    for (const auto& e : ck.history)
        out << e.epoch << ',' << fmt(e.lr) << ',' << fmt(e.train_loss) << ',' << fmt(e.train_accuracy) << ','
            << fmt(e.test_accuracy) << ',' << fmt(ck.eta_tr) << '\n';
}

// --- inference over time -----------------------------------------------------------

struct ResultRow {
    std::size_t run = 0;  ///< seed index
    double t = 0.0;
    Compensation compensation = Compensation::None;
    double accuracy = 0.0;
    double eta_tr = 0.0;
    /// Per-layer alpha_hat summary; NaN when GDC is off.
    double alpha_mean = std::numeric_limits<double>::quiet_NaN();
    double alpha_min = std::numeric_limits<double>::quiet_NaN();
    double alpha_max = std::numeric_limits<double>::quiet_NaN();
};

/// One compensation event for one layer.
struct CompensationEvent {
    std::size_t run = 0;
    double t = 0.0;
    Compensation mode = Compensation::None;
    std::string layer;
    std::string kind;  ///< "gdc" or "adabs"
    double alpha_hat = std::numeric_limits<double>::quiet_NaN();
    double delta_mu_norm = std::numeric_limits<double>::quiet_NaN();
    double delta_sigma2_norm = std::numeric_limits<double>::quiet_NaN();
};

inline std::string fmt_opt(double v) { return std::isnan(v) ? std::string() : fmt(v); }

inline void write_results_header(std::ostream& out) {
    out << "run,t,compensation,accuracy,eta_tr,alpha_mean,alpha_min,alpha_max\n";
}
inline void write_result(std::ostream& out, const ResultRow& r) {
    out << r.run << ',' << fmt(r.t) << ',' << to_string(r.compensation) << ',' << fmt(r.accuracy) << ','
        << fmt(r.eta_tr) << ',' << fmt_opt(r.alpha_mean) << ',' << fmt_opt(r.alpha_min) << ','
        << fmt_opt(r.alpha_max) << '\n';
}
inline void write_events_header(std::ostream& out) {
    out << "run,t,compensation,layer,kind,alpha_hat,delta_mu_norm,delta_sigma2_norm\n";
}
inline void write_event(std::ostream& out, const CompensationEvent& e) {
    out << e.run << ',' << fmt(e.t) << ',' << to_string(e.mode) << ',' << e.layer << ',' << e.kind << ','
        << fmt_opt(e.alpha_hat) << ',' << fmt_opt(e.delta_mu_norm) << ',' << fmt_opt(e.delta_sigma2_norm) << '\n';
}

/// Everything fixed for one run of the inference experiment.
struct InferenceRun {
    std::size_t run = 0;
    AnalogNetwork net;
    NetworkGdc gdc;          ///< t0 references
    QuantizerSet quantizers; ///< empty when quantization is off
    double eta_tr = 0.0;
};

/// Programming stream of a run: one shared programming when bands are
/// produced by re-reading.
inline Rng programming_rng(const ExperimentConfig& cfg, std::size_t run) {
    return Rng::derive(cfg.seeds.programming, {cfg.band_mode == BandMode::Reread ? 0 : run});
}

/// Read stream of every device at time t in a run. Keyed by the exact time,
/// so the GDC reference at t0 equals the grid reading at t0.
inline Rng read_rng(const ExperimentConfig& cfg, std::size_t run, double t) {
    return Rng::derive(cfg.seeds.read, {run, key_of(t)});
}

inline QuantizerSet calibrate_quantizers(const ExperimentConfig& cfg, const NetworkSpec& spec,
                                         const NetworkParams& params, const Dataset& train) {
    if (!cfg.quantization.enabled) return {};
    const auto cal = train.head(cfg.quantization.calibration_samples);
    return calibrate_ranges(spec, params, cal.x, cal.size(), cfg.quantization.percentile, cfg.quantization.bits);
}

/// Wraps programmed layers (fresh or from a snapshot) with their t0 GDC
/// references and quantizers.
inline InferenceRun prepare_run(const ExperimentConfig& cfg, const Checkpoint& ck, const QuantizerSet& q,
                                std::size_t run, AnalogNetwork net) {
    Rng r0 = read_rng(cfg, run, cfg.device.t0);
    const auto at_t0 = net.read(cfg.device.t0, r0);
    auto gdc = NetworkGdc::reference(net, at_t0);
    return InferenceRun{run, std::move(net), std::move(gdc), q, ck.eta_tr};
}

inline AnalogNetwork program_network(const ExperimentConfig& cfg, const Checkpoint& ck, std::size_t run) {
    Rng prog = programming_rng(cfg, run);
    return AnalogNetwork(ck.spec, ck.params, cfg.device, cfg.programming, cfg.iterative, prog);
}

/// Evaluates every configured compensation mode of one run at time t. Depends
/// only on (config, run state, t), which makes timestamps resumable.
inline std::vector<ResultRow> evaluate_timestamp(const ExperimentConfig& cfg, const InferenceRun& ir,
                                                 const DataSplit& data, double t,
                                                 std::vector<CompensationEvent>* events = nullptr) {
    const auto& net = ir.net;
    const auto& spec = net.spec();
    Rng rr = read_rng(cfg, ir.run, t);
    const auto readings = net.read(t, rr);
    std::vector<ResultRow> rows;
    for (const auto mode : cfg.compensation) {
        const bool use_gdc = mode == Compensation::Gdc || mode == Compensation::GdcAdabs;
        const bool use_adabs = mode == Compensation::Adabs || mode == Compensation::GdcAdabs;
        AnalogView view = net.view(readings);
        ResultRow row{ir.run, t, mode, 0.0, ir.eta_tr};
        if (use_gdc) {
            NetworkGdc gdc = ir.gdc;
            gdc.calibrate(net, readings, view);
            double sum = 0.0, lo = std::numeric_limits<double>::infinity(), hi = -lo;
            for (std::size_t k = 0; k < gdc.layers.size(); ++k) {
                const double a = gdc.layers[k].alpha_hat;
                sum += a;
                lo = std::min(lo, a);
                hi = std::max(hi, a);
                if (events) {
                    CompensationEvent e{ir.run, t, mode, net.layers()[k].name, "gdc"};
                    e.alpha_hat = a;
                    events->push_back(e);
                }
            }
            row.alpha_mean = sum / static_cast<double>(gdc.layers.size());
            row.alpha_min = lo;
            row.alpha_max = hi;
        }
        NetworkParams params = net.params();
        const bool per_call = cfg.read_mode == ReadMode::PerCall;
        if (use_adabs) {
            Rng cal = Rng::derive(cfg.seeds.calibration, {ir.run, key_of(t), static_cast<std::uint64_t>(mode)});
            Rng pc = Rng::derive(cfg.seeds.read, {stream::per_call_adabs, ir.run, key_of(t), static_cast<std::uint64_t>(mode)});
            const auto opts = per_call ? net.per_call_options(t, pc, view.out_scale, ir.quantizers, BnMode::Batch)
                                       : net.options(view, ir.quantizers, BnMode::Batch);
            const auto changes = adabs_calibrate(spec, params, opts, data.train.x, data.train.size(), cfg.adabs, cal);
            if (events)
                for (const auto& c : changes) {
                    CompensationEvent e{ir.run, t, mode, spec.layer(c.node).name, "adabs"};
                    e.delta_mu_norm = c.delta_mu_norm;
                    e.delta_sigma2_norm = c.delta_sigma2_norm;
                    events->push_back(e);
                }
        }
        if (per_call) {
            Rng pc = Rng::derive(cfg.seeds.read, {stream::per_call, ir.run, key_of(t), static_cast<std::uint64_t>(mode)});
            row.accuracy = test_accuracy(spec, params, data.test, net.per_call_options(t, pc, view.out_scale, ir.quantizers));
        } else {
            row.accuracy = test_accuracy(spec, params, data.test, net.options(view, ir.quantizers));
        }
        rows.push_back(row);
    }
    return rows;
}

struct InferenceResults {
    std::vector<ResultRow> rows;            ///< ordered by (run, t, mode)
    std::vector<CompensationEvent> events;  ///< same order
};

/// Programs the checkpoint cfg.runs times (or once, re-read per run) and
/// evaluates every grid time.
inline InferenceResults run_inference_over_time(const ExperimentConfig& cfg, const Checkpoint& ck,
                                                const DataSplit& data) {
    InferenceResults res;
    const auto q = calibrate_quantizers(cfg, ck.spec, ck.params, data.train);
    for (std::size_t run = 0; run < cfg.runs; ++run) {
        const auto ir = prepare_run(cfg, ck, q, run, program_network(cfg, ck, run));
        for (double t : cfg.times) {
            auto rows = evaluate_timestamp(cfg, ir, data, t, &res.events);
            res.rows.insert(res.rows.end(), rows.begin(), rows.end());
        }
    }
    return res;
}

/// Mean accuracy over runs at time t for one mode.
inline double mean_accuracy(std::span<const ResultRow> rows, Compensation mode, double t) {
    double s = 0.0;
    std::size_t n = 0;
    for (const auto& r : rows)
        if (r.compensation == mode && r.t == t) {
            s += r.accuracy;
            ++n;
        }
    if (n == 0) throw DomainError("mean_accuracy: no rows for that mode and time");
    return s / static_cast<double>(n);
}

// --- noise-robustness sweep ----------------------------------------------------------

struct SweepCell {
    double eta_tr = 0.0;
    double eta_inf = 0.0;
    double mean = 0.0;
    double std = 0.0;  ///< sample standard deviation over draws
    std::vector<double> draws;
};

/// Test accuracy of `params` under `draws` independent one-shot weight
/// perturbations of relative size eta_inf. eta_inf = 0 evaluates once and
/// repeats the value.
inline std::vector<double> perturbed_accuracies(const ExperimentConfig& cfg, const NetworkSpec& spec,
                                                const NetworkParams& params, const Dataset& test, double eta_tr,
                                                double eta_inf, std::size_t draws) {
    std::vector<double> acc;
    if (eta_inf == 0.0) {
        acc.assign(draws, test_accuracy(spec, params, test));
        return acc;
    }
    NoisePolicy policy = cfg.noise;
    policy.eta_inf = eta_inf;
    for (std::size_t d = 0; d < draws; ++d) {
        Rng rng = Rng::derive(cfg.seeds.perturbation, {key_of(eta_tr), key_of(eta_inf), d});
        acc.push_back(test_accuracy(spec, perturb_for_inference(spec, params, policy, rng), test));
    }
    return acc;
}

/// Accuracy matrix over (eta_tr, eta_inf). Each eta_tr > 0 is retrained once
/// from the baseline; eta_tr = 0 uses the baseline itself.
inline std::vector<SweepCell> sweep_eta(const ExperimentConfig& cfg, const Checkpoint& baseline, const DataSplit& data,
                                        std::span<const double> eta_tr, std::span<const double> eta_inf,
                                        std::size_t draws) {
    if (draws == 0) throw ConfigError("sweep: need at least one perturbation draw");
    std::vector<SweepCell> cells;
    std::map<double, Checkpoint> trained;
    for (double tr : eta_tr) {
        if (!trained.count(tr)) trained.emplace(tr, tr == 0.0 ? baseline : run_noisy_retraining(cfg, baseline, data, tr));
        const auto& ck = trained.at(tr);
        for (double inf : eta_inf) {
            SweepCell c;
            c.eta_tr = tr;
            c.eta_inf = inf;
            c.draws = perturbed_accuracies(cfg, ck.spec, ck.params, data.test, tr, inf, draws);
            for (double a : c.draws) c.mean += a;
            c.mean /= static_cast<double>(draws);
            double q = 0.0;
            for (double a : c.draws) q += (a - c.mean) * (a - c.mean);
            c.std = draws > 1 ? std::sqrt(q / static_cast<double>(draws - 1)) : 0.0;
            cells.push_back(std::move(c));
        }
    }
    return cells;
}

inline void write_sweep(std::ostream& out, std::span<const SweepCell> cells) {
    out << "eta_tr,eta_inf,mean_accuracy,std_accuracy,draws\n";
    for (const auto& c : cells)
        out << fmt(c.eta_tr) << ',' << fmt(c.eta_inf) << ',' << fmt(c.mean) << ',' << fmt(c.std) << ','
            << c.draws.size() << '\n';
}

}  // namespace pcmsim
