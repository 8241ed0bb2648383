// SPDX-License-Identifier: Apache-2.0
//
// pcmsim: train, map and evaluate networks on simulated PCM crossbars.
// Exit codes: 0 success, 1 internal error, 2 configuration error, 3 data error.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "pcmsim/experiment.hpp"

namespace fs = std::filesystem;
using namespace pcmsim;

namespace {

enum ExitCode { kOk = 0, kInternal = 1, kConfig = 2, kData = 3 };

fs::path in_output_dir(const ExperimentConfig& cfg, const std::string& explicit_path, const std::string& fallback) {
    if (!explicit_path.empty()) return explicit_path;
    fs::create_directories(cfg.output_dir);
    return fs::path(cfg.output_dir) / fallback;
}

std::ofstream open_out(const fs::path& path, bool binary = false) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, binary ? std::ios::binary : std::ios::out);
    if (!out) throw DataError("cannot write '" + path.string() + "'");
    return out;
}

std::string eta_tag(double eta) {
    std::ostringstream os;
    os << "eta" << fmt(eta);
    return os.str();
}

void write_log(const fs::path& path, const Checkpoint& ck) {
    auto out = open_out(path);
    write_training_log(out, ck);
}

void print_summary(const Checkpoint& ck) {
    if (ck.history.empty()) {
        std::cout << "no training epochs run\n";
        return;
    }
    const auto& e = ck.history.back();
    std::cout << "epochs " << ck.history.size() << ", final lr " << fmt(e.lr) << ", train accuracy "
              << fmt(e.train_accuracy) << ", test accuracy " << fmt(e.test_accuracy) << '\n';
}

struct Common {
    std::string config;
    std::string out;
};

int run(int argc, char** argv) {
    CLI::App app{"Simulate analog in-memory inference on phase-change memory crossbars"};
    app.require_subcommand(1);

    Common c;
    std::string checkpoint, snapshot, events;
    double eta = -1.0;
    std::size_t run_index = 0, draws = 100;
    std::vector<double> eta_tr_grid, eta_inf_grid;

    auto* train = app.add_subcommand("train-baseline", "Train the clean network and write a checkpoint");
    train->add_option("-c,--config", c.config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
    train->add_option("-o,--out", c.out, "Checkpoint path (default <output_dir>/baseline.ckpt)");

    auto* retrain = app.add_subcommand("retrain-noisy", "Retrain a baseline with weight-noise injection");
    retrain->add_option("-c,--config", c.config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
    retrain->add_option("-b,--baseline", checkpoint, "Baseline checkpoint")->required();
    retrain->add_option("--eta", eta, "Training noise eta_tr (default from config)");
    retrain->add_option("-o,--out", c.out, "Checkpoint path (default <output_dir>/retrained_eta<eta>.ckpt)");

    auto* map = app.add_subcommand("map", "Program a checkpoint onto devices and write a device snapshot");
    map->add_option("-c,--config", c.config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
    map->add_option("-k,--checkpoint", checkpoint, "Network checkpoint")->required();
    map->add_option("-r,--run", run_index, "Run index selecting the programming stream");
    map->add_option("-o,--out", c.out, "Snapshot path (default <output_dir>/devices_run<r>.snap)");

    auto* infer = app.add_subcommand("infer-over-time", "Evaluate accuracy over the time grid");
    infer->add_option("-c,--config", c.config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
    infer->add_option("-k,--checkpoint", checkpoint, "Network checkpoint")->required();
    infer->add_option("-s,--snapshot", snapshot, "Resume from a device snapshot instead of programming");
    infer->add_option("-r,--run", run_index, "Run index of the snapshot");
    infer->add_option("-o,--out", c.out, "Results CSV (default <output_dir>/accuracy_over_time.csv)");
    infer->add_option("--events", events, "Compensation log CSV (default <output_dir>/compensation.csv)");

    auto* sweep = app.add_subcommand("sweep", "Accuracy matrix over training and inference noise");
    sweep->add_option("-c,--config", c.config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
    sweep->add_option("-b,--baseline", checkpoint, "Baseline checkpoint")->required();
    sweep->add_option("--eta-tr", eta_tr_grid, "Training noise levels")->required()->delimiter(',');
    sweep->add_option("--eta-inf", eta_inf_grid, "Inference noise levels")->required()->delimiter(',');
    sweep->add_option("--draws", draws, "Perturbation draws per cell");
    sweep->add_option("-o,--out", c.out, "Table CSV (default <output_dir>/sweep.csv)");

    auto* quant = app.add_subcommand("calibrate-quantizers", "Record 8-bit input/output ranges per layer");
    quant->add_option("-c,--config", c.config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
    quant->add_option("-k,--checkpoint", checkpoint, "Network checkpoint")->required();
    quant->add_option("-o,--out", c.out, "Ranges CSV (default <output_dir>/quantizers.csv)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kConfig;
    }

    const auto cfg = load_config(c.config);

    if (*train) {
        const auto data = load_dataset(cfg);
        const auto ck = train_baseline(cfg, data);
        const auto path = in_output_dir(cfg, c.out, "baseline.ckpt");
        save_checkpoint(path, ck);
        write_log(fs::path(path).replace_extension(".log.csv"), ck);
        print_summary(ck);
        std::cout << "checkpoint " << path.string() << '\n';
    } else if (*retrain) {
        const double e = eta >= 0.0 ? eta : cfg.noise.eta_tr;
        const auto base = load_checkpoint(checkpoint);
        const auto data = load_dataset(cfg);
        const auto ck = run_noisy_retraining(cfg, base, data, e);
        const auto path = in_output_dir(cfg, c.out, "retrained_" + eta_tag(e) + ".ckpt");
        save_checkpoint(path, ck);
        write_log(fs::path(path).replace_extension(".log.csv"), ck);
        print_summary(ck);
        std::cout << "checkpoint " << path.string() << '\n';
    } else if (*map) {
        const auto ck = load_checkpoint(checkpoint);
        const auto net = program_network(cfg, ck, run_index);
        const auto path = in_output_dir(cfg, c.out, "devices_run" + std::to_string(run_index) + ".snap");
        auto out = open_out(path);
        write_snapshot(out, net.layers());
        std::size_t iterative = 0, converged = 0;
        for (const auto& l : net.layers()) {
            iterative += l.iterative_devices;
            converged += l.converged_devices;
        }
        std::cout << net.layers().size() << " layers programmed";
        if (iterative) std::cout << ", " << converged << "/" << iterative << " iterative writes converged";
        std::cout << "\nsnapshot " << path.string() << '\n';
    } else if (*infer) {
        const auto ck = load_checkpoint(checkpoint);
        const auto data = load_dataset(cfg);
        InferenceResults res;
        if (snapshot.empty()) {
            res = run_inference_over_time(cfg, ck, data);
        } else {
            std::ifstream in(snapshot);
            if (!in) throw DataError("cannot open snapshot '" + snapshot + "'");
            AnalogNetwork net(ck.spec, ck.params, cfg.device, read_snapshot(in));
            const auto q = calibrate_quantizers(cfg, ck.spec, ck.params, data.train);
            const auto ir = prepare_run(cfg, ck, q, run_index, std::move(net));
            for (double t : cfg.times) {
                auto rows = evaluate_timestamp(cfg, ir, data, t, &res.events);
                res.rows.insert(res.rows.end(), rows.begin(), rows.end());
            }
        }
        const auto path = in_output_dir(cfg, c.out, "accuracy_over_time.csv");
        {
            auto out = open_out(path);
            write_results_header(out);
            for (const auto& r : res.rows) write_result(out, r);
        }
        const auto ev_path = in_output_dir(cfg, events, "compensation.csv");
        {
            auto out = open_out(ev_path);
            write_events_header(out);
            for (const auto& e : res.events) write_event(out, e);
        }
        std::cout << res.rows.size() << " rows written to " << path.string() << '\n';
    } else if (*sweep) {
        const auto base = load_checkpoint(checkpoint);
        const auto data = load_dataset(cfg);
        const auto cells = sweep_eta(cfg, base, data, eta_tr_grid, eta_inf_grid, draws);
        const auto path = in_output_dir(cfg, c.out, "sweep.csv");
        auto out = open_out(path);
        write_sweep(out, cells);
        std::cout << cells.size() << " cells written to " << path.string() << '\n';
    } else if (*quant) {
        const auto ck = load_checkpoint(checkpoint);
        const auto data = load_dataset(cfg);
        auto qcfg = cfg;
        qcfg.quantization.enabled = true;
        const auto q = calibrate_quantizers(qcfg, ck.spec, ck.params, data.train);
        const auto path = in_output_dir(cfg, c.out, "quantizers.csv");
        auto out = open_out(path);
        out << "node,layer,bits,in_lo,in_hi,out_lo,out_hi\n";
        for (auto i : ck.spec.weighted())
            out << i << ',' << ck.spec.layer(i).name << ',' << q[i].in.bits << ',' << fmt(q[i].in.lo) << ','
                << fmt(q[i].in.hi) << ',' << fmt(q[i].out.lo) << ',' << fmt(q[i].out.hi) << '\n';
        std::cout << "ranges for " << ck.spec.weighted().size() << " layers written to " << path.string() << '\n';
    }
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kConfig;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return kData;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kInternal;
    }
}
