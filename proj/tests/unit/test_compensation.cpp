// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include "pcmsim/compensation.hpp"
#include "pcmsim/experiment.hpp"

#include <algorithm>
#include <cmath>

using namespace pcmsim;
using Catch::Approx;

namespace {

/// Exact programming, no read noise, every device drifting with the same nu.
DeviceParams uniform_drift(double nu) {
    auto p = DeviceParams::ideal();
    p.drift_nu_mean_coeffs = {nu};
    return p;
}

/// Time at which uniform drift with `nu` has scaled every device by `factor`.
double time_for_factor(double factor, double nu, double t0 = 25.0) { return t0 * std::pow(factor, -1.0 / nu); }

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng) {
    Matrix m(r, c);
    for (auto& v : m.data) v = rng.normal(0.0, 0.3);
    return m;
}

struct Trained {
    NetworkSpec spec;
    NetworkParams params;
    DataSplit data;
};

/// A small MiniResNet trained on an easy synthetic task, shared by the
/// network-level tests.
const Trained& trained() {
    static const Trained t = [] {
        SyntheticSpec s;
        s.classes = 4;
        s.shape = Shape{3, 8, 8};
        s.train = 2000;
        s.test = 600;
        s.noise = 1.5;
        s.seed = 11;
        Trained r{mini_resnet(s.shape, s.classes, {4, 8}, 4), {}, make_synthetic(s)};
        normalize_split(r.data);
        Rng init(5);
        r.params = init_params(r.spec, init);
        OptimizerState state;
        for (std::size_t e = 0; e < 4; ++e) {
            Rng rng(100 + e);
            train_epoch(r.spec, r.params, NoisePolicy::clean(), SgdConfig{e < 3 ? 0.1 : 0.01, 0.9, 1e-4}, state,
                        r.data.train, 32, {}, rng);
        }
        return r;
    }();
    return t;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
    REQUIRE(a.size() == b.size());
    double d = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) d = std::max(d, std::abs(a[k] - b[k]));
    return d;
}

}  // namespace

TEST_CASE("gdc reference and calibration on one layer", "[compensation][gdc]") {
    Rng wr(1);
    const auto w = random_matrix(12, 5, wr);
    const auto dev = uniform_drift(0.06);
    Rng pr(2);
    const auto layer = map_layer(w, dev, ProgrammingMode::Direct, pr);
    Rng rr(3);
    const auto at_t0 = read_layer(layer, dev, dev.t0, rr);
    auto state = gdc_reference(layer, at_t0);
    CHECK(state.columns.size() == 10);

    SECTION("self-ratio at t0") {
        CHECK(gdc_calibrate(at_t0, state) == 1.0);
    }
    SECTION("uniform factor 0.8") {
        const double t = time_for_factor(0.8, 0.06);
        const double a = gdc_calibrate(layer, state, dev, t, rr);
        CHECK(a == Approx(0.8).epsilon(1e-12));
        CHECK(state.alpha_hat == a);
    }
    SECTION("power-law factor after t / t0 = 3456") {
        const double a = gdc_calibrate(layer, state, dev, 3456.0 * dev.t0, rr);
        CHECK(a == Approx(std::exp(-0.06 * std::log(3456.0))).epsilon(1e-12));
        CHECK(a == Approx(0.6133).margin(5e-5));
    }
    SECTION("any column subset sees the same uniform factor") {
        auto sub = gdc_reference(layer, at_t0, {0, 3, 7});
        const double t = time_for_factor(0.7, 0.06);
        CHECK(gdc_calibrate(read_layer(layer, dev, t, rr), sub) == Approx(0.7).epsilon(1e-12));
    }
    SECTION("read voltage cancels") {
        state.v_cal = 0.05;
        const double t = time_for_factor(0.9, 0.06);
        CHECK(gdc_calibrate(read_layer(layer, dev, t, rr), state) == Approx(0.9).epsilon(1e-12));
    }
}

TEST_CASE("gdc rejects degenerate references", "[compensation][gdc]") {
    const auto dev = DeviceParams::ideal();
    Rng rng(1);
    Matrix w(3, 3, 0.0);
    w(0, 0) = 1.0;
    const auto layer = map_layer(w, dev, ProgrammingMode::Direct, rng);
    const LayerReading dark{Matrix(3, 3, 0.0), Matrix(3, 3, 0.0)};
    CHECK_THROWS_AS(gdc_reference(layer, dark), DegenerateError);
    // Columns holding only RESET devices carry no reference current.
    CHECK_THROWS_AS(gdc_reference(layer, read_layer(layer, dev, dev.t0, rng), {1, 2}), DegenerateError);
    auto ok = gdc_reference(layer, read_layer(layer, dev, dev.t0, rng));
    CHECK_THROWS_AS(gdc_calibrate(dark, ok), DegenerateError);
    GdcState empty;
    CHECK_THROWS_AS(gdc_calibrate(read_layer(layer, dev, dev.t0, rng), empty), DegenerateError);
}

TEST_CASE("gdc_apply", "[compensation][gdc]") {
    CHECK(gdc_apply(2.5, 1.0) == 2.5);
    CHECK(gdc_apply(3.0, 0.5) == 6.0);
    const std::vector<double> x{1.0, -2.0, 0.0};
    CHECK(gdc_apply(x, 0.25) == std::vector<double>{4.0, -8.0, 0.0});
    CHECK_THROWS_AS(gdc_apply(1.0, 0.0), DomainError);
    CHECK_THROWS_AS(gdc_apply(1.0, -0.3), DomainError);
}

TEST_CASE("gdc cancels uniform drift on a crossbar exactly", "[compensation][gdc]") {
    const auto dev = uniform_drift(0.05);
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(seed);
        const auto w = random_matrix(1 + rng.index(30), 1 + rng.index(10), rng);
        const auto layer = map_layer(w, dev, ProgrammingMode::Direct, rng);
        std::vector<double> x(w.rows);
        for (auto& v : x) v = rng.normal(0.0, 1.0);
        const auto r0 = read_layer(layer, dev, dev.t0, rng);
        auto state = gdc_reference(layer, r0);
        const double t = dev.t0 * std::pow(10.0, rng.uniform(1.0, 6.0));
        const auto rt = read_layer(layer, dev, t, rng);
        const double a = gdc_calibrate(rt, state);
        const Quantizer off;
        const auto y0 = analog_matvec(layer, r0, x, off, off);
        const auto yt = gdc_apply(analog_matvec(layer, rt, x, off, off), a);
        CHECK(max_abs_diff(y0, yt) < 1e-9);
    }
}

TEST_CASE("gdc on a whole network: exact outputs and identical classes", "[compensation][gdc]") {
    const auto& tr = trained();
    const auto dev = uniform_drift(0.06);
    Rng prog(7);
    AnalogNetwork net(tr.spec, tr.params, dev, ProgrammingMode::Direct, {}, prog);
    Rng rr(8);
    const auto r0 = net.read(dev.t0, rr);
    auto gdc = NetworkGdc::reference(net, r0);
    const auto v0 = net.view(r0);
    const auto& test = tr.data.test;
    const auto s0 = scores(tr.spec, tr.params, test.x, test.size(), net.options(v0));
    for (double factor : {0.9, 0.6, 0.3}) {
        const auto rt = net.read(time_for_factor(factor, 0.06), rr);
        auto vt = net.view(rt);
        const auto drifted = scores(tr.spec, tr.params, test.x, test.size(), net.options(vt));
        gdc.calibrate(net, rt, vt);
        for (auto i : tr.spec.weighted()) CHECK(vt.out_scale[i] == Approx(1.0 / factor).epsilon(1e-12));
        const auto st = scores(tr.spec, tr.params, test.x, test.size(), net.options(vt));
        CHECK(max_abs_diff(s0, st) < 1e-9);
        CHECK(predict(st, tr.spec.num_classes()) == predict(s0, tr.spec.num_classes()));
        // Uncompensated drift does change the outputs.
        CHECK(max_abs_diff(s0, drifted) > 1e-3);
    }
}

TEST_CASE("optimal momentum", "[compensation][adabs]") {
    CHECK(optimal_momentum(1) == 0.015);
    CHECK(std::abs(optimal_momentum(13) - std::exp(std::log(0.015) / 13.0)) < 1e-15);
    CHECK(std::round(optimal_momentum(13) * 1e4) / 1e4 == Approx(0.7239).epsilon(1e-12));
    double prev = 0.0;
    for (std::size_t n = 1; n <= 2000; ++n) {
        const double p = optimal_momentum(n);
        CHECK(p > prev);
        CHECK(p > 0.0);
        CHECK(p < 1.0);
        prev = p;
    }
    CHECK(optimal_momentum(1000000) > 0.99999);
    // After n updates the initial statistics keep weight p^n = base.
    CHECK(std::pow(optimal_momentum(13), 13) == Approx(0.015).epsilon(1e-12));
    CHECK(optimal_momentum(4, 0.5) == Approx(std::pow(0.5, 0.25)));
    CHECK_THROWS_AS(optimal_momentum(0), DomainError);
    CHECK_THROWS_AS(optimal_momentum(3, 1.0), DomainError);
    CHECK_THROWS_AS(optimal_momentum(3, 0.0), DomainError);
}

TEST_CASE("adabs rejects insufficient calibration data", "[compensation][adabs]") {
    const auto& tr = trained();
    auto params = tr.params;
    Rng rng(1);
    const auto part = tr.data.train.head(100);
    CHECK_THROWS_AS(adabs_calibrate(tr.spec, params, {}, part.x, part.size(), AdabsSettings{20, 6}, rng), DataError);
    CHECK_NOTHROW(adabs_calibrate(tr.spec, params, {}, part.x, part.size(), AdabsSettings{20, 5}, rng));
    CHECK_THROWS_AS(adabs_calibrate(tr.spec, params, {}, part.x, part.size(), AdabsSettings{1, 5}, rng), DomainError);
    CHECK_THROWS_AS(adabs_calibrate(tr.spec, params, {}, part.x, part.size(), AdabsSettings{10, 0}, rng), DomainError);
    CHECK_THROWS_AS(adabs_calibrate(tr.spec, params, {}, std::span<const double>(part.x).first(10), part.size(),
                                    AdabsSettings{10, 2}, rng),
                    DomainError);
}

TEST_CASE("adabs with one batch covering the set applies one exponential update", "[compensation][adabs]") {
    // Sampling without replacement makes the single batch a permutation of the
    // whole set, so its statistics equal those of one full-set forward pass.
    const auto& tr = trained();
    const auto cal = tr.data.train.head(300);
    auto params = tr.params;
    Rng rng(4);
    adabs_calibrate(tr.spec, params, {}, cal.x, cal.size(), AdabsSettings{300, 1}, rng);
    ForwardOptions batch;
    batch.bn_mode = BnMode::Batch;
    const auto full = forward(tr.spec, tr.params, cal.x, cal.size(), batch);
    for (std::size_t i = 0; i < tr.spec.size(); ++i) {
        if (tr.spec.layer(i).kind != LayerKind::BatchNorm) {
            CHECK(params[i] == tr.params[i]);
            continue;
        }
        auto expected = tr.params[i].bn;
        expected.p = 0.015;
        update_running_stats(expected, full.batch_stats[i]);
        const auto& got = params[i].bn;
        CHECK(max_abs_diff(got.mu, expected.mu) < 1e-9);
        CHECK(max_abs_diff(got.sigma2, expected.sigma2) < 1e-9);
        CHECK(got.gamma == tr.params[i].bn.gamma);
        CHECK(got.beta == tr.params[i].bn.beta);
        CHECK(got.p == tr.params[i].bn.p);
    }
}

TEST_CASE("adabs without perturbation is a fixed point", "[compensation][adabs]") {
    const auto& tr = trained();
    const auto& test = tr.data.test;
    const double before = accuracy(tr.spec, tr.params, test.x, test.y);
    REQUIRE(before > 0.9);
    auto params = tr.params;
    Rng rng(9);
    const auto changes = adabs_calibrate(tr.spec, params, {}, tr.data.train.x, tr.data.train.size(),
                                         AdabsSettings{100, 13}, rng);
    std::size_t bn = 0;
    for (std::size_t i = 0; i < tr.spec.size(); ++i) bn += tr.spec.layer(i).kind == LayerKind::BatchNorm;
    CHECK(changes.size() == bn);
    for (const auto& c : changes) {
        const auto& old = tr.params[c.node].bn;
        const auto& now = params[c.node].bn;
        for (std::size_t ch = 0; ch < old.channels(); ++ch) {
            const double sd = std::sqrt(old.sigma2[ch]);
            CHECK(std::abs(now.mu[ch] - old.mu[ch]) < 0.25 * sd);
            CHECK(std::abs(now.sigma2[ch] - old.sigma2[ch]) < 0.25 * old.sigma2[ch]);
        }
    }
    const double after = accuracy(tr.spec, params, test.x, test.y);
    CHECK(std::abs(after - before) < 0.003);

    // Repeating the calibration stays at the fixed point.
    Rng again(10);
    adabs_calibrate(tr.spec, params, {}, tr.data.train.x, tr.data.train.size(), AdabsSettings{100, 13}, again);
    CHECK(std::abs(accuracy(tr.spec, params, test.x, test.y) - before) < 0.003);
}

TEST_CASE("adabs is deterministic for a fixed seed", "[compensation][adabs]") {
    const auto& tr = trained();
    auto a = tr.params, b = tr.params;
    Rng ra(3), rb(3);
    adabs_calibrate(tr.spec, a, {}, tr.data.train.x, tr.data.train.size(), AdabsSettings{50, 4}, ra);
    adabs_calibrate(tr.spec, b, {}, tr.data.train.x, tr.data.train.size(), AdabsSettings{50, 4}, rb);
    CHECK(a == b);
}

TEST_CASE("adabs beats no compensation under uniform drift", "[compensation][adabs]") {
    const auto& tr = trained();
    const auto dev = uniform_drift(0.06);
    const auto& test = tr.data.test;
    const double t = time_for_factor(0.35, 0.06);
    double gain = 0.0;
    const int seeds = 10;
    for (int s = 0; s < seeds; ++s) {
        Rng prog(200 + s), rr(300 + s), cal(400 + s);
        AnalogNetwork net(tr.spec, tr.params, dev, ProgrammingMode::Direct, {}, prog);
        const auto view = net.view(net.read(t, rr));
        const double none = accuracy(tr.spec, tr.params, test.x, test.y, net.options(view));
        auto params = tr.params;
        adabs_calibrate(tr.spec, params, net.options(view, {}, BnMode::Batch), tr.data.train.x, tr.data.train.size(),
                        AdabsSettings{100, 13}, cal);
        gain += accuracy(tr.spec, params, test.x, test.y, net.options(view)) - none;
    }
    CHECK(gain / seeds > 0.0);
}

TEST_CASE("frozen view matches the crossbar product", "[compensation][analog]") {
    const auto& tr = trained();
    const auto dev = DeviceParams{};
    Rng prog(1), rr(2);
    AnalogNetwork net(tr.spec, tr.params, dev, ProgrammingMode::Iterative, {}, prog);
    const auto readings = net.read(3600.0, rr);
    const auto view = net.view(readings);
    ForwardOptions via_crossbar;
    via_crossbar.hooks.resize(tr.spec.size());
    const Quantizer off;
    const auto w = tr.spec.weighted();
    for (std::size_t k = 0; k < w.size(); ++k) {
        const AnalogLayer* layer = &net.layers()[k];
        const LayerReading* reading = &readings[k];
        via_crossbar.hooks[w[k]].matvec = [layer, reading, off](std::span<const double> x) {
            return analog_matvec(*layer, *reading, x, off, off);
        };
    }
    const auto batch = tr.data.test.head(64);
    const auto a = scores(tr.spec, tr.params, batch.x, batch.size(), net.options(view));
    const auto b = scores(tr.spec, tr.params, batch.x, batch.size(), via_crossbar);
    CHECK(max_abs_diff(a, b) < 1e-9);
    CHECK(&net.layer_of(w[1]) == &net.layers()[1]);
}

TEST_CASE("per-call reads", "[compensation][analog]") {
    const auto& tr = trained();
    const auto batch = tr.data.test.head(32);
    SECTION("noiseless devices reproduce the frozen view") {
        const auto dev = uniform_drift(0.04);
        Rng prog(1), rr(2), pc(3);
        AnalogNetwork net(tr.spec, tr.params, dev, ProgrammingMode::Direct, {}, prog);
        const auto view = net.view(net.read(1e4, rr));
        const auto frozen = scores(tr.spec, tr.params, batch.x, batch.size(), net.options(view));
        const auto fresh = scores(tr.spec, tr.params, batch.x, batch.size(), net.per_call_options(1e4, pc, {}));
        CHECK(max_abs_diff(frozen, fresh) < 1e-9);
    }
    SECTION("read noise differs between calls") {
        Rng prog(1), pc(3);
        AnalogNetwork net(tr.spec, tr.params, DeviceParams{}, ProgrammingMode::Iterative, {}, prog);
        const auto opts = net.per_call_options(100.0, pc, {});
        const auto a = scores(tr.spec, tr.params, batch.x, batch.size(), opts);
        const auto b = scores(tr.spec, tr.params, batch.x, batch.size(), opts);
        CHECK(max_abs_diff(a, b) > 0.0);
    }
}

TEST_CASE("snapshot construction validates layers", "[compensation][analog]") {
    const auto& tr = trained();
    Rng prog(1);
    AnalogNetwork net(tr.spec, tr.params, DeviceParams{}, ProgrammingMode::Direct, {}, prog);
    auto layers = net.layers();
    CHECK_NOTHROW(AnalogNetwork(tr.spec, tr.params, DeviceParams{}, layers));
    auto missing = layers;
    missing.pop_back();
    CHECK_THROWS_AS(AnalogNetwork(tr.spec, tr.params, DeviceParams{}, missing), DataError);
    auto renamed = layers;
    renamed[0].name = "other";
    CHECK_THROWS_AS(AnalogNetwork(tr.spec, tr.params, DeviceParams{}, renamed), DataError);
}

TEST_CASE("quantizer range calibration", "[compensation][quantization]") {
    const auto& tr = trained();
    const auto cal = tr.data.train.head(200);
    const auto q = calibrate_ranges(tr.spec, tr.params, cal.x, cal.size(), 100.0, 8, 64);
    const auto w = tr.spec.weighted();
    for (std::size_t i = 0; i < tr.spec.size(); ++i) {
        const bool weighted = std::find(w.begin(), w.end(), i) != w.end();
        CHECK(q[i].in.enabled == weighted);
        CHECK(q[i].out.enabled == weighted);
        if (weighted) CHECK(q[i].in.bits == 8);
    }
    // The stem sees the raw inputs: at the 100th percentile its range is their extent.
    const auto [lo, hi] = std::minmax_element(cal.x.begin(), cal.x.end());
    CHECK(q[w[0]].in.lo == *lo);
    CHECK(q[w[0]].in.hi == *hi);
    // Layers fed by a ReLU see one-sided data.
    for (std::size_t k = 1; k < w.size(); ++k) {
        const auto src = tr.spec.layer(w[k]).inputs[0];
        if (tr.spec.layer(src).kind == LayerKind::Relu) CHECK(q[w[k]].in.lo == 0.0);
    }
    // Batch size does not change the recorded populations.
    CHECK(calibrate_ranges(tr.spec, tr.params, cal.x, cal.size(), 99.0, 6, 17) ==
          calibrate_ranges(tr.spec, tr.params, cal.x, cal.size(), 99.0, 6, 200));
    CHECK_THROWS_AS(calibrate_ranges(tr.spec, tr.params, {}, 0, 99.0), DomainError);
}

TEST_CASE("8-bit quantizers barely move analog accuracy", "[compensation][quantization]") {
    const auto& tr = trained();
    const auto& test = tr.data.test;
    const auto q = calibrate_ranges(tr.spec, tr.params, tr.data.train.head(1000).x, 1000, 99.995, 8);
    Rng prog(3), rr(4);
    AnalogNetwork net(tr.spec, tr.params, DeviceParams{}, ProgrammingMode::Iterative, {}, prog);
    const auto view = net.view(net.read(25.0, rr));
    const double plain = accuracy(tr.spec, tr.params, test.x, test.y, net.options(view));
    const double quant = accuracy(tr.spec, tr.params, test.x, test.y, net.options(view, q));
    CHECK(std::abs(plain - quant) < 0.02);
}
