// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include "pcmsim/noisy_training.hpp"

#include <cmath>
#include <limits>

using namespace pcmsim;
using Catch::Approx;

namespace {

struct Toy {
    NetworkSpec spec;
    NetworkParams params;
    std::vector<double> x;
    std::vector<int> y;
};

/// Four Gaussian blobs in 8 dimensions, dense-ReLU-dense classifier.
Toy toy(std::uint64_t seed, std::size_t n = 64, bool with_bn = false) {
    Toy t{NetworkSpec(Shape{8, 1, 1}), {}, {}, {}};
    std::size_t h = t.spec.dense(0, 16, true, "hidden");
    if (with_bn) h = t.spec.batchnorm(h, "bn");
    t.spec.dense(t.spec.relu(h), 4, true, "out");
    Rng rng(seed);
    t.params = init_params(t.spec, rng);
    std::vector<std::vector<double>> centers(4, std::vector<double>(8));
    for (auto& c : centers)
        for (auto& v : c) v = rng.normal(0.0, 1.0);
    for (std::size_t s = 0; s < n; ++s) {
        const int label = static_cast<int>(s % 4);
        t.y.push_back(label);
        for (double c : centers[label]) t.x.push_back(c + rng.normal(0.0, 0.7));
    }
    return t;
}

double clean_loss(const Toy& t, BnMode mode = BnMode::Batch) {
    ForwardOptions o;
    o.bn_mode = mode;
    auto c = forward(t.spec, t.params, t.x, t.y.size(), o);
    return softmax_cross_entropy(c.logits(), t.y, t.spec.num_classes());
}

}  // namespace

TEST_CASE("noise sigma per layer", "[noisy_training]") {
    NoisePolicy p;
    CHECK(p.eta_tr == 0.038);
    CHECK(p.clip_alpha == 2.0);
    Matrix w(2, 2);
    w.data = {0.3, -1.0, 0.5, 0.0};
    CHECK(noise_sigma_for_layer(p, w) == Approx(0.038));
    // 0.94 uS of combined noise on a 25 uS range.
    CHECK(0.94 / 25.0 == Approx(0.0376));

    auto doubled = w;
    for (auto& v : doubled.data) v *= 2.0;
    CHECK(noise_sigma_for_layer(p, doubled) == 2.0 * noise_sigma_for_layer(p, w));

    p.eta_tr = 0.0;
    CHECK(noise_sigma_for_layer(p, w) == 0.0);

    NoisePolicy q;
    CHECK_THROWS_AS(noise_sigma_for_layer(q, Matrix(3, 3, 0.0)), DegenerateError);

    q.clip_alpha = 0.0;
    CHECK_THROWS_AS(q.validate(), ConfigError);
    q = NoisePolicy{};
    q.eta_inf = -0.1;
    CHECK_THROWS_AS(q.validate(), ConfigError);
}

TEST_CASE("forward pass with weight noise", "[noisy_training]") {
    auto t = toy(1);
    SECTION("zero noise equals the clean pass") {
        Rng rng(3);
        auto nf = forward_with_weight_noise(t.spec, t.params, NoisePolicy::clean(), t.x, t.y, rng);
        CHECK(nf.loss == clean_loss(t));
    }
    SECTION("fixed seed reproduces the loss bit for bit") {
        NoisePolicy p;
        p.eta_tr = 0.05;
        Rng a(9), b(9);
        auto before = t.params;
        CHECK(forward_with_weight_noise(t.spec, t.params, p, t.x, t.y, a).loss ==
              forward_with_weight_noise(t.spec, t.params, p, t.x, t.y, b).loss);
        CHECK(t.params == before);
    }
    SECTION("noise raises the expected loss of a trained net") {
        // Train briefly so the clean weights sit near a minimum.
        OptimizerState opt;
        SgdConfig cfg{0.05, 0.9, 0.0};
        Rng rng(4);
        for (int s = 0; s < 300; ++s) train_step(t.spec, t.params, NoisePolicy::clean(), cfg, opt, t.x, t.y, rng);
        const double clean = clean_loss(t);
        NoisePolicy p;
        p.eta_tr = 0.05;
        double sum = 0.0, sq = 0.0;
        for (int k = 0; k < 1000; ++k) {
            const double l = forward_with_weight_noise(t.spec, t.params, p, t.x, t.y, rng).loss;
            sum += l;
            sq += l * l;
        }
        const double mean = sum / 1000.0;
        CHECK(mean > clean);
        CHECK(sq / 1000.0 - mean * mean > 0.0);
    }
    SECTION("exempt layers stay exact") {
        NoisePolicy p;
        p.eta_tr = 0.5;
        p.exempt_first_last = true;
        Rng rng(5);
        auto nf = forward_with_weight_noise(t.spec, t.params, p, t.x, t.y, rng);
        CHECK(nf.loss == clean_loss(t));
        CHECK(noise_exempt(t.spec, 1, p));
        CHECK(noise_exempt(t.spec, t.spec.output(), p));
    }
}

TEST_CASE("training step", "[noisy_training]") {
    SECTION("clean policy is plain momentum SGD") {
        auto t = toy(2, 32, true);
        SgdConfig cfg{0.1, 0.9, 0.0};
        OptimizerState opt;
        Rng rng(1);
        auto ref = t.params;
        std::vector<std::vector<double>> vel(t.spec.size());
        for (int step = 0; step < 3; ++step) {
            train_step(t.spec, t.params, NoisePolicy::clean(), cfg, opt, t.x, t.y, rng);
            ForwardOptions o;
            o.bn_mode = BnMode::Batch;
            auto c = forward(t.spec, ref, t.x, t.y.size(), o);
            auto g = backward(t.spec, ref, c, t.y);
            for (auto i : t.spec.weighted()) {
                vel[i].resize(ref[i].weight.data.size(), 0.0);
                for (std::size_t k = 0; k < vel[i].size(); ++k) {
                    vel[i][k] = 0.9 * vel[i][k] + g[i].weight.data[k];
                    ref[i].weight.data[k] -= 0.1 * vel[i][k];
                }
            }
            for (auto i : t.spec.weighted())
                for (std::size_t k = 0; k < vel[i].size(); ++k)
                    REQUIRE(t.params[i].weight.data[k] == Approx(ref[i].weight.data[k]).margin(1e-12));
            // Keep the remaining parameters in lockstep; only weights are checked by hand.
            for (std::size_t i = 0; i < t.spec.size(); ++i) {
                ref[i].bias = t.params[i].bias;
                ref[i].bn = t.params[i].bn;
            }
        }
    }
    SECTION("tiny alpha clips everything to zero") {
        auto t = toy(3);
        NoisePolicy p;
        p.clip_alpha = 1e-4;
        OptimizerState opt;
        Rng rng(1);
        train_step(t.spec, t.params, p, SgdConfig{}, opt, t.x, t.y, rng);
        for (auto i : t.spec.weighted())
            for (double v : t.params[i].weight.data) REQUIRE(std::abs(v) < 1e-3);
    }
    SECTION("clean weights and clip bound after every step") {
        auto t = toy(4);
        NoisePolicy p;
        p.eta_tr = 0.05;
        SgdConfig cfg{0.05, 0.9, 1e-4};
        OptimizerState opt;
        Rng rng(11);
        for (int step = 0; step < 25; ++step) {
            // Replay the step by hand from the same generator state.
            auto expect = t.params;
            auto expect_opt = opt;
            Rng replay = rng;
            auto nf = forward_with_weight_noise(t.spec, expect, p, t.x, t.y, replay);
            auto g = backward(t.spec, expect, nf.cache, t.y);
            apply_gradients(t.spec, expect, g, expect_opt, cfg);
            std::vector<double> pre_clip_std(t.spec.size());
            for (auto i : t.spec.weighted()) pre_clip_std[i] = weight_std(expect[i].weight);
            clip_weights(t.spec, expect, p.clip_alpha);

            train_step(t.spec, t.params, p, cfg, opt, t.x, t.y, rng);
            for (auto i : t.spec.weighted()) {
                REQUIRE(t.params[i].weight == expect[i].weight);
                REQUIRE(max_abs(t.params[i].weight.data) <= p.clip_alpha * pre_clip_std[i]);
            }
        }
    }
    SECTION("noisy training loss falls window over window") {
        auto t = toy(5, 128);
        NoisePolicy p;
        p.eta_tr = 0.05;
        SgdConfig cfg{0.02, 0.9, 0.0};
        OptimizerState opt;
        Rng rng(21);
        std::vector<double> windows;
        double acc = 0.0;
        for (int step = 1; step <= 200; ++step) {
            acc += train_step(t.spec, t.params, p, cfg, opt, t.x, t.y, rng).loss;
            if (step % 20 == 0) {
                windows.push_back(acc / 20.0);
                acc = 0.0;
            }
        }
        for (std::size_t k = 1; k < windows.size(); ++k) CHECK(windows[k] < windows[k - 1]);
    }
}

TEST_CASE("learning-rate replication", "[noisy_training]") {
    const std::vector<EpochRecord> h{{0, 0.1, 0.40}, {50, 0.01, 0.85}, {100, 0.001, 0.92}};
    auto full = replicate_lr_schedule(h, 0.40);
    CHECK(full.start_epoch == 0);
    CHECK(full.lr == std::vector<double>{0.1, 0.01, 0.001});
    auto mid = replicate_lr_schedule(h, 0.85);
    CHECK(mid.start_epoch == 50);
    CHECK(mid.lr == std::vector<double>{0.01, 0.001});
    auto beyond = replicate_lr_schedule(h, 0.99);
    CHECK(beyond.lr == std::vector<double>{0.001});
    CHECK_THROWS_AS(replicate_lr_schedule(std::vector<EpochRecord>{}, 0.5), DomainError);

    auto s = step_lr_schedule(0.1, 0.1, 50, 200);
    CHECK(s.size() == 200);
    CHECK(s[0] == 0.1);
    CHECK(s[49] == 0.1);
    CHECK(s[50] == Approx(0.01));
    CHECK(s[199] == Approx(0.0001));
}

TEST_CASE("inference perturbation", "[noisy_training]") {
    auto t = toy(6);
    NoisePolicy p;
    SECTION("zero eta is the identity") {
        p.eta_inf = 0.0;
        Rng rng(1);
        CHECK(perturb_for_inference(t.spec, t.params, p, rng) == t.params);
    }
    SECTION("seeded and correctly scaled") {
        p.eta_inf = 0.05;
        Rng a(7), b(7);
        auto pa = perturb_for_inference(t.spec, t.params, p, a);
        CHECK(pa == perturb_for_inference(t.spec, t.params, p, b));
        Rng rng(8);
        const std::size_t hidden = 1;
        const double sigma = 0.05 * max_abs(t.params[hidden].weight.data);
        double sq = 0.0;
        std::size_t count = 0;
        for (int k = 0; k < 200; ++k) {
            auto q = perturb_for_inference(t.spec, t.params, p, rng);
            for (std::size_t j = 0; j < q[hidden].weight.data.size(); ++j) {
                const double d = q[hidden].weight.data[j] - t.params[hidden].weight.data[j];
                sq += d * d;
                ++count;
            }
        }
        CHECK(std::sqrt(sq / count) / sigma == Approx(1.0).margin(0.03));
    }
    SECTION("preset sweep grid") {
        const std::vector<double> grid{0.0, 0.01, 0.02, 0.035, 0.05, 0.08};
        Rng rng(9);
        for (double eta : grid) {
            p.eta_inf = eta;
            auto q = perturb_for_inference(t.spec, t.params, p, rng);
            CHECK((eta == 0.0) == (q == t.params));
        }
    }
}
