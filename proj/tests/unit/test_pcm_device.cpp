// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include "pcmsim/pcm_device.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

using namespace pcmsim;
using Catch::Approx;

namespace {

struct Moments {
    double mean = 0.0;
    double std = 0.0;
};

Moments moments(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    const double mean = s / static_cast<double>(v.size());
    double q = 0.0;
    for (double x : v) q += (x - mean) * (x - mean);
    return {mean, std::sqrt(q / static_cast<double>(v.size() - 1))};
}

}  // namespace

TEST_CASE("programming-noise polynomial", "[pcm_device]") {
    const DeviceParams p;
    REQUIRE(prog_noise_sigma(p, 12.5) <= 1.2);

    // Every level of the default fit is positive and below 1.2 uS.
    std::vector<double> levels;
    for (int k = 0; k <= 10; ++k) levels.push_back(prog_noise_sigma(p, 2.5 * k));
    for (int i = 0; i <= 250; ++i) {
        const double s = prog_noise_sigma(p, 0.1 * i);
        REQUIRE(s > 0.0);
        REQUIRE(s <= 1.2);
    }
    std::nth_element(levels.begin(), levels.begin() + 5, levels.end());
    CHECK(levels[5] == Approx(0.94).margin(0.01));

    DeviceParams c;
    c.prog_noise_coeffs = {0.5};
    CHECK(prog_noise_sigma(c, 0.0) == 0.5);

    CHECK_THROWS_AS(prog_noise_sigma(p, -0.1), DomainError);
    CHECK_THROWS_AS(prog_noise_sigma(p, 25.01), DomainError);
}

TEST_CASE("drift exponent defaults", "[pcm_device]") {
    const DeviceParams p;
    CHECK(drift_nu_mean(p, 0.0) == Approx(0.08));
    CHECK(drift_nu_mean(p, 25.0) == Approx(0.04));
    double mean = 0.0;
    for (int i = 0; i <= 1000; ++i) mean += drift_nu_mean(p, 25.0 * i / 1000.0);
    CHECK(mean / 1001.0 == Approx(0.06).margin(1e-9));
    REQUIRE_NOTHROW(p.validate());
}

TEST_CASE("single-shot programming", "[pcm_device]") {
    SECTION("zero noise programs exactly") {
        auto p = DeviceParams::ideal();
        Rng rng(1);
        auto d = program(p, 10.0, rng);
        CHECK(d.g_prog == 10.0);
        CHECK(d.g_target == 10.0);
        CHECK(d.nu == 0.0);
    }
    SECTION("population statistics at 25 uS") {
        const DeviceParams p;
        Rng rng(7);
        const int N = 10000;
        std::vector<double> g, nu;
        for (int i = 0; i < N; ++i) {
            auto d = program(p, 25.0, rng);
            g.push_back(d.g_prog);
            nu.push_back(d.nu);
        }
        const double sigma = prog_noise_sigma(p, 25.0);
        auto m = moments(g);
        CHECK(std::abs(m.mean - 25.0) < 3.0 * sigma / std::sqrt(N));
        CHECK(std::abs(m.std / sigma - 1.0) < 0.10);
        auto mn = moments(nu);
        CHECK(mn.mean == Approx(0.04).margin(0.001));
        CHECK(mn.std == Approx(0.01).margin(0.001));
    }
    SECTION("population statistics hold for any target >= 3 sigma") {
        const DeviceParams p;
        std::uint64_t seed = 100;
        for (double target : {3.0, 7.5, 12.5, 18.0, 22.0}) {
            Rng rng(seed++);
            std::vector<double> g;
            for (int i = 0; i < 10000; ++i) g.push_back(program(p, target, rng).g_prog);
            const double sigma = prog_noise_sigma(p, target);
            auto m = moments(g);
            CHECK(std::abs(m.mean - target) < 3.0 * sigma / 100.0);
            CHECK(std::abs(m.std / sigma - 1.0) < 0.10);
        }
    }
    SECTION("RESET target clamps at zero") {
        const DeviceParams p;
        Rng rng(3);
        double sum = 0.0;
        for (int i = 0; i < 10000; ++i) {
            auto d = program(p, 0.0, rng);
            REQUIRE(d.g_prog >= 0.0);
            REQUIRE(d.nu >= 0.0);
            sum += d.g_prog;
        }
        // E[max(0, X)] for X ~ N(0, sigma) is sigma / sqrt(2 pi) ~ 0.2 uS.
        CHECK(sum / 10000.0 == Approx(0.5 / std::sqrt(2.0 * M_PI)).margin(0.01));
    }
    SECTION("identical seeds give identical populations") {
        const DeviceParams p;
        Rng a(42), b(42);
        for (int i = 0; i < 1000; ++i) {
            const double t = 25.0 * (i % 101) / 100.0;
            REQUIRE(program(p, t, a) == program(p, t, b));
        }
    }
    SECTION("out of range target") {
        Rng rng(0);
        CHECK_THROWS_AS(program(DeviceParams{}, 30.0, rng), DomainError);
    }
}

TEST_CASE("program-and-verify", "[pcm_device]") {
    const DeviceParams p;
    SECTION("infinite tolerance converges immediately") {
        Rng rng(1);
        auto r = program_iterative(p, 12.0, std::numeric_limits<double>::infinity(), 55, rng);
        CHECK(r.converged);
        CHECK(r.iterations == 1);
    }
    SECTION("noise-free writes land on target") {
        auto q = p;
        q.write_noise_factor = 0.0;
        Rng rng(1);
        auto r = program_iterative(q, 12.0, 0.25, 55, rng);
        CHECK(r.converged);
        CHECK(r.iterations == 1);
        CHECK(r.device.g_prog == 12.0);
    }
    SECTION("convergence fraction over uniform targets") {
        Rng rng(11);
        const int N = 100000;
        int converged = 0;
        for (int i = 0; i < N; ++i) {
            const double target = rng.uniform(0.0, 25.0);
            auto r = program_iterative(p, target, 0.25, 55, rng);
            REQUIRE(r.iterations <= 55);
            if (r.converged) {
                ++converged;
                REQUIRE(std::abs(r.device.g_prog - target) <= 0.25);
            }
        }
        CHECK(static_cast<double>(converged) / N >= 0.95);
    }
    SECTION("a single attempt may fail") {
        Rng rng(5);
        int failures = 0;
        for (int i = 0; i < 200; ++i) failures += !program_iterative(p, 12.5, 0.25, 1, rng).converged;
        CHECK(failures > 0);
    }
    SECTION("parameter domain") {
        Rng rng(1);
        CHECK_THROWS_AS(program_iterative(p, 1.0, 0.0, 55, rng), DomainError);
        CHECK_THROWS_AS(program_iterative(p, 1.0, 0.25, 0, rng), DomainError);
    }
}

TEST_CASE("drift law", "[pcm_device]") {
    CHECK(drift_conductance(10.0, 0.06, 25.0, 25.0) == 10.0);
    CHECK(drift_conductance(10.0, 0.0, 1e6, 25.0) == 10.0);
    // 1 day after a 25 s reference: (86400/25)^-0.06 = exp(-0.06 ln 3456).
    CHECK(drift_conductance(10.0, 0.06, 86400.0, 25.0) == Approx(6.1333).epsilon(1e-4));
    CHECK_THROWS_AS(drift_conductance(10.0, 0.06, 24.0, 25.0), DomainError);

    SECTION("matches log-space evaluation") {
        Rng rng(99);
        for (int i = 0; i < 1000; ++i) {
            const double g = rng.uniform(0.01, 25.0);
            const double nu = rng.uniform(0.0, 0.2);
            const double t0 = rng.uniform(1.0, 100.0);
            const double t = t0 * std::exp(rng.uniform(0.0, 15.0));
            const double oracle = std::exp(std::log(g) - nu * (std::log(t) - std::log(t0)));
            REQUIRE(std::abs(drift_conductance(g, nu, t, t0) - oracle) / oracle < 1e-12);
        }
    }
    SECTION("strictly decreasing for positive exponent") {
        double prev = drift_conductance(10.0, 0.05, 25.0, 25.0);
        for (double t = 30.0; t < 3.2e7; t *= 1.3) {
            const double g = drift_conductance(10.0, 0.05, t, 25.0);
            REQUIRE(g < prev);
            prev = g;
        }
    }
}

TEST_CASE("device read", "[pcm_device]") {
    ProgrammedDevice d{10.0, 10.0, 0.06, 0.0};
    SECTION("noise-free and drift-free read returns g_prog") {
        auto p = DeviceParams::ideal();
        ProgrammedDevice z{10.0, 9.5, 0.0, 0.0};
        Rng rng(1);
        CHECK(read(z, p, 1000.0, rng) == 9.5);
    }
    SECTION("without read noise equals the drift law") {
        DeviceParams p;
        p.read_noise_scale = 0.0;
        Rng rng(1);
        CHECK(read(d, p, 5000.0, rng) == drift_conductance(10.0, 0.06, 5000.0, 25.0));
    }
    SECTION("read-noise magnitude") {
        const DeviceParams p;
        ProgrammedDevice flat{10.0, 10.0, 0.0, 0.0};
        // 2 % of G at t0 by construction of the default scale.
        CHECK(read_noise_sigma(p, flat, 25.0) / 10.0 == Approx(0.02).epsilon(1e-9));
        Rng rng(17);
        for (double t : {25.0, 3600.0, 86400.0}) {
            std::vector<double> v;
            for (int i = 0; i < 10000; ++i) v.push_back(read(d, p, t, rng));
            const double sigma = read_noise_sigma(p, d, t);
            auto m = moments(v);
            CHECK(std::abs(m.std / sigma - 1.0) < 0.10);
            CHECK(m.mean == Approx(drift_conductance(10.0, 0.06, t, 25.0)).margin(4.0 * sigma / 100.0));
        }
        // Fluctuations grow with time.
        CHECK(read_noise_sigma(p, flat, 86400.0) > read_noise_sigma(p, flat, 25.0));
    }
    SECTION("power-integrated law uses the spectral exponent") {
        DeviceParams p;
        p.read_noise_law = ReadNoiseLaw::PowerIntegrated;
        ProgrammedDevice flat{10.0, 10.0, 0.0, 0.0};
        const double k = 0.21, tr = 1e-6;
        const double expected = p.read_noise_scale * 10.0 *
                                std::sqrt((std::pow(100.0 + tr, k) - std::pow(tr, k)) / k);
        CHECK(read_noise_sigma(p, flat, 100.0) == Approx(expected).epsilon(1e-12));
        p.read_noise_exponent = 1.0;
        CHECK(read_noise_sigma(p, flat, 100.0) ==
              Approx(p.read_noise_scale * 10.0 * std::sqrt(std::log((100.0 + tr) / tr))));
    }
    SECTION("premature read") {
        const DeviceParams p;
        ProgrammedDevice late{10.0, 10.0, 0.06, 100.0};
        Rng rng(1);
        CHECK_THROWS_AS(read(late, p, 110.0, rng), DomainError);
        CHECK_NOTHROW(read(late, p, 125.0, rng));
    }
}

TEST_CASE("device parameter validation", "[pcm_device]") {
    DeviceParams p;
    p.g_max = 0.0;
    CHECK_THROWS_AS(p.validate(), ConfigError);
    p = DeviceParams{};
    p.drift_nu_mean_coeffs = {0.3};
    CHECK_THROWS_AS(p.validate(), ConfigError);
    CHECK_NOTHROW(DeviceParams::ideal().validate());
}
