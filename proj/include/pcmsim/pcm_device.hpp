// SPDX-License-Identifier: Apache-2.0
#pragma once

// Behavioral model of a single phase-change memory device: stochastic
// programming (single-shot and program-and-verify), power-law conductance
// drift and low-frequency read noise. Conductances are in microsiemens,
// times in seconds.

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "pcmsim/error.hpp"
#include "pcmsim/rng.hpp"

namespace pcmsim {

/// Evaluates c0 + c1*x + c2*x^2 + ... (ascending coefficient order).
inline double polyval(std::span<const double> coeffs, double x) noexcept {
    double acc = 0.0;
    for (auto it = coeffs.rbegin(); it != coeffs.rend(); ++it) acc = acc * x + *it;
    return acc;
}

/// How the read-noise magnitude grows with the time elapsed since programming.
enum class ReadNoiseLaw {
    /// sigma = scale * G * sqrt(ln((dt + t_read) / t_read)); integrated 1/f noise.
    LogIntegrated,
    /// sigma = scale * G * sqrt(((dt + t_read)^(g-1) - t_read^(g-1)) / (g-1)) with
    /// g = read_noise_exponent; integrated 1/f^g noise.
    PowerIntegrated,
};

/// Fixed integration lower time bound of the read-noise law (one read pulse).
inline constexpr double kReadPulseDuration = 1e-6;

/// Read-noise scale that yields sigma_read / G = 2% at t0 = 25 s under the
/// log-integrated law.
inline double default_read_noise_scale() {
    return 0.02 / std::sqrt(std::log((25.0 + kReadPulseDuration) / kReadPulseDuration));
}

struct DeviceParams {
    /// Maximum reliably programmable conductance.
    double g_max = 25.0;
    /// Programming-noise std (uS) as a polynomial in the target conductance.
    /// Quadratic through (0, 0.5); median 0.94 uS over 11 levels in [0, 25].
    std::vector<double> prog_noise_coeffs{0.5, 0.0736, -0.0024};
    /// Lower clamp of the programming-noise std.
    double prog_noise_floor = 0.01;
    /// Mean drift exponent as a polynomial in the target conductance:
    /// 0.08 at 0 uS decreasing linearly to 0.04 at 25 uS.
    std::vector<double> drift_nu_mean_coeffs{0.08, -0.0016};
    double drift_nu_std = 0.01;
    double read_noise_scale = default_read_noise_scale();
    double read_noise_exponent = 1.21;
    ReadNoiseLaw read_noise_law = ReadNoiseLaw::LogIntegrated;
    /// Reference read time after programming.
    double t0 = 25.0;
    /// Single-attempt write noise inside program-and-verify, relative to
    /// prog_noise_sigma(g_target).
    double write_noise_factor = 1.5;

    /// A device that programs exactly, never drifts and reads without noise.
    static DeviceParams ideal() {
        DeviceParams p;
        p.prog_noise_coeffs = {0.0};
        p.prog_noise_floor = 0.0;
        p.drift_nu_mean_coeffs = {0.0};
        p.drift_nu_std = 0.0;
        p.read_noise_scale = 0.0;
        p.write_noise_factor = 0.0;
        return p;
    }

    void validate() const {
        auto fail = [](const std::string& m) { throw ConfigError("DeviceParams: " + m); };
        if (!(g_max > 0.0) || !std::isfinite(g_max)) fail("g_max must be > 0");
        if (!(t0 > 0.0)) fail("t0 must be > 0");
        if (prog_noise_coeffs.empty()) fail("prog_noise_coeffs must not be empty");
        if (drift_nu_mean_coeffs.empty()) fail("drift_nu_mean_coeffs must not be empty");
        if (prog_noise_floor < 0.0) fail("prog_noise_floor must be >= 0");
        if (drift_nu_std < 0.0) fail("drift_nu_std must be >= 0");
        if (read_noise_scale < 0.0) fail("read_noise_scale must be >= 0");
        if (!(read_noise_exponent > 0.0)) fail("read_noise_exponent must be > 0");
        if (write_noise_factor < 0.0) fail("write_noise_factor must be >= 0");
        for (int i = 0; i <= 100; ++i) {
            const double g = g_max * i / 100.0;
            const double nu = polyval(drift_nu_mean_coeffs, g);
            if (nu < 0.0 || nu > 0.2) fail("drift_nu_mean must lie in [0, 0.2] on [0, g_max]");
        }
    }
};

/// One programmed device.
struct ProgrammedDevice {
    double g_target = 0.0;  ///< uS
    double g_prog = 0.0;    ///< conductance at t_prog + t0, uS
    double nu = 0.0;        ///< drift exponent
    double t_prog = 0.0;    ///< absolute programming time, s

    bool operator==(const ProgrammedDevice&) const = default;
};

struct IterativeResult {
    ProgrammedDevice device;
    bool converged = false;
    int iterations = 0;
};

namespace detail {

inline void check_target(const DeviceParams& params, double g_target) {
    if (!(g_target >= 0.0 && g_target <= params.g_max))
        throw DomainError("target conductance " + std::to_string(g_target) +
                          " uS outside [0, g_max]");
}

}  // namespace detail

inline double prog_noise_sigma(const DeviceParams& params, double g_target) {
    detail::check_target(params, g_target);
    return std::max(polyval(params.prog_noise_coeffs, g_target), params.prog_noise_floor);
}

inline double drift_nu_mean(const DeviceParams& params, double g_target) {
    detail::check_target(params, g_target);
    return std::max(polyval(params.drift_nu_mean_coeffs, g_target), 0.0);
}

/// Single-shot programming: g_prog ~ N(g_target, sigma(g_target)),
/// nu ~ N(nu_mean(g_target), nu_std); both clamped at zero.
inline ProgrammedDevice program(const DeviceParams& params, double g_target, Rng& rng,
                                double t_prog = 0.0) {
    const double sigma = prog_noise_sigma(params, g_target);
    ProgrammedDevice d;
    d.g_target = g_target;
    d.t_prog = t_prog;
    d.g_prog = std::max(0.0, rng.normal(g_target, sigma));
    d.nu = std::max(0.0, rng.normal(drift_nu_mean(params, g_target), params.drift_nu_std));
    return d;
}

/// Program-and-verify: writes with noise write_noise_factor * sigma(g_target)
/// until the verify read lands within `tolerance` of the target, or
/// `max_iter` attempts are spent. The device keeps the last written value.
inline IterativeResult program_iterative(const DeviceParams& params, double g_target,
                                         double tolerance, int max_iter, Rng& rng,
                                         double t_prog = 0.0) {
    if (!(tolerance > 0.0)) throw DomainError("program_iterative: tolerance must be > 0");
    if (max_iter < 1) throw DomainError("program_iterative: max_iter must be >= 1");
    const double write_sigma = params.write_noise_factor * prog_noise_sigma(params, g_target);

    IterativeResult r;
    r.device.g_target = g_target;
    r.device.t_prog = t_prog;
    double written = 0.0;
    while (r.iterations < max_iter) {
        ++r.iterations;
        written = std::max(0.0, rng.normal(g_target, write_sigma));
        if (std::abs(written - g_target) <= tolerance) {
            r.converged = true;
            break;
        }
    }
    r.device.g_prog = written;
    r.device.nu = std::max(0.0, rng.normal(drift_nu_mean(params, g_target), params.drift_nu_std));
    return r;
}

/// G(t) = G(t0) * (t / t0)^(-nu), with t measured from programming.
inline double drift_conductance(double g_at_t0, double nu, double t, double t0) {
    if (!(t0 > 0.0)) throw DomainError("drift_conductance: t0 must be > 0");
    if (!(t >= t0)) throw DomainError("drift_conductance: t must be >= t0");
    return g_at_t0 * std::pow(t / t0, -nu);
}

/// Std of the read noise for `device` read at absolute time t.
inline double read_noise_sigma(const DeviceParams& params, const ProgrammedDevice& device,
                               double t) {
    const double elapsed = t - device.t_prog;
    const double g = std::max(0.0, drift_conductance(device.g_prog, device.nu, elapsed, params.t0));
    const double tr = kReadPulseDuration;
    double integrated = 0.0;
    if (params.read_noise_law == ReadNoiseLaw::LogIntegrated || params.read_noise_exponent == 1.0) {
        integrated = std::log((elapsed + tr) / tr);
    } else {
        const double k = params.read_noise_exponent - 1.0;
        integrated = (std::pow(elapsed + tr, k) - std::pow(tr, k)) / k;
    }
    return params.read_noise_scale * g * std::sqrt(integrated);
}

/// Drifted conductance plus a Gaussian read-noise sample, clamped at zero.
inline double read(const ProgrammedDevice& device, const DeviceParams& params, double t, Rng& rng) {
    const double elapsed = t - device.t_prog;
    if (!(elapsed >= params.t0))
        throw DomainError("read: device read before t_prog + t0");
    const double g = drift_conductance(device.g_prog, device.nu, elapsed, params.t0);
    if (params.read_noise_scale == 0.0) return std::max(0.0, g);
    return std::max(0.0, rng.normal(g, read_noise_sigma(params, device, t)));
}

}  // namespace pcmsim
