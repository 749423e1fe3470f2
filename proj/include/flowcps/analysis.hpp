#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <ostream>
#include <stdexcept>
#include <vector>

#include "flowcps/common.hpp"
#include "flowcps/parallel.hpp"
#include "flowcps/samplers.hpp"
#include "flowcps/schedule.hpp"

namespace flowcps {

/// Root-sum-square of the two noise coefficients. This is the standard
/// deviation the step actually leaves behind when the predicted noise and
/// the fresh draw are independent unit-variance vectors; a preserving rule
/// keeps it equal to the scheduler's t - dt. Accepts negative coefficients
/// (only their squares enter).
inline double total_noise_level(double coeff_pred_noise, double coeff_fresh_noise) {
    return std::sqrt(coeff_pred_noise * coeff_pred_noise + coeff_fresh_noise * coeff_fresh_noise);
}

// flags carried on noise-curve points
inline constexpr int kCurveOk = 0;
inline constexpr int kCurveNegativePredNoise = 1;  // the sign Eq-of-squares hides
inline constexpr int kCurveRadicandViolation = 2;  // rule undefined here; actual is NaN

struct NoiseCurvePoint {
    double t_next = 0.0;
    double ideal = 0.0;   // what the scheduler allocates: t - dt
    double actual = 0.0;  // total noise level of the rule's coefficients
    int flag = kCurveOk;
};

struct NoiseCurve {
    SamplerKind sampler;
    int K = 0;
    std::vector<NoiseCurvePoint> points;
};

/// Analytic per-step noise audit of a rule along a grid; no sampling.
/// Radicand violations become flagged gaps rather than aborts.
inline NoiseCurve noise_curve(const SamplerKind& kind, const TimeGrid& grid) {
    grid.validate();
    NoiseCurve curve;
    curve.sampler = kind;
    curve.K = grid.step_count();
    curve.points.reserve(static_cast<std::size_t>(curve.K));
    for (int k = 0; k < curve.K; ++k) {
        const double t = grid.steps[static_cast<std::size_t>(k)];
        const double t_next = grid.steps[static_cast<std::size_t>(k) + 1];
        const double dt = t - t_next;
        NoiseCurvePoint p;
        p.t_next = t_next;
        p.ideal = t - dt;
        try {
            const StepCoefficients c = step_coefficients(kind, t, dt);
            p.actual = total_noise_level(c.pred_noise, c.fresh_noise);
            if (c.pred_noise < 0.0) p.flag = kCurveNegativePredNoise;
        } catch (const std::domain_error&) {
            p.actual = std::numeric_limits<double>::quiet_NaN();
            p.flag = kCurveRadicandViolation;
        }
        curve.points.push_back(p);
    }
    return curve;
}

inline void write_noise_curve_csv(std::ostream& out, const NoiseCurve& curve) {
    out << "t_next,ideal,actual,flag\n";
    for (const auto& p : curve.points)
        out << fmt17(p.t_next) << ',' << fmt17(p.ideal) << ',' << fmt17(p.actual) << ',' << p.flag << '\n';
}

/// Noise-level error of the first-order step rule relative to the preserving
/// one: sqrt((sigma dt)^2 / t + (sigma^2 dt / 2t)^2). Squared, it is exactly
/// the excess total^2 - (t - dt)^2 of the sde coefficients.
struct ErrorBudget {
    double t = 0.0;
    double dt = 0.0;
    double sigma = 0.0;
    double predicted_error = 0.0;
};

inline ErrorBudget theorem1_error(double t, double dt, double sigma) {
    if (!(t > 0.0)) throw std::invalid_argument("theorem1_error: t must be > 0");
    if (!(dt > 0.0)) throw std::invalid_argument("theorem1_error: dt must be > 0");
    const double a = sigma * dt;
    const double b = sigma * sigma * dt / (2.0 * t);
    return {t, dt, sigma, std::sqrt(a * a / t + b * b)};
}

/// Deviation of the first-order discretized variance-preserving forward
/// step's squared-coefficient sum from 1: |(1 - beta dt / 2)^2 + beta dt - 1|,
/// which is beta^2 dt^2 / 4 exactly.
inline double vp_sde_coeff_drift(double beta, double dt) {
    if (!(beta >= 0.0)) throw std::invalid_argument("vp_sde_coeff_drift: beta must be >= 0");
    if (!(dt > 0.0)) throw std::invalid_argument("vp_sde_coeff_drift: dt must be > 0");
    if (!(beta * dt < 1.0)) throw std::domain_error("vp_sde_coeff_drift: need beta * dt < 1");
    const double a = 1.0 - beta * dt / 2.0;
    return std::abs(a * a + beta * dt - 1.0);
}

/// Root-mean-square distance of n rollout terminals to the oracle's data
/// point. With an exact velocity a preserving sampler lands on c up to
/// rounding; an excess-noise sampler does not.
inline double terminal_variance_audit(const SamplerKind& kind, const DeltaOracle& oracle,
                                      const TimeGrid& grid, int n, std::uint64_t seed) {
    if (n < 1000) throw std::invalid_argument("terminal_variance_audit: need n >= 1000");
    const VelocityField field = oracle;
    std::vector<double> sq(static_cast<std::size_t>(n));
    parallel_for(static_cast<std::size_t>(n), [&](std::size_t i) {
        const Trajectory traj = rollout(kind, field, grid, derive_seed(seed, i));
        sq[i] = squared_distance(traj.terminal(), oracle.c);
    });
    double sum = 0.0;
    for (double v : sq) sum += v;
    return std::sqrt(sum / static_cast<double>(n));
}

}  // namespace flowcps
