#pragma once

#include <cmath>
#include <cstdint>
#include <ostream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "flowcps/common.hpp"
#include "flowcps/rng.hpp"
#include "flowcps/schedule.hpp"
#include "flowcps/velocity.hpp"

namespace flowcps {

enum class SamplerFamily { Ode, FlowSde, Cps, Cpws, PatchedSde, DdimRef };

/// A step rule. Every flow-family rule is written in the same shape,
///   x_next = c_sample * x0_hat + c_pred * x1_hat + c_fresh * eps,
/// differing only in how the two noise coefficients are split.
struct SamplerKind {
    SamplerFamily family = SamplerFamily::Ode;
    SigmaRule rule;  // carries eta; interpretation depends on family

    static SamplerKind ode() { return {SamplerFamily::Ode, SigmaRule{}}; }

    static SamplerKind flow_sde(SigmaRule r) {
        if (r.kind != SigmaKind::FlowGrpo && r.kind != SigmaKind::DanceGrpo)
            throw std::invalid_argument("SamplerKind::flow_sde: rule must be flow or dance");
        return {SamplerFamily::FlowSde, r};
    }

    static SamplerKind cps(double eta) { return {SamplerFamily::Cps, SigmaRule(SigmaKind::CpsEta, eta)}; }

    static SamplerKind cpws(SigmaRule r) { return {SamplerFamily::Cpws, r}; }

    static SamplerKind patched_sde(double eta) {
        return {SamplerFamily::PatchedSde, SigmaRule(SigmaKind::PatchedEta, eta)};
    }

    static SamplerKind ddim_ref(SigmaRule r) { return {SamplerFamily::DdimRef, r}; }

    bool stochastic() const { return family != SamplerFamily::Ode; }

    std::string name() const {
        switch (family) {
            case SamplerFamily::Ode: return "ode";
            case SamplerFamily::FlowSde: return "flow_sde_" + rule.name();
            case SamplerFamily::Cps: return "cps" + fmt_short(rule.eta);
            case SamplerFamily::Cpws: return "cpws_" + rule.name();
            case SamplerFamily::PatchedSde: return "patched" + fmt_short(rule.eta);
            case SamplerFamily::DdimRef: return "ddim_ref";
        }
        return "?";
    }
};

/// The auditable record of one transition: the coefficient triple, the
/// deterministic mean before the fresh draw, and the draw itself.
struct SamplerStepReport {
    double t = 0.0;
    double dt = 0.0;
    double coeff_sample = 0.0;
    double coeff_pred_noise = 0.0;
    double coeff_fresh_noise = 0.0;
    Vec mu;
    Vec eps;
};

struct StepCoefficients {
    double sample = 0.0;
    double pred_noise = 0.0;
    double fresh_noise = 0.0;
};

/// Coefficient triple of a flow-family rule at (t, dt); purely analytic.
/// Throws on cpws radicand violations and for the ddim reference rule, which
/// lives on an alpha schedule rather than a flow grid.
inline StepCoefficients step_coefficients(const SamplerKind& kind, double t, double dt) {
    if (!(dt > 0.0) || !(dt <= t)) throw std::invalid_argument("step_coefficients: need 0 < dt <= t");
    const double s = t - dt;  // noise level the scheduler wants after this step
    switch (kind.family) {
        case SamplerFamily::Ode:
            return {1.0 - s, s, 0.0};
        case SamplerFamily::FlowSde: {
            const double sigma = sigma_at_clamped(kind.rule, t, dt);
            return {1.0 - s, s - sigma * sigma * dt / (2.0 * t), sigma * std::sqrt(dt)};
        }
        case SamplerFamily::Cps: {
            const double half_angle = kind.rule.eta * 3.14159265358979323846 / 2.0;
            return {1.0 - s, s * std::cos(half_angle), s * std::sin(half_angle)};
        }
        case SamplerFamily::Cpws: {
            const double sigma = sigma_at_clamped(kind.rule, t, dt);
            const double radicand = s * s - sigma * sigma * dt;
            if (radicand < 0.0)
                throw std::domain_error("cpws: negative radicand at t=" + fmt_short(t) + ", dt=" + fmt_short(dt) +
                                        ", sigma=" + fmt_short(sigma));
            return {1.0 - s, sigma == 0.0 ? s : std::sqrt(radicand), sigma * std::sqrt(dt)};
        }
        case SamplerFamily::PatchedSde: {
            const double eta = kind.rule.eta;
            return {1.0 - s, s - (eta * eta / 2.0) * s * dt, eta * s * std::sqrt(dt)};
        }
        case SamplerFamily::DdimRef:
            throw std::invalid_argument("step_coefficients: ddim reference rule takes an alpha schedule, not a flow grid");
    }
    throw std::logic_error("step_coefficients: unknown family");
}

/// Predicted endpoints implied by the current state and velocity:
/// x0_hat = x - t v, x1_hat = x + (1-t) v. Their interpolation at level t
/// reconstructs x exactly.
inline std::pair<Vec, Vec> predict_endpoints(const Vec& x, double t, const Vec& v) {
    Vec x0_hat(x.size());
    Vec x1_hat(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        x0_hat[i] = x[i] - t * v[i];
        x1_hat[i] = x[i] + (1.0 - t) * v[i];
    }
    return {std::move(x0_hat), std::move(x1_hat)};
}

namespace detail {

// Single composition path shared by every flow-family rule, so that rules
// which agree on coefficients agree bitwise on states.
inline std::pair<Vec, SamplerStepReport> compose_step(const Vec& x0_hat, const Vec& x1_hat,
                                                      const StepCoefficients& c, double t, double dt,
                                                      const Vec& eps) {
    const std::size_t dim = x0_hat.size();
    SamplerStepReport report;
    report.t = t;
    report.dt = dt;
    report.coeff_sample = c.sample;
    report.coeff_pred_noise = c.pred_noise;
    report.coeff_fresh_noise = c.fresh_noise;
    report.mu.resize(dim);
    report.eps = eps;
    Vec next(dim);
    for (std::size_t i = 0; i < dim; ++i) {
        report.mu[i] = c.sample * x0_hat[i] + c.pred_noise * x1_hat[i];
        next[i] = report.mu[i] + c.fresh_noise * eps[i];
    }
    return {std::move(next), std::move(report)};
}

inline std::pair<Vec, SamplerStepReport> velocity_step(const VelocityField& f, const Vec& x, double t,
                                                       double dt, const StepCoefficients& c, const Vec& eps) {
    const Vec v = eval_velocity(f, x, t);
    auto [x0_hat, x1_hat] = predict_endpoints(x, t, v);
    return compose_step(x0_hat, x1_hat, c, t, dt, eps);
}

}  // namespace detail

/// Deterministic Euler step, written as the interpolation it is equal to.
inline std::pair<Vec, SamplerStepReport> ode_step(const VelocityField& f, const Vec& x, double t, double dt) {
    return detail::velocity_step(f, x, t, dt, step_coefficients(SamplerKind::ode(), t, dt), zeros(x.size()));
}

/// Discretized stochastic reformulation of the flow: the score correction
/// shrinks the predicted-noise coefficient by sigma^2 dt / (2t) while the
/// Wiener increment adds sigma sqrt(dt) of fresh noise. The coefficient can
/// go negative near t = 0; it is reported as-is, never clamped.
inline std::pair<Vec, SamplerStepReport> flow_sde_step(const VelocityField& f, const Vec& x, double t,
                                                       double dt, const SigmaRule& rule, const Vec& eps) {
    return detail::velocity_step(f, x, t, dt, step_coefficients(SamplerKind::flow_sde(rule), t, dt), eps);
}

/// Coefficients-preserving step with stochastic strength eta in [0, 1]:
/// the scheduler's noise budget t - dt is rotated between predicted and
/// fresh noise by the angle eta * pi / 2.
inline std::pair<Vec, SamplerStepReport> cps_step(const VelocityField& f, const Vec& x, double t, double dt,
                                                  double eta, const Vec& eps) {
    return detail::velocity_step(f, x, t, dt, step_coefficients(SamplerKind::cps(eta), t, dt), eps);
}

/// Coefficients-preserving step with an explicit fresh-noise level sigma:
/// predicted-noise coefficient sqrt((t-dt)^2 - sigma^2).
inline std::pair<Vec, SamplerStepReport> cps_sigma_step(const VelocityField& f, const Vec& x, double t,
                                                        double dt, double sigma, const Vec& eps) {
    if (!(dt > 0.0) || !(dt <= t)) throw std::invalid_argument("cps_sigma_step: need 0 < dt <= t");
    const double s = t - dt;
    if (!(sigma >= 0.0) || sigma > s)
        throw std::domain_error("cps_sigma_step: need 0 <= sigma <= t - dt, got sigma=" + fmt_short(sigma) +
                                " at t=" + fmt_short(t) + ", dt=" + fmt_short(dt));
    StepCoefficients c{1.0 - s, sigma == 0.0 ? s : std::sqrt(s * s - sigma * sigma), sigma};
    return detail::velocity_step(f, x, t, dt, c, eps);
}

/// Wiener-process variant of the preserving step: fresh noise sigma sqrt(dt),
/// predicted-noise coefficient sqrt((t-dt)^2 - sigma^2 dt). Radicand
/// violations are hard errors.
inline std::pair<Vec, SamplerStepReport> cpws_step(const VelocityField& f, const Vec& x, double t, double dt,
                                                   const SigmaRule& rule, const Vec& eps) {
    return detail::velocity_step(f, x, t, dt, step_coefficients(SamplerKind::cpws(rule), t, dt), eps);
}

/// Stochastic step with sigma_t = eta (t - dt): every noise term carries the
/// factor t - dt, so nothing blows up near t = 0.
inline std::pair<Vec, SamplerStepReport> patched_sde_step(const VelocityField& f, const Vec& x, double t,
                                                          double dt, double eta, const Vec& eps) {
    return detail::velocity_step(f, x, t, dt, step_coefficients(SamplerKind::patched_sde(eta), t, dt), eps);
}

/// Reference step on an alpha schedule, with a caller-supplied noise
/// prediction: x_next = sqrt(a_prev) x0_hat + sqrt(1 - a_prev - sigma^2) eps_pred
/// + sigma eps. The squared sample coefficient plus the squared total noise
/// level is 1 for any admissible sigma.
inline std::pair<Vec, SamplerStepReport> ddim_ref_step(const Vec& eps_pred, const Vec& x, double alpha_t,
                                                       double alpha_prev, double sigma, const Vec& eps) {
    if (!(alpha_t > 0.0) || !(alpha_t <= 1.0)) throw std::invalid_argument("ddim_ref_step: need 0 < alpha_t <= 1");
    if (!(alpha_prev > 0.0) || !(alpha_prev <= 1.0)) throw std::invalid_argument("ddim_ref_step: need 0 < alpha_prev <= 1");
    // boundary stated via the rounded sqrt so sigma = sqrt(1 - alpha_prev) is
    // admissible; the radicand below clamps the sub-ulp overshoot
    if (!(sigma >= 0.0) || sigma > std::sqrt(1.0 - alpha_prev))
        throw std::domain_error("ddim_ref_step: need sigma^2 <= 1 - alpha_prev, got sigma=" + fmt_short(sigma) +
                                ", alpha_prev=" + fmt_short(alpha_prev));
    const std::size_t dim = x.size();
    const double c_sample = std::sqrt(alpha_prev);
    const double radicand = 1.0 - alpha_prev - sigma * sigma;
    const double c_pred = radicand <= 0.0 ? 0.0 : std::sqrt(radicand);
    const double inv_sqrt_alpha_t = 1.0 / std::sqrt(alpha_t);
    const double noise_scale = std::sqrt(1.0 - alpha_t);

    SamplerStepReport report;
    report.t = alpha_t;
    report.dt = alpha_t - alpha_prev;
    report.coeff_sample = c_sample;
    report.coeff_pred_noise = c_pred;
    report.coeff_fresh_noise = sigma;
    report.mu.resize(dim);
    report.eps = eps;
    Vec next(dim);
    for (std::size_t i = 0; i < dim; ++i) {
        const double x0_hat = (x[i] - noise_scale * eps_pred[i]) * inv_sqrt_alpha_t;
        report.mu[i] = c_sample * x0_hat + c_pred * eps_pred[i];
        next[i] = report.mu[i] + sigma * eps[i];
    }
    return {std::move(next), std::move(report)};
}

/// Full sampling path from t = 1 to t = 0 with the per-step audit trail.
struct Trajectory {
    std::vector<std::pair<double, Vec>> states;  // (t, x); states.size() == reports.size() + 1
    std::vector<SamplerStepReport> reports;
    std::vector<double> logprob_terms;  // -||x_next - mu||^2 per step; empty for the ode

    const Vec& terminal() const { return states.back().second; }
};

/// Runs one trajectory. The initial state and all fresh-noise draws come from
/// the given seed, so the result is a pure function of (kind, f, grid, seed).
inline Trajectory rollout(const SamplerKind& kind, const VelocityField& f, const TimeGrid& grid,
                          std::uint64_t seed) {
    grid.validate();
    if (kind.family == SamplerFamily::DdimRef)
        throw std::invalid_argument("rollout: ddim reference rule has no flow-grid rollout");
    const int K = grid.step_count();
    // surface radicand violations before any sampling happens
    for (int k = 0; k < K; ++k) {
        const double t = grid.steps[static_cast<std::size_t>(k)];
        const double dt = t - grid.steps[static_cast<std::size_t>(k) + 1];
        try {
            step_coefficients(kind, t, dt);
        } catch (const std::exception& e) {
            throw std::domain_error("rollout: step " + std::to_string(k) + ": " + e.what());
        }
    }

    const std::size_t dim = static_cast<std::size_t>(field_dim(f));
    Rng rng(seed);
    Vec x = rng.normal_vec(dim);

    Trajectory traj;
    traj.states.reserve(static_cast<std::size_t>(K) + 1);
    traj.reports.reserve(static_cast<std::size_t>(K));
    traj.states.emplace_back(grid.steps.front(), x);
    for (int k = 0; k < K; ++k) {
        const double t = grid.steps[static_cast<std::size_t>(k)];
        const double t_next = grid.steps[static_cast<std::size_t>(k) + 1];
        const double dt = t - t_next;
        const Vec eps = kind.stochastic() ? rng.normal_vec(dim) : zeros(dim);
        std::pair<Vec, SamplerStepReport> result;
        try {
            result = detail::velocity_step(f, x, t, dt, step_coefficients(kind, t, dt), eps);
        } catch (const std::exception& e) {
            throw std::runtime_error("rollout: step " + std::to_string(k) + " (t=" + fmt_short(t) + "): " + e.what());
        }
        x = std::move(result.first);
        if (kind.stochastic()) traj.logprob_terms.push_back(-squared_distance(x, result.second.mu));
        traj.reports.push_back(std::move(result.second));
        traj.states.emplace_back(t_next, x);
    }
    return traj;
}

/// One CSV record per step: coefficients, post-step state magnitude and the
/// step's log-probability term (0 for deterministic steps).
inline void write_trajectory_csv(std::ostream& out, const Trajectory& traj) {
    out << "t,dt,coeff_sample,coeff_pred_noise,coeff_fresh_noise,x_norm,logprob_term\n";
    for (std::size_t k = 0; k < traj.reports.size(); ++k) {
        const auto& r = traj.reports[k];
        const double lp = k < traj.logprob_terms.size() ? traj.logprob_terms[k] : 0.0;
        out << fmt17(r.t) << ',' << fmt17(r.dt) << ',' << fmt17(r.coeff_sample) << ','
            << fmt17(r.coeff_pred_noise) << ',' << fmt17(r.coeff_fresh_noise) << ','
            << fmt17(norm(traj.states[k + 1].second)) << ',' << fmt17(lp) << '\n';
    }
}

/// Optional dense dump of the visited states in the model file's float64
/// array format: a text header line, then little-endian doubles row-major
/// (each row is t followed by the coordinates).
inline void write_states_f64(std::ostream& out, const Trajectory& traj) {
    const std::size_t dim = traj.states.empty() ? 0 : traj.states.front().second.size();
    out << "flowcps-states rows=" << traj.states.size() << " dim=" << dim << "\n";
    std::vector<double> row;
    for (const auto& [t, x] : traj.states) {
        row.assign(1, t);
        row.insert(row.end(), x.begin(), x.end());
        detail::write_le_doubles(out, row);
    }
}

}  // namespace flowcps
