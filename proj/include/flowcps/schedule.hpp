#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "flowcps/common.hpp"

namespace flowcps {

/// Discrete noise-level grid 1 = t_K > t_{K-1} > ... > t_0 = 0, stored in
/// sampling order (descending). The grid is the single source of truth for
/// how much noise a step is allowed to leave behind.
struct TimeGrid {
    std::vector<double> steps;  // descending; steps.front() == 1, steps.back() == 0

    TimeGrid() = default;
    explicit TimeGrid(std::vector<double> s) : steps(std::move(s)) { validate(); }

    int step_count() const { return static_cast<int>(steps.size()) - 1; }

    void validate() const {
        if (steps.size() < 2) throw std::invalid_argument("TimeGrid: need at least 2 timesteps");
        if (steps.front() != 1.0) throw std::invalid_argument("TimeGrid: first timestep must be exactly 1");
        if (steps.back() != 0.0) throw std::invalid_argument("TimeGrid: last timestep must be exactly 0");
        for (std::size_t k = 1; k < steps.size(); ++k) {
            if (!(steps[k] < steps[k - 1]))
                throw std::invalid_argument("TimeGrid: timesteps must be strictly decreasing (index " +
                                            std::to_string(k) + ")");
        }
    }
};

/// K equal steps: t_k = k/K for k = K..0.
inline TimeGrid uniform_grid(int K) {
    if (K < 1) throw std::invalid_argument("uniform_grid: K must be >= 1");
    std::vector<double> steps(static_cast<std::size_t>(K) + 1);
    for (int k = 0; k <= K; ++k) steps[static_cast<std::size_t>(k)] = static_cast<double>(K - k) / K;
    steps.front() = 1.0;
    steps.back() = 0.0;
    return TimeGrid(std::move(steps));
}

enum class SigmaKind {
    FlowGrpo,    // sigma_t = eta * sqrt(t / (1 - t)); singular at t = 1
    DanceGrpo,   // sigma_t = eta
    CpsEta,      // sigma_t = (t - dt) * sin(eta * pi / 2); requires eta in [0, 1]
    PatchedEta,  // sigma_t = eta * (t - dt)
};

inline const char* sigma_kind_name(SigmaKind k) {
    switch (k) {
        case SigmaKind::FlowGrpo: return "flow";
        case SigmaKind::DanceGrpo: return "dance";
        case SigmaKind::CpsEta: return "cps";
        case SigmaKind::PatchedEta: return "patched";
    }
    return "?";
}

/// Per-step noise-magnitude rule.
struct SigmaRule {
    SigmaKind kind = SigmaKind::DanceGrpo;
    double eta = 0.0;

    SigmaRule() = default;
    SigmaRule(SigmaKind k, double e) : kind(k), eta(e) {
        if (!(eta >= 0.0)) throw std::invalid_argument("SigmaRule: eta must be >= 0");
        if (kind == SigmaKind::CpsEta && eta > 1.0)
            throw std::domain_error("SigmaRule: cps rule requires eta in [0, 1], got " + fmt_short(eta));
    }

    std::string name() const { return std::string(sigma_kind_name(kind)) + fmt_short(eta); }
};

/// The flow rule diverges at t = 1; callers evaluate it at min(t, this).
inline constexpr double kFlowGrpoTimeClamp = 1.0 - 1e-4;

/// Noise magnitude allocated to the step starting at t with width dt.
/// Strict version: the flow rule is rejected at t >= 1 instead of clamped.
inline double sigma_at(const SigmaRule& rule, double t, double dt) {
    if (!(t > 0.0) || !(t <= 1.0)) throw std::invalid_argument("sigma_at: need 0 < t <= 1, got t=" + fmt_short(t));
    if (!(dt > 0.0) || !(dt <= t)) throw std::invalid_argument("sigma_at: need 0 < dt <= t, got dt=" + fmt_short(dt));
    switch (rule.kind) {
        case SigmaKind::FlowGrpo:
            if (t >= 1.0)
                throw std::domain_error("sigma_at: flow rule is singular at t=1; evaluate at a clamped t");
            return rule.eta * std::sqrt(t / (1.0 - t));
        case SigmaKind::DanceGrpo:
            return rule.eta;
        case SigmaKind::CpsEta:
            return (t - dt) * std::sin(rule.eta * 3.14159265358979323846 / 2.0);
        case SigmaKind::PatchedEta:
            return rule.eta * (t - dt);
    }
    throw std::logic_error("sigma_at: unknown rule");
}

/// Same, with the flow-rule singularity clamped to t' = min(t, 1 - 1e-4).
/// This is what samplers and curve audits use on grids that start at t = 1.
inline double sigma_at_clamped(const SigmaRule& rule, double t, double dt) {
    if (rule.kind == SigmaKind::FlowGrpo && t > kFlowGrpoTimeClamp)
        return sigma_at(rule, kFlowGrpoTimeClamp, std::min(dt, kFlowGrpoTimeClamp));
    return sigma_at(rule, t, dt);
}

}  // namespace flowcps
