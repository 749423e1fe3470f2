#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "flowcps/common.hpp"
#include "flowcps/parallel.hpp"
#include "flowcps/rng.hpp"
#include "flowcps/samplers.hpp"
#include "flowcps/schedule.hpp"
#include "flowcps/velocity.hpp"

namespace flowcps {

/// Verifiable rewards on terminal samples. NegDistance is smooth and bounded
/// above by 0; ModeIndicator is 1 inside the ball around the target mode.
struct NegDistance {
    Vec target;
};

struct ModeIndicator {
    Vec target_mode;
    double radius = 1.0;
};

using RewardSpec = std::variant<NegDistance, ModeIndicator>;

inline double evaluate_reward(const RewardSpec& reward, const Vec& x) {
    if (const auto* nd = std::get_if<NegDistance>(&reward)) return -std::sqrt(squared_distance(x, nd->target));
    const auto& mi = std::get<ModeIndicator>(reward);
    if (!(mi.radius > 0.0)) throw std::invalid_argument("evaluate_reward: radius must be > 0");
    return squared_distance(x, mi.target_mode) <= mi.radius * mi.radius ? 1.0 : 0.0;
}

/// Group-standardized advantages: (r - mean) / max(std, 1e-8) with the
/// population convention (divide by the group size). An all-equal group
/// yields all-zero advantages through the floor.
inline std::vector<double> compute_advantages(const std::vector<double>& rewards) {
    const std::size_t n = rewards.size();
    if (n < 2) throw std::invalid_argument("compute_advantages: need at least 2 rewards");
    double mean = 0.0;
    for (double r : rewards) mean += r;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double r : rewards) var += (r - mean) * (r - mean);
    var /= static_cast<double>(n);
    const double denom = std::max(std::sqrt(var), 1e-8);
    std::vector<double> adv(n);
    for (std::size_t i = 0; i < n; ++i) adv[i] = (rewards[i] - mean) / denom;
    return adv;
}

/// Simplified per-step log-probability: -||x_next - mu||^2. The dropped
/// Gaussian normalization terms are step constants shared by the numerator
/// and denominator of the ratio, and dropping the variance denominator keeps
/// the final (sigma = 0) step finite.
inline double step_logprob(const Vec& x_next, const Vec& mu) {
    if (x_next.size() != mu.size()) throw std::invalid_argument("step_logprob: shape mismatch");
    return -squared_distance(x_next, mu);
}

/// Full isotropic Gaussian log-density (norm summed over the D coordinates,
/// the per-coordinate constants multiplied by D). Kept for tests; the
/// training path uses step_logprob.
inline double full_logprob(const Vec& x_next, const Vec& mu, double sigma) {
    if (x_next.size() != mu.size()) throw std::invalid_argument("full_logprob: shape mismatch");
    if (!(sigma > 0.0)) throw std::invalid_argument("full_logprob: sigma must be > 0");
    const double d = static_cast<double>(x_next.size());
    return -squared_distance(x_next, mu) / (2.0 * sigma * sigma) - d * std::log(sigma) -
           d * 0.5 * std::log(2.0 * 3.14159265358979323846);
}

/// Pessimistic clipped objective term: min(ratio * A, clip(ratio) * A).
inline double clipped_surrogate(double ratio, double advantage, double clip_eps) {
    if (!(ratio > 0.0)) throw std::invalid_argument("clipped_surrogate: ratio must be > 0");
    if (!(clip_eps > 0.0) || !(clip_eps < 1.0)) throw std::invalid_argument("clipped_surrogate: clip_eps must be in (0,1)");
    const double clipped = std::clamp(ratio, 1.0 - clip_eps, 1.0 + clip_eps);
    return std::min(ratio * advantage, clipped * advantage);
}

struct GrpoConfig {
    int group_size = 8;        // G
    double clip_eps = 0.2;
    double eta = 0.7;          // stochastic strength of the training sampler
    SamplerFamily family = SamplerFamily::Cps;
    SigmaKind rule_kind = SigmaKind::DanceGrpo;  // used by flow_sde / cpws samplers
    double kl_beta = 0.0;
    double lr = 0.01;
    int groups_per_iter = 4;
    int iters = 100;
    std::uint64_t seed = 0;
    int eval_rollouts = 128;

    SamplerKind sampler() const {
        switch (family) {
            case SamplerFamily::FlowSde: return SamplerKind::flow_sde(SigmaRule(rule_kind, eta));
            case SamplerFamily::Cps: return SamplerKind::cps(eta);
            case SamplerFamily::Cpws: return SamplerKind::cpws(SigmaRule(rule_kind, eta));
            case SamplerFamily::PatchedSde: return SamplerKind::patched_sde(eta);
            default:
                throw std::invalid_argument("GrpoConfig: training sampler must be stochastic");
        }
    }

    void validate() const {
        if (group_size < 2) throw std::invalid_argument("GrpoConfig: group_size must be >= 2");
        if (!(clip_eps > 0.0) || !(clip_eps < 1.0)) throw std::invalid_argument("GrpoConfig: clip_eps must be in (0,1)");
        if (!(kl_beta >= 0.0)) throw std::invalid_argument("GrpoConfig: kl_beta must be >= 0");
        if (!(lr > 0.0)) throw std::invalid_argument("GrpoConfig: lr must be > 0");
        if (groups_per_iter < 1) throw std::invalid_argument("GrpoConfig: groups_per_iter must be >= 1");
        if (iters < 0) throw std::invalid_argument("GrpoConfig: iters must be >= 0");
        if (eval_rollouts < 1) throw std::invalid_argument("GrpoConfig: eval_rollouts must be >= 1");
        sampler();  // rejects deterministic families and bad eta
    }
};

/// G trajectories sampled for one prompt, with their rewards and
/// group-standardized advantages.
struct GroupRollout {
    std::uint64_t prompt_seed = 0;
    std::vector<Trajectory> members;
    std::vector<double> rewards;
    std::vector<double> advantages;
};

inline GroupRollout sample_group(const VelocityField& policy, const SamplerKind& kind, const TimeGrid& grid,
                                 const RewardSpec& reward, int group_size, std::uint64_t seed) {
    if (group_size < 2) throw std::invalid_argument("sample_group: group_size must be >= 2");
    GroupRollout group;
    group.prompt_seed = seed;
    group.members.resize(static_cast<std::size_t>(group_size));
    parallel_for(static_cast<std::size_t>(group_size),
                 [&](std::size_t m) { group.members[m] = rollout(kind, policy, grid, derive_seed(seed, m)); });
    group.rewards.reserve(group.members.size());
    for (const auto& traj : group.members) group.rewards.push_back(evaluate_reward(reward, traj.terminal()));
    group.advantages = compute_advantages(group.rewards);
    return group;
}

struct SurrogateStats {
    double objective = 0.0;
    double mean_ratio = 0.0;
    double clip_frac = 0.0;
};

/// Clipped objective over pre-sampled groups (averaged over members and
/// steps) and its exact gradient in the policy parameters. Per step the mean
/// mu is recomputed under the current policy from the recorded state and the
/// recorded coefficients; the recorded mu serves as the reference for the
/// optional KL penalty.
inline std::pair<SurrogateStats, std::vector<double>> grpo_objective_and_grad(
    const Mlp& policy, const std::vector<GroupRollout>& groups, const GrpoConfig& cfg) {
    if (groups.empty()) throw std::invalid_argument("grpo_objective_and_grad: no groups");
    const std::size_t dim = static_cast<std::size_t>(policy.dim());
    std::vector<double> grad(policy.params().size(), 0.0);
    SurrogateStats stats;
    std::size_t terms = 0;
    std::size_t clipped_terms = 0;
    double ratio_sum = 0.0;
    Mlp::Workspace ws;
    Vec dv(dim);

    for (const auto& group : groups) {
        for (std::size_t m = 0; m < group.members.size(); ++m) {
            const Trajectory& traj = group.members[m];
            const double advantage = group.advantages[m];
            const std::size_t T = traj.reports.size();
            const double w = 1.0 / (static_cast<double>(groups.size()) * static_cast<double>(group.members.size()) *
                                    static_cast<double>(T));
            for (std::size_t k = 0; k < T; ++k) {
                const SamplerStepReport& report = traj.reports[k];
                const Vec& x_t = traj.states[k].second;
                const Vec& x_next = traj.states[k + 1].second;
                const Vec v = policy.forward(x_t, report.t, ws);
                Vec mu(dim);
                for (std::size_t i = 0; i < dim; ++i) {
                    const double x0_hat = x_t[i] - report.t * v[i];
                    const double x1_hat = x_t[i] + (1.0 - report.t) * v[i];
                    mu[i] = report.coeff_sample * x0_hat + report.coeff_pred_noise * x1_hat;
                }
                const double logp = -squared_distance(x_next, mu);
                const double ratio = std::exp(logp - traj.logprob_terms[k]);
                const double unclipped = ratio * advantage;
                const double clipped = std::clamp(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * advantage;
                stats.objective += w * std::min(unclipped, clipped);
                ratio_sum += ratio;
                ++terms;
                if (ratio < 1.0 - cfg.clip_eps || ratio > 1.0 + cfg.clip_eps) ++clipped_terms;

                // d(mu_i)/d(v_i) is the same scalar for every coordinate
                const double mu_v = -report.coeff_sample * report.t + report.coeff_pred_noise * (1.0 - report.t);
                bool backprop = false;
                std::fill(dv.begin(), dv.end(), 0.0);
                if (unclipped <= clipped) {  // gradient flows through the unclipped branch
                    backprop = true;
                    const double scale = w * advantage * ratio * 2.0 * mu_v;
                    for (std::size_t i = 0; i < dim; ++i) dv[i] += scale * (x_next[i] - mu[i]);
                }
                if (cfg.kl_beta > 0.0 && report.coeff_fresh_noise > 0.0) {
                    const double inv_var = 1.0 / (report.coeff_fresh_noise * report.coeff_fresh_noise);
                    double kl = 0.0;
                    for (std::size_t i = 0; i < dim; ++i) {
                        const double d = mu[i] - report.mu[i];
                        kl += d * d;
                    }
                    kl *= 0.5 * inv_var;
                    stats.objective -= cfg.kl_beta * w * kl;
                    backprop = true;
                    const double scale = -cfg.kl_beta * w * inv_var * mu_v;
                    for (std::size_t i = 0; i < dim; ++i) dv[i] += scale * (mu[i] - report.mu[i]);
                }
                if (backprop) policy.backward(ws, dv, grad);
            }
        }
    }
    stats.mean_ratio = terms > 0 ? ratio_sum / static_cast<double>(terms) : 0.0;
    stats.clip_frac = terms > 0 ? static_cast<double>(clipped_terms) / static_cast<double>(terms) : 0.0;
    return {stats, std::move(grad)};
}

struct IterationStats {
    double mean_train_reward = 0.0;
    double mean_ratio = 0.0;
    double clip_frac = 0.0;
    double grad_norm = 0.0;
    double objective = 0.0;
};

/// One optimization round: sample groups under the frozen old policy, take a
/// single gradient-ascent step on the clipped objective under the current
/// policy. Deterministic given the seed.
inline IterationStats grpo_iteration(Mlp& policy, const Mlp& old_policy, const GrpoConfig& cfg,
                                     const RewardSpec& reward, const TimeGrid& grid, std::uint64_t seed) {
    cfg.validate();
    const SamplerKind kind = cfg.sampler();
    const VelocityField sampling_field = old_policy;
    std::vector<GroupRollout> groups;
    groups.reserve(static_cast<std::size_t>(cfg.groups_per_iter));
    for (int g = 0; g < cfg.groups_per_iter; ++g)
        groups.push_back(sample_group(sampling_field, kind, grid, reward, cfg.group_size, derive_seed(seed, static_cast<std::uint64_t>(g))));

    auto [stats, grad] = grpo_objective_and_grad(policy, groups, cfg);
    if (!std::isfinite(stats.objective))
        throw std::runtime_error("grpo_iteration: non-finite objective (seed " + std::to_string(seed) +
                                 ", mean ratio " + fmt_short(stats.mean_ratio) + ")");

    double reward_sum = 0.0;
    std::size_t reward_count = 0;
    for (const auto& group : groups)
        for (double r : group.rewards) {
            reward_sum += r;
            ++reward_count;
        }

    double grad_sq = 0.0;
    for (std::size_t i = 0; i < grad.size(); ++i) {
        grad_sq += grad[i] * grad[i];
        policy.params()[i] += cfg.lr * grad[i];  // ascent
    }

    IterationStats out;
    out.mean_train_reward = reward_sum / static_cast<double>(reward_count);
    out.mean_ratio = stats.mean_ratio;
    out.clip_frac = stats.clip_frac;
    out.grad_norm = std::sqrt(grad_sq);
    out.objective = stats.objective;
    return out;
}

/// Mean reward of deterministic (zero-stochasticity) rollouts from fixed
/// seeds; the evaluation protocol shared by every training variant.
inline double eval_reward(const Mlp& policy, const TimeGrid& grid, const RewardSpec& reward, int rollouts,
                          std::uint64_t seed) {
    const VelocityField field = policy;
    std::vector<double> values(static_cast<std::size_t>(rollouts));
    parallel_for(static_cast<std::size_t>(rollouts), [&](std::size_t i) {
        const Trajectory traj = rollout(SamplerKind::ode(), field, grid, derive_seed(seed, i));
        values[i] = evaluate_reward(reward, traj.terminal());
    });
    double sum = 0.0;
    for (double v : values) sum += v;
    return sum / static_cast<double>(rollouts);
}

struct RunArtifact {
    std::vector<double> eval_rewards;        // iters + 1 entries; index 0 is the starting policy
    std::vector<IterationStats> iterations;  // iters entries
    Mlp final_policy;

    explicit RunArtifact(Mlp policy) : final_policy(std::move(policy)) {}
};

/// Full fine-tuning run: cfg.iters rounds of grpo_iteration with the old
/// policy refreshed every round, evaluating after each update. Deterministic
/// given cfg.seed.
inline RunArtifact run_experiment(const GrpoConfig& cfg, const RewardSpec& reward, const Mlp& base,
                                  const TimeGrid& grid) {
    cfg.validate();
    constexpr std::uint64_t kEvalStream = 0xe7a1;
    constexpr std::uint64_t kIterStream = 0x17e6;
    const std::uint64_t eval_seed = derive_seed(cfg.seed, kEvalStream);

    RunArtifact artifact(base);
    artifact.eval_rewards.push_back(eval_reward(artifact.final_policy, grid, reward, cfg.eval_rollouts, eval_seed));
    for (int iter = 1; iter <= cfg.iters; ++iter) {
        const Mlp old_policy = artifact.final_policy;
        IterationStats stats = grpo_iteration(artifact.final_policy, old_policy, cfg, reward, grid,
                                              derive_seed(derive_seed(cfg.seed, kIterStream), static_cast<std::uint64_t>(iter)));
        artifact.iterations.push_back(stats);
        artifact.eval_rewards.push_back(eval_reward(artifact.final_policy, grid, reward, cfg.eval_rollouts, eval_seed));
    }
    return artifact;
}

}  // namespace flowcps
