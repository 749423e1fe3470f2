#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "flowcps/analysis.hpp"
#include "flowcps/config.hpp"
#include "flowcps/grpo.hpp"
#include "flowcps/velocity.hpp"

namespace flowcps::cli {

inline constexpr const char* kToolVersion = "0.1.0";

enum ExitStatus : int {
    kExitOk = 0,
    kExitRuntime = 1,
    kExitUsage = 2,
    kExitConflict = 3,
};

/// Refusal to clobber an existing non-empty output directory.
struct OutputConflict : std::runtime_error {
    explicit OutputConflict(const std::string& what) : std::runtime_error(what) {}
};

struct CliOptions {
    std::string command;
    std::string config_path;
    bool force = false;
    std::optional<std::uint64_t> seed;
};

namespace detail {

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open config file: " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

/// Accepts either plain config text or a previously written manifest.json
/// (recognized by a leading '{'), whose config_text field is the config.
inline std::string load_config_text(const std::filesystem::path& path) {
    std::string text = read_file(path);
    const auto first = text.find_first_not_of(" \t\r\n");
    if (first != std::string::npos && text[first] == '{') {
        nlohmann::json manifest;
        try {
            manifest = nlohmann::json::parse(text);
        } catch (const std::exception& e) {
            throw ConfigError("manifest parse error in " + path.string() + ": " + e.what());
        }
        if (!manifest.contains("config_text")) throw ConfigError("manifest has no config_text: " + path.string());
        return manifest["config_text"].get<std::string>();
    }
    return text;
}

inline std::uint64_t parse_seed(const std::string& s) {
    try {
        std::size_t used = 0;
        const std::uint64_t v = std::stoull(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("[run] seed: not an unsigned integer: '" + s + "'");
    }
}

inline void prepare_output_dir(const std::filesystem::path& dir, bool force) {
    namespace fs = std::filesystem;
    if (fs::exists(dir)) {
        if (!fs::is_directory(dir)) throw OutputConflict("output path exists and is not a directory: " + dir.string());
        if (!fs::is_empty(dir) && !force)
            throw OutputConflict("output directory is not empty (use --force): " + dir.string());
    }
    fs::create_directories(dir);
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
}

inline void write_manifest(const std::filesystem::path& dir, const std::string& command, const Config& cfg,
                           std::uint64_t seed) {
    nlohmann::json manifest;
    manifest["tool"] = "flowcps";
    manifest["version"] = kToolVersion;
    manifest["command"] = command;
    manifest["seed"] = seed;
    manifest["config_text"] = cfg.serialize();
    write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

inline GrpoConfig read_grpo_config(const Config& cfg, std::uint64_t seed) {
    GrpoConfig gc;
    gc.group_size = static_cast<int>(cfg.get_int("grpo", "group_size", 8));
    gc.clip_eps = cfg.get_double("grpo", "clip_eps", 0.2);
    gc.kl_beta = cfg.get_double("grpo", "kl_beta", 0.0);
    gc.lr = cfg.get_double("grpo", "lr", 0.01);
    gc.groups_per_iter = static_cast<int>(cfg.get_int("grpo", "groups_per_iter", 4));
    gc.iters = static_cast<int>(cfg.get_int("grpo", "iters", 100));
    gc.eval_rollouts = static_cast<int>(cfg.get_int("grpo", "eval_rollouts", 128));
    gc.seed = seed;
    return gc;
}

inline void write_rewards_csv(const std::filesystem::path& path, const RunArtifact& artifact) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    const double nan = std::numeric_limits<double>::quiet_NaN();
    out << "iter,mean_train_reward,mean_eval_reward,clip_frac,mean_ratio,grad_norm\n";
    for (std::size_t k = 0; k < artifact.eval_rewards.size(); ++k) {
        const bool trained = k > 0 && k - 1 < artifact.iterations.size();
        const IterationStats stats = trained ? artifact.iterations[k - 1] : IterationStats{nan, nan, nan, nan, nan};
        out << k << ',' << fmt17(stats.mean_train_reward) << ',' << fmt17(artifact.eval_rewards[k]) << ','
            << fmt17(stats.clip_frac) << ',' << fmt17(stats.mean_ratio) << ',' << fmt17(stats.grad_norm) << '\n';
    }
}

inline double curve_auc(const std::vector<double>& evals) {
    double sum = 0.0;
    for (double v : evals) sum += v;
    return evals.empty() ? 0.0 : sum / static_cast<double>(evals.size());
}

}  // namespace detail

/// Analytic noise-level audit: one curve CSV per (sampler, step count) pair
/// plus a summary of the worst deviation and flag counts.
inline void cmd_audit(const Config& cfg, const std::filesystem::path& out_dir, std::uint64_t seed) {
    const auto samplers = parse_sampler_list(cfg.require("audit", "samplers"));
    if (samplers.empty()) throw ConfigError("[audit] samplers: empty sampler list");
    std::vector<int> step_counts;
    if (auto sc = cfg.get("audit", "step_counts")) {
        for (const auto& part : flowcps::detail::split_top_level(*sc, ','))
            step_counts.push_back(static_cast<int>(flowcps::detail::parse_int(part, "[audit] step_counts")));
    } else {
        step_counts.push_back(parse_grid_spec(cfg.require("schedule", "grid")).step_count());
    }
    if (step_counts.empty()) throw ConfigError("[audit] step_counts: empty list");

    nlohmann::json summary;
    summary["curves"] = nlohmann::json::array();
    double overall_max = 0.0;
    for (const auto& kind : samplers) {
        for (int K : step_counts) {
            const NoiseCurve curve = noise_curve(kind, uniform_grid(K));
            const std::string file = kind.name() + "_K" + std::to_string(K) + ".csv";
            std::ofstream out(out_dir / file);
            if (!out) throw std::runtime_error("cannot write " + (out_dir / file).string());
            write_noise_curve_csv(out, curve);

            double max_error = 0.0;
            double argmax_t = 0.0;
            int negative_flags = 0;
            int radicand_flags = 0;
            for (const auto& p : curve.points) {
                if (p.flag == kCurveNegativePredNoise) ++negative_flags;
                if (p.flag == kCurveRadicandViolation) {
                    ++radicand_flags;
                    continue;
                }
                const double err = std::abs(p.actual - p.ideal);
                if (err > max_error) {
                    max_error = err;
                    argmax_t = p.t_next;
                }
            }
            overall_max = std::max(overall_max, max_error);
            summary["curves"].push_back({{"sampler", kind.name()},
                                         {"K", K},
                                         {"file", file},
                                         {"max_error", max_error},
                                         {"argmax_t", argmax_t},
                                         {"flags",
                                          {{"negative_pred_noise", negative_flags},
                                           {"radicand_violation", radicand_flags}}}});
        }
    }
    summary["max_error"] = overall_max;
    summary["seed"] = seed;
    detail::write_text(out_dir / "summary.json", summary.dump(2) + "\n");
}

/// Pretrains a velocity network on the configured data distribution and
/// writes the model file plus its metadata sidecar.
inline void cmd_pretrain(const Config& cfg, const std::filesystem::path& out_dir, std::uint64_t seed) {
    const DataSpec data = parse_data_spec(cfg.require("pretrain", "data"));

    MlpArchitecture arch;
    arch.dim = data.dim();
    const std::string hidden = cfg.get("pretrain", "hidden").value_or("48,48");
    for (const auto& part : flowcps::detail::split_top_level(hidden, ','))
        arch.hidden.push_back(static_cast<int>(flowcps::detail::parse_int(part, "[pretrain] hidden")));
    const std::string act = cfg.get("pretrain", "activation").value_or("tanh");
    if (act == "tanh") arch.activation = Activation::Tanh;
    else if (act == "relu") arch.activation = Activation::Relu;
    else throw ConfigError("[pretrain] activation: expected tanh or relu");

    const int steps = static_cast<int>(cfg.get_int("pretrain", "steps", 16000));
    const double lr = cfg.get_double("pretrain", "lr", 0.01);
    TrainOptions opts;
    opts.batch_size = static_cast<int>(cfg.get_int("pretrain", "batch", 256));
    opts.momentum = cfg.get_double("pretrain", "momentum", 0.9);

    TrainReport report;
    const Mlp net = train_fm(arch, data.sampler(), steps, lr, seed, opts, &report);
    const std::string model_out = cfg.get("pretrain", "model_out").value_or("model.fmv");
    save_model(net, out_dir / model_out, ModelMeta{seed, report.steps, report.final_loss});
}

/// Shared body of the grpo and compare commands: one fine-tuning run.
inline RunArtifact run_variant(const Config& cfg, const SamplerKind& kind, const Mlp& base,
                               const TimeGrid& grid, const RewardSpec& reward, std::uint64_t seed) {
    GrpoConfig gc = detail::read_grpo_config(cfg, seed);
    apply_sampler_to_grpo(gc, kind);
    try {
        gc.validate();
    } catch (const std::exception& e) {
        throw ConfigError(std::string("[grpo] ") + e.what());
    }
    return run_experiment(gc, reward, base, grid);
}

inline void cmd_grpo(const Config& cfg, const std::filesystem::path& out_dir, std::uint64_t seed) {
    const std::filesystem::path model_path = cfg.require("grpo", "model");
    if (!std::filesystem::exists(model_path)) throw ConfigError("[grpo] model: file not found: " + model_path.string());
    const Mlp base = load_model(model_path);
    const TimeGrid grid = parse_grid_spec(cfg.require("schedule", "grid"));
    const RewardSpec reward = parse_reward_spec(cfg.require("grpo", "reward"));
    const SamplerKind kind = parse_sampler_spec(cfg.require("grpo", "sampler"));

    const RunArtifact artifact = run_variant(cfg, kind, base, grid, reward, seed);
    detail::write_rewards_csv(out_dir / "rewards.csv", artifact);
    save_model(artifact.final_policy, out_dir / "model_final.fmv",
               ModelMeta{seed, static_cast<int>(artifact.iterations.size()), 0.0});
    detail::write_text(out_dir / "config.ini", cfg.serialize());
}

/// Runs every configured sampler variant from the same base model and seed,
/// then writes aligned eval curves and a verdict. Finished variants are
/// flushed to disk before later ones run, so partial results survive aborts.
inline void cmd_compare(const Config& cfg, const std::filesystem::path& out_dir, std::uint64_t seed) {
    const std::filesystem::path model_path = cfg.require("grpo", "model");
    if (!std::filesystem::exists(model_path)) throw ConfigError("[grpo] model: file not found: " + model_path.string());
    const Mlp base = load_model(model_path);
    const TimeGrid grid = parse_grid_spec(cfg.require("schedule", "grid"));
    const RewardSpec reward = parse_reward_spec(cfg.require("grpo", "reward"));
    const auto kinds = parse_sampler_list(cfg.require("grpo", "samplers"));
    if (kinds.empty()) throw ConfigError("[grpo] samplers: empty variant list");

    std::vector<std::string> names;
    std::vector<std::vector<double>> curves;
    nlohmann::json verdict;
    verdict["variants"] = nlohmann::json::array();
    verdict["degenerate"] = kinds.size() < 2;
    verdict["seed"] = seed;

    for (const auto& kind : kinds) {
        const std::string name = kind.name();
        const std::filesystem::path variant_dir = out_dir / name;
        std::filesystem::create_directories(variant_dir);
        const RunArtifact artifact = run_variant(cfg, kind, base, grid, reward, seed);
        detail::write_rewards_csv(variant_dir / "rewards.csv", artifact);
        save_model(artifact.final_policy, variant_dir / "model_final.fmv",
                   ModelMeta{seed, static_cast<int>(artifact.iterations.size()), 0.0});
        names.push_back(name);
        curves.push_back(artifact.eval_rewards);
        verdict["variants"].push_back({{"name", name},
                                       {"initial_eval", artifact.eval_rewards.front()},
                                       {"final_eval", artifact.eval_rewards.back()},
                                       {"auc_eval", detail::curve_auc(artifact.eval_rewards)}});
    }

    std::size_t best = 0;
    for (std::size_t i = 1; i < curves.size(); ++i)
        if (detail::curve_auc(curves[i]) > detail::curve_auc(curves[best])) best = i;
    verdict["best_auc_variant"] = names[best];

    std::ofstream aligned(out_dir / "eval_curves.csv");
    aligned << "iter";
    for (const auto& name : names) aligned << ",eval_" << name;
    aligned << "\n";
    std::size_t rows = 0;
    for (const auto& c : curves) rows = std::max(rows, c.size());
    for (std::size_t k = 0; k < rows; ++k) {
        aligned << k;
        for (const auto& c : curves) {
            aligned << ',';
            if (k < c.size()) aligned << fmt17(c[k]);
        }
        aligned << "\n";
    }
    detail::write_text(out_dir / "verdict.json", verdict.dump(2) + "\n");
}

/// Loads and resolves the config, prepares the output directory, writes the
/// manifest, and dispatches. Returns the process exit status.
inline int run_command(const CliOptions& options) {
    try {
        Config cfg = Config::parse(detail::load_config_text(options.config_path));
        if (options.seed) cfg.set("run", "seed", std::to_string(*options.seed));
        const std::uint64_t seed = detail::parse_seed(cfg.require("run", "seed"));
        const std::filesystem::path out_dir = cfg.require("run", "output_dir");

        detail::prepare_output_dir(out_dir, options.force);
        detail::write_manifest(out_dir, options.command, cfg, seed);

        if (options.command == "audit") cmd_audit(cfg, out_dir, seed);
        else if (options.command == "pretrain") cmd_pretrain(cfg, out_dir, seed);
        else if (options.command == "grpo") cmd_grpo(cfg, out_dir, seed);
        else if (options.command == "compare") cmd_compare(cfg, out_dir, seed);
        else throw ConfigError("unknown command: " + options.command);
        return kExitOk;
    } catch (const ConfigError& e) {
        std::cerr << "flowcps " << options.command << ": " << e.what() << "\n";
        return kExitUsage;
    } catch (const OutputConflict& e) {
        std::cerr << "flowcps " << options.command << ": " << e.what() << "\n";
        return kExitConflict;
    } catch (const std::exception& e) {
        std::cerr << "flowcps " << options.command << ": " << e.what() << "\n";
        return kExitRuntime;
    }
}

}  // namespace flowcps::cli
