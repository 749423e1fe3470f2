#include <cstdint>
#include <string>

#include <CLI11.hpp>

#include "flowcps/cli.hpp"

int main(int argc, char** argv) {
    CLI::App app{"flow-matching sampler audits and GRPO fine-tuning on toy distributions"};
    app.require_subcommand(1);

    flowcps::cli::CliOptions options;
    std::uint64_t seed_arg = 0;
    bool seed_given = false;

    const struct {
        const char* name;
        const char* description;
    } commands[] = {
        {"audit", "write analytic noise-level curves and a summary for the configured samplers"},
        {"pretrain", "train a velocity network on a toy data distribution"},
        {"grpo", "fine-tune a pretrained model against a verifiable reward"},
        {"compare", "run several sampler variants from one base model and report a verdict"},
    };
    for (const auto& cmd : commands) {
        auto* sub = app.add_subcommand(cmd.name, cmd.description);
        sub->add_option("--config", options.config_path, "config file (or a manifest.json to reproduce a run)")
            ->required();
        sub->add_flag("--force", options.force, "overwrite a non-empty output directory");
        auto* seed_opt = sub->add_option("--seed", seed_arg, "override [run] seed");
        sub->callback([&, name = std::string(cmd.name), seed_opt] {
            options.command = name;
            seed_given = seed_opt->count() > 0;
        });
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? flowcps::cli::kExitOk : flowcps::cli::kExitUsage;
    }

    if (seed_given) options.seed = seed_arg;
    return flowcps::cli::run_command(options);
}
