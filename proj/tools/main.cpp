#include <iostream>

#include "CLI11.hpp"
#include "cli/commands.hpp"

int main(int argc, char** argv) {
    CLI::App app{"Temporal sparse-autoencoder explanations for time-series predictors"};
    app.require_subcommand(1);
    tsae::cli::Options opts;
    std::uint64_t seed = 0;
    for (const auto& name : tsae::cli::command_names()) {
        auto* sub = app.add_subcommand(name);
        if (name == "serve-blackbox") {
            sub->add_option("--model", opts.model, "Black-box checkpoint to serve on stdin/stdout")->required();
            continue;
        }
        sub->add_option("--config", opts.config, "Experiment config file");
        sub->add_option("--seed", seed, "Override the run seed");
        sub->add_option("--threads", opts.threads, "Worker threads (runs are single-threaded)")->check(CLI::PositiveNumber);
        sub->add_flag("--resume", opts.resume, "Continue SAE training from the saved state");
    }
    CLI11_PARSE(app, argc, argv);
    auto* sub = app.get_subcommands().front();
    if (sub->get_name() != "serve-blackbox" && sub->count("--seed")) opts.seed = seed;
    return tsae::cli::run_command(sub->get_name(), opts, std::cin, std::cout, std::cerr);
}
