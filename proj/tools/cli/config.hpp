#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tsae/blackbox/blackbox.hpp"
#include "tsae/causal/causal.hpp"
#include "tsae/data/dataset.hpp"
#include "tsae/metrics/evaluate.hpp"
#include "tsae/sae/model.hpp"
#include "tsae/train/trainer.hpp"

namespace tsae::cli {

struct DatasetBlock {
    std::string generator = "freqshapes";  // freqshapes | seqcomb_uv | seqcomb_mv | lowvar | csv
    std::size_t n = 2000;
    std::size_t length = 50;
    std::size_t channels = 0;  // 0: generator default
    data::GeneratorOptions gen;
    double train_frac = 0.7;
    double val_frac = 0.15;
    std::string csv_path;
    data::CsvSchema csv;
};

struct BlackBoxBlock {
    bb::BlackBoxConfig cfg;
    bool external = false;
    std::vector<std::string> command;  // external predictor argv
    bool fd_fallback = true;
    double fd_step = 1e-4;
    bool require_qualified = true;
};

struct EvalBlock {
    metrics::EvalOptions opts;
    std::string split = "test";
};

struct ExplainBlock {
    std::string select = "test:0..9";
};

struct CounterfactualBlock {
    std::string select = "test:0..4";
    causal::CounterfactualOptions opts;
};

struct SweepBlock {
    train::SweepAxis axis = train::SweepAxis::Eta;
    std::vector<double> values{0.0, 0.05, 0.1, 0.2, 0.4, 0.8, 1.6, 3.2};
};

struct FxBlock {
    std::vector<std::string> checkpoints;  // empty: the sweep checkpoints of this run
    double removal_fraction = 0.2;
};

struct InteractionsBlock {
    std::size_t k_max = 2;
    std::size_t probes = 64;
};

/// Everything a run needs. Paths are absolute after parsing.
struct ExperimentConfig {
    std::string out = "run";
    std::uint64_t seed = 0;
    DatasetBlock dataset;
    BlackBoxBlock blackbox;
    sae::SAEConfig sae;
    train::TrainConfig train;
    EvalBlock eval;
    ExplainBlock explain;
    CounterfactualBlock counterfactual;
    causal::TheoremOptions theorem;
    SweepBlock sweep;
    FxBlock fx;
    InteractionsBlock interactions;

    /// Copies the run seed into every component that draws random numbers.
    void apply_seed(std::uint64_t s);
};

/// Parses `[section]` headers and `key = value` lines; `#` starts a comment. Relative paths
/// resolve against base_dir and input paths must exist. Unknown sections or keys throw.
ExperimentConfig parse_config(const std::string& text, const std::string& base_dir);
/// Reads a config file; an empty path gives the defaults. TSAE_OUT, when set, replaces `out`.
ExperimentConfig load_config(const std::string& path);

/// Every accepted `section.key`, for documentation and tests.
std::vector<std::string> config_keys();

}  // namespace tsae::cli
