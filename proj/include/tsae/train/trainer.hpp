#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "tsae/blackbox/blackbox.hpp"
#include "tsae/data/dataset.hpp"
#include "tsae/losses/losses.hpp"
#include "tsae/numerics/params.hpp"
#include "tsae/sae/model.hpp"

namespace tsae::train {

struct TrainConfig {
    double lr = 1e-3;
    std::size_t batch_size = 64;
    double weight_decay = 0.01;
    std::size_t epochs = 100;
    std::uint64_t seed = 0;
    std::size_t eval_every = 1;
    std::size_t early_stop_patience = 10;
    OptimizerKind optimizer = OptimizerKind::Adam;
    double clip_norm = 5.0;
    loss::LossWeights weights;  // eta is taken from the SAE config
    std::size_t cc_samples = 0;
    /// When set, the full training state is written here after every epoch.
    std::string state_path;

    void validate() const;
};

std::string train_config_to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const std::string& s);

struct EpochRecord {
    std::size_t epoch = 0;  // 1-based
    std::size_t gamma = 1;  // TopK multiplier at the end of the epoch
    loss::LossReport train;
    loss::LossReport val;
    bool evaluated = false;
};

struct TrainResult {
    sae::SAEModel model;  // best checkpoint by validation total loss
    std::vector<EpochRecord> history;
    std::size_t best_epoch = 0;  // 0: the initialized model
    bool stopped_early = false;
    bool aborted = false;
    std::string abort_reason;
    std::uint64_t steps = 0;
};

/// Called after every epoch (after the state file is written); returning false stops training.
using EpochCallback = std::function<bool(const EpochRecord&)>;

/// Trains on split.train, validates on split.val. f must be frozen. Resumes from
/// cfg.state_path when `resume` is set and the file exists.
TrainResult train_sae(const data::Dataset& data, const data::Split& split, const bb::BlackBox& f,
                      const sae::SAEConfig& sae_cfg, const TrainConfig& cfg, bool resume = false,
                      const EpochCallback& on_epoch = {});

/// Mean objective report over a set of instances in evaluation mode with a fixed stream.
loss::LossReport evaluate_objective(sae::SAEModel& model, const bb::BlackBox& f, const data::Dataset& data,
                                    const std::vector<std::size_t>& idx, const TrainConfig& cfg);

void write_history_csv(const std::string& path, const std::vector<EpochRecord>& history);
std::string history_csv(const std::vector<EpochRecord>& history);

enum class SweepAxis { Eta, R, K, Alpha, Lambda };
SweepAxis sweep_axis_from_name(const std::string& s);
std::string sweep_axis_name(SweepAxis a);
/// Applies one sweep value to copies of the base configs.
void apply_sweep_value(SweepAxis axis, double value, sae::SAEConfig& sae_cfg, TrainConfig& cfg);

struct SweepPoint {
    double value = 0.0;
    std::optional<TrainResult> result;
    std::string error;  // set when the run failed
    loss::LossReport val;
};

/// One independent run per value with the base seed; failures are recorded and the sweep continues.
std::vector<SweepPoint> sweep(SweepAxis axis, const std::vector<double>& values, const data::Dataset& data,
                              const data::Split& split, const bb::BlackBox& f, const sae::SAEConfig& sae_cfg,
                              const TrainConfig& cfg);

}  // namespace tsae::train
