#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "tsae/numerics/tensor.hpp"

namespace tsae::data {

enum class PatternKind { Spike, Trend, LowVariance };

std::string pattern_kind_name(PatternKind k);

/// One class-determining structure injected into the background noise.
struct Pattern {
    PatternKind kind = PatternKind::Spike;
    std::size_t channel = 0;
    int direction = 1;        // +1 up/increasing, -1 down/decreasing
    // Spike trains: positions (phase mod period) + m*period.
    std::size_t period = 10;
    std::size_t phase = 0;
    double amplitude = 2.0;
    // Trends and low-variance segments occupy [start, start + length).
    std::size_t start = 0;
    std::size_t length = 0;
    double wavelength = 0.0;  // trend sinusoid wavelength
    double level = 0.0;       // low-variance segment mean
    double sigma = 0.0;       // low-variance segment noise sd
};

/// Latent parameters that regenerate an instance exactly.
struct GenerativeFactors {
    std::string generator;  // "freqshapes", "seqcomb_uv", "seqcomb_mv", "lowvar"
    std::size_t channels = 1;
    std::size_t length = 0;
    std::uint64_t noise_seed = 0;
    double noise_sigma = 0.5;
    std::vector<Pattern> patterns;
};

struct LabeledSeries {
    Tensor x;        // [D, T]
    double y = 0.0;  // class index or regression target
    Tensor gt_mask;  // [D, T] of 0/1; all zeros when has_mask is false
    bool has_mask = false;
    std::optional<GenerativeFactors> factors;

    int label() const { return static_cast<int>(y); }
};

struct Dataset {
    std::string name;
    std::size_t channels = 1;
    std::size_t length = 0;
    std::size_t n_classes = 0;  // 0 means regression targets
    std::vector<LabeledSeries> items;

    std::size_t size() const noexcept { return items.size(); }
    bool regression() const noexcept { return n_classes == 0; }
};

struct GeneratorOptions {
    std::size_t channels = 0;  // 0 selects the generator default
    double noise_sigma = 0.5;
    double amplitude = 2.0;
    std::size_t max_classes = 4;  // lowvar only
};

constexpr double kDefaultNoiseSigma = 0.5;
constexpr double kSpikeAmplitude = 2.0;

Dataset gen_freqshapes(std::size_t n, std::size_t T, std::uint64_t seed, const GeneratorOptions& opt = {});
Dataset gen_seqcomb_uv(std::size_t n, std::size_t T, std::uint64_t seed, const GeneratorOptions& opt = {});
Dataset gen_seqcomb_mv(std::size_t n, std::size_t T, std::size_t D, std::uint64_t seed,
                       const GeneratorOptions& opt = {});
Dataset gen_lowvar(std::size_t n, std::size_t T, std::size_t D, std::uint64_t seed, const GeneratorOptions& opt = {});
/// Dispatch by generator name.
Dataset generate(const std::string& generator, std::size_t n, std::size_t T, std::size_t D, std::uint64_t seed,
                 const GeneratorOptions& opt = {});

/// Renders the series described by the factors (noise realization included).
Tensor render(const GenerativeFactors& f);
Tensor render_mask(const GenerativeFactors& f);
/// Class implied by the generator rule, or -1 when the factors match no class.
int relabel(const GenerativeFactors& f);

/// A single-field change of one pattern ("direction", "period", "amplitude", "phase",
/// "start", "length", "channel", "level", "wavelength") or of the background ("noise_sigma").
struct FactorEdit {
    std::string field;
    double value = 0.0;
    std::size_t pattern = 0;
};

/// The edit that undoes `edit` on `f`.
FactorEdit inverse_edit(const GenerativeFactors& f, const FactorEdit& edit);
GenerativeFactors apply_edit(const GenerativeFactors& f, const FactorEdit& edit);
/// Ground-truth do-operation: regenerates the series with one factor changed and the same noise.
Tensor intervene_factor(const GenerativeFactors& f, const FactorEdit& edit);
Tensor intervene_factor(const std::optional<GenerativeFactors>& f, const FactorEdit& edit);

struct Split {
    std::vector<std::size_t> train;
    std::vector<std::size_t> val;
    std::vector<std::size_t> test;
};

/// Class-stratified split (plain shuffle for regression) into train/val/rest.
Split stratified_split(const Dataset& d, std::uint64_t seed, double train_frac = 0.7, double val_frac = 0.15);
Dataset subset(const Dataset& d, const std::vector<std::size_t>& idx);

struct CsvSchema {
    std::vector<std::string> feature_columns;  // empty: every column not named elsewhere
    std::string label_column;                  // empty: targets all zero
    std::string timestamp_column;              // ignored column
    std::vector<std::string> mask_columns;     // optional ground truth, one per feature
    bool regression = false;
    std::size_t window = 0;
    std::size_t stride = 1;
};

/// Windows a CSV table (header row required) into D x T instances; the label of a window
/// is taken from its last row.
Dataset load_csv(const std::string& path, const CsvSchema& schema);

void write_cache(const std::string& path, const Dataset& d);
Dataset read_cache(const std::string& path);

std::string factors_to_json(const GenerativeFactors& f);
GenerativeFactors factors_from_json(const std::string& s);

}  // namespace tsae::data
