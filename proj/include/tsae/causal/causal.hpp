#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tsae/causal/concepts.hpp"
#include "tsae/data/dataset.hpp"
#include "tsae/metrics/metrics.hpp"

namespace tsae::causal {

enum class Rule { SetTo, ScaleBy, Ablate };

std::string rule_name(Rule r);
Rule rule_from_name(const std::string& s);

/// Replaces concept `index` with a value derived from the current one.
struct Intervention {
    std::size_t index = 0;
    Rule rule = Rule::Ablate;
    double magnitude = 0.0;

    double apply(double c) const;
    void validate(std::size_t d) const;
};

/// Applies the interventions jointly (in order) to every row of c [B,d].
Tensor intervene(const Tensor& c, std::span<const Intervention> ivs);

/// Mean over x [B,D,T] of f(g(I(c))) - f(g(c)) on the scalarized output; in class mode
/// the class is the one f predicts for x.
double cace(const bb::BlackBox& f, ConceptModel& model, const Tensor& x, std::span<const Intervention> ivs);
double cace(const bb::BlackBox& f, ConceptModel& model, const Tensor& x, const Intervention& iv);

/// Mean over x of E(g(I(c))) - E(g(c)); length d.
std::vector<double> s_cf(ConceptModel& model, const Tensor& x, std::span<const Intervention> ivs);
std::vector<double> s_cf(ConceptModel& model, const Tensor& x, const Intervention& iv);

struct CounterfactualOptions {
    /// Class mode: defaults to the second most probable class of f(x).
    std::optional<std::size_t> target_class;
    /// Regression mode: required.
    std::optional<double> target_value;
    /// Concepts allowed to move; empty selects the top_k by |d f(g(c)) / d c_k|.
    std::vector<std::size_t> subset;
    std::size_t top_k = 5;
    double step = 0.05;
    double eps = 1e-2;
    std::size_t max_iter = 500;
    /// Keep c + delta_c inside the nonnegative code domain.
    bool nonnegative = true;
};

struct CounterfactualResult {
    Tensor delta_c;      // [d], zero outside subset
    Tensor x_cf;         // [D,T]
    Tensor y_achieved;   // [K]
    std::size_t target_class = 0;
    double target_value = 0.0;
    std::vector<std::size_t> subset;
    std::size_t iterations = 0;
    bool converged = false;
};

/// Gradient descent on |f(g(c + delta_c)) - y_cf| over the selected concepts. Class mode
/// converges once the target class is the argmax; regression once |y - y_cf| <= eps.
CounterfactualResult generate_counterfactual(const Tensor& x, ConceptModel& model, const bb::BlackBox& f,
                                             const CounterfactualOptions& opts = {});

struct EffectRecord {
    data::FactorEdit edit;
    std::size_t concept_index = 0;   // largest |s_cf|
    double concept_value = 0.0;      // its post-edit mean
    std::vector<std::size_t> matched;
    std::size_t instances = 0;
    double delta_true = 0.0;
    double delta_approx = 0.0;
    double eps_rec = 0.0;
    double eps_cf = 0.0;
};

struct OrderingSummary {
    metrics::Correlation spearman;
    std::size_t pairs = 0;
    std::size_t pairs_eligible = 0;
    std::size_t pairs_preserved = 0;
    /// preserved / eligible; 1 when nothing is eligible.
    double ordering_fraction = 1.0;
};

/// Pairs with a nonzero true gap whose larger total error (eps_cf + eps_rec) is below half
/// the gap are eligible; an eligible pair is preserved when delta_approx orders it the same way.
OrderingSummary summarize_effects(std::span<const EffectRecord> records);

struct TheoremOptions {
    std::size_t interventions = 50;
    std::size_t probe_size = 64;
    std::uint64_t seed = 0;
    /// Concepts (largest |s_cf| first) moved by the matched latent intervention; 0 moves all.
    std::size_t matched_concepts = 0;
    /// Move each matched concept to the instance's own post-edit code instead of the probe mean.
    bool per_instance = true;
    /// Sets delta_approx to delta_true and both errors to zero.
    bool oracle = false;
};

struct TheoremReport {
    std::vector<EffectRecord> records;
    OrderingSummary summary;
    double mean_eps_cf = 0.0;
    double mean_eps_rec = 0.0;
};

/// Draws a single-field edit suited to the generator that produced `example`.
data::FactorEdit sample_factor_edit(const data::GenerativeFactors& example, Rng& rng);

/// For each sampled factor edit: the true effect from regenerated series, and the latent
/// approximation that moves the matched concepts to their post-edit codes. The defaults move
/// every concept (c -> E(x_cf)); matched_concepts = 1 with per_instance = false sets only the
/// concept with the largest |s_cf| to its post-edit mean.
TheoremReport validate_theorem(ConceptModel& model, const bb::BlackBox& f, const data::Dataset& d,
                               const TheoremOptions& opts = {});

struct FxErrorPoint {
    double eps_cf = 0.0;
    double fx = 0.0;
};

/// Spearman correlation between eps_cf and F_x; needs at least 5 points.
metrics::Correlation fx_error_correlation(std::span<const FxErrorPoint> points);

struct FxErrorReport {
    std::vector<FxErrorPoint> points;
    metrics::Correlation rho;
};

/// One point per model: mean eps_cf from validate_theorem and mean F_x over every instance of d.
FxErrorReport faithfulness_error_correlation(std::span<ConceptModel* const> models, const bb::BlackBox& f,
                                             const data::Dataset& d, const TheoremOptions& opts = {},
                                             double removal_fraction = 0.2);

std::string effects_to_json(const TheoremReport& r);

}  // namespace tsae::causal
