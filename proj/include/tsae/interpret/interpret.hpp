#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "tsae/causal/concepts.hpp"
#include "tsae/sae/model.hpp"

namespace tsae::interp {

struct SaliencyMask {
    Tensor scores;           // [D,T], nonnegative
    bool normalized = false; // max scaled to 1
    bool zero = false;       // nothing to normalize
};

struct RankedConcept {
    std::size_t index = 0;
    double activation = 0.0;
    double weight = 0.0;  // |f_s(g(c)) - f_s(g(c with this concept at 0))|
};

struct Explanation {
    SaliencyMask mask;
    std::vector<RankedConcept> ranking;  // active concepts, largest weight first
    std::size_t predicted_class = 0;
    bool no_active = false;
};

/// Saliency of x [D,T]: the sum over active concepts of |g(c) - g(c with the concept at 0)|,
/// each weighted by the change it causes in the scalarized output of f, then max-normalized.
Explanation explain(const Tensor& x, causal::ConceptModel& model, const bb::BlackBox& f);

std::string saliency_csv(const SaliencyMask& m);
std::string explanation_json(const Explanation& e);

enum class Kernel { Linear, Rbf };

std::string kernel_name(Kernel k);
Kernel kernel_from_name(const std::string& s);

struct AlignOptions {
    Kernel kernel = Kernel::Linear;
    double reg = 1e-3;
    double holdout = 0.3;
    std::size_t iterations = 500;
    double lr = 0.5;
    std::size_t rff_features = 256;
    std::size_t min_per_class = 10;
    double svr_epsilon = 0.1;
    std::uint64_t seed = 0;
};

/// Instances known to contain (positives) or lack (negatives) a labelled concept; [n,D,T].
struct ConceptSet {
    std::string label;
    Tensor positives;
    Tensor negatives;
};

struct ConceptAlignment {
    std::string label;
    Kernel kernel = Kernel::Linear;
    bool regression = false;
    std::vector<double> weights;  // over standardized (and, for rbf, random-feature) activations
    double bias = 0.0;
    double score = 0.0;           // held-out accuracy, or R^2 for regression
    std::size_t train_size = 0;
    std::size_t test_size = 0;
};

/// Max-margin classifier per label on encoder activations (hinge loss, subgradient descent),
/// scored on a stratified held-out split.
std::vector<ConceptAlignment> align_concepts(causal::ConceptModel& model, const std::vector<ConceptSet>& sets,
                                             const AlignOptions& opts = {});

/// Epsilon-insensitive regression of a concept strength from encoder activations; scored by R^2.
ConceptAlignment align_concept_strength(causal::ConceptModel& model, const std::string& label, const Tensor& x,
                                        const std::vector<double>& strength, const AlignOptions& opts = {});

/// Classifier on precomputed features [n,F] with 0/1 labels; exposed for testing.
ConceptAlignment fit_alignment(const std::string& label, const Tensor& features, const std::vector<double>& labels,
                               const AlignOptions& opts, bool regression = false);

std::string alignments_json(const std::vector<ConceptAlignment>& a);

struct InteractionEntry {
    std::size_t order = 0;
    std::size_t position = 0;
    double mean_abs = 0.0;     // mean |term| over probes and cells
    double mean_signed = 0.0;  // mean term value over probes and cells
};

struct InteractionReport {
    std::vector<InteractionEntry> entries;  // largest mean_abs first
    double psi0_mean = 0.0;
    double reconstruction_mean = 0.0;
};

/// Per (order, position) contribution of the decompositional decoder's terms over x [B,D,T],
/// for orders up to k_max.
InteractionReport global_interactions(sae::SAEModel& model, const Tensor& x, std::size_t k_max);

std::string interactions_json(const InteractionReport& r);

}  // namespace tsae::interp
