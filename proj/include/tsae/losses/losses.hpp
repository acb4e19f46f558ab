#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "tsae/blackbox/blackbox.hpp"
#include "tsae/numerics/graph.hpp"
#include "tsae/numerics/rng.hpp"
#include "tsae/sae/model.hpp"

namespace tsae::loss {

struct LossWeights {
    double eta = 0.1;
    double alpha = 0.8;
    double lambda = 0.9;
    double tau = 0.1;

    void validate() const;
};

/// Per-batch values of every objective term. `total` = sae + label_fidelity + alpha*cc + lambda*cf.
struct LossReport {
    double recon = 0.0;           // mean squared reconstruction error (summed over D,T)
    double sparsity = 0.0;        // mean active count
    double sae = 0.0;             // recon + eta * sparsity
    double label_fidelity = 0.0;
    double cc = 0.0;
    double cf = 0.0;
    double total = 0.0;
    double l0 = 0.0;              // exact mean count of c_k > 0
    double agreement = 0.0;       // fraction with argmax f(x) == argmax f(x~) (class mode)
};

/// An ablation c_k <- 0 applied to the listed batch members.
struct Intervention {
    std::size_t index = 0;  // concept index
    std::vector<std::size_t> members;
};

/// mean_b ||x_b - x~_b||^2. x and recon are [B,D,T].
NodeId reconstruction(Graph& g, NodeId x, NodeId recon);

/// Mean active count. JumpReLU uses the straight-through step surrogate so the
/// thresholds receive gradient; TopK counts are constants.
NodeId active_count(Graph& g, const sae::SAEModel& model, const sae::EncodeNodes& enc);

/// mean_b ||f(x_b) - f(x~_b)||^2 with f(x) held constant.
NodeId label_fidelity(Graph& g, const bb::BlackBox& f, const Tensor& x, NodeId recon);

/// Slot recombination plan: sample s copies coordinate k from member a_s when
/// take_a[s,k] = 1 and from member b_s otherwise. Members are paired at random
/// (a member with itself when B = 1).
struct Recombination {
    Tensor select_a;  // [S,B] one-hot rows
    Tensor select_b;  // [S,B]
    Tensor take_a;    // [S,d] 0/1
};
Recombination sample_recombination(std::size_t batch, std::size_t d, std::size_t n_samples, Rng& rng);
/// c' [S,d] as a graph node.
NodeId recombine(Graph& g, NodeId codes, const Recombination& plan);
Tensor recombine_codes(const Tensor& codes, std::size_t n_samples, Rng& rng);
/// mean_s ||E(g(c'_s)) - c'_s||^2 over c' [S,d].
NodeId compositional_consistency(Graph& g, sae::SAEModel& model, NodeId c_prime, const sae::Pass& pass);

/// Two ablations of concepts drawn from the union of active sets, each on two distinct members.
std::vector<Intervention> sample_interventions(const Tensor& codes, Rng& rng);
/// codes [B,d] -> stacked intervened codes [sum |members|, d] and their intervention ids.
NodeId apply_interventions(Graph& g, NodeId codes, const std::vector<Intervention>& interventions,
                           std::vector<std::size_t>& groups);
/// InfoNCE over rows of y [N,K] under cosine similarity. Rows sharing a group id are
/// positives; every other row enters the denominator. Mean over anchors.
NodeId info_nce(Graph& g, NodeId y, const std::vector<std::size_t>& groups, double tau);

struct ObjectiveOptions {
    LossWeights weights;
    std::size_t gamma = 1;
    bool training = true;
    bool update_stats = true;
    std::size_t cc_samples = 0;  // 0: one per batch member
    /// Replaces the sampled c' (used to hold the sample fixed across evaluations).
    std::optional<Tensor> c_prime;
};

struct Objective {
    NodeId total = 0;
    LossReport report;
    Tensor c_prime;  // the c' sample used by the consistency term
};

/// The full training objective on a batch x [B,D,T], B >= 2 when lambda > 0.
/// The counterfactual codes share the main decode pass so batch statistics see them.
Objective build_objective(Graph& g, sae::SAEModel& model, const bb::BlackBox& f, const Tensor& x,
                          const ObjectiveOptions& opts, Rng& rng);

}  // namespace tsae::loss
