#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "tsae/causal/concepts.hpp"
#include "tsae/data/dataset.hpp"

namespace tsae::metrics {

struct EvalOptions {
    double removal_fraction = 0.2;
    std::size_t thresholds = 200;
    std::size_t kl_bins = 200;
    /// Flattened values kept for KL and KDE; larger sets are subsampled.
    std::size_t max_points = 4096;
    std::uint64_t seed = 0;
    /// Scores the ground-truth mask itself instead of the explanation (pipeline check).
    bool oracle_saliency = false;
};

/// Saliency scores are means over instances with a ground-truth mask and at least one
/// positive; the random control scores uniform noise on the same instances.
struct EvalReport {
    std::size_t instances = 0;
    std::size_t scored_instances = 0;
    double auprc = 0.0, aup = 0.0, aur = 0.0;
    double random_auprc = 0.0, random_aup = 0.0, random_aur = 0.0;
    double auprc_t = 0.0;  // paired t statistic, model vs random
    double fx_mean = 0.0, fx_std = 0.0;
    std::size_t fx_no_active = 0;
    double kl = 0.0, kde_ll = 0.0;
    double mmd = 0.0, mmd_raw = 0.0;
    bool mmd_bandwidth_fallback = false;
    double agreement = 0.0;  // argmax f(g(E x)) == argmax f(x); NaN for regression
    double recon_mse = 0.0;
    double mean_l0 = 0.0;
};

EvalReport evaluate(causal::ConceptModel& model, const bb::BlackBox& f, const data::Dataset& d,
                    const std::vector<std::size_t>& idx, const EvalOptions& opts = {});

std::string report_json(const EvalReport& r);
std::string report_csv_header();
std::string report_csv_row(const EvalReport& r);

}  // namespace tsae::metrics
