#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "tsae/numerics/tensor.hpp"

namespace tsae::metrics {

/// Raised for undefined metric inputs; `code` is a stable identifier for reports.
class MetricError : public std::invalid_argument {
public:
    MetricError(std::string code, const std::string& what) : std::invalid_argument(what), code_(std::move(code)) {}
    const std::string& code() const noexcept { return code_; }

private:
    std::string code_;
};

/// Average precision over scores sorted descending, tied scores forming one threshold.
/// Throws MetricError("no_positives") when gt has no 1s.
double auprc(std::span<const double> scores, std::span<const double> gt);
double auprc(const Tensor& scores, const Tensor& gt);

struct AupAur {
    double aup = 0.0;
    double aur = 0.0;
};
/// Precision and recall averaged over n thresholds evenly spaced in [min, max] score;
/// a cell is predicted when its score exceeds the threshold. Thresholds predicting
/// nothing count as precision 1.
AupAur aup_aur(std::span<const double> scores, std::span<const double> gt, std::size_t n_thresholds = 200);
AupAur aup_aur(const Tensor& scores, const Tensor& gt, std::size_t n_thresholds = 200);

struct Correlation {
    double value = 0.0;  // NaN when undefined
    bool defined = false;
};
/// Pearson correlation of average ranks. Constant input gives NaN with defined = false.
Correlation spearman(std::span<const double> a, std::span<const double> b);
/// Average ranks (1-based), ties sharing the mean of their positions.
std::vector<double> average_ranks(std::span<const double> v);

struct MmdResult {
    double value = 0.0;      // clamped at 0
    double raw = 0.0;        // unbiased estimate before clamping
    double bandwidth = 0.0;  // median pairwise distance over A and B
    bool bandwidth_fallback = false;
};
/// Unbiased MMD^2 with a Gaussian kernel between rows of a [n,p] and b [m,p].
MmdResult mmd(const Tensor& a, const Tensor& b);

struct KlKde {
    double kl = 0.0;
    double kde_ll = 0.0;
    double bandwidth = 0.0;
};
/// KL(reference || candidates) between `bins`-bin histograms over the joint range with
/// 1e-12 smoothing, and the mean log-density of candidates under a Gaussian KDE
/// (Silverman bandwidth) fit on the reference values.
KlKde kl_and_kde(std::span<const double> reference, std::span<const double> candidates, std::size_t bins = 200);

/// Paired t statistic of a - b (0 when the differences have zero spread and zero mean).
double paired_t(std::span<const double> a, std::span<const double> b);

}  // namespace tsae::metrics
