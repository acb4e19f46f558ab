#include "tsae/metrics/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <vector>

namespace tsae::metrics {

namespace {

void check_pair(std::span<const double> scores, std::span<const double> gt) {
    if (scores.size() != gt.size()) {
        throw MetricError("shape_mismatch", "saliency has " + std::to_string(scores.size()) + " cells, ground truth " +
                                                std::to_string(gt.size()));
    }
    for (double s : scores) {
        if (!std::isfinite(s)) throw MetricError("non_finite", "saliency contains non-finite scores");
    }
}

std::size_t count_positives(std::span<const double> gt) {
    std::size_t n = 0;
    for (double v : gt) n += v > 0.5;
    if (n == 0) throw MetricError("no_positives", "ground-truth mask has no positive cells");
    return n;
}

}  // namespace

double auprc(std::span<const double> scores, std::span<const double> gt) {
    check_pair(scores, gt);
    const std::size_t positives = count_positives(gt);
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    double ap = 0.0, prev_recall = 0.0;
    std::size_t tp = 0, seen = 0;
    for (std::size_t i = 0; i < order.size();) {
        const double s = scores[order[i]];
        while (i < order.size() && scores[order[i]] == s) {
            tp += gt[order[i]] > 0.5;
            ++seen;
            ++i;
        }
        const double recall = static_cast<double>(tp) / static_cast<double>(positives);
        const double precision = static_cast<double>(tp) / static_cast<double>(seen);
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    return ap;
}

double auprc(const Tensor& scores, const Tensor& gt) {
    if (scores.shape() != gt.shape()) throw MetricError("shape_mismatch", "saliency and mask shapes differ");
    return auprc(scores.values(), gt.values());
}

AupAur aup_aur(std::span<const double> scores, std::span<const double> gt, std::size_t n_thresholds) {
    check_pair(scores, gt);
    const std::size_t positives = count_positives(gt);
    if (n_thresholds < 2) throw std::invalid_argument("aup_aur needs at least 2 thresholds");
    const auto [lo_it, hi_it] = std::minmax_element(scores.begin(), scores.end());
    const double lo = *lo_it, hi = *hi_it;
    AupAur out;
    for (std::size_t i = 0; i < n_thresholds; ++i) {
        const double tau = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n_thresholds - 1);
        std::size_t predicted = 0, tp = 0;
        for (std::size_t j = 0; j < scores.size(); ++j) {
            if (scores[j] > tau) {
                ++predicted;
                tp += gt[j] > 0.5;
            }
        }
        out.aup += predicted == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(predicted);
        out.aur += static_cast<double>(tp) / static_cast<double>(positives);
    }
    out.aup /= static_cast<double>(n_thresholds);
    out.aur /= static_cast<double>(n_thresholds);
    return out;
}

AupAur aup_aur(const Tensor& scores, const Tensor& gt, std::size_t n_thresholds) {
    if (scores.shape() != gt.shape()) throw MetricError("shape_mismatch", "saliency and mask shapes differ");
    return aup_aur(scores.values(), gt.values(), n_thresholds);
}

std::vector<double> average_ranks(std::span<const double> v) {
    std::vector<std::size_t> order(v.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(v.size());
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
        const double r = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
        i = j + 1;
    }
    return ranks;
}

Correlation spearman(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw std::invalid_argument("spearman: inputs differ in length");
    if (a.size() < 3) throw std::invalid_argument("spearman: at least 3 values required");
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (!std::isfinite(a[i]) || !std::isfinite(b[i])) throw std::invalid_argument("spearman: non-finite value");
    }
    const auto ra = average_ranks(a), rb = average_ranks(b);
    const double n = static_cast<double>(a.size());
    const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
    const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < ra.size(); ++i) {
        sab += (ra[i] - ma) * (rb[i] - mb);
        saa += (ra[i] - ma) * (ra[i] - ma);
        sbb += (rb[i] - mb) * (rb[i] - mb);
    }
    if (saa == 0 || sbb == 0) return {std::numeric_limits<double>::quiet_NaN(), false};
    return {sab / std::sqrt(saa * sbb), true};
}

namespace {

double sq_dist(const double* a, const double* b, std::size_t p) {
    double s = 0;
    for (std::size_t i = 0; i < p; ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return s;
}

bool rows_less(const Tensor& a, const Tensor& b) {
    if (a.dim(0) != b.dim(0)) return a.dim(0) < b.dim(0);
    return std::lexicographical_compare(a.values().begin(), a.values().end(), b.values().begin(), b.values().end());
}

}  // namespace

MmdResult mmd(const Tensor& a_in, const Tensor& b_in) {
    if (a_in.rank() < 2 || b_in.rank() < 2) throw std::invalid_argument("mmd: expected sample sets [n, ...]");
    const std::size_t n = a_in.dim(0), m = b_in.dim(0);
    if (n < 2 || m < 2) throw std::invalid_argument("mmd: each set needs at least 2 samples");
    const std::size_t p = a_in.size() / n;
    if (b_in.size() / m != p) throw std::invalid_argument("mmd: sample dimensions differ");
    // Evaluate in a canonical order of the two sets so mmd(A,B) == mmd(B,A) bit-for-bit.
    const bool swap = rows_less(b_in, a_in);
    const Tensor& a = swap ? b_in : a_in;
    const Tensor& b = swap ? a_in : b_in;
    const std::size_t na = a.dim(0), nb = b.dim(0);
    const double* A = a.values().data();
    const double* B = b.values().data();

    std::vector<double> dists;
    dists.reserve((na + nb) * (na + nb - 1) / 2);
    auto row = [&](std::size_t i) { return i < na ? A + i * p : B + (i - na) * p; };
    for (std::size_t i = 0; i < na + nb; ++i) {
        for (std::size_t j = i + 1; j < na + nb; ++j) dists.push_back(std::sqrt(sq_dist(row(i), row(j), p)));
    }
    const std::size_t mid = dists.size() / 2;
    std::nth_element(dists.begin(), dists.begin() + static_cast<std::ptrdiff_t>(mid), dists.end());
    double median = dists[mid];
    if (dists.size() % 2 == 0) {
        const double lower = *std::max_element(dists.begin(), dists.begin() + static_cast<std::ptrdiff_t>(mid));
        median = 0.5 * (median + lower);
    }
    MmdResult out;
    out.bandwidth = median;
    if (!(median > 0)) {
        out.bandwidth = 1.0;
        out.bandwidth_fallback = true;
    }
    const double inv2s2 = 1.0 / (2.0 * out.bandwidth * out.bandwidth);
    auto k = [&](const double* x, const double* y) { return std::exp(-sq_dist(x, y, p) * inv2s2); };
    double kaa = 0, kbb = 0, kab = 0;
    for (std::size_t i = 0; i < na; ++i) {
        for (std::size_t j = i + 1; j < na; ++j) kaa += k(A + i * p, A + j * p);
    }
    for (std::size_t i = 0; i < nb; ++i) {
        for (std::size_t j = i + 1; j < nb; ++j) kbb += k(B + i * p, B + j * p);
    }
    for (std::size_t i = 0; i < na; ++i) {
        for (std::size_t j = 0; j < nb; ++j) kab += k(A + i * p, B + j * p);
    }
    const double dna = static_cast<double>(na), dnb = static_cast<double>(nb);
    out.raw = 2.0 * kaa / (dna * (dna - 1)) + 2.0 * kbb / (dnb * (dnb - 1)) - 2.0 * kab / (dna * dnb);
    out.value = std::max(0.0, out.raw);
    return out;
}

namespace {

double quantile_sorted(const std::vector<double>& v, double q) {
    const double pos = q * static_cast<double>(v.size() - 1);
    const std::size_t i = static_cast<std::size_t>(std::floor(pos));
    const double frac = pos - static_cast<double>(i);
    return i + 1 < v.size() ? v[i] * (1 - frac) + v[i + 1] * frac : v[i];
}

}  // namespace

KlKde kl_and_kde(std::span<const double> reference, std::span<const double> candidates, std::size_t bins) {
    if (reference.empty() || candidates.empty()) throw std::invalid_argument("kl_and_kde: empty input");
    if (bins == 0) throw std::invalid_argument("kl_and_kde: bins must be positive");
    std::vector<double> ref(reference.begin(), reference.end());
    std::sort(ref.begin(), ref.end());
    if (ref.front() == ref.back()) throw MetricError("degenerate_reference", "reference values are constant");
    const double n = static_cast<double>(ref.size());
    const double mean = std::accumulate(ref.begin(), ref.end(), 0.0) / n;
    double var = 0;
    for (double v : ref) var += (v - mean) * (v - mean);
    const double sd = std::sqrt(var / (n - 1 > 0 ? n - 1 : 1));
    const double iqr = quantile_sorted(ref, 0.75) - quantile_sorted(ref, 0.25);
    double spread = iqr > 0 ? std::min(sd, iqr / 1.34) : sd;
    KlKde out;
    out.bandwidth = 0.9 * spread * std::pow(n, -0.2);

    // Histograms over the joint range.
    const auto [cmin, cmax] = std::minmax_element(candidates.begin(), candidates.end());
    const double lo = std::min(ref.front(), *cmin), hi = std::max(ref.back(), *cmax);
    std::vector<double> p(bins, 0.0), q(bins, 0.0);
    auto bin_of = [&](double v) {
        const auto b = static_cast<std::size_t>((v - lo) / (hi - lo) * static_cast<double>(bins));
        return std::min(b, bins - 1);
    };
    for (double v : ref) p[bin_of(v)] += 1.0;
    for (double v : candidates) q[bin_of(v)] += 1.0;
    const double smooth = 1e-12;
    double zp = 0, zq = 0;
    for (std::size_t i = 0; i < bins; ++i) {
        p[i] = p[i] / n + smooth;
        q[i] = q[i] / static_cast<double>(candidates.size()) + smooth;
        zp += p[i];
        zq += q[i];
    }
    for (std::size_t i = 0; i < bins; ++i) out.kl += (p[i] / zp) * std::log((p[i] / zp) / (q[i] / zq));

    // Gaussian KDE; contributions beyond 8 bandwidths are below 1e-13 relative and skipped.
    const double h = out.bandwidth;
    const double norm = 1.0 / (n * h * std::sqrt(2.0 * std::numbers::pi));
    double ll = 0;
    for (double x : candidates) {
        auto first = std::lower_bound(ref.begin(), ref.end(), x - 8 * h);
        auto last = std::upper_bound(ref.begin(), ref.end(), x + 8 * h);
        double dens = 0;
        for (auto it = first; it != last; ++it) {
            const double z = (x - *it) / h;
            dens += std::exp(-0.5 * z * z);
        }
        ll += std::log(std::max(dens * norm, std::numeric_limits<double>::min()));
    }
    out.kde_ll = ll / static_cast<double>(candidates.size());
    return out;
}

double paired_t(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size() || a.size() < 2) throw std::invalid_argument("paired_t: need two equal-length samples of size >= 2");
    const double n = static_cast<double>(a.size());
    double mean = 0;
    for (std::size_t i = 0; i < a.size(); ++i) mean += a[i] - b[i];
    mean /= n;
    double ss = 0;
    for (std::size_t i = 0; i < a.size(); ++i) ss += (a[i] - b[i] - mean) * (a[i] - b[i] - mean);
    const double se = std::sqrt(ss / (n - 1) / n);
    if (se == 0) return mean == 0 ? 0.0 : std::copysign(std::numeric_limits<double>::infinity(), mean);
    return mean / se;
}

}  // namespace tsae::metrics
