#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>

#include "tsae/metrics/metrics.hpp"
#include "tsae/numerics/rng.hpp"

using namespace tsae;
using namespace tsae::metrics;

namespace {

// Brute force: for every distinct score (descending) as a ">=" threshold, count
// precision and recall directly and integrate recall steps.
double auprc_oracle(const std::vector<double>& s, const std::vector<double>& gt) {
    std::set<double, std::greater<>> thresholds(s.begin(), s.end());
    double positives = 0;
    for (double g : gt) positives += g;
    double ap = 0, prev_recall = 0;
    for (double t : thresholds) {
        double tp = 0, pred = 0;
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (s[i] >= t) {
                pred += 1;
                tp += gt[i];
            }
        }
        ap += (tp / positives - prev_recall) * (tp / pred);
        prev_recall = tp / positives;
    }
    return ap;
}

AupAur aup_aur_oracle(const std::vector<double>& s, const std::vector<double>& gt, int n) {
    const double lo = *std::min_element(s.begin(), s.end()), hi = *std::max_element(s.begin(), s.end());
    double positives = 0;
    for (double g : gt) positives += g;
    AupAur out;
    for (int i = 0; i < n; ++i) {
        const double t = lo + (hi - lo) * i / (n - 1);
        double tp = 0, pred = 0;
        for (std::size_t j = 0; j < s.size(); ++j) {
            if (s[j] > t) {
                pred += 1;
                tp += gt[j];
            }
        }
        out.aup += pred > 0 ? tp / pred : 1.0;
        out.aur += tp / positives;
    }
    out.aup /= n;
    out.aur /= n;
    return out;
}

}  // namespace

TEST_CASE("auprc hand cases") {
    const std::vector<double> gt{1, 0, 1, 0};
    CHECK(auprc(gt, gt) == 1.0);
    CHECK(std::abs(auprc(std::vector<double>{0.9, 0.8, 0.2, 0.1}, gt) - 0.8333333333) < 1e-6);
    const std::vector<double> flat(10, 0.3);
    const std::vector<double> gt10{1, 0, 0, 1, 0, 0, 0, 1, 0, 0};
    CHECK(std::abs(auprc(flat, gt10) - 0.3) < 1e-15);
    CHECK(std::abs(auprc(flat, gt10) - auprc_oracle(flat, gt10)) < 1e-15);
    try {
        auprc(std::vector<double>{0.1, 0.2}, std::vector<double>{0, 0});
        FAIL("expected an error");
    } catch (const MetricError& e) {
        CHECK(e.code() == "no_positives");
    }
    CHECK_THROWS_AS(auprc(std::vector<double>{0.1}, std::vector<double>{1, 0}), MetricError);
}

TEST_CASE("auprc agrees with brute force and ignores monotone transforms") {
    Rng rng(1);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 5 + rng.index(40);
        std::vector<double> s(n), gt(n);
        for (std::size_t i = 0; i < n; ++i) {
            s[i] = std::round(rng.uniform(0, 10)) / 10.0;  // plenty of ties
            gt[i] = rng.bernoulli(0.3) ? 1.0 : 0.0;
        }
        gt[rng.index(n)] = 1.0;
        const double ap = auprc(s, gt);
        CHECK(std::abs(ap - auprc_oracle(s, gt)) < 1e-12);
        CHECK(ap >= 0.0);
        CHECK(ap <= 1.0);
        std::vector<double> t(n);
        for (std::size_t i = 0; i < n; ++i) t[i] = std::exp(3 * s[i]) + 1.0;
        CHECK(auprc(t, gt) == ap);
    }
}

TEST_CASE("aup and aur") {
    const std::vector<double> gt{1, 0, 1, 0};
    const std::vector<double> s{0.9, 0.8, 0.2, 0.1};
    const AupAur got = aup_aur(s, gt, 200);
    const AupAur want = aup_aur_oracle(s, gt, 200);
    CHECK(std::abs(got.aup - want.aup) < 1e-12);
    CHECK(std::abs(got.aur - want.aur) < 1e-12);
    CHECK(aup_aur(gt, gt).aup == 1.0);
    const std::vector<double> all(4, 1.0);
    CHECK(aup_aur(s, all).aup == 1.0);

    Rng rng(2);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<double> r(30), g(30);
        for (std::size_t i = 0; i < 30; ++i) {
            r[i] = rng.uniform(-1, 1);
            g[i] = rng.bernoulli(0.4) ? 1.0 : 0.0;
        }
        g[0] = 1.0;
        const AupAur base = aup_aur(r, g, 50);
        const AupAur ref = aup_aur_oracle(r, g, 50);
        CHECK(std::abs(base.aup - ref.aup) < 1e-12);
        CHECK(std::abs(base.aur - ref.aur) < 1e-12);
        for (double scale : {2.0, 0.25}) {
            std::vector<double> t = r;
            for (double& v : t) v *= scale;
            const AupAur scaled = aup_aur(t, g, 50);
            CHECK(scaled.aup == base.aup);
            CHECK(scaled.aur == base.aur);
        }
    }
}

TEST_CASE("spearman") {
    const std::vector<double> a{1, 2, 3, 4};
    CHECK(spearman(a, std::vector<double>{1, 3, 2, 4}).value == 0.8);
    CHECK(spearman(a, std::vector<double>{10, 20, 30, 40}).value == 1.0);
    CHECK(spearman(a, std::vector<double>{4, 3, 2, 1}).value == -1.0);
    const Correlation flat = spearman(a, std::vector<double>{2, 2, 2, 2});
    CHECK_FALSE(flat.defined);
    CHECK(std::isnan(flat.value));
    CHECK_THROWS(spearman(std::vector<double>{1, 2}, std::vector<double>{1, 2}));
    CHECK(average_ranks(std::vector<double>{3, 1, 3, 2}) == std::vector<double>{3.5, 1, 3.5, 2});

    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<double> x(12), y(12), tx(12);
        for (std::size_t i = 0; i < 12; ++i) {
            x[i] = rng.normal();
            y[i] = x[i] + rng.normal();
            tx[i] = std::exp(x[i]) * 5 - 2;
        }
        CHECK(spearman(tx, y).value == doctest::Approx(spearman(x, y).value).epsilon(1e-14));
    }
}

TEST_CASE("mmd") {
    Rng rng(4);
    Tensor a({40, 3});
    for (double& v : a.values()) v = rng.normal();
    const MmdResult self = mmd(a, a);
    CHECK(self.value <= 1e-9);
    CHECK(self.raw <= 0.0);

    Tensor b({30, 3});
    for (double& v : b.values()) v = rng.normal(0.5, 1.0);
    CHECK(mmd(a, b).raw == mmd(b, a).raw);

    Tensor g1({500, 1}), g2({500, 1});
    for (double& v : g1.values()) v = rng.normal();
    for (double& v : g2.values()) v = rng.normal();
    CHECK(std::abs(mmd(g1, g2).raw) < 0.01);

    const Tensor zeros({6, 1}, 0.0), tens({6, 1}, 10.0);
    const MmdResult masses = mmd(zeros, tens);
    CHECK(masses.bandwidth == 10.0);
    CHECK(std::abs(masses.raw - 2.0 * (1.0 - std::exp(-100.0 / 200.0))) < 1e-12);
    const MmdResult same_point = mmd(zeros, zeros);
    CHECK(same_point.bandwidth_fallback);
    CHECK_THROWS(mmd(Tensor({1, 3}), a));
}

TEST_CASE("kl divergence and kde log-likelihood") {
    Rng rng(5);
    std::vector<double> ref(2000);
    for (double& v : ref) v = rng.normal();
    const KlKde self = kl_and_kde(ref, ref);
    CHECK(self.kl <= 1e-6);
    CHECK(self.kl >= -1e-12);

    std::vector<double> shifted = ref;
    for (double& v : shifted) v += 10.0;
    const KlKde far = kl_and_kde(ref, shifted);
    CHECK(far.kl > 5.0);
    CHECK(far.kde_ll < -20.0);
    CHECK(far.kde_ll < self.kde_ll);

    // Exact KDE at a single point, summing over every reference value.
    const double x0 = 0.0;
    const KlKde point = kl_and_kde(ref, std::vector<double>{x0});
    const double h = point.bandwidth;
    double dens = 0;
    for (double r : ref) dens += std::exp(-0.5 * (x0 - r) * (x0 - r) / (h * h));
    dens /= static_cast<double>(ref.size()) * h * std::sqrt(2 * std::numbers::pi);
    CHECK(std::abs(point.kde_ll - std::log(dens)) < 1e-10);

    CHECK_THROWS_AS(kl_and_kde(std::vector<double>(5, 1.0), ref), MetricError);
}

TEST_CASE("paired t statistic") {
    const std::vector<double> a{2, 3, 4, 5}, b{1, 2, 3, 5};
    // differences 1,1,1,0: mean 0.75, sd 0.5
    CHECK(paired_t(a, b) == doctest::Approx(0.75 / (0.5 / 2.0)));
    CHECK(paired_t(a, a) == 0.0);
}
