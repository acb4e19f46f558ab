#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "tsae/interpret/interpret.hpp"
#include "tsae/numerics/rng.hpp"

namespace tsae::interp {

std::string kernel_name(Kernel k) { return k == Kernel::Linear ? "linear" : "rbf"; }

Kernel kernel_from_name(const std::string& s) {
    if (s == "linear") return Kernel::Linear;
    if (s == "rbf") return Kernel::Rbf;
    throw std::invalid_argument("unknown kernel '" + s + "' (linear, rbf)");
}

namespace {

using Rows = std::vector<std::vector<double>>;

Rows to_rows(const Tensor& t) {
    const std::size_t n = t.dim(0), F = t.size() / n;
    Rows r(n, std::vector<double>(F));
    for (std::size_t i = 0; i < n; ++i) std::copy_n(t.values().begin() + i * F, F, r[i].begin());
    return r;
}

double dist(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s);
}

struct RandomFeatures {
    std::vector<std::vector<double>> w;
    std::vector<double> b;

    std::vector<double> map(const std::vector<double>& a) const {
        std::vector<double> z(w.size());
        const double scale = std::sqrt(2.0 / static_cast<double>(w.size()));
        for (std::size_t j = 0; j < w.size(); ++j) {
            double s = b[j];
            for (std::size_t i = 0; i < a.size(); ++i) s += w[j][i] * a[i];
            z[j] = scale * std::cos(s);
        }
        return z;
    }
};

// Random Fourier features for exp(-|a-b|^2 / (2 sigma^2)), sigma by the median heuristic.
RandomFeatures make_rff(const Rows& train, std::size_t m, Rng& rng) {
    std::vector<double> ds;
    const std::size_t n = std::min<std::size_t>(train.size(), 200);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) ds.push_back(dist(train[i], train[j]));
    }
    double sigma = 1.0;
    if (!ds.empty()) {
        std::nth_element(ds.begin(), ds.begin() + ds.size() / 2, ds.end());
        if (ds[ds.size() / 2] > 0) sigma = ds[ds.size() / 2];
    }
    RandomFeatures rf;
    const std::size_t F = train.front().size();
    rf.w.assign(m, std::vector<double>(F));
    rf.b.resize(m);
    for (std::size_t j = 0; j < m; ++j) {
        for (double& v : rf.w[j]) v = rng.normal(0.0, 1.0 / sigma);
        rf.b[j] = rng.uniform(0.0, 2.0 * std::numbers::pi);
    }
    return rf;
}

double margin(const std::vector<double>& w, double b, const std::vector<double>& z) {
    double s = b;
    for (std::size_t i = 0; i < z.size(); ++i) s += w[i] * z[i];
    return s;
}

}  // namespace

ConceptAlignment fit_alignment(const std::string& label, const Tensor& features, const std::vector<double>& labels,
                               const AlignOptions& opts, bool regression) {
    const std::size_t n = features.dim(0);
    if (labels.size() != n) throw std::invalid_argument("alignment: labels do not match the feature rows");
    if (!(opts.holdout > 0 && opts.holdout < 1)) throw std::invalid_argument("alignment: holdout must lie in (0,1)");
    Rng rng(derive_seed(opts.seed, 0xa119));

    std::vector<std::size_t> train, test;
    if (regression) {
        std::vector<std::size_t> all(n);
        std::iota(all.begin(), all.end(), 0);
        rng.shuffle(all);
        const auto nt = static_cast<std::size_t>(std::llround(opts.holdout * static_cast<double>(n)));
        test.assign(all.begin(), all.begin() + nt);
        train.assign(all.begin() + nt, all.end());
    } else {
        for (double cls : {0.0, 1.0}) {
            std::vector<std::size_t> g;
            for (std::size_t i = 0; i < n; ++i) {
                if (labels[i] == cls) g.push_back(i);
            }
            if (g.empty()) throw std::invalid_argument("alignment of '" + label + "' needs both classes");
            rng.shuffle(g);
            const auto nt = static_cast<std::size_t>(std::llround(opts.holdout * static_cast<double>(g.size())));
            test.insert(test.end(), g.begin(), g.begin() + nt);
            train.insert(train.end(), g.begin() + nt, g.end());
        }
    }
    if (train.empty() || test.empty()) throw std::invalid_argument("alignment: too few instances to hold out");

    const Rows raw = to_rows(features);
    const std::size_t F = raw.front().size();
    std::vector<double> mu(F, 0.0), sd(F, 0.0);
    for (std::size_t i : train) {
        for (std::size_t f = 0; f < F; ++f) mu[f] += raw[i][f];
    }
    for (double& v : mu) v /= static_cast<double>(train.size());
    for (std::size_t i : train) {
        for (std::size_t f = 0; f < F; ++f) sd[f] += (raw[i][f] - mu[f]) * (raw[i][f] - mu[f]);
    }
    for (double& v : sd) {
        v = std::sqrt(v / static_cast<double>(train.size()));
        if (v < 1e-12) v = 1.0;
    }
    Rows z(n, std::vector<double>(F));
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t f = 0; f < F; ++f) z[i][f] = (raw[i][f] - mu[f]) / sd[f];
    }
    if (opts.kernel == Kernel::Rbf) {
        Rows tr;
        for (std::size_t i : train) tr.push_back(z[i]);
        const RandomFeatures rf = make_rff(tr, opts.rff_features, rng);
        for (auto& v : z) v = rf.map(v);
    }
    const std::size_t P = z.front().size();

    auto target = [&](std::size_t i) { return regression ? labels[i] : 2.0 * labels[i] - 1.0; };
    auto objective = [&](const std::vector<double>& w, double b) {
        double s = 0;
        for (std::size_t i : train) {
            const double m = margin(w, b, z[i]);
            s += regression ? std::max(0.0, std::abs(m - target(i)) - opts.svr_epsilon)
                            : std::max(0.0, 1.0 - target(i) * m);
        }
        double ww = 0;
        for (double v : w) ww += v * v;
        return s / static_cast<double>(train.size()) + 0.5 * opts.reg * ww;
    };

    std::vector<double> w(P, 0.0), gw(P);
    double b = 0.0;
    std::vector<double> best_w = w;
    double best_b = b, best_obj = objective(w, b);
    for (std::size_t it = 0; it < opts.iterations; ++it) {
        for (std::size_t p = 0; p < P; ++p) gw[p] = opts.reg * w[p];
        double gb = 0;
        const double inv = 1.0 / static_cast<double>(train.size());
        for (std::size_t i : train) {
            const double m = margin(w, b, z[i]);
            double coef = 0;
            if (regression) {
                const double r = m - target(i);
                if (std::abs(r) > opts.svr_epsilon) coef = r > 0 ? 1.0 : -1.0;
            } else if (target(i) * m < 1.0) {
                coef = -target(i);
            }
            if (coef == 0) continue;
            for (std::size_t p = 0; p < P; ++p) gw[p] += inv * coef * z[i][p];
            gb += inv * coef;
        }
        const double step = opts.lr / std::sqrt(static_cast<double>(it) + 1.0);
        for (std::size_t p = 0; p < P; ++p) w[p] -= step * gw[p];
        b -= step * gb;
        const double obj = objective(w, b);
        if (obj < best_obj) {
            best_obj = obj;
            best_w = w;
            best_b = b;
        }
    }

    ConceptAlignment a;
    a.label = label;
    a.kernel = opts.kernel;
    a.regression = regression;
    a.weights = best_w;
    a.bias = best_b;
    a.train_size = train.size();
    a.test_size = test.size();
    if (regression) {
        double mean = 0;
        for (std::size_t i : test) mean += labels[i];
        mean /= static_cast<double>(test.size());
        double ss_res = 0, ss_tot = 0;
        for (std::size_t i : test) {
            const double r = margin(best_w, best_b, z[i]) - labels[i];
            ss_res += r * r;
            ss_tot += (labels[i] - mean) * (labels[i] - mean);
        }
        a.score = ss_tot > 0 ? 1.0 - ss_res / ss_tot : 0.0;
    } else {
        std::size_t correct = 0;
        for (std::size_t i : test) {
            const bool pos = margin(best_w, best_b, z[i]) > 0;
            if (pos == (labels[i] == 1.0)) ++correct;
        }
        a.score = static_cast<double>(correct) / static_cast<double>(test.size());
    }
    return a;
}

std::vector<ConceptAlignment> align_concepts(causal::ConceptModel& model, const std::vector<ConceptSet>& sets,
                                             const AlignOptions& opts) {
    std::vector<ConceptAlignment> out;
    for (const auto& s : sets) {
        const std::size_t np = s.positives.rank() ? s.positives.dim(0) : 0;
        const std::size_t nn = s.negatives.rank() ? s.negatives.dim(0) : 0;
        if (np < opts.min_per_class || nn < opts.min_per_class) {
            throw std::invalid_argument("alignment of '" + s.label + "' needs at least " +
                                        std::to_string(opts.min_per_class) + " positives and negatives, got " +
                                        std::to_string(np) + " and " + std::to_string(nn));
        }
        const Tensor cp = model.encode(s.positives), cn = model.encode(s.negatives);
        const std::size_t d = cp.dim(1);
        std::vector<double> v(cp.values().begin(), cp.values().end());
        v.insert(v.end(), cn.values().begin(), cn.values().end());
        std::vector<double> labels(np, 1.0);
        labels.resize(np + nn, 0.0);
        out.push_back(fit_alignment(s.label, Tensor({np + nn, d}, std::move(v)), labels, opts));
    }
    return out;
}

ConceptAlignment align_concept_strength(causal::ConceptModel& model, const std::string& label, const Tensor& x,
                                        const std::vector<double>& strength, const AlignOptions& opts) {
    if (x.rank() != 3 || strength.size() != x.dim(0)) {
        throw std::invalid_argument("alignment of '" + label + "': one strength per instance required");
    }
    if (strength.size() < 2 * opts.min_per_class) {
        throw std::invalid_argument("alignment of '" + label + "' needs at least " +
                                    std::to_string(2 * opts.min_per_class) + " instances");
    }
    return fit_alignment(label, model.encode(x), strength, opts, true);
}

std::string alignments_json(const std::vector<ConceptAlignment>& as) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& a : as) {
        j.push_back({{"label", a.label},
                     {"kernel", kernel_name(a.kernel)},
                     {"regression", a.regression},
                     {a.regression ? "r2" : "accuracy", a.score},
                     {"train_size", a.train_size},
                     {"test_size", a.test_size},
                     {"bias", a.bias},
                     {"weights", a.weights}});
    }
    return j.dump(2);
}

InteractionReport global_interactions(sae::SAEModel& model, const Tensor& x, std::size_t k_max) {
    if (k_max == 0) throw std::invalid_argument("global interactions: k_max must be at least 1");
    if (model.config().decoder_kind == sae::DecoderKind::Decompositional && k_max > model.config().k_max) {
        throw std::invalid_argument("global interactions: k_max " + std::to_string(k_max) +
                                    " exceeds the decoder's " + std::to_string(model.config().k_max));
    }
    const sae::Decomposition dec = model.decode_decompositional(model.encode(x));
    InteractionReport r;
    auto mean = [](const Tensor& t) {
        return std::accumulate(t.values().begin(), t.values().end(), 0.0) / static_cast<double>(t.size());
    };
    r.psi0_mean = mean(dec.psi0);
    r.reconstruction_mean = mean(dec.output);
    for (const auto& t : dec.terms) {
        if (t.order > k_max) continue;
        InteractionEntry e{t.order, t.position, 0.0, mean(t.value)};
        for (double v : t.value.values()) e.mean_abs += std::abs(v);
        e.mean_abs /= static_cast<double>(t.value.size());
        r.entries.push_back(e);
    }
    std::stable_sort(r.entries.begin(), r.entries.end(),
                     [](const InteractionEntry& a, const InteractionEntry& b) { return a.mean_abs > b.mean_abs; });
    return r;
}

std::string interactions_json(const InteractionReport& r) {
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& e : r.entries) {
        entries.push_back({{"order", e.order},
                           {"position", e.position},
                           {"mean_abs", e.mean_abs},
                           {"mean_signed", e.mean_signed}});
    }
    return nlohmann::json{{"psi0_mean", r.psi0_mean},
                          {"reconstruction_mean", r.reconstruction_mean},
                          {"entries", entries}}
        .dump(2);
}

}  // namespace tsae::interp
