#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "tsae/causal/causal.hpp"
#include "tsae/metrics/faithfulness.hpp"

namespace tsae::causal {

data::FactorEdit sample_factor_edit(const data::GenerativeFactors& example, Rng& rng) {
    data::FactorEdit e;
    if (example.patterns.empty() || rng.bernoulli(0.2)) {
        e.field = "noise_sigma";
        e.value = rng.uniform(0.05, 1.0);
        return e;
    }
    e.pattern = rng.index(example.patterns.size());
    const data::Pattern& p = example.patterns[e.pattern];
    switch (p.kind) {
    case data::PatternKind::Spike: {
        static const char* fields[] = {"direction", "period", "amplitude", "phase"};
        e.field = fields[rng.index(4)];
        if (e.field == "direction") e.value = rng.bernoulli(0.5) ? 1.0 : -1.0;
        else if (e.field == "period") {
            const long hi = std::max<long>(5, std::min<long>(25, static_cast<long>(example.length / 2)));
            e.value = static_cast<double>(rng.integer(4, hi));
        } else if (e.field == "amplitude") e.value = rng.uniform(0.0, 4.0);
        else e.value = static_cast<double>(rng.integer(0, 9));
        break;
    }
    case data::PatternKind::Trend: {
        static const char* fields[] = {"direction", "amplitude", "wavelength"};
        e.field = fields[rng.index(3)];
        if (e.field == "direction") e.value = rng.bernoulli(0.5) ? 1.0 : -1.0;
        else if (e.field == "amplitude") e.value = rng.uniform(0.0, 4.0);
        else e.value = rng.uniform(2.0, 8.0) * static_cast<double>(std::max<std::size_t>(p.length, 1));
        break;
    }
    case data::PatternKind::LowVariance:
        e.field = "level";
        e.value = rng.uniform(-1.5, 1.5);
        break;
    }
    return e;
}

OrderingSummary summarize_effects(std::span<const EffectRecord> records) {
    OrderingSummary s;
    const std::size_t n = records.size();
    if (n >= 3) {
        std::vector<double> t(n), a(n);
        for (std::size_t i = 0; i < n; ++i) {
            t[i] = records[i].delta_true;
            a[i] = records[i].delta_approx;
        }
        s.spearman = metrics::spearman(t, a);
    } else {
        s.spearman.value = std::numeric_limits<double>::quiet_NaN();
    }
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            ++s.pairs;
            const double gap = records[i].delta_true - records[j].delta_true;
            const double err = std::max(records[i].eps_cf + records[i].eps_rec, records[j].eps_cf + records[j].eps_rec);
            if (gap == 0 || !(err < std::abs(gap) / 2)) continue;
            ++s.pairs_eligible;
            const double approx_gap = records[i].delta_approx - records[j].delta_approx;
            if ((gap > 0 && approx_gap > 0) || (gap < 0 && approx_gap < 0)) ++s.pairs_preserved;
        }
    }
    if (s.pairs_eligible) {
        s.ordering_fraction = static_cast<double>(s.pairs_preserved) / static_cast<double>(s.pairs_eligible);
    }
    return s;
}

namespace {

std::vector<std::size_t> probe_indices(const data::Dataset& d, const TheoremOptions& opts) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < d.size(); ++i) {
        if (d.items[i].factors) idx.push_back(i);
    }
    if (idx.empty()) throw std::invalid_argument("theorem validation needs a dataset with generative factors");
    Rng rng(derive_seed(opts.seed, 0x9b0e));
    rng.shuffle(idx);
    if (opts.probe_size && idx.size() > opts.probe_size) idx.resize(opts.probe_size);
    std::sort(idx.begin(), idx.end());
    return idx;
}

Tensor stack_rows(const std::vector<Tensor>& xs) {
    Shape s = xs.front().shape();
    s.insert(s.begin(), xs.size());
    std::vector<double> v;
    v.reserve(shape_size(s));
    for (const auto& x : xs) v.insert(v.end(), x.values().begin(), x.values().end());
    return Tensor(std::move(s), std::move(v));
}

double mean_of(const std::vector<double>& v) {
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

TheoremReport validate_theorem(ConceptModel& model, const bb::BlackBox& f, const data::Dataset& d,
                               const TheoremOptions& opts) {
    if (opts.interventions < 10) throw std::invalid_argument("theorem validation needs at least 10 interventions");
    const std::vector<std::size_t> probe = probe_indices(d, opts);
    const std::size_t P = probe.size(), dim = model.concepts();

    std::vector<Tensor> xs;
    for (std::size_t i : probe) xs.push_back(d.items[i].x);
    const Tensor X = stack_rows(xs);
    const std::vector<std::size_t> cls = predicted_classes(f, f.predict_batch(X));
    const std::vector<double> fx = scalarize(f, f.predict_batch(X), cls);
    const Tensor C = model.encode(X);
    const Tensor Xt = model.decode(C);
    const std::vector<double> fxt = scalarize(f, f.predict_batch(Xt), cls);
    const Tensor Ct = model.encode(Xt);

    Rng rng(derive_seed(opts.seed, 0x7e0));
    TheoremReport rep;
    for (std::size_t n = 0; n < opts.interventions; ++n) {
        data::FactorEdit edit;
        std::vector<std::size_t> members;  // positions in the probe
        std::vector<Tensor> cf;
        for (int attempt = 0; attempt < 100 && members.empty(); ++attempt) {
            const data::GenerativeFactors& example = *d.items[probe[rng.index(P)]].factors;
            edit = sample_factor_edit(example, rng);
            cf.clear();
            for (std::size_t p = 0; p < P; ++p) {
                try {
                    cf.push_back(data::intervene_factor(d.items[probe[p]].factors, edit));
                    members.push_back(p);
                } catch (const std::invalid_argument&) {
                }
            }
        }
        if (members.empty()) throw std::runtime_error("theorem validation: no factor edit applies to the probe set");

        const std::size_t m = members.size();
        std::vector<std::size_t> mcls(m);
        for (std::size_t i = 0; i < m; ++i) mcls[i] = cls[members[i]];
        const Tensor Xcf = stack_rows(cf);
        const std::vector<double> fxcf = scalarize(f, f.predict_batch(Xcf), mcls);

        EffectRecord r;
        r.edit = edit;
        r.instances = m;
        std::vector<double> dt(m);
        for (std::size_t i = 0; i < m; ++i) dt[i] = fxcf[i] - fx[members[i]];
        r.delta_true = mean_of(dt);

        if (opts.oracle) {
            r.delta_approx = r.delta_true;
        } else {
            const Tensor Ccf = model.encode(Xcf);
            const Tensor Ccf_t = model.encode(model.decode(Ccf));
            std::vector<double> s(dim, 0.0);
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t k = 0; k < dim; ++k) s[k] += Ccf_t.at(i, k) - Ct.at(members[i], k);
            }
            std::vector<std::size_t> order(dim);
            std::iota(order.begin(), order.end(), 0);
            std::stable_sort(order.begin(), order.end(),
                             [&](std::size_t a, std::size_t b) { return std::abs(s[a]) > std::abs(s[b]); });
            if (opts.matched_concepts) order.resize(std::min(opts.matched_concepts, dim));
            Tensor Cm = rows(C, members);
            for (std::size_t k : order) {
                double v = 0;
                for (std::size_t i = 0; i < m; ++i) v += Ccf.at(i, k);
                v /= static_cast<double>(m);
                if (k == order.front()) {
                    r.concept_index = k;
                    r.concept_value = v;
                }
                for (std::size_t i = 0; i < m; ++i) Cm.at(i, k) = opts.per_instance ? Ccf.at(i, k) : v;
            }
            r.matched = order;
            const std::vector<double> fxtcf = scalarize(f, f.predict_batch(model.decode(Cm)), mcls);
            std::vector<double> da(m), ecf(m), erec(m);
            for (std::size_t i = 0; i < m; ++i) {
                da[i] = fxtcf[i] - fxt[members[i]];
                ecf[i] = std::abs(fxtcf[i] - fxcf[i]);
                erec[i] = std::abs(fxt[members[i]] - fx[members[i]]);
            }
            r.delta_approx = mean_of(da);
            r.eps_cf = mean_of(ecf);
            r.eps_rec = mean_of(erec);
        }
        rep.records.push_back(r);
    }
    rep.summary = summarize_effects(rep.records);
    for (const auto& r : rep.records) {
        rep.mean_eps_cf += r.eps_cf;
        rep.mean_eps_rec += r.eps_rec;
    }
    rep.mean_eps_cf /= static_cast<double>(rep.records.size());
    rep.mean_eps_rec /= static_cast<double>(rep.records.size());
    return rep;
}

metrics::Correlation fx_error_correlation(std::span<const FxErrorPoint> points) {
    if (points.size() < 5) {
        throw std::invalid_argument("F_x / eps_cf correlation needs at least 5 checkpoints, got " +
                                    std::to_string(points.size()));
    }
    std::vector<double> e, fx;
    for (const auto& p : points) {
        e.push_back(p.eps_cf);
        fx.push_back(p.fx);
    }
    return metrics::spearman(e, fx);
}

FxErrorReport faithfulness_error_correlation(std::span<ConceptModel* const> models, const bb::BlackBox& f,
                                             const data::Dataset& d, const TheoremOptions& opts,
                                             double removal_fraction) {
    if (models.size() < 5) {
        throw std::invalid_argument("F_x / eps_cf correlation needs at least 5 checkpoints, got " +
                                    std::to_string(models.size()));
    }
    if (d.size() == 0) throw std::invalid_argument("F_x / eps_cf correlation needs instances");
    FxErrorReport rep;
    for (ConceptModel* m : models) {
        FxErrorPoint p;
        p.eps_cf = validate_theorem(*m, f, d, opts).mean_eps_cf;
        for (const auto& item : d.items) p.fx += metrics::faithfulness_fx(item.x, *m, f, removal_fraction).value;
        p.fx /= static_cast<double>(d.size());
        rep.points.push_back(p);
    }
    rep.rho = fx_error_correlation(rep.points);
    return rep;
}

std::string effects_to_json(const TheoremReport& r) {
    nlohmann::json recs = nlohmann::json::array();
    for (const auto& e : r.records) {
        recs.push_back({{"field", e.edit.field},
                        {"value", e.edit.value},
                        {"pattern", e.edit.pattern},
                        {"concept", e.concept_index},
                        {"concept_value", e.concept_value},
                        {"instances", e.instances},
                        {"delta_true", e.delta_true},
                        {"delta_approx", e.delta_approx},
                        {"eps_rec", e.eps_rec},
                        {"eps_cf", e.eps_cf}});
    }
    const auto& s = r.summary;
    nlohmann::json j = {{"records", recs},
                        {"spearman", s.spearman.defined ? nlohmann::json(s.spearman.value) : nlohmann::json(nullptr)},
                        {"spearman_defined", s.spearman.defined},
                        {"pairs", s.pairs},
                        {"pairs_eligible", s.pairs_eligible},
                        {"pairs_preserved", s.pairs_preserved},
                        {"ordering_fraction", s.ordering_fraction},
                        {"mean_eps_cf", r.mean_eps_cf},
                        {"mean_eps_rec", r.mean_eps_rec}};
    return j.dump(2);
}

}  // namespace tsae::causal
