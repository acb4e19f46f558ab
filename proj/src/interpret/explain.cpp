#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "tsae/interpret/interpret.hpp"
#include "tsae/metrics/faithfulness.hpp"

namespace tsae::interp {

Explanation explain(const Tensor& x, causal::ConceptModel& model, const bb::BlackBox& f) {
    if (x.rank() != 2 || x.dim(0) != model.channels() || x.dim(1) != model.length()) {
        throw std::invalid_argument("explain: expected x [" + std::to_string(model.channels()) + "," +
                                    std::to_string(model.length()) + "], got " + shape_str(x.shape()));
    }
    const std::size_t D = x.dim(0), T = x.dim(1), DT = D * T;
    const Tensor xb = x.reshaped({1, D, T});
    const std::vector<std::size_t> cls = causal::predicted_classes(f, f.predict_batch(xb));

    Explanation e;
    e.predicted_class = cls[0];
    e.mask.scores = Tensor({D, T}, 0.0);
    const Tensor c = model.encode(xb);
    const std::size_t d = c.size();
    std::vector<std::size_t> active;
    for (std::size_t k = 0; k < d; ++k) {
        if (c[k] != 0.0) active.push_back(k);
    }
    if (active.empty()) {
        e.no_active = true;
        e.mask.zero = true;
        return e;
    }

    const std::size_t A = active.size();
    Tensor codes({A + 1, d});
    for (std::size_t r = 0; r <= A; ++r) {
        for (std::size_t k = 0; k < d; ++k) codes.at(r, k) = c[k];
        if (r > 0) codes.at(r, active[r - 1]) = 0.0;
    }
    const Tensor rec = model.decode(codes);
    const std::vector<double> s =
        causal::scalarize(f, f.predict_batch(rec), std::vector<std::size_t>(A + 1, cls[0]));

    auto& sal = e.mask.scores;
    for (std::size_t j = 0; j < A; ++j) {
        const double w = std::abs(s[0] - s[j + 1]);
        e.ranking.push_back({active[j], c[active[j]], w});
        if (w == 0.0) continue;
        for (std::size_t i = 0; i < DT; ++i) sal[i] += w * std::abs(rec[i] - rec[(j + 1) * DT + i]);
    }
    std::stable_sort(e.ranking.begin(), e.ranking.end(),
                     [](const RankedConcept& a, const RankedConcept& b) { return a.weight > b.weight; });
    const double mx = *std::max_element(sal.values().begin(), sal.values().end());
    if (mx > 0) {
        for (double& v : sal.values()) v /= mx;
        e.mask.normalized = true;
    } else {
        e.mask.zero = true;
    }
    return e;
}

std::string saliency_csv(const SaliencyMask& m) {
    std::ostringstream os;
    os.precision(17);
    os << "channel,t,score\n";
    const std::size_t D = m.scores.dim(0), T = m.scores.dim(1);
    for (std::size_t ch = 0; ch < D; ++ch) {
        for (std::size_t t = 0; t < T; ++t) os << ch << ',' << t << ',' << m.scores.at(ch, t) << '\n';
    }
    return os.str();
}

std::string explanation_json(const Explanation& e) {
    nlohmann::json ranking = nlohmann::json::array();
    for (const auto& r : e.ranking) {
        ranking.push_back({{"concept", r.index}, {"activation", r.activation}, {"weight", r.weight}});
    }
    nlohmann::json scores = nlohmann::json::array();
    const std::size_t D = e.mask.scores.dim(0), T = e.mask.scores.dim(1);
    for (std::size_t ch = 0; ch < D; ++ch) {
        std::vector<double> rowv(T);
        for (std::size_t t = 0; t < T; ++t) rowv[t] = e.mask.scores.at(ch, t);
        scores.push_back(rowv);
    }
    return nlohmann::json{{"predicted_class", e.predicted_class},
                          {"no_active", e.no_active},
                          {"normalized", e.mask.normalized},
                          {"zero", e.mask.zero},
                          {"ranking", ranking},
                          {"saliency", scores}}
        .dump(2);
}

}  // namespace tsae::interp

namespace tsae::metrics {

FxResult faithfulness_fx(const Tensor& x, causal::ConceptModel& model, const bb::BlackBox& f,
                         double removal_fraction) {
    if (!(removal_fraction >= 0 && removal_fraction <= 1)) {
        throw std::invalid_argument("removal fraction must lie in [0,1]");
    }
    const interp::Explanation e = interp::explain(x, model, f);
    const std::size_t D = x.dim(0), T = x.dim(1);
    Tensor c = model.encode(x.reshaped({1, D, T}));
    FxResult r;
    r.active = e.ranking.size();
    r.no_active = e.no_active;
    r.removed = static_cast<std::size_t>(std::ceil(removal_fraction * static_cast<double>(r.active) - 1e-12));
    for (std::size_t j = 0; j < r.removed; ++j) c[e.ranking[j].index] = 0.0;
    const Tensor y = f.predict(x);
    const Tensor yr = f.predict(model.decode(c).reshaped({D, T}));
    for (std::size_t k = 0; k < y.size(); ++k) r.value += (y[k] - yr[k]) * (y[k] - yr[k]);
    return r;
}

}  // namespace tsae::metrics
