#include "tsae/causal/causal.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace tsae::causal {

std::string rule_name(Rule r) {
    switch (r) {
    case Rule::SetTo: return "set";
    case Rule::ScaleBy: return "scale";
    case Rule::Ablate: return "ablate";
    }
    return "?";
}

Rule rule_from_name(const std::string& s) {
    if (s == "set") return Rule::SetTo;
    if (s == "scale") return Rule::ScaleBy;
    if (s == "ablate") return Rule::Ablate;
    throw std::invalid_argument("unknown intervention rule '" + s + "' (set, scale, ablate)");
}

double Intervention::apply(double c) const {
    switch (rule) {
    case Rule::SetTo: return magnitude;
    case Rule::ScaleBy: return c * magnitude;
    case Rule::Ablate: return 0.0;
    }
    return c;
}

void Intervention::validate(std::size_t d) const {
    if (index >= d) {
        throw std::invalid_argument("intervention on concept " + std::to_string(index) + " but d = " + std::to_string(d));
    }
    if (!std::isfinite(magnitude)) throw std::invalid_argument("intervention magnitude must be finite");
}

Tensor intervene(const Tensor& c, std::span<const Intervention> ivs) {
    if (c.rank() != 2) throw std::invalid_argument("intervene: expected codes [B,d], got " + shape_str(c.shape()));
    const std::size_t B = c.dim(0), d = c.dim(1);
    for (const auto& iv : ivs) iv.validate(d);
    Tensor out = c;
    for (std::size_t b = 0; b < B; ++b) {
        for (const auto& iv : ivs) out.at(b, iv.index) = iv.apply(out.at(b, iv.index));
    }
    return out;
}

namespace {

void check_batch(const ConceptModel& m, const Tensor& x, const char* who) {
    if (x.rank() != 3 || x.dim(1) != m.channels() || x.dim(2) != m.length()) {
        throw std::invalid_argument(std::string(who) + ": expected x [B," + std::to_string(m.channels()) + "," +
                                    std::to_string(m.length()) + "], got " + shape_str(x.shape()));
    }
}

}  // namespace

double cace(const bb::BlackBox& f, ConceptModel& model, const Tensor& x, std::span<const Intervention> ivs) {
    check_batch(model, x, "cace");
    const std::vector<std::size_t> cls = predicted_classes(f, f.predict_batch(x));
    const Tensor c = model.encode(x);
    const std::vector<double> before = scalarize(f, f.predict_batch(model.decode(c)), cls);
    const std::vector<double> after = scalarize(f, f.predict_batch(model.decode(intervene(c, ivs))), cls);
    double s = 0;
    for (std::size_t b = 0; b < before.size(); ++b) s += after[b] - before[b];
    return s / static_cast<double>(before.size());
}

double cace(const bb::BlackBox& f, ConceptModel& model, const Tensor& x, const Intervention& iv) {
    return cace(f, model, x, std::span<const Intervention>(&iv, 1));
}

std::vector<double> s_cf(ConceptModel& model, const Tensor& x, std::span<const Intervention> ivs) {
    check_batch(model, x, "s_cf");
    const Tensor c = model.encode(x);
    const Tensor before = model.encode(model.decode(c));
    const Tensor after = model.encode(model.decode(intervene(c, ivs)));
    const std::size_t B = c.dim(0), d = c.dim(1);
    std::vector<double> s(d, 0.0);
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t k = 0; k < d; ++k) s[k] += after.at(b, k) - before.at(b, k);
    }
    for (double& v : s) v /= static_cast<double>(B);
    return s;
}

std::vector<double> s_cf(ConceptModel& model, const Tensor& x, const Intervention& iv) {
    return s_cf(model, x, std::span<const Intervention>(&iv, 1));
}

namespace {

struct CfEval {
    Tensor y;     // [K]
    Tensor grad;  // [d], gradient of sum(y * weights(y)) w.r.t. delta_c; empty when weights returns nothing
};

template <class Weights>
CfEval cf_eval(ConceptModel& model, const bb::BlackBox& f, const Tensor& c, const Tensor& dc, Weights weights) {
    Graph g;
    const std::size_t d = c.size();
    const NodeId delta = g.variable("delta_c", dc.reshaped({1, d}));
    const NodeId codes = g.add(g.constant(c.reshaped({1, d})), delta);
    const NodeId y = f.apply(g, model.decode(g, codes));
    CfEval out;
    out.y = g.value(y).reshaped({g.value(y).size()});
    const std::optional<Tensor> w = weights(out.y);
    if (w) {
        const NodeId loss = g.sum(g.mul(y, g.constant(w->reshaped(g.shape(y)))));
        Gradients grads = g.backward(loss);
        out.grad = grads.at("delta_c").reshaped({d});
    }
    return out;
}

std::size_t argmax(const Tensor& y) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < y.size(); ++k) {
        if (y[k] > y[best]) best = k;
    }
    return best;
}

}  // namespace

CounterfactualResult generate_counterfactual(const Tensor& x, ConceptModel& model, const bb::BlackBox& f,
                                             const CounterfactualOptions& opts) {
    if (x.rank() != 2) throw std::invalid_argument("counterfactual: expected x [D,T], got " + shape_str(x.shape()));
    if (!(opts.step > 0) || !(opts.eps > 0)) throw std::invalid_argument("counterfactual: step and eps must be positive");
    const std::size_t d = model.concepts();
    const bool regression = f.output_mode() == bb::OutputMode::ScalarRegression;
    const Tensor c = model.encode(x.reshaped({1, x.dim(0), x.dim(1)})).reshaped({d});

    CounterfactualResult res;
    const Tensor y0 = f.predict(x);
    const std::size_t K = y0.size();
    if (regression) {
        if (!opts.target_value) throw std::invalid_argument("counterfactual: regression needs a target value");
        res.target_value = *opts.target_value;
    } else if (opts.target_class) {
        if (*opts.target_class >= K) throw std::invalid_argument("counterfactual: target class out of range");
        res.target_class = *opts.target_class;
    } else {
        if (K < 2) throw std::invalid_argument("counterfactual: a single class has no alternative target");
        std::vector<std::size_t> order(K);
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return y0[a] > y0[b]; });
        res.target_class = order[1];
    }

    Tensor onehot({K}, 0.0);
    onehot[regression ? 0 : res.target_class] = 1.0;
    Tensor dc({d}, 0.0);

    if (opts.subset.empty()) {
        if (opts.top_k == 0) throw std::invalid_argument("counterfactual: empty concept subset");
        const CfEval e = cf_eval(model, f, c, dc, [&](const Tensor&) { return std::optional<Tensor>(onehot); });
        std::vector<std::size_t> order(d);
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) { return std::abs(e.grad[a]) > std::abs(e.grad[b]); });
        order.resize(std::min(opts.top_k, d));
        std::sort(order.begin(), order.end());
        res.subset = std::move(order);
    } else {
        res.subset = opts.subset;
        std::sort(res.subset.begin(), res.subset.end());
        res.subset.erase(std::unique(res.subset.begin(), res.subset.end()), res.subset.end());
        if (res.subset.back() >= d) throw std::invalid_argument("counterfactual: subset index out of range");
    }

    for (std::size_t it = 0;; ++it) {
        bool stop = false;
        const CfEval e = cf_eval(model, f, c, dc, [&](const Tensor& y) -> std::optional<Tensor> {
            res.y_achieved = y;
            res.iterations = it;
            res.converged = regression ? std::abs(y[0] - res.target_value) <= opts.eps : argmax(y) == res.target_class;
            stop = res.converged || it == opts.max_iter;
            if (stop) return std::nullopt;
            // With these signs sum(y * sign) has the gradient of the L1 distance to the target.
            Tensor sign({K}, 0.0);
            for (std::size_t k = 0; k < K; ++k) {
                const double diff = y[k] - (regression ? res.target_value : onehot[k]);
                sign[k] = diff > 0 ? 1.0 : (diff < 0 ? -1.0 : 0.0);
            }
            return sign;
        });
        if (stop) break;
        for (std::size_t k : res.subset) {
            dc[k] -= opts.step * e.grad[k];
            if (opts.nonnegative) dc[k] = std::max(dc[k], -c[k]);
        }
    }
    res.delta_c = dc;
    Tensor codes = c;
    for (std::size_t k = 0; k < d; ++k) codes[k] += dc[k];
    res.x_cf = model.decode(codes.reshaped({1, d})).reshaped({x.dim(0), x.dim(1)});
    return res;
}

}  // namespace tsae::causal
