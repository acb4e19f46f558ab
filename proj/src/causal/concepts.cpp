#include "tsae/causal/concepts.hpp"

#include <algorithm>
#include <stdexcept>

namespace tsae::causal {

namespace {

sae::Pass frozen_pass() {
    sae::Pass p;
    p.trainable = false;
    return p;
}

}  // namespace

Tensor SaeConcepts::encode(const Tensor& x) { return m_.encode(x); }
Tensor SaeConcepts::decode(const Tensor& c) { return m_.decode(c); }
NodeId SaeConcepts::decode(Graph& g, NodeId c) { return m_.decode(g, c, frozen_pass()); }

LinearToy::LinearToy(std::size_t D, std::size_t T, Tensor enc, Tensor dec, Tensor bias)
    : D_(D), T_(T), enc_(std::move(enc)), dec_(std::move(dec)), bias_(std::move(bias)) {
    const Shape want{enc_.rank() == 2 ? enc_.dim(0) : 0, D * T};
    if (enc_.shape() != want || dec_.shape() != want || bias_.shape() != Shape{D * T}) {
        throw std::invalid_argument("linear toy: expected enc and dec [d," + std::to_string(D * T) + "] and bias [" +
                                    std::to_string(D * T) + "]");
    }
}

Tensor LinearToy::encode(const Tensor& x) {
    if (x.rank() != 3 || x.dim(1) != D_ || x.dim(2) != T_) {
        throw std::invalid_argument("linear toy encode: expected [B," + std::to_string(D_) + "," +
                                    std::to_string(T_) + "], got " + shape_str(x.shape()));
    }
    const std::size_t B = x.dim(0), n = D_ * T_, d = concepts();
    Tensor c({B, d});
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t k = 0; k < d; ++k) {
            double s = 0;
            for (std::size_t i = 0; i < n; ++i) s += x[b * n + i] * enc_[k * n + i];
            c.at(b, k) = s;
        }
    }
    return c;
}

Tensor LinearToy::decode(const Tensor& c) {
    Graph g;
    return g.value(decode(g, g.constant(c)));
}

NodeId LinearToy::decode(Graph& g, NodeId c) {
    const Shape& cs = g.shape(c);
    if (cs.size() != 2 || cs[1] != concepts()) {
        throw std::invalid_argument("linear toy decode: expected [B," + std::to_string(concepts()) + "], got " +
                                    shape_str(cs));
    }
    const std::size_t B = cs[0];
    const NodeId flat = g.add(g.matmul(c, g.constant(dec_)), g.constant(bias_));
    return g.reshape(flat, Shape{B, D_, T_});
}

std::vector<std::size_t> predicted_classes(const bb::BlackBox& f, const Tensor& y) {
    const std::size_t B = y.dim(0), K = y.dim(1);
    std::vector<std::size_t> cls(B, 0);
    if (f.output_mode() == bb::OutputMode::ScalarRegression) return cls;
    for (std::size_t b = 0; b < B; ++b) {
        std::size_t best = 0;
        for (std::size_t k = 1; k < K; ++k) {
            if (y.at(b, k) > y.at(b, best)) best = k;
        }
        cls[b] = best;
    }
    return cls;
}

std::vector<double> scalarize(const bb::BlackBox& f, const Tensor& y, const std::vector<std::size_t>& cls) {
    const std::size_t B = y.dim(0);
    if (cls.size() != B) throw std::invalid_argument("scalarize: class list does not match the batch");
    std::vector<double> out(B);
    const bool regression = f.output_mode() == bb::OutputMode::ScalarRegression;
    for (std::size_t b = 0; b < B; ++b) out[b] = y.at(b, regression ? 0 : cls[b]);
    return out;
}

Tensor row(const Tensor& x, std::size_t b) { return rows(x, {b}); }

Tensor rows(const Tensor& x, const std::vector<std::size_t>& idx) {
    if (x.rank() == 0) throw std::invalid_argument("rows: tensor has no batch axis");
    const std::size_t stride = x.size() / x.dim(0);
    Shape s = x.shape();
    s[0] = idx.size();
    std::vector<double> out;
    out.reserve(idx.size() * stride);
    for (std::size_t i : idx) {
        if (i >= x.dim(0)) throw std::out_of_range("rows: index " + std::to_string(i) + " past batch size");
        const auto v = x.values().subspan(i * stride, stride);
        out.insert(out.end(), v.begin(), v.end());
    }
    return Tensor(std::move(s), std::move(out));
}

}  // namespace tsae::causal
