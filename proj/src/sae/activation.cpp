#include "tsae/sae/activation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace tsae::sae {

Tensor jumprelu(const Tensor& u, const Tensor& phi) {
    if (u.rank() == 0 || phi.size() != u.shape().back()) throw std::invalid_argument("jumprelu: threshold length mismatch");
    Tensor c(u.shape());
    const std::size_t d = phi.size();
    for (std::size_t i = 0; i < u.size(); ++i) c[i] = u[i] > phi[i % d] ? u[i] : 0.0;
    return c;
}

Tensor topk_mask(const Tensor& u, std::size_t k, std::size_t gamma) {
    if (u.rank() == 0) throw std::invalid_argument("topk: empty input");
    const std::size_t d = u.shape().back();
    if (k == 0) throw std::invalid_argument("topk: k must be at least 1");
    if (k > d) throw std::invalid_argument("topk: k=" + std::to_string(k) + " exceeds dictionary size " + std::to_string(d));
    if (gamma == 0) throw std::invalid_argument("topk: gamma must be at least 1");
    const std::size_t keep = std::min(d, k * gamma);
    Tensor mask(u.shape(), 0.0);
    std::vector<std::size_t> order(d);
    for (std::size_t r = 0; r < u.size() / d; ++r) {
        const double* row = u.values().data() + r * d;
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return row[a] > row[b]; });
        for (std::size_t i = 0; i < keep; ++i) {
            if (row[order[i]] <= 0) break;
            mask[r * d + order[i]] = 1.0;
        }
    }
    return mask;
}

Tensor topk_gamma(const Tensor& u, std::size_t k, std::size_t gamma) {
    Tensor m = topk_mask(u, k, gamma);
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = m[i] > 0 ? u[i] : 0.0;
    return m;
}

std::size_t gamma_schedule(std::size_t t, std::size_t T_total, std::size_t gamma_max) {
    if (gamma_max == 0) throw std::invalid_argument("gamma_max must be at least 1");
    if (T_total == 0) return 1;
    if (t > T_total) throw std::invalid_argument("schedule step beyond the horizon");
    const double g = static_cast<double>(gamma_max) -
                     static_cast<double>(t) / static_cast<double>(T_total) * static_cast<double>(gamma_max - 1);
    const double r = std::round(g);  // half away from zero
    return static_cast<std::size_t>(std::max(1.0, r));
}

}  // namespace tsae::sae
