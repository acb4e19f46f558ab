#include "tsae/numerics/finite_diff.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace tsae {

Gradients finite_diff_gradient(const std::function<double(const ParamMap&)>& fn, const ParamMap& params, double h) {
    if (!(h > 0)) throw std::invalid_argument("finite difference step must be positive");
    ParamMap work = params;
    Gradients out;
    for (auto& [name, t] : work) {
        Tensor g(t.shape(), 0.0);
        for (std::size_t i = 0; i < t.size(); ++i) {
            const double orig = t[i];
            t[i] = orig + h;
            const double up = fn(work);
            t[i] = orig - h;
            const double down = fn(work);
            t[i] = orig;
            g[i] = (up - down) / (2.0 * h);
        }
        out.emplace(name, std::move(g));
    }
    return out;
}

double finite_diff_scalar(const std::function<double(double)>& fn, double p, double h) {
    if (!(h > 0)) throw std::invalid_argument("finite difference step must be positive");
    return (fn(p + h) - fn(p - h)) / (2.0 * h);
}

GradCheck compare_gradients(const Gradients& analytic, const Gradients& numeric, double rel_tol, double abs_floor) {
    GradCheck r;
    for (const auto& [name, n] : numeric) {
        auto it = analytic.find(name);
        if (it == analytic.end()) throw std::invalid_argument("no analytic gradient for '" + name + "'");
        const Tensor& a = it->second;
        if (a.shape() != n.shape()) throw std::invalid_argument("gradient shape mismatch for '" + name + "'");
        for (std::size_t i = 0; i < n.size(); ++i) {
            const double diff = std::abs(a[i] - n[i]);
            const double scale = std::max(std::abs(a[i]), std::abs(n[i]));
            const double rel = diff / std::max(scale, abs_floor / rel_tol);
            ++r.checked;
            if (rel > r.max_rel_err) {
                r.max_rel_err = rel;
                r.worst = name + "[" + std::to_string(i) + "]";
            }
            r.max_abs_err = std::max(r.max_abs_err, diff);
            if (diff > std::max(rel_tol * scale, abs_floor)) r.ok = false;
        }
    }
    return r;
}

}  // namespace tsae
