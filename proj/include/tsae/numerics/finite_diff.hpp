#pragma once

#include <functional>
#include <string>

#include "tsae/numerics/graph.hpp"

namespace tsae {

using ParamMap = std::map<std::string, Tensor>;

/// Central-difference gradient of a scalar function over every coordinate of every parameter.
Gradients finite_diff_gradient(const std::function<double(const ParamMap&)>& fn, const ParamMap& params,
                               double h = 1e-5);

double finite_diff_scalar(const std::function<double(double)>& fn, double p, double h = 1e-5);

struct GradCheck {
    bool ok = true;
    double max_rel_err = 0.0;
    double max_abs_err = 0.0;
    std::string worst;  // "name[index]"
    std::size_t checked = 0;
};

/// A coordinate passes when |a - n| <= max(rel_tol * max(|a|, |n|), abs_floor).
GradCheck compare_gradients(const Gradients& analytic, const Gradients& numeric, double rel_tol = 1e-3,
                            double abs_floor = 1e-6);

}  // namespace tsae
