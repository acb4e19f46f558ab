#pragma once

#include <cstddef>
#include <vector>

#include "tsae/numerics/tensor.hpp"

namespace tsae::sae {

/// u_k if u_k > phi_k (strictly) else 0, applied along the last axis.
Tensor jumprelu(const Tensor& u, const Tensor& phi);

/// 0/1 mask of the k_eff = min(d, k * gamma) largest positive entries of each row
/// (last axis); ties go to the lower index. Throws when k > d.
Tensor topk_mask(const Tensor& u, std::size_t k, std::size_t gamma);
/// relu(u) restricted to topk_mask(u, k, gamma).
Tensor topk_gamma(const Tensor& u, std::size_t k, std::size_t gamma);

/// max(1, round(gamma_max - t / T_total * (gamma_max - 1))), round half away from zero.
std::size_t gamma_schedule(std::size_t t, std::size_t T_total, std::size_t gamma_max);

}  // namespace tsae::sae
