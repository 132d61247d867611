#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "dmtrl/tensor.hpp"

namespace dmtrl {

/// Thin SVD m = u · diag(s) · vᵀ with r = min(rows, cols) components.
struct SvdResult {
  Tensor u;               // rows x r, orthonormal columns
  std::vector<double> s;  // non-increasing, non-negative
  Tensor v;               // cols x r, orthonormal columns
};

struct SvdOptions {
  std::size_t max_sweeps = 100;
  double tolerance = 1e-12;  // relative off-diagonal threshold
};

/// One-sided (Hestenes) Jacobi SVD. Tall inputs are first reduced with a QR
/// factorisation, wide inputs are handled through their transpose. Each
/// column of u is sign-normalised so its largest-magnitude entry is positive.
/// Throws ConvergenceError when `max_sweeps` is exhausted.
SvdResult thin_svd(const Tensor& m, const SvdOptions& options = {});

/// Smallest k >= 1 whose truncation tail satisfies
/// sqrt(sum_{i>k} s_i^2) / sqrt(sum_i s_i^2) <= epsilon.
std::size_t rank_for_error(std::span<const double> s, double epsilon);

/// Keeps the leading k components.
SvdResult truncate(const SvdResult& svd, std::size_t k);

/// u · diag(s) · vᵀ
Tensor reconstruct(const SvdResult& svd);

}  // namespace dmtrl
