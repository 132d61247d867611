#pragma once

#include <cstddef>
#include <variant>
#include <vector>

#include "dmtrl/tensor.hpp"

namespace dmtrl {

/// Last-axis flattening: slice t of the composed tensor is sum_k l[..., k] s[k, t].
struct LafFactors {
  Tensor l;  // D_1 x ... x D_{N-1} x K  (shared latent basis)
  Tensor s;  // K x T                   (task mixing)
};

/// Tucker: composed = core ×_1 u[0] ×_2 u[1] ... ×_N u[N-1].
struct TuckerFactors {
  Tensor core;           // K_1 x ... x K_N
  std::vector<Tensor> u;  // u[n] is D_n x K_n
};

/// Tensor train: composed(d_1..d_N) = head[d_1,:] cores[0][:,d_2,:] ... tail[:,d_N].
struct TtFactors {
  Tensor head;               // D_1 x K_1
  std::vector<Tensor> cores;  // K_{n-1} x D_n x K_n, N-2 of them
  Tensor tail;               // K_{N-1} x D_N
};

using Factors = std::variant<LafFactors, TuckerFactors, TtFactors>;

/// Throws ShapeError when factor extents do not chain.
void validate(const LafFactors& f);
void validate(const TuckerFactors& f);
void validate(const TtFactors& f);

Tensor compose_laf(const LafFactors& f);
Tensor compose_tucker(const TuckerFactors& f);
Tensor compose_tt(const TtFactors& f);
Tensor compose(const Factors& f);

/// Output shape of compose without evaluating it.
Shape composed_shape(const Factors& f);

/// Truncated SVD of the transposed last-axis flattening; singular values are
/// folded into l so that s keeps orthonormal rows.
LafFactors laf_decompose(const Tensor& w, double epsilon);

/// HOSVD with per-mode truncation at epsilon (reconstruction error <= sqrt(N)·epsilon).
/// Modes flagged in `keep_full` skip truncation.
TuckerFactors tucker_decompose(const Tensor& w, double epsilon, const std::vector<bool>& keep_full = {});

/// Left-to-right TT-SVD with per-step threshold epsilon / sqrt(N - 1)
/// (reconstruction error <= epsilon).
TtFactors tt_decompose(const Tensor& w, double epsilon);

/// Gradients of a scalar loss with respect to each factor, given the gradient
/// with respect to the composed tensor. Results have the factor shapes.
LafFactors compose_backward(const LafFactors& f, const Tensor& grad_w);
TuckerFactors compose_backward(const TuckerFactors& f, const Tensor& grad_w);
TtFactors compose_backward(const TtFactors& f, const Tensor& grad_w);
Factors compose_backward(const Factors& f, const Tensor& grad_w);

/// Factor tensors in a fixed order (LAF: l, s; Tucker: core, u...; TT: head, cores..., tail).
std::vector<Tensor*> factor_tensors(Factors& f);
std::vector<const Tensor*> factor_tensors(const Factors& f);

/// Number of learnable scalars held by the factors.
std::size_t factor_parameter_count(const Factors& f);

/// Ranks chosen by a decomposition (LAF: {K}; Tucker: K_1..K_N; TT: bond ranks).
std::vector<std::size_t> factor_ranks(const Factors& f);

}  // namespace dmtrl
