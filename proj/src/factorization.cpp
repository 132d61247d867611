#include "dmtrl/factorization.hpp"

#include <cmath>
#include <stdexcept>

#include "dmtrl/errors.hpp"
#include "dmtrl/linalg.hpp"
#include "dmtrl/overloaded.hpp"

namespace dmtrl {

namespace {

Tensor leading_columns(const Tensor& m, std::size_t k) {
  Tensor out({m.rows(), k});
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < k; ++j) out(i, j) = m(i, j);
  return out;
}

// diag(s[:k]) · v[:, :k]ᵀ
Tensor scaled_vt(const SvdResult& svd, std::size_t k) {
  const std::size_t cols = svd.v.rows();
  Tensor out({k, cols});
  for (std::size_t r = 0; r < k; ++r)
    for (std::size_t c = 0; c < cols; ++c) out(r, c) = svd.s[r] * svd.v(c, r);
  return out;
}

void require_matrix(const Tensor& t, const char* what) {
  if (t.rank() != 2) throw ShapeError(std::string(what) + " must be a matrix, got " + shape_string(t.shape()));
}

}  // namespace

void validate(const LafFactors& f) {
  require_matrix(f.s, "LAF task factor");
  if (f.l.rank() < 2) throw ShapeError("LAF latent basis must have at least two axes");
  if (f.l.extent(f.l.rank() - 1) != f.s.rows())
    throw ShapeError("LAF latent count " + std::to_string(f.l.extent(f.l.rank() - 1)) +
                     " does not match task factor rows " + std::to_string(f.s.rows()));
}

void validate(const TuckerFactors& f) {
  if (f.u.size() != f.core.rank())
    throw ShapeError("Tucker factor count " + std::to_string(f.u.size()) + " does not match core rank " +
                     std::to_string(f.core.rank()));
  for (std::size_t n = 0; n < f.u.size(); ++n) {
    require_matrix(f.u[n], "Tucker mode factor");
    if (f.u[n].cols() != f.core.extent(n))
      throw ShapeError("Tucker mode " + std::to_string(n + 1) + " rank mismatch");
  }
}

void validate(const TtFactors& f) {
  require_matrix(f.head, "TT head");
  require_matrix(f.tail, "TT tail");
  std::size_t bond = f.head.cols();
  for (const auto& c : f.cores) {
    if (c.rank() != 3 || c.extent(0) != bond) throw ShapeError("TT core does not chain: " + shape_string(c.shape()));
    bond = c.extent(2);
  }
  if (f.tail.rows() != bond) throw ShapeError("TT tail does not chain");
}

Tensor compose_laf(const LafFactors& f) {
  validate(f);
  return tensor_dot(f.l, f.s, -1, 1);
}

Tensor compose_tucker(const TuckerFactors& f) {
  validate(f);
  // core •(1,2) U1 •(1,2) U2 ... : each step consumes the leading core axis
  // and appends the corresponding D_n at the end.
  Tensor w = f.core;
  for (const auto& u : f.u) w = tensor_dot(w, u, 1, 2);
  return w;
}

Tensor compose_tt(const TtFactors& f) {
  validate(f);
  Tensor w = f.head;
  for (const auto& c : f.cores) w = tensor_dot(w, c, -1, 1);
  return tensor_dot(w, f.tail, -1, 1);
}

Tensor compose(const Factors& f) {
  return std::visit(overloaded{[](const LafFactors& x) { return compose_laf(x); },
                               [](const TuckerFactors& x) { return compose_tucker(x); },
                               [](const TtFactors& x) { return compose_tt(x); }},
                    f);
}

Shape composed_shape(const Factors& f) {
  return std::visit(overloaded{[](const LafFactors& x) {
                                 Shape s(x.l.shape().begin(), x.l.shape().end() - 1);
                                 s.push_back(x.s.cols());
                                 return s;
                               },
                               [](const TuckerFactors& x) {
                                 Shape s;
                                 for (const auto& u : x.u) s.push_back(u.rows());
                                 return s;
                               },
                               [](const TtFactors& x) {
                                 Shape s{x.head.rows()};
                                 for (const auto& c : x.cores) s.push_back(c.extent(1));
                                 s.push_back(x.tail.cols());
                                 return s;
                               }},
                    f);
}

LafFactors laf_decompose(const Tensor& w, double epsilon) {
  if (w.rank() < 2) throw ShapeError("LAF decomposition needs a tensor with at least two axes");
  const std::size_t tasks = w.extent(w.rank() - 1);
  const std::size_t rest = w.size() / tasks;
  // Row-major storage makes the transposed last-axis flattening a plain reshape.
  const SvdResult svd = thin_svd(w.reshaped({rest, tasks}));
  const std::size_t k = rank_for_error(svd.s, epsilon);

  Tensor l({rest, k});
  for (std::size_t i = 0; i < rest; ++i)
    for (std::size_t j = 0; j < k; ++j) l(i, j) = svd.u(i, j) * svd.s[j];
  Shape l_shape(w.shape().begin(), w.shape().end() - 1);
  l_shape.push_back(k);
  return LafFactors{std::move(l).reshaped(l_shape), transpose(leading_columns(svd.v, k))};
}

TuckerFactors tucker_decompose(const Tensor& w, double epsilon, const std::vector<bool>& keep_full) {
  if (!keep_full.empty() && keep_full.size() != w.rank())
    throw ShapeError("keep_full mask length does not match tensor rank");
  TuckerFactors f;
  for (std::size_t n = 0; n < w.rank(); ++n) {
    const SvdResult svd = thin_svd(mode_n_flatten(w, static_cast<Axis>(n + 1)));
    const bool full = !keep_full.empty() && keep_full[n];
    const std::size_t k = full ? svd.s.size() : rank_for_error(svd.s, epsilon);
    f.u.push_back(leading_columns(svd.u, k));
  }
  Tensor core = w;
  for (const auto& u : f.u) core = tensor_dot(core, u, 1, 1);
  f.core = std::move(core);
  return f;
}

TtFactors tt_decompose(const Tensor& w, double epsilon) {
  const std::size_t order = w.rank();
  if (order < 2) throw ShapeError("TT decomposition needs a tensor with at least two axes");
  const double step_epsilon = epsilon / std::sqrt(static_cast<double>(order - 1));

  TtFactors f;
  std::size_t bond = 1;
  std::size_t remaining = w.size();
  Tensor carry = w;
  for (std::size_t n = 0; n + 1 < order; ++n) {
    const std::size_t dn = w.extent(n);
    remaining /= dn;
    const SvdResult svd = thin_svd(std::move(carry).reshaped({bond * dn, remaining}));
    const std::size_t k = rank_for_error(svd.s, step_epsilon);
    Tensor left = leading_columns(svd.u, k);
    if (n == 0)
      f.head = std::move(left);
    else
      f.cores.push_back(std::move(left).reshaped({bond, dn, k}));
    carry = scaled_vt(svd, k);
    bond = k;
  }
  f.tail = std::move(carry);
  return f;
}

LafFactors compose_backward(const LafFactors& f, const Tensor& grad_w) {
  validate(f);
  if (grad_w.shape() != composed_shape(f))
    throw ShapeError("gradient shape " + shape_string(grad_w.shape()) + " does not match composed shape");
  const std::size_t k = f.s.rows();
  const std::size_t tasks = f.s.cols();
  const std::size_t rest = f.l.size() / k;
  LafFactors g;
  g.l = tensor_dot(grad_w, f.s, -1, 2);
  g.s = matmul(f.l.reshaped({rest, k}), grad_w.reshaped({rest, tasks}), true, false);
  return g;
}

TuckerFactors compose_backward(const TuckerFactors& f, const Tensor& grad_w) {
  validate(f);
  if (grad_w.shape() != composed_shape(f))
    throw ShapeError("gradient shape " + shape_string(grad_w.shape()) + " does not match composed shape");
  TuckerFactors g;
  Tensor core_grad = grad_w;
  for (const auto& u : f.u) core_grad = tensor_dot(core_grad, u, 1, 1);
  g.core = std::move(core_grad);

  const std::size_t order = f.u.size();
  for (std::size_t n = 0; n < order; ++n) {
    // Partial product with every factor except mode n.
    Tensor partial = f.core;
    for (std::size_t m = 0; m < order; ++m)
      if (m != n) partial = mode_product(partial, f.u[m], static_cast<Axis>(m + 1));
    const Axis axis = static_cast<Axis>(n + 1);
    g.u.push_back(matmul(mode_n_flatten(grad_w, axis), mode_n_flatten(partial, axis), false, true));
  }
  return g;
}

TtFactors compose_backward(const TtFactors& f, const Tensor& grad_w) {
  validate(f);
  const Shape shape = composed_shape(f);
  if (grad_w.shape() != shape)
    throw ShapeError("gradient shape " + shape_string(grad_w.shape()) + " does not match composed shape");
  const std::size_t order = shape.size();

  // Every factor viewed as a K_{n-1} x D_n x K_n block with K_0 = K_N = 1.
  std::vector<Tensor> blocks;
  blocks.push_back(f.head.reshaped({1, f.head.rows(), f.head.cols()}));
  for (const auto& c : f.cores) blocks.push_back(c);
  blocks.push_back(f.tail.reshaped({f.tail.rows(), f.tail.cols(), 1}));

  // left[n]: (D_1..D_{n-1}) x K_{n-1};  right[n]: K_n x (D_{n+1}..D_N).
  std::vector<Tensor> left(order), right(order);
  left[0] = Tensor({1, 1}, 1.0);
  for (std::size_t n = 0; n + 1 < order; ++n) {
    const auto& b = blocks[n];
    Tensor prod = matmul(left[n], b.reshaped({b.extent(0), b.extent(1) * b.extent(2)}));
    left[n + 1] = std::move(prod).reshaped({left[n].rows() * b.extent(1), b.extent(2)});
  }
  right[order - 1] = Tensor({1, 1}, 1.0);
  for (std::size_t n = order - 1; n > 0; --n) {
    const auto& b = blocks[n];
    Tensor prod = matmul(b.reshaped({b.extent(0) * b.extent(1), b.extent(2)}), right[n]);
    right[n - 1] = std::move(prod).reshaped({b.extent(0), b.extent(1) * right[n].cols()});
  }

  TtFactors g;
  for (std::size_t n = 0; n < order; ++n) {
    const auto& b = blocks[n];
    const std::size_t a = left[n].rows(), d = b.extent(1), r = right[n].cols();
    Tensor m = matmul(left[n], grad_w.reshaped({a, d * r}), true, false);
    Tensor grad = matmul(std::move(m).reshaped({b.extent(0) * d, r}), right[n], false, true);
    if (n == 0)
      g.head = std::move(grad).reshaped({d, b.extent(2)});
    else if (n + 1 == order)
      g.tail = std::move(grad).reshaped({b.extent(0), d});
    else
      g.cores.push_back(std::move(grad).reshaped(b.shape()));
  }
  return g;
}

Factors compose_backward(const Factors& f, const Tensor& grad_w) {
  return std::visit([&](const auto& x) -> Factors { return compose_backward(x, grad_w); }, f);
}

std::vector<Tensor*> factor_tensors(Factors& f) {
  return std::visit(overloaded{[](LafFactors& x) { return std::vector<Tensor*>{&x.l, &x.s}; },
                               [](TuckerFactors& x) {
                                 std::vector<Tensor*> out{&x.core};
                                 for (auto& u : x.u) out.push_back(&u);
                                 return out;
                               },
                               [](TtFactors& x) {
                                 std::vector<Tensor*> out{&x.head};
                                 for (auto& c : x.cores) out.push_back(&c);
                                 out.push_back(&x.tail);
                                 return out;
                               }},
                    f);
}

std::vector<const Tensor*> factor_tensors(const Factors& f) {
  auto mutable_ptrs = factor_tensors(const_cast<Factors&>(f));
  return {mutable_ptrs.begin(), mutable_ptrs.end()};
}

std::size_t factor_parameter_count(const Factors& f) {
  std::size_t n = 0;
  for (const auto* t : factor_tensors(f)) n += t->size();
  return n;
}

std::vector<std::size_t> factor_ranks(const Factors& f) {
  return std::visit(overloaded{[](const LafFactors& x) { return std::vector<std::size_t>{x.s.rows()}; },
                               [](const TuckerFactors& x) { return x.core.shape(); },
                               [](const TtFactors& x) {
                                 std::vector<std::size_t> r{x.head.cols()};
                                 for (const auto& c : x.cores) r.push_back(c.extent(2));
                                 return r;
                               }},
                    f);
}

}  // namespace dmtrl
