#include "dmtrl/tensor.hpp"

#include <Eigen/Core>

#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "dmtrl/errors.hpp"

namespace dmtrl {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

void check_shape(const Shape& shape) {
  if (shape.empty()) throw ShapeError("tensor must have at least one axis");
  for (auto d : shape)
    if (d == 0) throw ShapeError("tensor extents must be positive, got " + shape_string(shape));
}

// Extent products before and after a 0-based axis.
std::pair<std::size_t, std::size_t> outer_inner(const Shape& shape, std::size_t axis) {
  std::size_t outer = 1, inner = 1;
  for (std::size_t k = 0; k < axis; ++k) outer *= shape[k];
  for (std::size_t k = axis + 1; k < shape.size(); ++k) inner *= shape[k];
  return {outer, inner};
}

Shape without_axis(const Shape& shape, std::size_t axis) {
  Shape s;
  for (std::size_t k = 0; k < shape.size(); ++k)
    if (k != axis) s.push_back(shape[k]);
  return s;
}

}  // namespace

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
  check_shape(shape_);
  data_.assign(shape_size(shape_), 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  check_shape(shape_);
  if (data_.size() != shape_size(shape_))
    throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " +
                     shape_string(shape_));
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  check_shape(shape_);
  data_.assign(shape_size(shape_), fill);
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> data) {
  return Tensor({rows, cols}, std::move(data));
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t({n, n});
  for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
  return t;
}

std::size_t Tensor::rows() const {
  if (rank() != 2) throw ShapeError("expected a matrix, got shape " + shape_string(shape_));
  return shape_[0];
}

std::size_t Tensor::cols() const {
  if (rank() != 2) throw ShapeError("expected a matrix, got shape " + shape_string(shape_));
  return shape_[1];
}

std::size_t Tensor::offset(std::span<const std::size_t> index) const {
  if (index.size() != shape_.size()) throw std::out_of_range("index rank does not match tensor rank");
  std::size_t off = 0;
  for (std::size_t k = 0; k < index.size(); ++k) {
    if (index[k] >= shape_[k]) throw std::out_of_range("index out of range");
    off = off * shape_[k] + index[k];
  }
  return off;
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  return data_[offset(std::span(index.begin(), index.size()))];
}

double& Tensor::at(std::initializer_list<std::size_t> index) {
  return data_[offset(std::span(index.begin(), index.size()))];
}

double Tensor::at(std::span<const std::size_t> index) const { return data_[offset(index)]; }

Tensor Tensor::reshaped(Shape shape) const& {
  Tensor copy = *this;
  return std::move(copy).reshaped(std::move(shape));
}

Tensor Tensor::reshaped(Shape shape) && {
  check_shape(shape);
  if (shape_size(shape) != data_.size())
    throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  shape_ = std::move(shape);
  return std::move(*this);
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

Tensor& Tensor::operator+=(const Tensor& other) {
  if (other.shape_ != shape_)
    throw ShapeError("shape mismatch " + shape_string(shape_) + " vs " + shape_string(other.shape_));
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

Tensor& Tensor::operator-=(const Tensor& other) {
  if (other.shape_ != shape_)
    throw ShapeError("shape mismatch " + shape_string(shape_) + " vs " + shape_string(other.shape_));
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
  return *this;
}

Tensor& Tensor::operator*=(double alpha) {
  for (auto& v : data_) v *= alpha;
  return *this;
}

Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }
Tensor operator*(double alpha, Tensor a) { return a *= alpha; }

std::size_t resolve_axis(Axis axis, std::size_t rank) {
  if (axis == -1 && rank > 0) return rank - 1;
  if (axis < 1 || static_cast<std::size_t>(axis) > rank)
    throw std::out_of_range("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  return static_cast<std::size_t>(axis) - 1;
}

Tensor mode_n_flatten(const Tensor& t, Axis n) {
  const std::size_t axis = resolve_axis(n, t.rank());
  const std::size_t dn = t.extent(axis);
  const auto [outer, inner] = outer_inner(t.shape(), axis);
  Tensor m({dn, outer * inner});
  const auto src = t.data();
  auto dst = m.data();
  // t[a, d, b] -> m[d, a * inner + b]
  for (std::size_t a = 0; a < outer; ++a)
    for (std::size_t d = 0; d < dn; ++d) {
      const double* from = src.data() + (a * dn + d) * inner;
      double* to = dst.data() + d * outer * inner + a * inner;
      std::copy(from, from + inner, to);
    }
  return m;
}

Tensor mode_n_unflatten(const Tensor& m, const Shape& shape, Axis n) {
  if (shape.empty()) throw ShapeError("target shape must have at least one axis");
  const std::size_t axis = resolve_axis(n, shape.size());
  const std::size_t dn = shape[axis];
  const auto [outer, inner] = outer_inner(shape, axis);
  if (m.rank() != 2 || m.extent(0) != dn || m.extent(1) != outer * inner)
    throw ShapeError("cannot unflatten " + shape_string(m.shape()) + " into " + shape_string(shape) +
                     " along axis " + std::to_string(n));
  Tensor t(shape);
  const auto src = m.data();
  auto dst = t.data();
  for (std::size_t a = 0; a < outer; ++a)
    for (std::size_t d = 0; d < dn; ++d) {
      const double* from = src.data() + d * outer * inner + a * inner;
      std::copy(from, from + inner, dst.data() + (a * dn + d) * inner);
    }
  return t;
}

Tensor tensor_dot(const Tensor& a, const Tensor& b, Axis i, Axis j) {
  const std::size_t ai = resolve_axis(i, a.rank());
  const std::size_t bj = resolve_axis(j, b.rank());
  const std::size_t p = a.extent(ai);
  if (b.extent(bj) != p)
    throw ShapeError("contracted extents differ: " + std::to_string(p) + " vs " + std::to_string(b.extent(bj)));
  const std::size_t rest_a = a.size() / p;
  const std::size_t rest_b = b.size() / p;

  Shape out_shape = without_axis(a.shape(), ai);
  for (auto d : without_axis(b.shape(), bj)) out_shape.push_back(d);
  if (out_shape.empty()) out_shape.push_back(1);
  Tensor out(out_shape);
  MutMap result(out.data().data(), rest_a, rest_b);

  // A_(i)^T as a rest_a x p expression; avoid copies when axis i is first or last.
  Tensor a_flat, b_flat;
  auto b_expr = [&](auto&& a_t) {
    if (bj == 0) {
      result.noalias() = a_t * ConstMap(b.data().data(), p, rest_b);
    } else if (bj + 1 == b.rank()) {
      result.noalias() = a_t * ConstMap(b.data().data(), rest_b, p).transpose();
    } else {
      b_flat = mode_n_flatten(b, static_cast<Axis>(bj + 1));
      result.noalias() = a_t * ConstMap(b_flat.data().data(), p, rest_b);
    }
  };
  if (ai + 1 == a.rank()) {
    b_expr(ConstMap(a.data().data(), rest_a, p));
  } else if (ai == 0) {
    b_expr(ConstMap(a.data().data(), p, rest_a).transpose());
  } else {
    a_flat = mode_n_flatten(a, static_cast<Axis>(ai + 1));
    b_expr(ConstMap(a_flat.data().data(), p, rest_a).transpose());
  }
  return out;
}

double frobenius_norm(const Tensor& t) {
  double sum = 0.0;
  for (double v : t.data()) sum += v * v;
  return std::sqrt(sum);
}

double relative_error(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError("shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  double diff = 0.0, ref = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    ref += b[i] * b[i];
  }
  return ref > 0.0 ? std::sqrt(diff / ref) : std::sqrt(diff);
}

Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_a, bool transpose_b) {
  const std::size_t ar = a.rows(), ac = a.cols(), br = b.rows(), bc = b.cols();
  const std::size_t m = transpose_a ? ac : ar;
  const std::size_t k = transpose_a ? ar : ac;
  const std::size_t kb = transpose_b ? bc : br;
  const std::size_t n = transpose_b ? br : bc;
  if (k != kb)
    throw ShapeError("matmul inner extents differ: " + shape_string(a.shape()) + " * " + shape_string(b.shape()));
  Tensor out({m, n});
  MutMap c(out.data().data(), m, n);
  ConstMap am(a.data().data(), ar, ac);
  ConstMap bm(b.data().data(), br, bc);
  if (!transpose_a && !transpose_b)
    c.noalias() = am * bm;
  else if (transpose_a && !transpose_b)
    c.noalias() = am.transpose() * bm;
  else if (!transpose_a && transpose_b)
    c.noalias() = am * bm.transpose();
  else
    c.noalias() = am.transpose() * bm.transpose();
  return out;
}

Tensor transpose(const Tensor& m) {
  Tensor out({m.cols(), m.rows()});
  MutMap(out.data().data(), m.cols(), m.rows()) = ConstMap(m.data().data(), m.rows(), m.cols()).transpose();
  return out;
}

Tensor permute(const Tensor& t, std::span<const std::size_t> perm) {
  const std::size_t n = t.rank();
  if (perm.size() != n) throw ShapeError("permutation length does not match rank");
  std::vector<bool> seen(n, false);
  for (auto p : perm) {
    if (p >= n || seen[p]) throw ShapeError("invalid axis permutation");
    seen[p] = true;
  }
  Shape out_shape(n);
  std::vector<std::size_t> in_strides(n), src_strides(n);
  std::size_t stride = 1;
  for (std::size_t k = n; k-- > 0;) {
    in_strides[k] = stride;
    stride *= t.extent(k);
  }
  for (std::size_t k = 0; k < n; ++k) {
    out_shape[k] = t.extent(perm[k]);
    src_strides[k] = in_strides[perm[k]];
  }
  Tensor out(out_shape);
  std::vector<std::size_t> index(n, 0);
  const auto src = t.data();
  auto dst = out.data();
  std::size_t src_off = 0;
  for (std::size_t flat = 0; flat < out.size(); ++flat) {
    dst[flat] = src[src_off];
    for (std::size_t k = n; k-- > 0;) {
      if (++index[k] < out_shape[k]) {
        src_off += src_strides[k];
        break;
      }
      src_off -= src_strides[k] * (out_shape[k] - 1);
      index[k] = 0;
    }
  }
  return out;
}

Tensor mode_product(const Tensor& x, const Tensor& m, Axis n) {
  const std::size_t axis = resolve_axis(n, x.rank());
  if (m.rank() != 2 || m.cols() != x.extent(axis))
    throw ShapeError("mode product: matrix " + shape_string(m.shape()) + " does not match axis extent " +
                     std::to_string(x.extent(axis)));
  Shape out_shape = x.shape();
  out_shape[axis] = m.rows();
  const std::size_t rest = x.size() / x.extent(axis);
  if (axis == 0) {
    Tensor out(out_shape);
    MutMap(out.data().data(), m.rows(), rest).noalias() =
        ConstMap(m.data().data(), m.rows(), m.cols()) * ConstMap(x.data().data(), x.extent(0), rest);
    return out;
  }
  return mode_n_unflatten(matmul(m, mode_n_flatten(x, n)), out_shape, n);
}

Tensor last_axis_slice(const Tensor& t, std::size_t index) {
  const std::size_t last = t.extent(t.rank() - 1);
  if (index >= last) throw std::out_of_range("slice index out of range");
  Shape s(t.shape().begin(), t.shape().end() - 1);
  if (s.empty()) s.push_back(1);
  Tensor out(s);
  const std::size_t rows = t.size() / last;
  const auto src = t.data();
  auto dst = out.data();
  for (std::size_t r = 0; r < rows; ++r) dst[r] = src[r * last + index];
  return out;
}

void add_last_axis_slice(Tensor& t, const Tensor& slice, std::size_t index) {
  const std::size_t last = t.extent(t.rank() - 1);
  if (index >= last) throw std::out_of_range("slice index out of range");
  const std::size_t rows = t.size() / last;
  if (slice.size() != rows) throw ShapeError("slice size does not match tensor");
  auto dst = t.data();
  const auto src = slice.data();
  for (std::size_t r = 0; r < rows; ++r) dst[r * last + index] += src[r];
}

Tensor stack_last_axis(std::span<const Tensor> slices) {
  if (slices.empty()) throw ShapeError("nothing to stack");
  Shape s = slices.front().shape();
  for (const auto& sl : slices)
    if (sl.shape() != s) throw ShapeError("stacked tensors must share a shape");
  const std::size_t count = slices.size();
  s.push_back(count);
  Tensor out(s);
  const std::size_t rows = slices.front().size();
  auto dst = out.data();
  for (std::size_t t = 0; t < count; ++t) {
    const auto src = slices[t].data();
    for (std::size_t r = 0; r < rows; ++r) dst[r * count + t] = src[r];
  }
  return out;
}

}  // namespace dmtrl
