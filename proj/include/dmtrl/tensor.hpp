#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace dmtrl {

using Shape = std::vector<std::size_t>;

/// Axis index as used at the API surface: 1-based, with -1 naming the last axis.
using Axis = int;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense N-way array of doubles stored row-major (last index varies fastest).
///
/// A default-constructed tensor is empty (rank 0) and only useful as a
/// placeholder; every constructed tensor has rank >= 1 and extents >= 1.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> data);
  Tensor(Shape shape, double fill);

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
  static Tensor identity(std::size_t n);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  /// Extent along a 0-based axis.
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }

  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const noexcept { return data_; }
  std::span<double> data() noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }

  /// Element access by 0-based multi-index.
  double at(std::initializer_list<std::size_t> index) const;
  double& at(std::initializer_list<std::size_t> index);
  double at(std::span<const std::size_t> index) const;

  double operator()(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }

  Tensor reshaped(Shape shape) const&;
  Tensor reshaped(Shape shape) &&;

  void fill(double value);
  Tensor& operator+=(const Tensor& other);
  Tensor& operator-=(const Tensor& other);
  Tensor& operator*=(double alpha);

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  std::size_t offset(std::span<const std::size_t> index) const;

  Shape shape_;
  std::vector<double> data_;
};

Tensor operator+(Tensor a, const Tensor& b);
Tensor operator-(Tensor a, const Tensor& b);
Tensor operator*(double alpha, Tensor a);

/// Converts an API axis (1-based, -1 = last) to a 0-based index; throws
/// std::out_of_range when it does not name an axis of a rank-`rank` tensor.
std::size_t resolve_axis(Axis axis, std::size_t rank);

/// Mode-n flattening: a D_n x prod(D_i, i != n) matrix whose columns are the
/// mode-n fibres, enumerated row-major over the remaining axes.
Tensor mode_n_flatten(const Tensor& t, Axis n);

/// Inverse of mode_n_flatten for the given target shape.
Tensor mode_n_unflatten(const Tensor& m, const Shape& shape, Axis n);

/// Contraction of axis i of `a` with axis j of `b`: A_(i)^T B_(j), reshaped to
/// a's remaining axes followed by b's remaining axes.
Tensor tensor_dot(const Tensor& a, const Tensor& b, Axis i, Axis j);

double frobenius_norm(const Tensor& t);

/// Relative Frobenius distance ||a - b|| / ||b|| (or ||a - b|| when b is zero).
double relative_error(const Tensor& a, const Tensor& b);

/// Matrix product of 2-way tensors with optional transposes.
Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_a = false, bool transpose_b = false);

Tensor transpose(const Tensor& m);

/// Axis permutation: result axis k is input axis perm[k] (0-based).
Tensor permute(const Tensor& t, std::span<const std::size_t> perm);

/// Mode-n product x ×_n m: replaces extent K_n of axis n by m's row count,
/// result_(n) = m · x_(n).
Tensor mode_product(const Tensor& x, const Tensor& m, Axis n);

/// Slice `index` along the last axis (drops that axis; a vector becomes 1-way).
Tensor last_axis_slice(const Tensor& t, std::size_t index);

/// Adds `slice` into position `index` of the last axis of `t`.
void add_last_axis_slice(Tensor& t, const Tensor& slice, std::size_t index);

/// Stacks equally shaped tensors along a new trailing axis.
Tensor stack_last_axis(std::span<const Tensor> slices);

}  // namespace dmtrl
