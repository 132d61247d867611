#include "dmtrl/layers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "dmtrl/errors.hpp"

namespace dmtrl {

namespace {

struct ConvDims {
  std::size_t batch, hi, wi, c, kh, kw, m, ho, wo;
};

ConvDims conv_dims(const Tensor& x, const Tensor& k) {
  if (x.rank() != 4 || k.rank() != 4)
    throw ShapeError("conv2d expects a B x H x W x C input and an H x W x C x M kernel, got " +
                     shape_string(x.shape()) + " and " + shape_string(k.shape()));
  ConvDims d{x.extent(0), x.extent(1), x.extent(2), x.extent(3), k.extent(0), k.extent(1), k.extent(3), 0, 0};
  if (k.extent(2) != d.c) throw ShapeError("conv2d channel mismatch: " + shape_string(x.shape()) + " vs " + shape_string(k.shape()));
  if (d.kh > d.hi || d.kw > d.wi)
    throw ShapeError("conv2d kernel " + shape_string(k.shape()) + " larger than input " + shape_string(x.shape()));
  d.ho = d.hi - d.kh + 1;
  d.wo = d.wi - d.kw + 1;
  return d;
}

void check_bias(const Tensor& b, std::size_t n, const char* who) {
  if (b.size() != n) throw ShapeError(std::string(who) + ": bias length " + std::to_string(b.size()) + " != " + std::to_string(n));
}

// Adds b to every row of a (rows x n) buffer.
void add_row_bias(Tensor& out, const Tensor& b) {
  const std::size_t n = b.size();
  auto o = out.data();
  for (std::size_t r = 0; r < out.size() / n; ++r)
    for (std::size_t j = 0; j < n; ++j) o[r * n + j] += b[j];
}

Tensor column_sums(const Tensor& m) {
  Tensor s({m.cols()});
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t j = 0; j < m.cols(); ++j) s[j] += m(r, j);
  return s;
}

}  // namespace

Tensor fc_forward(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.rank() != 2 || w.rank() != 2 || x.cols() != w.rows())
    throw ShapeError("fc: cannot apply " + shape_string(w.shape()) + " to " + shape_string(x.shape()));
  check_bias(b, w.cols(), "fc");
  Tensor out = matmul(x, w);
  add_row_bias(out, b);
  return out;
}

DenseGrads fc_backward(const Tensor& x, const Tensor& w, const Tensor& grad_out) {
  if (grad_out.rank() != 2 || grad_out.rows() != x.rows() || grad_out.cols() != w.cols())
    throw ShapeError("fc_backward: gradient shape " + shape_string(grad_out.shape()));
  return {matmul(grad_out, w, false, true), matmul(x, grad_out, true, false), column_sums(grad_out)};
}

Tensor im2col(const Tensor& x, std::size_t kh, std::size_t kw) {
  const std::size_t batch = x.extent(0), hi = x.extent(1), wi = x.extent(2), c = x.extent(3);
  const std::size_t ho = hi - kh + 1, wo = wi - kw + 1;
  Tensor cols({batch * ho * wo, kh * kw * c});
  const double* src = x.data().data();
  double* dst = cols.data().data();
  const std::size_t run = kw * c;  // one kernel row of a patch is contiguous in x
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t i = 0; i < ho; ++i)
      for (std::size_t j = 0; j < wo; ++j)
        for (std::size_t di = 0; di < kh; ++di) {
          const double* row = src + ((n * hi + i + di) * wi + j) * c;
          std::copy(row, row + run, dst);
          dst += run;
        }
  return cols;
}

Tensor conv2d_forward(const Tensor& x, const Tensor& k, const Tensor& b) {
  const ConvDims d = conv_dims(x, k);
  check_bias(b, d.m, "conv2d");
  Tensor out = matmul(im2col(x, d.kh, d.kw), k.reshaped({d.kh * d.kw * d.c, d.m}));
  add_row_bias(out, b);
  return std::move(out).reshaped({d.batch, d.ho, d.wo, d.m});
}

DenseGrads conv2d_backward(const Tensor& x, const Tensor& k, const Tensor& grad_out) {
  const ConvDims d = conv_dims(x, k);
  if (grad_out.shape() != Shape{d.batch, d.ho, d.wo, d.m})
    throw ShapeError("conv2d_backward: gradient shape " + shape_string(grad_out.shape()));
  const Tensor g = grad_out.reshaped({d.batch * d.ho * d.wo, d.m});
  const Tensor kmat = k.reshaped({d.kh * d.kw * d.c, d.m});

  DenseGrads out;
  out.w = matmul(im2col(x, d.kh, d.kw), g, true, false).reshaped(k.shape());
  out.b = column_sums(g);

  // col2im: scatter patch gradients back onto the input.
  const Tensor gcols = matmul(g, kmat, false, true);
  out.x = Tensor(x.shape());
  double* dst = out.x.data().data();
  const double* src = gcols.data().data();
  const std::size_t run = d.kw * d.c;
  for (std::size_t n = 0; n < d.batch; ++n)
    for (std::size_t i = 0; i < d.ho; ++i)
      for (std::size_t j = 0; j < d.wo; ++j)
        for (std::size_t di = 0; di < d.kh; ++di) {
          double* row = dst + ((n * d.hi + i + di) * d.wi + j) * d.c;
          for (std::size_t e = 0; e < run; ++e) row[e] += src[e];
          src += run;
        }
  return out;
}

Tensor conv2d_forward_reference(const Tensor& x, const Tensor& k, const Tensor& b) {
  const ConvDims d = conv_dims(x, k);
  check_bias(b, d.m, "conv2d");
  Tensor out({d.batch, d.ho, d.wo, d.m});
  for (std::size_t n = 0; n < d.batch; ++n)
    for (std::size_t i = 0; i < d.ho; ++i)
      for (std::size_t j = 0; j < d.wo; ++j)
        for (std::size_t m = 0; m < d.m; ++m) {
          double s = b[m];
          for (std::size_t di = 0; di < d.kh; ++di)
            for (std::size_t dj = 0; dj < d.kw; ++dj)
              for (std::size_t c = 0; c < d.c; ++c) s += x.at({n, i + di, j + dj, c}) * k.at({di, dj, c, m});
          out.at({n, i, j, m}) = s;
        }
  return out;
}

PoolResult maxpool2_forward(const Tensor& x) {
  if (x.rank() != 4) throw ShapeError("maxpool2 expects B x H x W x C, got " + shape_string(x.shape()));
  const std::size_t batch = x.extent(0), h = x.extent(1), w = x.extent(2), c = x.extent(3);
  const std::size_t ho = h / 2, wo = w / 2;
  if (ho == 0 || wo == 0) throw ShapeError("maxpool2 input too small: " + shape_string(x.shape()));
  PoolResult r{Tensor({batch, ho, wo, c}), std::vector<std::size_t>(batch * ho * wo * c)};
  const auto in = x.data();
  auto out = r.out.data();
  std::size_t o = 0;
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t i = 0; i < ho; ++i)
      for (std::size_t j = 0; j < wo; ++j)
        for (std::size_t ch = 0; ch < c; ++ch, ++o) {
          std::size_t best = ((n * h + 2 * i) * w + 2 * j) * c + ch;
          for (std::size_t di = 0; di < 2; ++di)
            for (std::size_t dj = 0; dj < 2; ++dj) {
              const std::size_t at = ((n * h + 2 * i + di) * w + 2 * j + dj) * c + ch;
              if (in[at] > in[best]) best = at;
            }
          out[o] = in[best];
          r.argmax[o] = best;
        }
  return r;
}

Tensor maxpool2_backward(const Shape& input_shape, std::span<const std::size_t> argmax, const Tensor& grad_out) {
  if (argmax.size() != grad_out.size()) throw ShapeError("maxpool2_backward: argmax/gradient length mismatch");
  Tensor g(input_shape);
  for (std::size_t o = 0; o < argmax.size(); ++o) g[argmax[o]] += grad_out[o];
  return g;
}

Tensor relu_forward(const Tensor& x) {
  Tensor y = x;
  for (auto& v : y.data()) v = std::max(v, 0.0);
  return y;
}

Tensor relu_backward(const Tensor& x, const Tensor& grad_out) {
  if (x.size() != grad_out.size()) throw ShapeError("relu_backward: shape mismatch");
  Tensor g = grad_out;
  for (std::size_t i = 0; i < g.size(); ++i)
    if (!(x[i] > 0.0)) g[i] = 0.0;
  return g;
}

Tensor tanh_forward(const Tensor& x) {
  Tensor y = x;
  for (auto& v : y.data()) v = std::tanh(v);
  return y;
}

Tensor tanh_backward(const Tensor& y, const Tensor& grad_out) {
  if (y.size() != grad_out.size()) throw ShapeError("tanh_backward: shape mismatch");
  Tensor g = grad_out;
  for (std::size_t i = 0; i < g.size(); ++i) g[i] *= 1.0 - y[i] * y[i];
  return g;
}

ScalarLoss hinge_loss(double y_hat, int y) {
  if (y != 1 && y != -1) throw std::invalid_argument("hinge_loss: label must be -1 or +1, got " + std::to_string(y));
  const double margin = 1.0 - y_hat * y;
  if (std::isnan(margin)) return {margin, margin};
  if (margin > 0.0) return {margin, -static_cast<double>(y)};
  return {0.0, 0.0};
}

VectorLoss softmax_ce_loss(std::span<const double> logits, std::size_t label) {
  if (label >= logits.size())
    throw std::invalid_argument("softmax_ce_loss: label " + std::to_string(label) + " out of range for " +
                                std::to_string(logits.size()) + " classes");
  const double top = *std::max_element(logits.begin(), logits.end());
  VectorLoss r{0.0, std::vector<double>(logits.size())};
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    r.grad[i] = std::exp(logits[i] - top);
    z += r.grad[i];
  }
  for (auto& p : r.grad) p /= z;
  r.loss = std::log(z) - (logits[label] - top);
  r.grad[label] -= 1.0;
  return r;
}

}  // namespace dmtrl
