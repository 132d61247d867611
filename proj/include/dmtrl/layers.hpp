#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "dmtrl/tensor.hpp"

namespace dmtrl {

struct DenseGrads {
  Tensor x;
  Tensor w;
  Tensor b;
};

/// x: B x D1, w: D1 x D2, b: D2. Returns x·w + b.
Tensor fc_forward(const Tensor& x, const Tensor& w, const Tensor& b);
DenseGrads fc_backward(const Tensor& x, const Tensor& w, const Tensor& grad_out);

/// Valid cross-correlation, stride 1.
/// x: B x Hi x Wi x C, k: H x W x C x M, b: M -> B x (Hi-H+1) x (Wi-W+1) x M.
///
/// Implemented by expanding x into a patch matrix with one row per output
/// pixel (b, i, j) and columns ordered (di, dj, c), which is exactly the
/// row-major order of k's first three axes, so k reshapes to (H·W·C) x M.
Tensor conv2d_forward(const Tensor& x, const Tensor& k, const Tensor& b);
DenseGrads conv2d_backward(const Tensor& x, const Tensor& k, const Tensor& grad_out);

/// Direct nested-loop convolution, kept as an independent reference.
Tensor conv2d_forward_reference(const Tensor& x, const Tensor& k, const Tensor& b);

/// Patch matrix used by conv2d_forward: (B·Ho·Wo) x (H·W·C).
Tensor im2col(const Tensor& x, std::size_t kh, std::size_t kw);

struct PoolResult {
  Tensor out;
  std::vector<std::size_t> argmax;  // flat input offset per output element
};

/// 2x2 max pooling with stride 2 over B x H x W x C; odd trailing rows and
/// columns are dropped. Ties go to the first element in window order.
PoolResult maxpool2_forward(const Tensor& x);
Tensor maxpool2_backward(const Shape& input_shape, std::span<const std::size_t> argmax, const Tensor& grad_out);

Tensor relu_forward(const Tensor& x);
/// Gradient is passed where x > 0.
Tensor relu_backward(const Tensor& x, const Tensor& grad_out);

Tensor tanh_forward(const Tensor& x);
/// Takes the forward output y = tanh(x).
Tensor tanh_backward(const Tensor& y, const Tensor& grad_out);

struct ScalarLoss {
  double loss;
  double grad;
};

/// max(0, 1 - y_hat·y) for y in {-1, +1}; subgradient 0 at the kink.
ScalarLoss hinge_loss(double y_hat, int y);

struct VectorLoss {
  double loss;
  std::vector<double> grad;
};

/// -log softmax(logits)[label], stabilised by subtracting the max logit.
VectorLoss softmax_ce_loss(std::span<const double> logits, std::size_t label);

}  // namespace dmtrl
