#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "dmtrl/factorization.hpp"
#include "dmtrl/layers.hpp"
#include "dmtrl/tensor.hpp"

namespace dmtrl {

enum class SharingMode { independent, tied, soft_laf, soft_tucker, soft_tt };

bool is_soft(SharingMode mode);
std::string to_string(SharingMode mode);
/// Accepts the names produced by to_string; throws std::invalid_argument otherwise.
SharingMode parse_sharing_mode(const std::string& name);

struct FullyConnected {
  std::size_t in = 0, out = 0;
};
struct Conv2d {
  std::size_t h = 0, w = 0, in_channels = 0, out_channels = 0;
};
struct MaxPool2 {};
enum class Activation { relu, tanh };

using LayerKind = std::variant<FullyConnected, Conv2d, MaxPool2, Activation>;

struct LayerSpec {
  LayerKind kind;
  SharingMode sharing = SharingMode::independent;
};

bool has_parameters(const LayerSpec& layer);

struct NetworkSpec {
  Shape input_shape;  // one example: {H, W, C} or {D}
  std::vector<LayerSpec> layers;
  std::size_t task_count = 1;
  /// Per-task width of the final layer; empty means every task uses the final
  /// layer's declared width. Differing widths require an independent head.
  std::vector<std::size_t> output_dims;
};

/// Checks that layer shapes chain for every task; throws ShapeError or
/// std::invalid_argument.
void validate(const NetworkSpec& spec);

/// Width of the final layer for `task`.
std::size_t output_dim(const NetworkSpec& spec, std::size_t task);

/// Weight shape of layer `layer` for `task` (FC: D1 x D2, conv: H x W x C x M).
Shape weight_shape(const NetworkSpec& spec, std::size_t layer, std::size_t task);

/// Same spec with every parametrised layer set to `mode`, except that the
/// final layer stays independent when `keep_head` is set.
NetworkSpec with_sharing(NetworkSpec spec, SharingMode mode, bool keep_head);

struct ParamRef {
  std::string name;
  Tensor* value;
  Tensor* grad;
};

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

/// T per-task networks over one parameter store. Independent layers keep T
/// weight tensors, tied layers one, soft layers a factorisation whose last
/// axis indexes tasks; biases are per task except on tied layers.
class MultiTaskNetwork {
 public:
  /// Allocates zero parameters; soft layers start without factors and must be
  /// given some with set_factors before use.
  explicit MultiTaskNetwork(NetworkSpec spec);

  const NetworkSpec& spec() const noexcept { return spec_; }
  std::size_t task_count() const noexcept { return spec_.task_count; }
  std::size_t layer_count() const noexcept { return spec_.layers.size(); }
  const std::vector<std::size_t>& parametrised_layers() const noexcept { return param_layers_; }
  SharingMode sharing(std::size_t layer) const;

  void set_weight(std::size_t layer, std::size_t task, Tensor w);
  void set_bias(std::size_t layer, std::size_t task, Tensor b);
  void set_factors(std::size_t layer, Factors f);
  const Factors& factors(std::size_t layer) const;

  /// Effective weight used by `task` (the composed slice on soft layers).
  const Tensor& weight(std::size_t layer, std::size_t task) const;
  const Tensor& bias(std::size_t layer, std::size_t task) const;

  /// Runs task `task` on a batch x (B x input_shape) and returns B x output_dim.
  /// With keep_cache the activations are kept for one backward call.
  Tensor forward(std::size_t task, const Tensor& x, bool keep_cache = true);

  /// Accumulates parameter gradients for the last forward of `task`.
  void backward(std::size_t task, const Tensor& grad_out);

  void zero_grad();

  /// All learnable tensors with their gradients. Pending gradients on composed
  /// soft weights are pushed through compose_backward first.
  std::vector<ParamRef> parameters();

  /// Must be called after parameters change so composed weights are rebuilt.
  void invalidate();

  NamedTensors state() const;
  /// Rebuilds a network from `spec` and tensors named as in state().
  static MultiTaskNetwork from_state(NetworkSpec spec, const NamedTensors& state);

 private:
  struct Params {
    SharingMode mode = SharingMode::independent;
    std::vector<Tensor> weights, weight_grads;
    std::vector<Tensor> biases, bias_grads;
    std::optional<Factors> factors, factor_grads;
    mutable Tensor composed;
    mutable std::vector<Tensor> slices;
    mutable bool composed_valid = false;
    Tensor composed_grad;
    bool composed_grad_pending = false;
  };
  struct LayerCache {
    Tensor input;
    Tensor output;
    Shape shape;  // pre-flatten shape for FC, input shape for pooling
    std::vector<std::size_t> argmax;
  };

  Params& params(std::size_t layer);
  const Params& params(std::size_t layer) const;
  std::size_t weight_slot(const Params& p, std::size_t task) const;
  std::size_t bias_slot(const Params& p, std::size_t task) const;
  const Tensor& effective_weight(std::size_t layer, std::size_t task) const;
  void flush_composed_grads();
  void check_task(std::size_t task) const;

  NetworkSpec spec_;
  std::vector<std::size_t> param_layers_;
  std::vector<std::optional<Params>> params_;
  std::vector<std::optional<std::vector<LayerCache>>> caches_;
};

struct ParameterCount {
  std::size_t total = 0;
  std::vector<std::size_t> per_layer;  // parametrised layers in order
  std::size_t independent_total = 0;   // same architecture, every layer independent
  double ratio = 0.0;                  // total / independent_total
};

/// Exact number of learnable scalars (factors, weights and biases).
ParameterCount count_parameters(const MultiTaskNetwork& net);

}  // namespace dmtrl
