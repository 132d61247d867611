#include "dmtrl/network.hpp"

#include <algorithm>
#include <map>
#include <stdexcept>

#include "dmtrl/errors.hpp"
#include "dmtrl/overloaded.hpp"

namespace dmtrl {

namespace {

std::vector<std::string> factor_names(const Factors& f) {
  return std::visit(overloaded{[](const LafFactors&) { return std::vector<std::string>{"laf.l", "laf.s"}; },
                               [](const TuckerFactors& x) {
                                 std::vector<std::string> out{"tucker.core"};
                                 for (std::size_t n = 0; n < x.u.size(); ++n) out.push_back("tucker.u" + std::to_string(n));
                                 return out;
                               },
                               [](const TtFactors& x) {
                                 std::vector<std::string> out{"tt.head"};
                                 for (std::size_t n = 0; n < x.cores.size(); ++n) out.push_back("tt.core" + std::to_string(n));
                                 out.push_back("tt.tail");
                                 return out;
                               }},
                    f);
}

Factors zeros_like(const Factors& f) {
  Factors z = f;
  for (auto* t : factor_tensors(z)) t->fill(0.0);
  return z;
}

std::string layer_prefix(std::size_t layer) { return "L" + std::to_string(layer) + "."; }

std::size_t last_parametrised(const NetworkSpec& spec) {
  for (std::size_t i = spec.layers.size(); i-- > 0;)
    if (has_parameters(spec.layers[i])) return i;
  throw std::invalid_argument("network has no parametrised layer");
}

}  // namespace

bool is_soft(SharingMode mode) {
  return mode == SharingMode::soft_laf || mode == SharingMode::soft_tucker || mode == SharingMode::soft_tt;
}

std::string to_string(SharingMode mode) {
  switch (mode) {
    case SharingMode::independent: return "independent";
    case SharingMode::tied: return "tied";
    case SharingMode::soft_laf: return "soft_laf";
    case SharingMode::soft_tucker: return "soft_tucker";
    case SharingMode::soft_tt: return "soft_tt";
  }
  throw std::logic_error("unknown sharing mode");
}

SharingMode parse_sharing_mode(const std::string& name) {
  for (auto m : {SharingMode::independent, SharingMode::tied, SharingMode::soft_laf, SharingMode::soft_tucker,
                 SharingMode::soft_tt})
    if (to_string(m) == name) return m;
  throw std::invalid_argument("unknown sharing mode '" + name + "'");
}

bool has_parameters(const LayerSpec& layer) {
  return std::holds_alternative<FullyConnected>(layer.kind) || std::holds_alternative<Conv2d>(layer.kind);
}

std::size_t output_dim(const NetworkSpec& spec, std::size_t task) {
  if (!spec.output_dims.empty()) return spec.output_dims.at(task);
  return std::get<FullyConnected>(spec.layers[last_parametrised(spec)].kind).out;
}

Shape weight_shape(const NetworkSpec& spec, std::size_t layer, std::size_t task) {
  const auto& kind = spec.layers.at(layer).kind;
  if (const auto* fc = std::get_if<FullyConnected>(&kind)) {
    const bool head = layer == last_parametrised(spec) && !spec.output_dims.empty();
    return {fc->in, head ? spec.output_dims.at(task) : fc->out};
  }
  if (const auto* cv = std::get_if<Conv2d>(&kind)) return {cv->h, cv->w, cv->in_channels, cv->out_channels};
  throw std::invalid_argument("layer " + std::to_string(layer) + " has no weights");
}

void validate(const NetworkSpec& spec) {
  if (spec.task_count == 0) throw std::invalid_argument("task count must be positive");
  if (spec.input_shape.size() != 1 && spec.input_shape.size() != 3)
    throw ShapeError("input shape must be {D} or {H, W, C}, got " + shape_string(spec.input_shape));
  for (auto d : spec.input_shape)
    if (d == 0) throw ShapeError("input extents must be positive");
  if (!spec.output_dims.empty() && spec.output_dims.size() != spec.task_count)
    throw std::invalid_argument("output_dims must list one width per task");
  for (auto d : spec.output_dims)
    if (d == 0) throw ShapeError("output widths must be positive");

  const std::size_t head = last_parametrised(spec);
  if (!std::holds_alternative<FullyConnected>(spec.layers[head].kind))
    throw std::invalid_argument("the final parametrised layer must be fully connected");
  const bool heterogeneous =
      !spec.output_dims.empty() &&
      std::any_of(spec.output_dims.begin(), spec.output_dims.end(), [&](auto d) { return d != spec.output_dims[0]; });
  if (heterogeneous && spec.layers[head].sharing != SharingMode::independent)
    throw std::invalid_argument("heads of differing width must be independent");

  Shape cur = spec.input_shape;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& layer = spec.layers[i];
    const std::string where = "layer " + std::to_string(i) + ": ";
    if (!has_parameters(layer) && layer.sharing != SharingMode::independent)
      throw std::invalid_argument(where + "only weighted layers take a sharing mode");
    std::visit(overloaded{[&](const FullyConnected& fc) {
                            if (fc.in == 0 || fc.out == 0) throw ShapeError(where + "extents must be positive");
                            if (fc.in != shape_size(cur))
                              throw ShapeError(where + "expects " + std::to_string(fc.in) + " inputs, receives " +
                                               shape_string(cur));
                            cur = Shape{i == head && !spec.output_dims.empty() ? spec.output_dims[0] : fc.out};
                          },
                          [&](const Conv2d& cv) {
                            if (cv.h == 0 || cv.w == 0 || cv.in_channels == 0 || cv.out_channels == 0)
                              throw ShapeError(where + "extents must be positive");
                            if (cur.size() != 3 || cur[2] != cv.in_channels)
                              throw ShapeError(where + "convolution cannot take " + shape_string(cur));
                            if (cv.h > cur[0] || cv.w > cur[1])
                              throw ShapeError(where + "kernel larger than its input " + shape_string(cur));
                            cur = Shape{cur[0] - cv.h + 1, cur[1] - cv.w + 1, cv.out_channels};
                          },
                          [&](const MaxPool2&) {
                            if (cur.size() != 3 || cur[0] < 2 || cur[1] < 2)
                              throw ShapeError(where + "pooling cannot take " + shape_string(cur));
                            cur = Shape{cur[0] / 2, cur[1] / 2, cur[2]};
                          },
                          [](Activation) {}},
               layer.kind);
  }
}

NetworkSpec with_sharing(NetworkSpec spec, SharingMode mode, bool keep_head) {
  const std::size_t head = last_parametrised(spec);
  for (std::size_t i = 0; i < spec.layers.size(); ++i)
    if (has_parameters(spec.layers[i])) spec.layers[i].sharing = (keep_head && i == head) ? SharingMode::independent : mode;
  return spec;
}

MultiTaskNetwork::MultiTaskNetwork(NetworkSpec spec) : spec_(std::move(spec)) {
  validate(spec_);
  const std::size_t tasks = spec_.task_count;
  params_.resize(spec_.layers.size());
  caches_.resize(tasks);
  for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
    if (!has_parameters(spec_.layers[i])) continue;
    param_layers_.push_back(i);
    Params p;
    p.mode = spec_.layers[i].sharing;
    if (p.mode == SharingMode::independent) {
      for (std::size_t t = 0; t < tasks; ++t) p.weights.emplace_back(weight_shape(spec_, i, t));
    } else if (p.mode == SharingMode::tied) {
      p.weights.emplace_back(weight_shape(spec_, i, 0));
    }
    const std::size_t bias_count = p.mode == SharingMode::tied ? 1 : tasks;
    for (std::size_t t = 0; t < bias_count; ++t) p.biases.emplace_back(Shape{weight_shape(spec_, i, t).back()});
    p.weight_grads = p.weights;
    p.bias_grads = p.biases;
    params_[i] = std::move(p);
  }
}

MultiTaskNetwork::Params& MultiTaskNetwork::params(std::size_t layer) {
  if (layer >= params_.size() || !params_[layer]) throw std::invalid_argument("layer " + std::to_string(layer) + " has no parameters");
  return *params_[layer];
}

const MultiTaskNetwork::Params& MultiTaskNetwork::params(std::size_t layer) const {
  if (layer >= params_.size() || !params_[layer]) throw std::invalid_argument("layer " + std::to_string(layer) + " has no parameters");
  return *params_[layer];
}

void MultiTaskNetwork::check_task(std::size_t task) const {
  if (task >= spec_.task_count)
    throw std::out_of_range("task " + std::to_string(task) + " out of range for " + std::to_string(spec_.task_count) + " tasks");
}

std::size_t MultiTaskNetwork::weight_slot(const Params& p, std::size_t task) const {
  check_task(task);
  return p.mode == SharingMode::tied ? 0 : task;
}

std::size_t MultiTaskNetwork::bias_slot(const Params& p, std::size_t task) const { return weight_slot(p, task); }

SharingMode MultiTaskNetwork::sharing(std::size_t layer) const { return params(layer).mode; }

void MultiTaskNetwork::set_weight(std::size_t layer, std::size_t task, Tensor w) {
  Params& p = params(layer);
  if (is_soft(p.mode)) throw std::invalid_argument("soft layers take factors, not weights");
  const std::size_t slot = weight_slot(p, task);
  if (w.shape() != p.weights[slot].shape())
    throw ShapeError("weight shape " + shape_string(w.shape()) + " != " + shape_string(p.weights[slot].shape()));
  p.weights[slot] = std::move(w);
}

void MultiTaskNetwork::set_bias(std::size_t layer, std::size_t task, Tensor b) {
  Params& p = params(layer);
  const std::size_t slot = bias_slot(p, task);
  if (b.shape() != p.biases[slot].shape())
    throw ShapeError("bias shape " + shape_string(b.shape()) + " != " + shape_string(p.biases[slot].shape()));
  p.biases[slot] = std::move(b);
}

void MultiTaskNetwork::set_factors(std::size_t layer, Factors f) {
  Params& p = params(layer);
  if (!is_soft(p.mode)) throw std::invalid_argument("layer " + std::to_string(layer) + " is not soft-shared");
  const bool scheme_ok = (p.mode == SharingMode::soft_laf && std::holds_alternative<LafFactors>(f)) ||
                         (p.mode == SharingMode::soft_tucker && std::holds_alternative<TuckerFactors>(f)) ||
                         (p.mode == SharingMode::soft_tt && std::holds_alternative<TtFactors>(f));
  if (!scheme_ok) throw std::invalid_argument("factor scheme does not match the layer's sharing mode");
  std::visit([](const auto& x) { validate(x); }, f);
  Shape expect = weight_shape(spec_, layer, 0);
  expect.push_back(spec_.task_count);
  if (composed_shape(f) != expect)
    throw ShapeError("factors compose to " + shape_string(composed_shape(f)) + ", layer needs " + shape_string(expect));
  p.factor_grads = zeros_like(f);
  p.factors = std::move(f);
  p.composed_valid = false;
  p.composed_grad_pending = false;
  p.composed_grad = Tensor(expect);
}

const Factors& MultiTaskNetwork::factors(std::size_t layer) const {
  const Params& p = params(layer);
  if (!p.factors) throw std::invalid_argument("layer " + std::to_string(layer) + " has no factors");
  return *p.factors;
}

const Tensor& MultiTaskNetwork::effective_weight(std::size_t layer, std::size_t task) const {
  const Params& p = params(layer);
  if (!is_soft(p.mode)) return p.weights[weight_slot(p, task)];
  check_task(task);
  if (!p.factors) throw std::logic_error("soft layer " + std::to_string(layer) + " used before factors were set");
  if (!p.composed_valid) {
    p.composed = compose(*p.factors);
    p.slices.clear();
    for (std::size_t t = 0; t < spec_.task_count; ++t) p.slices.push_back(last_axis_slice(p.composed, t));
    p.composed_valid = true;
  }
  return p.slices[task];
}

const Tensor& MultiTaskNetwork::weight(std::size_t layer, std::size_t task) const { return effective_weight(layer, task); }

const Tensor& MultiTaskNetwork::bias(std::size_t layer, std::size_t task) const {
  const Params& p = params(layer);
  return p.biases[bias_slot(p, task)];
}

Tensor MultiTaskNetwork::forward(std::size_t task, const Tensor& x, bool keep_cache) {
  check_task(task);
  if (x.rank() != spec_.input_shape.size() + 1 || !std::equal(spec_.input_shape.begin(), spec_.input_shape.end(), x.shape().begin() + 1))
    throw ShapeError("input batch " + shape_string(x.shape()) + " does not match input shape " + shape_string(spec_.input_shape));
  const std::size_t batch = x.extent(0);
  std::vector<LayerCache> cache(keep_cache ? spec_.layers.size() : 0);
  Tensor h = x;
  for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
    const auto& kind = spec_.layers[i].kind;
    LayerCache* c = keep_cache ? &cache[i] : nullptr;
    if (std::holds_alternative<FullyConnected>(kind)) {
      if (c) c->shape = h.shape();
      if (h.rank() != 2) h = std::move(h).reshaped({batch, h.size() / batch});
      const Tensor& w = effective_weight(i, task);
      Tensor y = fc_forward(h, w, bias(i, task));
      if (c) c->input = std::move(h);
      h = std::move(y);
    } else if (std::holds_alternative<Conv2d>(kind)) {
      const Tensor& w = effective_weight(i, task);
      Tensor y = conv2d_forward(h, w, bias(i, task));
      if (c) c->input = std::move(h);
      h = std::move(y);
    } else if (std::holds_alternative<MaxPool2>(kind)) {
      PoolResult r = maxpool2_forward(h);
      if (c) {
        c->shape = h.shape();
        c->argmax = std::move(r.argmax);
      }
      h = std::move(r.out);
    } else if (std::get<Activation>(kind) == Activation::relu) {
      Tensor y = relu_forward(h);
      if (c) c->input = std::move(h);
      h = std::move(y);
    } else {
      h = tanh_forward(h);
      if (c) c->output = h;
    }
  }
  if (keep_cache) caches_[task] = std::move(cache);
  return h;
}

void MultiTaskNetwork::backward(std::size_t task, const Tensor& grad_out) {
  check_task(task);
  if (!caches_[task]) throw std::logic_error("backward for task " + std::to_string(task) + " without a cached forward");
  std::vector<LayerCache> cache = std::move(*caches_[task]);
  caches_[task].reset();

  Tensor g = grad_out;
  for (std::size_t i = spec_.layers.size(); i-- > 0;) {
    const auto& kind = spec_.layers[i].kind;
    LayerCache& c = cache[i];
    if (has_parameters(spec_.layers[i])) {
      const Tensor& w = effective_weight(i, task);
      const bool fc = std::holds_alternative<FullyConnected>(kind);
      DenseGrads d = fc ? fc_backward(c.input, w, g) : conv2d_backward(c.input, w, g);
      Params& p = params(i);
      p.bias_grads[bias_slot(p, task)] += d.b;
      if (is_soft(p.mode)) {
        add_last_axis_slice(p.composed_grad, d.w, task);
        p.composed_grad_pending = true;
      } else {
        p.weight_grads[weight_slot(p, task)] += d.w;
      }
      g = fc ? std::move(d.x).reshaped(c.shape) : std::move(d.x);
    } else if (std::holds_alternative<MaxPool2>(kind)) {
      g = maxpool2_backward(c.shape, c.argmax, g);
    } else if (std::get<Activation>(kind) == Activation::relu) {
      g = relu_backward(c.input, g);
    } else {
      g = tanh_backward(c.output, g);
    }
  }
}

void MultiTaskNetwork::flush_composed_grads() {
  for (auto& p : params_) {
    if (!p || !p->composed_grad_pending) continue;
    Factors g = compose_backward(*p->factors, p->composed_grad);
    auto dst = factor_tensors(*p->factor_grads);
    auto src = factor_tensors(g);
    for (std::size_t k = 0; k < dst.size(); ++k) *dst[k] += *src[k];
    p->composed_grad.fill(0.0);
    p->composed_grad_pending = false;
  }
}

void MultiTaskNetwork::zero_grad() {
  for (auto& p : params_) {
    if (!p) continue;
    for (auto& g : p->weight_grads) g.fill(0.0);
    for (auto& g : p->bias_grads) g.fill(0.0);
    if (p->factor_grads)
      for (auto* g : factor_tensors(*p->factor_grads)) g->fill(0.0);
    if (!p->composed_grad.empty()) p->composed_grad.fill(0.0);
    p->composed_grad_pending = false;
  }
}

std::vector<ParamRef> MultiTaskNetwork::parameters() {
  flush_composed_grads();
  std::vector<ParamRef> out;
  for (std::size_t i : param_layers_) {
    Params& p = *params_[i];
    const std::string pre = layer_prefix(i);
    if (p.mode == SharingMode::tied) {
      out.push_back({pre + "w", &p.weights[0], &p.weight_grads[0]});
    } else if (p.mode == SharingMode::independent) {
      for (std::size_t t = 0; t < p.weights.size(); ++t)
        out.push_back({pre + "w" + std::to_string(t), &p.weights[t], &p.weight_grads[t]});
    } else {
      if (!p.factors) throw std::logic_error("soft layer " + std::to_string(i) + " has no factors");
      auto names = factor_names(*p.factors);
      auto values = factor_tensors(*p.factors);
      auto grads = factor_tensors(*p.factor_grads);
      for (std::size_t k = 0; k < values.size(); ++k) out.push_back({pre + names[k], values[k], grads[k]});
    }
    if (p.mode == SharingMode::tied)
      out.push_back({pre + "b", &p.biases[0], &p.bias_grads[0]});
    else
      for (std::size_t t = 0; t < p.biases.size(); ++t)
        out.push_back({pre + "b" + std::to_string(t), &p.biases[t], &p.bias_grads[t]});
  }
  return out;
}

void MultiTaskNetwork::invalidate() {
  for (auto& p : params_)
    if (p) p->composed_valid = false;
}

NamedTensors MultiTaskNetwork::state() const {
  // parameters() only mutates gradient bookkeeping, never values.
  auto refs = const_cast<MultiTaskNetwork*>(this)->parameters();
  NamedTensors out;
  out.reserve(refs.size());
  for (const auto& r : refs) out.emplace_back(r.name, *r.value);
  return out;
}

MultiTaskNetwork MultiTaskNetwork::from_state(NetworkSpec spec, const NamedTensors& state) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [name, t] : state)
    if (!by_name.emplace(name, &t).second) throw std::invalid_argument("duplicate tensor '" + name + "'");
  MultiTaskNetwork net(std::move(spec));
  std::size_t used = 0;
  auto take = [&](const std::string& name) -> const Tensor& {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw std::invalid_argument("missing tensor '" + name + "'");
    ++used;
    return *it->second;
  };
  const std::size_t tasks = net.task_count();
  for (std::size_t i : net.param_layers_) {
    const std::string pre = layer_prefix(i);
    const SharingMode mode = net.sharing(i);
    const std::size_t order = weight_shape(net.spec_, i, 0).size() + 1;
    if (mode == SharingMode::tied) {
      net.set_weight(i, 0, take(pre + "w"));
      net.set_bias(i, 0, take(pre + "b"));
      continue;
    }
    if (mode == SharingMode::independent) {
      for (std::size_t t = 0; t < tasks; ++t) net.set_weight(i, t, take(pre + "w" + std::to_string(t)));
    } else if (mode == SharingMode::soft_laf) {
      net.set_factors(i, LafFactors{take(pre + "laf.l"), take(pre + "laf.s")});
    } else if (mode == SharingMode::soft_tucker) {
      TuckerFactors f{take(pre + "tucker.core"), {}};
      for (std::size_t n = 0; n < order; ++n) f.u.push_back(take(pre + "tucker.u" + std::to_string(n)));
      net.set_factors(i, std::move(f));
    } else {
      TtFactors f{take(pre + "tt.head"), {}, Tensor()};
      for (std::size_t n = 0; n + 2 < order; ++n) f.cores.push_back(take(pre + "tt.core" + std::to_string(n)));
      f.tail = take(pre + "tt.tail");
      net.set_factors(i, std::move(f));
    }
    for (std::size_t t = 0; t < tasks; ++t) net.set_bias(i, t, take(pre + "b" + std::to_string(t)));
  }
  if (used != state.size()) throw std::invalid_argument("state holds tensors the network does not use");
  return net;
}

ParameterCount count_parameters(const MultiTaskNetwork& net) {
  ParameterCount c;
  const auto& spec = net.spec();
  for (std::size_t i : net.parametrised_layers()) {
    std::size_t n = 0, independent = 0;
    for (std::size_t t = 0; t < net.task_count(); ++t) {
      const Shape w = weight_shape(spec, i, t);
      independent += shape_size(w) + w.back();
    }
    const SharingMode mode = net.sharing(i);
    if (mode == SharingMode::tied) {
      const Shape w = weight_shape(spec, i, 0);
      n = shape_size(w) + w.back();
    } else if (mode == SharingMode::independent) {
      n = independent;
    } else {
      n = factor_parameter_count(net.factors(i));
      for (std::size_t t = 0; t < net.task_count(); ++t) n += net.bias(i, t).size();
    }
    c.per_layer.push_back(n);
    c.total += n;
    c.independent_total += independent;
  }
  c.ratio = static_cast<double>(c.total) / static_cast<double>(c.independent_total);
  return c;
}

}  // namespace dmtrl
