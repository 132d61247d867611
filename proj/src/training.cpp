#include "dmtrl/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "dmtrl/errors.hpp"
#include "dmtrl/overloaded.hpp"
#include "dmtrl/random.hpp"

namespace dmtrl {

namespace {

constexpr std::size_t kPredictChunk = 256;

double init_bound(const Shape& w) {
  std::size_t fan_in, fan_out;
  if (w.size() == 2) {
    fan_in = w[0];
    fan_out = w[1];
  } else {
    fan_in = w[0] * w[1] * w[2];
    fan_out = w[0] * w[1] * w[3];
  }
  return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

Tensor sample_uniform(const Shape& shape, double bound, Rng& rng) {
  Tensor t(shape);
  for (auto& v : t.data()) v = rng.uniform(-bound, bound);
  return t;
}

Factors decompose(SharingMode mode, const Tensor& stacked, double epsilon, const std::vector<bool>& keep_full) {
  switch (mode) {
    case SharingMode::soft_laf: return laf_decompose(stacked, epsilon);
    case SharingMode::soft_tucker: return tucker_decompose(stacked, epsilon, keep_full);
    case SharingMode::soft_tt: return tt_decompose(stacked, epsilon);
    default: throw std::logic_error("decompose called on a layer that is not soft-shared");
  }
}

void check_epsilon(double epsilon) {
  if (!(epsilon >= 0.0 && epsilon < 1.0)) throw ConfigError("epsilon", "must lie in [0, 1)");
}

Tensor gather_rows(const Tensor& t, std::span<const std::size_t> idx) {
  const std::size_t row = t.size() / t.extent(0);
  Shape s = t.shape();
  s[0] = idx.size();
  Tensor out(s);
  const double* src = t.data().data();
  double* dst = out.data().data();
  for (std::size_t k = 0; k < idx.size(); ++k) std::copy_n(src + idx[k] * row, row, dst + k * row);
  return out;
}

std::size_t argmax_row(const Tensor& m, std::size_t r) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < m.cols(); ++j)
    if (m(r, j) > m(r, best)) best = j;
  return best;
}

struct BatchLoss {
  double loss_sum = 0.0;
  std::size_t wrong = 0;
  Tensor grad;
};

// Loss summed over the batch; the gradient is that of the batch mean.
BatchLoss batch_loss(const Tensor& out, const TaskDataset& d, std::span<const std::size_t> idx) {
  BatchLoss r;
  r.grad = Tensor(out.shape());
  const double scale = 1.0 / static_cast<double>(idx.size());
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const int y = d.labels[idx[k]];
    if (d.kind == LabelKind::binary) {
      const ScalarLoss l = hinge_loss(out(k, 0), y);
      r.loss_sum += l.loss;
      r.grad(k, 0) = l.grad * scale;
      if ((out(k, 0) > 0.0 ? 1 : -1) != y) ++r.wrong;
    } else {
      const std::size_t c = out.cols();
      const VectorLoss l = softmax_ce_loss(out.data().subspan(k * c, c), static_cast<std::size_t>(y));
      r.loss_sum += l.loss;
      for (std::size_t j = 0; j < c; ++j) r.grad(k, j) = l.grad[j] * scale;
      if (argmax_row(out, k) != static_cast<std::size_t>(y)) ++r.wrong;
    }
  }
  return r;
}

void check_data(const MultiTaskNetwork& net, const std::vector<TaskDataset>& data) {
  const auto& spec = net.spec();
  if (data.size() != spec.task_count)
    throw DataError(std::to_string(data.size()) + " datasets for " + std::to_string(spec.task_count) + " tasks");
  for (std::size_t t = 0; t < data.size(); ++t) {
    const auto& d = data[t];
    validate(d);
    if (d.size() == 0) throw DataError("task " + std::to_string(t) + " has no data");
    if (!std::equal(spec.input_shape.begin(), spec.input_shape.end(), d.inputs.shape().begin() + 1) ||
        d.inputs.rank() != spec.input_shape.size() + 1)
      throw DataError("task " + std::to_string(t) + " inputs " + shape_string(d.inputs.shape()) +
                      " do not match the network input " + shape_string(spec.input_shape));
    const std::size_t width = output_dim(spec, t);
    const std::size_t want = d.kind == LabelKind::binary ? 1 : d.class_count;
    if (width != want)
      throw DataError("task " + std::to_string(t) + " needs " + std::to_string(want) + " outputs, network gives " +
                      std::to_string(width));
  }
}

}  // namespace

void validate(const TrainConfig& c) {
  if (!(c.learning_rate >= 0.0) || !std::isfinite(c.learning_rate)) throw ConfigError("learning_rate", "must be finite and >= 0");
  if (c.batch_size == 0) throw ConfigError("batch_size", "must be positive");
  std::visit(overloaded{[](const Sgd&) {},
                        [](const Momentum& m) {
                          if (!(m.mu >= 0.0 && m.mu < 1.0)) throw ConfigError("momentum", "must lie in [0, 1)");
                        },
                        [](const Adam& a) {
                          if (!(a.beta1 >= 0.0 && a.beta1 < 1.0)) throw ConfigError("beta1", "must lie in [0, 1)");
                          if (!(a.beta2 >= 0.0 && a.beta2 < 1.0)) throw ConfigError("beta2", "must lie in [0, 1)");
                          if (!(a.epsilon > 0.0)) throw ConfigError("adam_epsilon", "must be positive");
                        }},
             c.optimizer);
}

Optimizer::Optimizer(OptimizerKind kind, double learning_rate) : kind_(kind), lr_(learning_rate) {}

void Optimizer::step(const std::vector<ParamRef>& params) {
  if (m_.empty()) {
    for (const auto& p : params) {
      m_.emplace_back(p.value->shape());
      v_.emplace_back(p.value->shape());
    }
  }
  if (m_.size() != params.size()) throw std::logic_error("optimizer parameter list changed");
  ++t_;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto value = params[k].value->data();
    const auto grad = params[k].grad->data();
    auto m = m_[k].data();
    auto v = v_[k].data();
    std::visit(overloaded{[&](const Sgd&) {
                            for (std::size_t i = 0; i < value.size(); ++i) value[i] -= lr_ * grad[i];
                          },
                          [&](const Momentum& mo) {
                            for (std::size_t i = 0; i < value.size(); ++i) {
                              m[i] = mo.mu * m[i] + grad[i];
                              value[i] -= lr_ * m[i];
                            }
                          },
                          [&](const Adam& a) {
                            const double c1 = 1.0 - std::pow(a.beta1, static_cast<double>(t_));
                            const double c2 = 1.0 - std::pow(a.beta2, static_cast<double>(t_));
                            for (std::size_t i = 0; i < value.size(); ++i) {
                              m[i] = a.beta1 * m[i] + (1.0 - a.beta1) * grad[i];
                              v[i] = a.beta2 * v[i] + (1.0 - a.beta2) * grad[i] * grad[i];
                              value[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + a.epsilon);
                            }
                          }},
               kind_);
  }
}

std::vector<bool> tucker_keep_full(const NetworkSpec& spec, std::size_t layer) {
  if (const auto* cv = std::get_if<Conv2d>(&spec.layers.at(layer).kind))
    return {cv->h <= 5, cv->w <= 5, false, false, false};
  return {};
}

MultiTaskNetwork init_random_decompose(const NetworkSpec& spec, double epsilon, std::uint64_t seed) {
  check_epsilon(epsilon);
  MultiTaskNetwork net(spec);
  Rng rng(seed);
  const std::size_t tasks = spec.task_count;
  for (std::size_t i : net.parametrised_layers()) {
    const SharingMode mode = net.sharing(i);
    if (mode == SharingMode::independent) {
      for (std::size_t t = 0; t < tasks; ++t) {
        const Shape w = weight_shape(spec, i, t);
        net.set_weight(i, t, sample_uniform(w, init_bound(w), rng));
      }
    } else if (mode == SharingMode::tied) {
      const Shape w = weight_shape(spec, i, 0);
      net.set_weight(i, 0, sample_uniform(w, init_bound(w), rng));
    } else {
      const Shape w = weight_shape(spec, i, 0);
      Shape stacked = w;
      stacked.push_back(tasks);
      net.set_factors(i, decompose(mode, sample_uniform(stacked, init_bound(w), rng), epsilon, tucker_keep_full(spec, i)));
    }
  }
  return net;
}

MultiTaskNetwork build_network(const NetworkSpec& spec, const InitPolicy& init, std::uint64_t seed) {
  return std::visit(overloaded{[&](const PlainRandom&) {
                                 for (const auto& l : spec.layers)
                                   if (is_soft(l.sharing))
                                     throw std::invalid_argument("plain random init cannot set up soft-shared layers");
                                 return init_random_decompose(spec, 0.0, seed);
                               },
                               [&](const RandomDecompose& r) { return init_random_decompose(spec, r.epsilon, seed); },
                               [](const StlInit&) -> MultiTaskNetwork {
                                 throw std::invalid_argument("STL init needs training data; use initialise()");
                               }},
                    init);
}

std::vector<MultiTaskNetwork> pretrain_stl(const NetworkSpec& spec, const std::vector<TaskDataset>& data,
                                           const TrainConfig& config) {
  for (const auto& l : spec.layers)
    if (l.sharing != SharingMode::independent) throw std::invalid_argument("single-task pretraining needs independent layers");
  if (data.size() != spec.task_count) throw DataError("one dataset per task is required");
  std::vector<MultiTaskNetwork> nets;
  for (std::size_t t = 0; t < spec.task_count; ++t) {
    NetworkSpec single = spec;
    single.task_count = 1;
    single.output_dims = spec.output_dims.empty() ? std::vector<std::size_t>{} : std::vector<std::size_t>{spec.output_dims[t]};
    MultiTaskNetwork net = init_random_decompose(single, 0.0, config.seed);
    train(net, {data[t]}, config);
    nets.push_back(std::move(net));
  }
  return nets;
}

MultiTaskNetwork init_from_stl(const std::vector<MultiTaskNetwork>& stl, const NetworkSpec& target, double epsilon) {
  check_epsilon(epsilon);
  const std::size_t tasks = target.task_count;
  if (stl.size() != tasks)
    throw std::invalid_argument(std::to_string(stl.size()) + " single-task networks for " + std::to_string(tasks) + " tasks");
  MultiTaskNetwork net(target);
  for (std::size_t t = 0; t < tasks; ++t) {
    const auto& s = stl[t].spec();
    if (s.task_count != 1 || s.layers.size() != target.layers.size() || s.input_shape != target.input_shape)
      throw std::invalid_argument("single-task network " + std::to_string(t) + " does not match the target architecture");
    for (std::size_t i : net.parametrised_layers())
      if (!has_parameters(s.layers[i]) || weight_shape(s, i, 0) != weight_shape(target, i, t))
        throw std::invalid_argument("single-task network " + std::to_string(t) + " layer " + std::to_string(i) +
                                    " has a different shape");
  }

  for (std::size_t i : net.parametrised_layers()) {
    const SharingMode mode = net.sharing(i);
    if (mode == SharingMode::tied) {
      Tensor w(weight_shape(target, i, 0));
      Tensor b(Shape{w.shape().back()});
      for (const auto& s : stl) {
        w += s.weight(i, 0);
        b += s.bias(i, 0);
      }
      const double inv = 1.0 / static_cast<double>(tasks);
      net.set_weight(i, 0, inv * std::move(w));
      net.set_bias(i, 0, inv * std::move(b));
      continue;
    }
    if (mode == SharingMode::independent) {
      for (std::size_t t = 0; t < tasks; ++t) net.set_weight(i, t, stl[t].weight(i, 0));
    } else {
      std::vector<Tensor> slices;
      for (const auto& s : stl) slices.push_back(s.weight(i, 0));
      net.set_factors(i, decompose(mode, stack_last_axis(slices), epsilon, tucker_keep_full(target, i)));
    }
    for (std::size_t t = 0; t < tasks; ++t) net.set_bias(i, t, stl[t].bias(i, 0));
  }
  return net;
}

MultiTaskNetwork initialise(const NetworkSpec& spec, const InitPolicy& init, const std::vector<TaskDataset>& data,
                            const TrainConfig& config) {
  if (const auto* s = std::get_if<StlInit>(&init)) {
    TrainConfig pre = config;
    pre.epochs = s->pretrain_epochs;
    const auto stl = pretrain_stl(with_sharing(spec, SharingMode::independent, false), data, pre);
    return init_from_stl(stl, spec, s->epsilon);
  }
  return build_network(spec, init, config.seed);
}

TrainLog train(MultiTaskNetwork& net, const std::vector<TaskDataset>& data, const TrainConfig& config) {
  validate(config);
  check_data(net, data);
  const std::size_t tasks = net.task_count();
  const std::size_t batch = config.batch_size;
  std::vector<std::size_t> batches(tasks);
  std::size_t steps = 0;
  for (std::size_t t = 0; t < tasks; ++t) {
    batches[t] = (data[t].size() + batch - 1) / batch;
    steps = std::max(steps, batches[t]);
  }

  Optimizer opt(config.optimizer, config.learning_rate);
  TrainLog log;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::vector<std::vector<std::size_t>> order(tasks);
    for (std::size_t t = 0; t < tasks; ++t) {
      Rng rng(Rng::mix({config.seed, epoch, data[t].size()}));
      order[t] = rng.permutation(data[t].size());
    }
    std::vector<double> loss(tasks, 0.0);
    std::vector<std::size_t> wrong(tasks, 0), seen(tasks, 0);
    for (std::size_t s = 0; s < steps; ++s) {
      net.zero_grad();
      for (std::size_t t = 0; t < tasks; ++t) {
        const std::size_t b = s % batches[t];
        const std::size_t begin = b * batch;
        const std::size_t end = std::min(begin + batch, data[t].size());
        const std::span<const std::size_t> idx(order[t].data() + begin, end - begin);
        const Tensor out = net.forward(t, gather_rows(data[t].inputs, idx));
        BatchLoss bl = batch_loss(out, data[t], idx);
        if (!std::isfinite(bl.loss_sum))
          throw TrainingError("non-finite loss for task " + std::to_string(t) + " at step " +
                                  std::to_string(epoch * steps + s),
                              epoch * steps + s);
        net.backward(t, bl.grad);
        loss[t] += bl.loss_sum;
        wrong[t] += bl.wrong;
        seen[t] += idx.size();
      }
      opt.step(net.parameters());
      net.invalidate();
    }
    for (std::size_t t = 0; t < tasks; ++t)
      log.records.push_back({epoch, t, loss[t] / static_cast<double>(seen[t]),
                             static_cast<double>(wrong[t]) / static_cast<double>(seen[t])});
  }
  return log;
}

Tensor predict(MultiTaskNetwork& net, std::size_t task, const Tensor& inputs) {
  const std::size_t n = inputs.extent(0);
  const std::size_t width = output_dim(net.spec(), task);
  Tensor out({n, width});
  std::vector<std::size_t> idx;
  for (std::size_t begin = 0; begin < n; begin += kPredictChunk) {
    const std::size_t end = std::min(begin + kPredictChunk, n);
    idx.resize(end - begin);
    std::iota(idx.begin(), idx.end(), begin);
    const Tensor y = net.forward(task, gather_rows(inputs, idx), false);
    std::copy(y.data().begin(), y.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(begin * width));
  }
  return out;
}

double error_rate(const Tensor& outputs, const TaskDataset& data) {
  if (data.size() == 0) throw DataError("empty test set");
  if (outputs.rows() != data.size()) throw ShapeError("output rows do not match the dataset");
  std::size_t wrong = 0;
  for (std::size_t k = 0; k < data.size(); ++k) {
    if (data.kind == LabelKind::binary)
      wrong += (outputs(k, 0) > 0.0 ? 1 : -1) != data.labels[k];
    else
      wrong += argmax_row(outputs, k) != static_cast<std::size_t>(data.labels[k]);
  }
  return static_cast<double>(wrong) / static_cast<double>(data.size());
}

Tensor task_scores(MultiTaskNetwork& net, const Tensor& inputs) {
  const std::size_t n = inputs.extent(0), tasks = net.task_count();
  Tensor scores({n, tasks});
  for (std::size_t t = 0; t < tasks; ++t) {
    if (output_dim(net.spec(), t) != 1) throw std::invalid_argument("task scores need single-output tasks");
    const Tensor y = predict(net, t, inputs);
    for (std::size_t k = 0; k < n; ++k) scores(k, t) = y(k, 0);
  }
  return scores;
}

double multiclass_error(const Tensor& scores, std::span<const int> labels) {
  if (labels.empty()) throw DataError("empty test set");
  if (scores.rows() != labels.size()) throw ShapeError("score rows do not match the labels");
  std::size_t wrong = 0;
  for (std::size_t k = 0; k < labels.size(); ++k) wrong += argmax_row(scores, k) != static_cast<std::size_t>(labels[k]);
  return static_cast<double>(wrong) / static_cast<double>(labels.size());
}

Evaluation evaluate(MultiTaskNetwork& net, const std::vector<TaskDataset>& data, const std::vector<int>* class_labels) {
  if (data.size() != net.task_count()) throw DataError("one test set per task is required");
  Evaluation e;
  for (std::size_t t = 0; t < data.size(); ++t) {
    if (data[t].size() == 0) throw DataError("empty test set for task " + std::to_string(t));
    e.task_error.push_back(error_rate(predict(net, t, data[t].inputs), data[t]));
  }
  for (double x : e.task_error) e.mean_error += x;
  e.mean_error /= static_cast<double>(e.task_error.size());
  if (class_labels) e.multiclass_error = multiclass_error(task_scores(net, data[0].inputs), *class_labels);
  return e;
}

}  // namespace dmtrl
