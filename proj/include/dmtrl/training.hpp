#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <variant>
#include <vector>

#include "dmtrl/data.hpp"
#include "dmtrl/network.hpp"

namespace dmtrl {

struct Sgd {};
struct Momentum {
  double mu = 0.9;
};
struct Adam {
  double beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8;
};
using OptimizerKind = std::variant<Sgd, Momentum, Adam>;

struct TrainConfig {
  OptimizerKind optimizer = Adam{};
  double learning_rate = 1e-3;
  std::size_t batch_size = 64;
  std::size_t epochs = 10;
  std::uint64_t seed = 0;
};

/// Throws ConfigError naming the first invalid field.
void validate(const TrainConfig& config);

class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double learning_rate);
  /// One update of every parameter from its gradient. The parameter list must
  /// keep the same order and shapes between calls.
  void step(const std::vector<ParamRef>& params);

 private:
  OptimizerKind kind_;
  double lr_;
  std::size_t t_ = 0;
  std::vector<Tensor> m_, v_;
};

struct StlInit {
  std::size_t pretrain_epochs = 5;
  double epsilon = 0.1;
};
struct RandomDecompose {
  double epsilon = 0.1;
};
struct PlainRandom {};
using InitPolicy = std::variant<StlInit, RandomDecompose, PlainRandom>;

/// Uniform weights in +-sqrt(6 / (fan_in + fan_out)), zero biases. Soft layers
/// are sampled as full task-stacked tensors and decomposed at `epsilon`.
MultiTaskNetwork init_random_decompose(const NetworkSpec& spec, double epsilon, std::uint64_t seed);

/// PlainRandom: independent and tied layers only. RandomDecompose: as
/// init_random_decompose. StlInit needs training data; use initialise().
MultiTaskNetwork build_network(const NetworkSpec& spec, const InitPolicy& init, std::uint64_t seed);

/// Trains one single-task network per task on its own data. Every network
/// starts from the same seed-determined weights.
std::vector<MultiTaskNetwork> pretrain_stl(const NetworkSpec& spec, const std::vector<TaskDataset>& data,
                                           const TrainConfig& config);

/// Builds `target` from single-task networks: soft layers decompose the
/// task-stacked weights at `epsilon`, tied layers take the task average,
/// independent layers and all per-task biases are copied.
MultiTaskNetwork init_from_stl(const std::vector<MultiTaskNetwork>& stl, const NetworkSpec& target, double epsilon);

/// Any init policy; StlInit pretrains with `config` for its pretrain epochs.
MultiTaskNetwork initialise(const NetworkSpec& spec, const InitPolicy& init, const std::vector<TaskDataset>& data,
                            const TrainConfig& config);

/// Tucker modes left at full rank: conv spatial axes of extent <= 5.
std::vector<bool> tucker_keep_full(const NetworkSpec& spec, std::size_t layer);

struct LogRecord {
  std::size_t epoch;
  std::size_t task;
  double loss;
  double error;
};

struct TrainLog {
  std::vector<LogRecord> records;
};

/// Round-robin training: each step draws one minibatch per task, accumulates
/// every task's gradient and applies one optimiser update. Each epoch has as
/// many steps as the largest task has batches; smaller tasks wrap around.
TrainLog train(MultiTaskNetwork& net, const std::vector<TaskDataset>& data, const TrainConfig& config);

/// Outputs of task `task` on all inputs, in chunks.
Tensor predict(MultiTaskNetwork& net, std::size_t task, const Tensor& inputs);

/// Fraction misclassified: sign of the single output for binary tasks (zero
/// counts as -1), argmax with lowest-index ties for multiclass tasks.
double error_rate(const Tensor& outputs, const TaskDataset& data);

/// N x T matrix of single-output task scores.
Tensor task_scores(MultiTaskNetwork& net, const Tensor& inputs);

/// Share of rows whose argmax (lowest index on ties) differs from the label.
double multiclass_error(const Tensor& scores, std::span<const int> labels);

struct Evaluation {
  std::vector<double> task_error;
  double mean_error = 0.0;
  std::optional<double> multiclass_error;
};

/// Per-task error on `data` (one dataset per task). When `class_labels` is
/// given the tasks are treated as one-vs-all scorers of those classes over
/// the shared inputs of data[0].
Evaluation evaluate(MultiTaskNetwork& net, const std::vector<TaskDataset>& data,
                    const std::vector<int>* class_labels = nullptr);

}  // namespace dmtrl
