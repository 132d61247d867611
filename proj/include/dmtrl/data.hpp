#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "dmtrl/tensor.hpp"

namespace dmtrl {

enum class LabelKind { binary, multiclass };
enum class Split { train, test };

/// Inputs for one task plus labels: +1/-1 for binary tasks, class indices
/// for multiclass ones.
struct TaskDataset {
  std::size_t task_id = 0;
  Tensor inputs;  // N x H x W x C or N x D
  std::vector<int> labels;
  LabelKind kind = LabelKind::multiclass;
  std::size_t class_count = 0;  // 2 for binary tasks
  Split split = Split::train;

  std::size_t size() const noexcept { return labels.size(); }
};

/// Throws DataError when counts or labels are inconsistent.
void validate(const TaskDataset& d);

/// Reads an IDX image file (magic 0x00000803) and label file (0x00000801).
/// Pixels become doubles in [0, 1] (byte / 255); images are N x rows x cols x 1.
TaskDataset load_idx(const std::string& images_path, const std::string& labels_path, Split split = Split::train);

/// Writes a multiclass dataset with N x rows x cols x 1 inputs as IDX. Pixels
/// are stored as round(255 v), so values of the form k/255 round-trip exactly.
void write_idx(const TaskDataset& d, const std::string& images_path, const std::string& labels_path);

/// Binary task: +1 where the class equals `positive_class`, else -1.
TaskDataset make_one_vs_all(const TaskDataset& raw, int positive_class);

/// Keeps floor(fraction·N) items without replacement, in their original order.
/// Stratified sampling allocates per class in proportion to class sizes
/// (largest remainder) and keeps at least one item of every class when there
/// is room for it; with fewer slots than classes, each item comes from a
/// different class.
TaskDataset sample_fraction(const TaskDataset& d, double fraction, std::uint64_t seed, bool stratified);

/// Subset by item index, in the given order.
TaskDataset select(const TaskDataset& d, const std::vector<std::size_t>& indices);

struct SynthOptions {
  double sigma = -1.0;  // negative: expected noise norm of a third of the min prototype distance
  std::uint64_t stream = 0;  // different streams draw different samples from the same prototypes
};

struct HeterogeneousData {
  TaskDataset parity;    // binary: +1 for even prototype index
  TaskDataset identity;  // 8 classes: the prototype index
  Tensor prototypes;     // 8 x 16 x 16 x 1, pixels uniform in [0, 1]
  double sigma = 0.0;
};

/// Two tasks over the same 16x16x1 inputs: each input is one of 8 random
/// prototypes (chosen by `seed`) plus Gaussian pixel noise.
HeterogeneousData synth_heterogeneous(std::uint64_t seed, std::size_t n, const SynthOptions& options = {});

}  // namespace dmtrl
