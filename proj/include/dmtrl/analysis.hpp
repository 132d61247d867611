#pragma once

#include <cstddef>
#include <vector>

#include "dmtrl/network.hpp"

namespace dmtrl {

/// K x T task-mixing matrix of one soft layer; tasks are columns.
struct MixingMatrix {
  Tensor s;
  std::size_t layer = 0;
  SharingMode mode = SharingMode::soft_laf;
};

/// LAF: s. Tucker: transpose of the last-mode factor. TT: the tail matrix.
/// Throws std::invalid_argument on independent or tied layers.
MixingMatrix extract_mixing(const MultiTaskNetwork& net, std::size_t layer);

/// Elementwise absolute value followed by a softmax down each column.
Tensor normalize_mixing(const Tensor& s);

/// Mean cosine similarity over all column pairs, on `s` as given. Needs at
/// least two columns and no all-zero column.
double sharing_strength(const Tensor& s);

struct TaskPair {
  std::size_t a = 0, b = 0;
  double cosine = 0.0;
};

/// Every column pair of the normalised matrix, most similar first; ties keep
/// (a, b) in lexicographic order.
std::vector<TaskPair> task_affinity(const Tensor& s);

struct LayerSharing {
  std::size_t layer = 0;
  SharingMode mode = SharingMode::soft_laf;
  std::size_t k = 0, t = 0;
  double rho = 0.0;      // on the normalised matrix
  double rho_raw = 0.0;  // on the matrix as stored
  TaskPair top, bottom;
};

/// One record per soft layer, in layer order. Throws std::invalid_argument
/// when the network has no soft layer.
std::vector<LayerSharing> sharing_report(const MultiTaskNetwork& net);

}  // namespace dmtrl
