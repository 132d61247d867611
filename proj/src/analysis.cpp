#include "dmtrl/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "dmtrl/errors.hpp"
#include "dmtrl/overloaded.hpp"

namespace dmtrl {

namespace {

void check_matrix(const Tensor& s) {
  if (s.rank() != 2) throw ShapeError("mixing matrix must be K x T, got " + shape_string(s.shape()));
  if (s.cols() < 2) throw std::invalid_argument("sharing strength needs at least two tasks");
}

// Squared norms; identical columns then give dot == norm exactly, and
// sqrt(x * x) == x in binary64, so their cosine is exactly 1.
std::vector<double> column_norms(const Tensor& s) {
  std::vector<double> norms(s.cols(), 0.0);
  for (std::size_t j = 0; j < s.cols(); ++j) {
    for (std::size_t k = 0; k < s.rows(); ++k) norms[j] += s(k, j) * s(k, j);
    if (norms[j] == 0.0) throw std::invalid_argument("column " + std::to_string(j) + " of the mixing matrix is zero");
  }
  return norms;
}

double cosine(const Tensor& s, const std::vector<double>& norms, std::size_t a, std::size_t b) {
  double dot = 0.0;
  for (std::size_t k = 0; k < s.rows(); ++k) dot += s(k, a) * s(k, b);
  return std::clamp(dot / std::sqrt(norms[a] * norms[b]), -1.0, 1.0);
}

}  // namespace

MixingMatrix extract_mixing(const MultiTaskNetwork& net, std::size_t layer) {
  const SharingMode mode = net.sharing(layer);
  if (!is_soft(mode))
    throw std::invalid_argument("layer " + std::to_string(layer) + " is " + to_string(mode) + " and has no mixing matrix");
  Tensor s = std::visit(overloaded{[](const LafFactors& f) { return f.s; },
                                   [](const TuckerFactors& f) { return transpose(f.u.back()); },
                                   [](const TtFactors& f) { return f.tail; }},
                        net.factors(layer));
  return {std::move(s), layer, mode};
}

Tensor normalize_mixing(const Tensor& s) {
  if (s.rank() != 2) throw ShapeError("mixing matrix must be K x T, got " + shape_string(s.shape()));
  Tensor out(s.shape());
  for (std::size_t j = 0; j < s.cols(); ++j) {
    double top = 0.0;
    for (std::size_t k = 0; k < s.rows(); ++k) top = std::max(top, std::abs(s(k, j)));
    double z = 0.0;
    for (std::size_t k = 0; k < s.rows(); ++k) z += out(k, j) = std::exp(std::abs(s(k, j)) - top);
    for (std::size_t k = 0; k < s.rows(); ++k) out(k, j) /= z;
  }
  return out;
}

double sharing_strength(const Tensor& s) {
  check_matrix(s);
  const auto norms = column_norms(s);
  const std::size_t t = s.cols();
  double sum = 0.0;
  for (std::size_t a = 0; a < t; ++a)
    for (std::size_t b = a + 1; b < t; ++b) sum += cosine(s, norms, a, b);
  return 2.0 * sum / static_cast<double>(t * (t - 1));
}

std::vector<TaskPair> task_affinity(const Tensor& s) {
  check_matrix(s);
  const Tensor n = normalize_mixing(s);
  const auto norms = column_norms(n);
  std::vector<TaskPair> pairs;
  for (std::size_t a = 0; a < n.cols(); ++a)
    for (std::size_t b = a + 1; b < n.cols(); ++b) pairs.push_back({a, b, cosine(n, norms, a, b)});
  // Cosines equal up to rounding count as ties.
  auto key = [](const TaskPair& p) { return std::round(p.cosine * 1e12); };
  std::stable_sort(pairs.begin(), pairs.end(), [&](const TaskPair& x, const TaskPair& y) { return key(x) > key(y); });
  return pairs;
}

std::vector<LayerSharing> sharing_report(const MultiTaskNetwork& net) {
  std::vector<LayerSharing> out;
  for (std::size_t i : net.parametrised_layers()) {
    if (!is_soft(net.sharing(i))) continue;
    const MixingMatrix m = extract_mixing(net, i);
    const auto pairs = task_affinity(m.s);
    out.push_back({i, m.mode, m.s.rows(), m.s.cols(), sharing_strength(normalize_mixing(m.s)), sharing_strength(m.s),
                   pairs.front(), pairs.back()});
  }
  if (out.empty()) throw std::invalid_argument("network has no soft-shared layer");
  return out;
}

}  // namespace dmtrl
