#include "dmtrl/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

#include "dmtrl/errors.hpp"
#include "dmtrl/random.hpp"

namespace dmtrl {

namespace {

constexpr std::uint32_t kImageMagic = 0x00000803;
constexpr std::uint32_t kLabelMagic = 0x00000801;

std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t at, const std::string& path) {
  if (at + 4 > b.size()) throw DataError(path + ": truncated header");
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) | b[at + 3];
}

void put32(std::ostream& out, std::uint32_t v) {
  const char bytes[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                         static_cast<char>(v)};
  out.write(bytes, 4);
}

std::string hex(std::uint32_t v) {
  std::ostringstream os;
  os << "0x" << std::hex << v;
  return os.str();
}

// Largest-remainder split of `n` slots over groups of the given sizes.
std::vector<std::size_t> allocate(const std::vector<std::size_t>& sizes, std::size_t n) {
  const std::size_t total = std::accumulate(sizes.begin(), sizes.end(), std::size_t{0});
  const std::size_t groups = sizes.size();
  std::vector<std::size_t> take(groups, 0);
  if (n < groups) {
    // One item from each of the n largest classes (ties by class order).
    std::vector<std::size_t> order(groups);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return sizes[a] > sizes[b]; });
    for (std::size_t k = 0; k < n; ++k) take[order[k]] = 1;
    return take;
  }
  std::vector<std::pair<double, std::size_t>> remainders;
  std::size_t assigned = 0;
  for (std::size_t g = 0; g < groups; ++g) {
    const double exact = static_cast<double>(n) * static_cast<double>(sizes[g]) / static_cast<double>(total);
    take[g] = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(exact)));
    take[g] = std::min(take[g], sizes[g]);
    remainders.emplace_back(exact - std::floor(exact), g);
    assigned += take[g];
  }
  std::stable_sort(remainders.begin(), remainders.end(), [](auto a, auto b) { return a.first > b.first; });
  for (std::size_t k = 0; assigned < n; k = (k + 1) % groups) {
    const std::size_t g = remainders[k].second;
    if (take[g] < sizes[g]) {
      ++take[g];
      ++assigned;
    }
  }
  // The at-least-one floor can overshoot; trim from the largest allocations.
  while (assigned > n) {
    auto g = static_cast<std::size_t>(std::max_element(take.begin(), take.end()) - take.begin());
    --take[g];
    --assigned;
  }
  return take;
}

}  // namespace

void validate(const TaskDataset& d) {
  if (d.inputs.empty() || d.inputs.extent(0) != d.labels.size())
    throw DataError("input count does not match label count " + std::to_string(d.labels.size()));
  for (int y : d.labels) {
    if (d.kind == LabelKind::binary && y != 1 && y != -1)
      throw DataError("binary label " + std::to_string(y) + " is not +1 or -1");
    if (d.kind == LabelKind::multiclass && (y < 0 || static_cast<std::size_t>(y) >= d.class_count))
      throw DataError("class index " + std::to_string(y) + " outside [0, " + std::to_string(d.class_count) + ")");
  }
}

TaskDataset load_idx(const std::string& images_path, const std::string& labels_path, Split split) {
  const auto img = read_file(images_path);
  const auto lab = read_file(labels_path);
  if (const auto m = be32(img, 0, images_path); m != kImageMagic)
    throw DataError(images_path + ": bad image magic " + hex(m));
  if (const auto m = be32(lab, 0, labels_path); m != kLabelMagic)
    throw DataError(labels_path + ": bad label magic " + hex(m));
  const std::size_t count = be32(img, 4, images_path);
  const std::size_t rows = be32(img, 8, images_path);
  const std::size_t cols = be32(img, 12, images_path);
  const std::size_t label_count = be32(lab, 4, labels_path);
  if (count != label_count)
    throw DataError("image count " + std::to_string(count) + " != label count " + std::to_string(label_count));
  if (count == 0 || rows == 0 || cols == 0) throw DataError(images_path + ": empty dataset");
  if (img.size() != 16 + count * rows * cols) throw DataError(images_path + ": truncated or oversized pixel data");
  if (lab.size() != 8 + count) throw DataError(labels_path + ": truncated or oversized label data");

  TaskDataset d;
  d.kind = LabelKind::multiclass;
  d.split = split;
  d.inputs = Tensor({count, rows, cols, 1});
  auto px = d.inputs.data();
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = img[16 + i] / 255.0;
  d.labels.resize(count);
  int top = 0;
  for (std::size_t i = 0; i < count; ++i) {
    d.labels[i] = lab[8 + i];
    top = std::max(top, d.labels[i]);
  }
  d.class_count = static_cast<std::size_t>(top) + 1;
  return d;
}

void write_idx(const TaskDataset& d, const std::string& images_path, const std::string& labels_path) {
  validate(d);
  if (d.kind != LabelKind::multiclass) throw DataError("write_idx stores class indices; got a binary task");
  if (d.inputs.rank() != 4 || d.inputs.extent(3) != 1) throw DataError("write_idx needs N x rows x cols x 1 inputs");
  const std::size_t n = d.size(), rows = d.inputs.extent(1), cols = d.inputs.extent(2);
  std::ofstream img(images_path, std::ios::binary);
  std::ofstream lab(labels_path, std::ios::binary);
  if (!img || !lab) throw DataError("cannot write " + images_path + " / " + labels_path);
  put32(img, kImageMagic);
  put32(img, static_cast<std::uint32_t>(n));
  put32(img, static_cast<std::uint32_t>(rows));
  put32(img, static_cast<std::uint32_t>(cols));
  std::vector<char> bytes(d.inputs.size());
  for (std::size_t i = 0; i < bytes.size(); ++i)
    bytes[i] = static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(d.inputs[i], 0.0, 1.0) * 255.0)));
  img.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  put32(lab, kLabelMagic);
  put32(lab, static_cast<std::uint32_t>(n));
  for (int y : d.labels) {
    if (y > 255) throw DataError("class index " + std::to_string(y) + " does not fit a byte");
    lab.put(static_cast<char>(static_cast<unsigned char>(y)));
  }
  if (!img || !lab) throw DataError("write failed for " + images_path);
}

TaskDataset make_one_vs_all(const TaskDataset& raw, int positive_class) {
  if (raw.kind != LabelKind::multiclass) throw DataError("one-vs-all needs class labels");
  TaskDataset d = raw;
  d.task_id = static_cast<std::size_t>(positive_class);
  d.kind = LabelKind::binary;
  d.class_count = 2;
  for (auto& y : d.labels) y = (y == positive_class) ? 1 : -1;
  return d;
}

TaskDataset select(const TaskDataset& d, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw DataError("empty selection");
  const std::size_t n = d.size();
  const std::size_t row = d.inputs.size() / n;
  Shape shape = d.inputs.shape();
  shape[0] = indices.size();
  TaskDataset out = d;
  out.inputs = Tensor(shape);
  out.labels.resize(indices.size());
  const auto src = d.inputs.data();
  auto dst = out.inputs.data();
  for (std::size_t k = 0; k < indices.size(); ++k) {
    if (indices[k] >= n) throw DataError("selection index out of range");
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(indices[k] * row), row,
                dst.begin() + static_cast<std::ptrdiff_t>(k * row));
    out.labels[k] = d.labels[indices[k]];
  }
  return out;
}

TaskDataset sample_fraction(const TaskDataset& d, double fraction, std::uint64_t seed, bool stratified) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw std::invalid_argument("fraction must lie in (0, 1]");
  const std::size_t n = d.size();
  if (fraction == 1.0) return d;
  const auto keep = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n)));
  if (keep == 0) throw DataError("fraction " + std::to_string(fraction) + " of " + std::to_string(n) + " items selects nothing");

  Rng rng(seed);
  std::vector<std::size_t> chosen;
  if (!stratified) {
    auto perm = rng.permutation(n);
    chosen.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(keep));
  } else {
    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < n; ++i) by_class[d.labels[i]].push_back(i);
    std::vector<std::size_t> sizes;
    for (const auto& [label, items] : by_class) sizes.push_back(items.size());
    const auto take = allocate(sizes, keep);
    std::size_t g = 0;
    for (auto& [label, items] : by_class) {
      rng.shuffle(items);
      chosen.insert(chosen.end(), items.begin(), items.begin() + static_cast<std::ptrdiff_t>(take[g++]));
    }
  }
  std::sort(chosen.begin(), chosen.end());
  return select(d, chosen);
}

HeterogeneousData synth_heterogeneous(std::uint64_t seed, std::size_t n, const SynthOptions& options) {
  constexpr std::size_t kProtos = 8, kSide = 16, kPixels = kSide * kSide;
  if (n < kProtos) throw std::invalid_argument("synth_heterogeneous needs at least 8 items");
  HeterogeneousData out;
  out.prototypes = Tensor({kProtos, kSide, kSide, 1});
  Rng proto_rng(Rng::mix({seed, 0}));
  for (auto& v : out.prototypes.data()) v = proto_rng.uniform();

  double d_min = std::numeric_limits<double>::infinity();
  for (std::size_t a = 0; a < kProtos; ++a)
    for (std::size_t b = a + 1; b < kProtos; ++b) {
      double s = 0.0;
      for (std::size_t p = 0; p < kPixels; ++p) {
        const double diff = out.prototypes[a * kPixels + p] - out.prototypes[b * kPixels + p];
        s += diff * diff;
      }
      d_min = std::min(d_min, std::sqrt(s));
    }
  // Expected noise norm sigma * sqrt(pixels) is a third of the closest separation.
  out.sigma = options.sigma >= 0.0 ? options.sigma : d_min / (3.0 * std::sqrt(static_cast<double>(kPixels)));

  Rng rng(Rng::mix({seed, 1, options.stream}));
  std::vector<int> which(n);
  for (std::size_t i = 0; i < n; ++i) which[i] = static_cast<int>(i % kProtos);
  rng.shuffle(which);

  Tensor inputs({n, kSide, kSide, 1});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < kPixels; ++p)
      inputs[i * kPixels + p] = out.prototypes[static_cast<std::size_t>(which[i]) * kPixels + p] + out.sigma * rng.normal();

  const Split split = options.stream == 0 ? Split::train : Split::test;
  out.identity = TaskDataset{1, inputs, which, LabelKind::multiclass, kProtos, split};
  std::vector<int> parity(n);
  for (std::size_t i = 0; i < n; ++i) parity[i] = which[i] % 2 == 0 ? 1 : -1;
  out.parity = TaskDataset{0, std::move(inputs), std::move(parity), LabelKind::binary, 2, split};
  return out;
}

}  // namespace dmtrl
