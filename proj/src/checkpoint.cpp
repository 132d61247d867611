#include "dmtrl/checkpoint.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <fstream>
#include <iterator>
#include <limits>

#include "dmtrl/errors.hpp"

namespace dmtrl {

namespace {

constexpr char kMagic[4] = {'D', 'M', 'T', 'L'};

template <class U>
void put(std::vector<std::uint8_t>& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& b, std::size_t end) : b_(b), end_(end) {}

  template <class U>
  U get() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(b_[pos_ + i]) << (8 * i));
    pos_ += sizeof(U);
    return v;
  }

  std::string text(std::size_t n) {
    need(n);
    std::string s(b_.begin() + static_cast<std::ptrdiff_t>(pos_), b_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return s;
  }

  std::size_t remaining() const { return end_ - pos_; }

 private:
  void need(std::size_t n) const {
    if (n > end_ - pos_) throw CheckpointError("checkpoint truncated at byte " + std::to_string(pos_));
  }
  const std::vector<std::uint8_t>& b_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

std::uint32_t crc_of(const std::uint8_t* data, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed large buffers in pieces.
  while (n > 0) {
    const auto piece = static_cast<uInt>(std::min<std::size_t>(n, std::numeric_limits<uInt>::max()));
    crc = crc32(crc, data, piece);
    data += piece;
    n -= piece;
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const NamedTensors& tensors) {
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    if (name.size() > std::numeric_limits<std::uint16_t>::max()) throw CheckpointError("tensor name too long: " + name);
    if (t.rank() > std::numeric_limits<std::uint8_t>::max()) throw CheckpointError("tensor rank too large: " + name);
    put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    out.push_back(static_cast<std::uint8_t>(t.rank()));
    for (std::size_t e : t.shape()) put<std::uint64_t>(out, e);
    for (double v : t.data()) put<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  }
  put<std::uint32_t>(out, crc_of(out.data(), out.size()));
  return out;
}

NamedTensors decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 16) throw CheckpointError("checkpoint too short");
  if (!std::equal(std::begin(kMagic), std::end(kMagic), bytes.begin()))
    throw CheckpointError("not a checkpoint (bad magic)");
  const std::size_t body = bytes.size() - 4;
  Reader r(bytes, body);
  r.text(4);
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw CheckpointError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  std::uint32_t stored = 0;
  for (std::size_t i = 0; i < 4; ++i) stored |= static_cast<std::uint32_t>(bytes[body + i]) << (8 * i);
  if (stored != crc_of(bytes.data(), body)) throw CheckpointError("checkpoint CRC mismatch");

  const auto count = r.get<std::uint32_t>();
  NamedTensors out;
  for (std::uint32_t k = 0; k < count; ++k) {
    std::string name = r.text(r.get<std::uint16_t>());
    const auto rank = r.get<std::uint8_t>();
    Shape shape(rank);
    std::size_t size = 1;
    for (auto& e : shape) {
      const auto x = r.get<std::uint64_t>();
      if (x == 0 || x > r.remaining()) throw CheckpointError("tensor " + name + " has an invalid extent");
      e = static_cast<std::size_t>(x);
      size *= e;
    }
    if (size > r.remaining() / 8) throw CheckpointError("checkpoint truncated in tensor " + name);
    std::vector<double> data(size);
    for (auto& v : data) v = std::bit_cast<double>(r.get<std::uint64_t>());
    out.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  if (r.remaining() != 0) throw CheckpointError("unexpected bytes after the last tensor");
  return out;
}

void save_checkpoint(const std::string& path, const NamedTensors& tensors) {
  const auto bytes = encode_checkpoint(tensors);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("write failed for " + path);
}

NamedTensors load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace dmtrl
