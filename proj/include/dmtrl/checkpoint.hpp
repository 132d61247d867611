#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dmtrl/network.hpp"

namespace dmtrl {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Binary layout: "DMTL", u32 version, u32 tensor count, then per tensor a
/// u16 name length, the UTF-8 name, a u8 rank, u64 extents and f64 data, all
/// little-endian; a CRC32 of every preceding byte closes the file.
std::vector<std::uint8_t> encode_checkpoint(const NamedTensors& tensors);

/// Throws CheckpointError on bad magic, unknown version, truncation, trailing
/// bytes or a CRC mismatch.
NamedTensors decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const std::string& path, const NamedTensors& tensors);
NamedTensors load_checkpoint(const std::string& path);

}  // namespace dmtrl
