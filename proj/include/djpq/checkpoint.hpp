#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "djpq/dataset.hpp"
#include "djpq/network.hpp"

namespace djpq {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  NetworkGraph graph;
  std::string config_text;  // canonical config snapshot
  Normalization norm;
  int epoch = 0;
  bool restrict_pow2 = false;
  double accuracy = 0.0;  // eval accuracy at save time
  std::string manifest_id;
};

// Container: "DJPQCKPT", u32 version, u64 payload length, payload, u32 CRC-32
// of the payload. All integers and floats little-endian; tensors float32,
// quantizer grids float64.
std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
// Throws VersionError for newer versions, ChecksumError on corruption and
// FormatError (with byte offset) for anything else malformed.
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace djpq
