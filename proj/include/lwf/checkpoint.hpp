#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "lwf/nn.hpp"
#include "lwf/rng.hpp"

namespace lwf {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  MultiHeadNet net;
  Rng rng;
  std::uint64_t config_hash = 0;
};

// CLWF layout: see docs/formats.md. Bad magic -> FormatError, other versions ->
// VersionError, truncation or checksum mismatch -> IntegrityError.
std::vector<std::uint8_t> encode_checkpoint(const MultiHeadNet& net, const Rng& rng, std::uint64_t config_hash);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const MultiHeadNet& net, const std::filesystem::path& path, const Rng& rng = Rng(),
                     std::uint64_t config_hash = 0);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace lwf
