#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "flayer/pfl.hpp"

namespace flayer {

/// What a client sends to the server after a round: the masked parameters
/// and the mask marking which entries are present.
struct UploadPayload {
  int client_id = 0;
  int round = 0;
  ParamSet params;
  MaskSet mask;
  std::size_t m_k = 0;
};

// Wire format, little-endian:
//   "FLYR" | version u16 | client_id u32 | round u32 | L u16
//   per unit: index u16 (1-based) | n u64 | n x f32 | ceil(n/8) mask bytes, LSB first
inline constexpr std::uint16_t kPayloadVersion = 1;
inline constexpr std::size_t kPayloadHeaderBytes = 16;

std::vector<std::uint8_t> encode_payload(const UploadPayload& payload);
/// Size encode_payload would produce, without building it.
std::size_t encoded_size(const UploadPayload& payload);

struct DecodedLayer {
  std::uint16_t index = 0;
  std::vector<float> values;
  std::vector<std::uint8_t> mask;

  std::size_t uploaded() const noexcept;
};

struct DecodedPayload {
  std::uint16_t version = 0;
  std::uint32_t client_id = 0;
  std::uint32_t round = 0;
  std::vector<DecodedLayer> layers;
};

/// Throws IngestionError naming the byte offset of the first inconsistency.
DecodedPayload decode_payload(std::span<const std::uint8_t> bytes);

void write_payload_file(const std::filesystem::path& path, const UploadPayload& payload);
DecodedPayload read_payload_file(const std::filesystem::path& path);

}  // namespace flayer
