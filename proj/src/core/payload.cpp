#include "flayer/payload.hpp"

#include <algorithm>
#include <bit>
#include <fstream>

namespace flayer {

namespace {

class Writer {
 public:
  explicit Writer(std::vector<std::uint8_t>& out) : out_(out) {}
  template <typename U>
  void put(U v) {
    for (std::size_t b = 0; b < sizeof(U); ++b) out_.push_back(static_cast<std::uint8_t>(v >> (8 * b)));
  }

 private:
  std::vector<std::uint8_t>& out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}
  template <typename U>
  U get(const char* what) {
    need(sizeof(U), what);
    U v = 0;
    for (std::size_t b = 0; b < sizeof(U); ++b) v |= static_cast<U>(static_cast<U>(in_[pos_ + b]) << (8 * b));
    pos_ += sizeof(U);
    return v;
  }
  std::span<const std::uint8_t> take(std::size_t n, const char* what) {
    need(n, what);
    auto s = in_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t offset() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return in_.size() - pos_; }

 private:
  void need(std::size_t n, const char* what) const {
    if (in_.size() - pos_ < n) {
      throw IngestionError("payload: truncated " + std::string(what) + " at offset " + std::to_string(pos_));
    }
  }
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

}  // namespace

std::size_t encoded_size(const UploadPayload& payload) {
  std::size_t size = kPayloadHeaderBytes;
  for (const auto& u : payload.params.units) size += 2 + 8 + 4 * u.size() + (u.size() + 7) / 8;
  return size;
}

std::vector<std::uint8_t> encode_payload(const UploadPayload& payload) {
  if (!payload.mask.congruent(payload.params)) throw AggregationError("encode_payload: mask does not match parameters");
  std::vector<std::uint8_t> out;
  out.reserve(encoded_size(payload));
  Writer w(out);
  for (char c : {'F', 'L', 'Y', 'R'}) out.push_back(static_cast<std::uint8_t>(c));
  w.put<std::uint16_t>(kPayloadVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(payload.client_id));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(payload.round));
  w.put<std::uint16_t>(static_cast<std::uint16_t>(payload.params.units.size()));
  for (std::size_t i = 0; i < payload.params.units.size(); ++i) {
    const auto& u = payload.params.units[i];
    const std::size_t n = u.size();
    w.put<std::uint16_t>(static_cast<std::uint16_t>(i + 1));
    w.put<std::uint64_t>(n);
    for (std::size_t j = 0; j < n; ++j) w.put<std::uint32_t>(std::bit_cast<std::uint32_t>(u.at(j)));
    const auto& m = payload.mask.units[i];
    for (std::size_t byte = 0; byte < (n + 7) / 8; ++byte) {
      std::uint8_t bits = 0;
      for (std::size_t b = 0; b < 8 && byte * 8 + b < n; ++b) {
        if (m[byte * 8 + b]) bits = static_cast<std::uint8_t>(bits | (1u << b));
      }
      out.push_back(bits);
    }
  }
  return out;
}

std::size_t DecodedLayer::uploaded() const noexcept {
  return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
}

DecodedPayload decode_payload(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  const auto magic = r.take(4, "magic");
  if (!std::equal(magic.begin(), magic.end(), "FLYR")) throw IngestionError("payload: bad magic at offset 0");
  DecodedPayload p;
  p.version = r.get<std::uint16_t>("version");
  if (p.version != kPayloadVersion) {
    throw IngestionError("payload: unsupported version " + std::to_string(p.version) + " at offset 4");
  }
  p.client_id = r.get<std::uint32_t>("client_id");
  p.round = r.get<std::uint32_t>("round");
  const auto layers = r.get<std::uint16_t>("layer count");
  for (std::uint16_t i = 0; i < layers; ++i) {
    DecodedLayer layer;
    layer.index = r.get<std::uint16_t>("layer index");
    const std::size_t at = r.offset();
    const auto n = r.get<std::uint64_t>("layer size");
    if (n > r.remaining() / 4) {
      throw IngestionError("payload: layer " + std::to_string(layer.index) + " declares " + std::to_string(n) +
                           " values past the end of the buffer (offset " + std::to_string(at) + ")");
    }
    layer.values.resize(n);
    for (auto& v : layer.values) v = std::bit_cast<float>(r.get<std::uint32_t>("values"));
    const auto bits = r.take((n + 7) / 8, "mask");
    layer.mask.resize(n);
    for (std::size_t j = 0; j < n; ++j) layer.mask[j] = (bits[j / 8] >> (j % 8)) & 1u;
    p.layers.push_back(std::move(layer));
  }
  if (r.remaining() != 0) {
    throw IngestionError("payload: " + std::to_string(r.remaining()) + " trailing bytes at offset " +
                         std::to_string(r.offset()));
  }
  return p;
}

void write_payload_file(const std::filesystem::path& path, const UploadPayload& payload) {
  const auto bytes = encode_payload(payload);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IngestionError(path.string() + ": cannot write");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

DecodedPayload read_payload_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError(path.string() + ": cannot open");
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), {});
  return decode_payload(bytes);
}

}  // namespace flayer
