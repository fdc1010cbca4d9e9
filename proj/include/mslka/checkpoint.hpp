#pragma once

#include <zlib.h>

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "mslka/network.hpp"

namespace mslka {

// Layout: "MSLK" | u32 LE version | u64 LE header length | JSON header |
// float32 LE parameter blobs in registration order.

inline constexpr std::array<char, 4> kCheckpointMagic{'M', 'S', 'L', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_le(std::string& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint64_t get_le(const unsigned char* p, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

inline std::uint32_t crc32_of(const std::string& bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  crc = ::crc32(crc, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size()));
  return static_cast<std::uint32_t>(crc);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

struct ParsedCheckpoint {
  nlohmann::json header;
  std::string data;
};

inline ParsedCheckpoint parse_checkpoint(const std::string& bytes) {
  auto corrupt = [](const std::string& field, const std::string& why) {
    return CorruptCheckpoint("corrupt checkpoint: field '" + field + "': " + why);
  };
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic.data(), 4) != 0) {
    throw corrupt("magic", "expected \"MSLK\"");
  }
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 8) throw corrupt("version", "file truncated");
  const auto version = static_cast<std::uint32_t>(get_le(p + 4, 4));
  if (version == 0) throw corrupt("version", "version 0 is not valid");
  if (version > kCheckpointVersion) {
    throw UnsupportedVersion("checkpoint version " + std::to_string(version) +
                             " is newer than the supported version " + std::to_string(kCheckpointVersion));
  }
  if (bytes.size() < 16) throw corrupt("header_length", "file truncated");
  const std::uint64_t header_len = get_le(p + 8, 8);
  if (header_len > bytes.size() - 16) throw corrupt("header_length", "exceeds file size");
  ParsedCheckpoint out;
  try {
    out.header = nlohmann::json::parse(bytes.substr(16, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw corrupt("header", e.what());
  }
  out.data = bytes.substr(16 + header_len);
  if (!out.header.is_object()) throw corrupt("header", "not a JSON object");
  if (!out.header.contains("data_bytes") || out.header["data_bytes"].get<std::uint64_t>() != out.data.size()) {
    throw corrupt("data_bytes", "expected " +
                                    (out.header.contains("data_bytes") ? out.header["data_bytes"].dump() : "a value") +
                                    ", found " + std::to_string(out.data.size()) + " bytes of parameter data");
  }
  if (!out.header.contains("checksum") || out.header["checksum"].get<std::uint32_t>() != crc32_of(out.data)) {
    throw corrupt("checksum", "parameter data does not match its CRC-32");
  }
  return out;
}

}  // namespace detail

/// Writes parameters as float32 regardless of T. `extractor` identifies the
/// loss feature extractor used in training and is stored verbatim.
template <Real T>
void save_checkpoint(const Network<T>& net, const std::filesystem::path& path,
                     const nlohmann::json& extractor = nullptr) {
  std::string data;
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& [name, t] : net.parameters().entries()) {
    const Shape& s = t.shape();
    entries.push_back({{"name", name}, {"shape", {s.n, s.c, s.h, s.w}}, {"offset", data.size()}});
    for (T v : t.values()) {
      const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
      detail::put_le(data, bits, 4);
    }
  }
  nlohmann::json header{{"config", net.config().to_json()},
                        {"extractor", extractor},
                        {"parameters", entries},
                        {"data_bytes", data.size()},
                        {"checksum", detail::crc32_of(data)}};
  const std::string text = header.dump();
  std::string out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  detail::put_le(out, kCheckpointVersion, 4);
  detail::put_le(out, text.size(), 8);
  out += text;
  out += data;

  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  if (!file) throw IoError("cannot write checkpoint " + path.string());
  file.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!file) throw IoError("failed writing checkpoint " + path.string());
}

/// The JSON header of a checkpoint, after magic/version/size/checksum checks.
inline nlohmann::json read_checkpoint_header(const std::filesystem::path& path) {
  return detail::parse_checkpoint(detail::read_file(path)).header;
}

template <Real T = float>
Network<T> load_checkpoint(const std::filesystem::path& path) {
  const auto parsed = detail::parse_checkpoint(detail::read_file(path));
  auto corrupt = [](const std::string& field, const std::string& why) {
    return CorruptCheckpoint("corrupt checkpoint: field '" + field + "': " + why);
  };
  NetworkConfig cfg;
  try {
    cfg = NetworkConfig::from_json(parsed.header.at("config"));
  } catch (const nlohmann::json::exception& e) {
    throw corrupt("config", e.what());
  } catch (const ConfigError& e) {
    throw corrupt("config", e.what());
  }
  Network<T> net(cfg, 0);
  const auto& entries = parsed.header.at("parameters");
  auto& params = net.parameters().entries();
  if (!entries.is_array() || entries.size() != params.size()) {
    throw corrupt("parameters", "expected " + std::to_string(params.size()) + " entries");
  }
  const auto* bytes = reinterpret_cast<const unsigned char*>(parsed.data.data());
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& [name, t] = params[i];
    const auto& e = entries[i];
    const std::string where = "parameters[" + std::to_string(i) + "]";
    if (e.value("name", std::string{}) != name) throw corrupt(where + ".name", "expected " + name);
    const Shape& s = t.shape();
    if (e.value("shape", std::vector<int>{}) != std::vector<int>{s.n, s.c, s.h, s.w}) {
      throw corrupt(where + ".shape", "expected " + s.str() + " for " + name);
    }
    const auto offset = e.value("offset", std::uint64_t{0});
    if (offset + 4 * t.numel() > parsed.data.size()) throw corrupt(where + ".offset", "out of range");
    auto values = t.data();
    for (std::size_t k = 0; k < values.size(); ++k) {
      const auto bits = static_cast<std::uint32_t>(detail::get_le(bytes + offset + 4 * k, 4));
      values[k] = static_cast<T>(std::bit_cast<float>(bits));
    }
  }
  return net;
}

}  // namespace mslka
