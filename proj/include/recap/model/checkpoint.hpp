#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "recap/error.hpp"
#include "recap/model/config.hpp"
#include "recap/model/params.hpp"

namespace recap {

inline constexpr char kCheckpointMagic[4] = {'R', 'C', 'A', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_le(std::string& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_le(const std::string& in, std::size_t at, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i)
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return v;
}

}  // namespace detail

/// Serialises parameters (stored as 32-bit floats) and their config.
template <typename T>
std::string encode_checkpoint(const ModelParams<T>& params, const ModelConfig& cfg) {
  check_shapes(params, cfg);
  nlohmann::json arrays = nlohmann::json::array();
  params.for_each([&](const std::string& name, const Matrix<T>& m) {
    arrays.push_back({{"name", name}, {"shape", {m.rows(), m.cols()}}});
  });
  const std::string header = nlohmann::json{{"config", cfg}, {"arrays", arrays}}.dump();
  std::string out(kCheckpointMagic, 4);
  detail::put_le(out, kCheckpointVersion, 4);
  detail::put_le(out, header.size(), 8);
  out += header;
  params.for_each([&](const std::string&, const Matrix<T>& m) {
    for (T v : m.values())
      detail::put_le(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)), 4);
  });
  return out;
}

inline std::pair<ModelParams<float>, ModelConfig> decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 16) throw FormatError("checkpoint truncated: missing preamble");
  if (std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
    throw FormatError("not a checkpoint: bad magic bytes");
  const auto version = detail::get_le(bytes, 4, 4);
  if (version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const auto hlen = detail::get_le(bytes, 8, 8);
  if (hlen > bytes.size() - 16) throw FormatError("checkpoint truncated: header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(16, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  if (!header.contains("config") || !header.contains("arrays") || !header["arrays"].is_array())
    throw FormatError("checkpoint header lacks config or arrays");
  ModelConfig cfg;
  try {
    cfg = header["config"].get<ModelConfig>();
    cfg.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint config: ") + e.what());
  }

  ModelParams<float> params(cfg);
  std::vector<std::pair<std::string, Matrix<float>*>> slots;
  params.for_each([&](const std::string& n, Matrix<float>& m) { slots.push_back({n, &m}); });
  const auto& declared = header["arrays"];
  if (declared.size() != slots.size())
    throw DimensionError("checkpoint declares " + std::to_string(declared.size()) +
                         " arrays, the config implies " + std::to_string(slots.size()));
  std::size_t total = 0;
  for (std::size_t i = 0; i < slots.size(); ++i) {
    const auto& a = declared[i];
    const auto& [name, m] = slots[i];
    std::size_t r = 0, c = 0;
    try {
      r = a.at("shape").at(0).get<std::size_t>();
      c = a.at("shape").at(1).get<std::size_t>();
      if (a.at("name").get<std::string>() != name)
        throw DimensionError("checkpoint array " + std::to_string(i) + " is '" +
                             a.at("name").get<std::string>() + "', expected '" + name + "'");
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("checkpoint array entry: ") + e.what());
    }
    if (r != m->rows() || c != m->cols())
      throw DimensionError("checkpoint array '" + name + "' has shape " + std::to_string(r) + "x" +
                           std::to_string(c) + ", the config implies " +
                           std::to_string(m->rows()) + "x" + std::to_string(m->cols()));
    total += r * c;
  }
  const std::size_t data_at = 16 + hlen;
  const std::size_t have = bytes.size() - data_at;
  if (have < total * 4) throw FormatError("checkpoint truncated: array data");
  if (have > total * 4)
    throw DimensionError("checkpoint holds more array data than its header declares");
  std::size_t at = data_at;
  for (auto& [name, m] : slots)
    for (auto& v : m->values()) {
      v = std::bit_cast<float>(static_cast<std::uint32_t>(detail::get_le(bytes, at, 4)));
      at += 4;
    }
  check_shapes(params, cfg);
  return {std::move(params), cfg};
}

template <typename T>
void save_checkpoint(const ModelParams<T>& params, const ModelConfig& cfg,
                     const std::string& path) {
  const std::string bytes = encode_checkpoint(params, cfg);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open '" + path + "' for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw FormatError("failed writing '" + path + "'");
}

inline std::pair<ModelParams<float>, ModelConfig> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open checkpoint '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace recap
