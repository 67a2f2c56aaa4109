#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <zlib.h>

#include <json.hpp>

#include "nsr/errors.hpp"
#include "nsr/model.hpp"

namespace nsr {

inline constexpr int kModelFormatVersion = 1;

namespace detail {

inline constexpr char kB64[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

inline std::string base64_encode(const std::vector<std::uint8_t>& bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < bytes.size(); i += 3) {
    const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
    out += kB64[(v >> 18) & 63];
    out += kB64[(v >> 12) & 63];
    out += kB64[(v >> 6) & 63];
    out += kB64[v & 63];
  }
  if (i + 1 == bytes.size()) {
    const std::uint32_t v = bytes[i] << 16;
    out += kB64[(v >> 18) & 63];
    out += kB64[(v >> 12) & 63];
    out += "==";
  } else if (i + 2 == bytes.size()) {
    const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8);
    out += kB64[(v >> 18) & 63];
    out += kB64[(v >> 12) & 63];
    out += kB64[(v >> 6) & 63];
    out += '=';
  }
  return out;
}

inline std::vector<std::uint8_t> base64_decode(const std::string& text) {
  auto value = [](char c) -> int {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    return -1;
  };
  if (text.size() % 4 != 0) throw FormatError("base64 payload length is not a multiple of 4");
  std::vector<std::uint8_t> out;
  out.reserve(text.size() / 4 * 3);
  for (std::size_t i = 0; i < text.size(); i += 4) {
    int v[4];
    int pad = 0;
    for (int j = 0; j < 4; ++j) {
      const char c = text[i + j];
      if (c == '=' && i + 4 == text.size() && j >= 2) {
        v[j] = 0;
        ++pad;
      } else {
        if (pad) throw FormatError("malformed base64 padding");
        v[j] = value(c);
        if (v[j] < 0) throw FormatError("invalid base64 character");
      }
    }
    const std::uint32_t w = (v[0] << 18) | (v[1] << 12) | (v[2] << 6) | v[3];
    out.push_back(static_cast<std::uint8_t>(w >> 16));
    if (pad < 2) out.push_back(static_cast<std::uint8_t>(w >> 8));
    if (pad < 1) out.push_back(static_cast<std::uint8_t>(w));
  }
  return out;
}

template <typename T>
std::vector<std::uint8_t> to_le_bytes(std::span<const T> values) {
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  std::vector<std::uint8_t> out(values.size() * sizeof(T));
  for (std::size_t i = 0; i < values.size(); ++i) {
    const U bits = std::bit_cast<U>(values[i]);
    for (std::size_t b = 0; b < sizeof(T); ++b)
      out[i * sizeof(T) + b] = static_cast<std::uint8_t>(bits >> (8 * b));
  }
  return out;
}

template <typename T>
std::vector<T> from_le_bytes(const std::vector<std::uint8_t>& bytes) {
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  if (bytes.size() % sizeof(T) != 0) throw FormatError("payload size is not a multiple of the dtype width");
  std::vector<T> out(bytes.size() / sizeof(T));
  for (std::size_t i = 0; i < out.size(); ++i) {
    U bits = 0;
    for (std::size_t b = 0; b < sizeof(T); ++b) bits |= U(bytes[i * sizeof(T) + b]) << (8 * b);
    out[i] = std::bit_cast<T>(bits);
  }
  return out;
}

inline std::uint32_t crc32_update(std::uint32_t crc, const std::vector<std::uint8_t>& bytes) {
  return static_cast<std::uint32_t>(
      ::crc32(crc, bytes.data(), static_cast<uInt>(bytes.size())));
}

}  // namespace detail

inline nlohmann::json layer_to_json(const LayerSpec& l) {
  nlohmann::json j{{"kind", layer_kind_name(l.kind)}};
  switch (l.kind) {
    case LayerKind::dense:
      j.update({{"in", l.in}, {"out", l.out}, {"bias", l.bias}});
      break;
    case LayerKind::conv1d:
      j.update({{"in_ch", l.in}, {"out_ch", l.out}, {"k", l.kernel}, {"stride", l.stride},
                {"pad", l.pad}, {"bias", l.bias}});
      break;
    case LayerKind::maxpool1d:
      j.update({{"k", l.kernel}, {"stride", l.stride}});
      break;
    default:
      break;
  }
  return j;
}

inline LayerSpec layer_from_json(const nlohmann::json& j) {
  const auto kind = layer_kind_from_name(j.at("kind").get<std::string>());
  if (!kind) throw FormatError("unknown layer kind '" + j.at("kind").get<std::string>() + "'");
  switch (*kind) {
    case LayerKind::dense:
      return LayerSpec::dense(j.at("in"), j.at("out"), j.at("bias"));
    case LayerKind::conv1d:
      return LayerSpec::conv1d(j.at("in_ch"), j.at("out_ch"), j.at("k"), j.at("stride"), j.at("pad"),
                               j.at("bias"));
    case LayerKind::maxpool1d:
      return LayerSpec::maxpool1d(j.at("k"), j.at("stride"));
    case LayerKind::relu: return LayerSpec::relu();
    case LayerKind::residual_begin: return LayerSpec::residual_begin();
    case LayerKind::residual_end: return LayerSpec::residual_end();
    case LayerKind::flatten: return LayerSpec::flatten();
  }
  throw FormatError("unreachable layer kind");
}

template <typename T>
nlohmann::json model_to_json(const Model<T>& m) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : m.layers()) layers.push_back(layer_to_json(l));
  nlohmann::json params = nlohmann::json::object();
  std::uint32_t crc = 0;
  for (const auto& p : m.params()) {
    const auto bytes = detail::to_le_bytes<T>(p.value.data());
    crc = detail::crc32_update(crc, bytes);
    params[p.name] = {{"shape", p.value.shape()}, {"dtype", dtype_name<T>()},
                      {"data", detail::base64_encode(bytes)}};
  }
  return {{"format_version", kModelFormatVersion},
          {"input_shape", m.input_shape()},
          {"class_count", m.class_count()},
          {"layers", std::move(layers)},
          {"params", std::move(params)},
          {"checksum", crc}};
}

template <typename T>
Model<T> model_from_json(const nlohmann::json& j) {
  try {
    const int version = j.at("format_version").get<int>();
    if (version > kModelFormatVersion)
      throw VersionError("model file format_version " + std::to_string(version) +
                         " is newer than supported version " + std::to_string(kModelFormatVersion));
    std::vector<LayerSpec> layers;
    for (const auto& l : j.at("layers")) layers.push_back(layer_from_json(l));
    Model<T> m(j.at("input_shape").get<Shape>(), std::move(layers));
    if (j.at("class_count").get<std::size_t>() != m.class_count())
      throw FormatError("class_count does not match the final layer width");
    const auto& params = j.at("params");
    if (params.size() != m.params().size())
      throw FormatError("model file has " + std::to_string(params.size()) + " parameters, layers need " +
                        std::to_string(m.params().size()));
    std::uint32_t crc = 0;
    for (auto& p : m.params()) {
      const nlohmann::json& entry = params.at(p.name);
      if (entry.at("shape").get<Shape>() != p.value.shape())
        throw FormatError("parameter " + p.name + " has shape " +
                          shape_string(entry.at("shape").get<Shape>()) + ", expected " +
                          shape_string(p.value.shape()));
      const auto bytes = detail::base64_decode(entry.at("data").get<std::string>());
      crc = detail::crc32_update(crc, bytes);
      const std::string dtype = entry.at("dtype");
      std::vector<T> values;
      if (dtype == "f32") {
        const auto v = detail::from_le_bytes<float>(bytes);
        values.assign(v.begin(), v.end());
      } else if (dtype == "f64") {
        const auto v = detail::from_le_bytes<double>(bytes);
        values.assign(v.begin(), v.end());
      } else {
        throw FormatError("parameter " + p.name + " has unknown dtype '" + dtype + "'");
      }
      if (values.size() != p.value.size())
        throw FormatError("parameter " + p.name + " payload has " + std::to_string(values.size()) +
                          " values, expected " + std::to_string(p.value.size()));
      p.value = Tensor<T>(p.value.shape(), std::move(values));
    }
    if (crc != j.at("checksum").get<std::uint32_t>())
      throw ChecksumError("model checksum mismatch: file says " +
                          std::to_string(j.at("checksum").get<std::uint32_t>()) + ", payload is " +
                          std::to_string(crc));
    if (!m.all_finite()) throw FormatError("model parameters contain non-finite values");
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed model file: ") + e.what());
  } catch (const PersistenceError&) {
    throw;
  } catch (const Error& e) {
    throw FormatError(std::string("invalid model in file: ") + e.what());
  }
}

template <typename T>
void save_model(const Model<T>& m, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write model file " + path.string());
  out << model_to_json(m).dump(1) << '\n';
  if (!out) throw IoError("failed writing model file " + path.string());
}

template <typename T>
Model<T> load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read model file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(buf.str());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed model file " + path.string() + ": " + e.what());
  }
  return model_from_json<T>(j);
}

}  // namespace nsr
