// Copyright 2026 The AgentPS Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

#include "agentps/config_io.hpp"
#include "agentps/errors.hpp"
#include "agentps/model.hpp"
#include "agentps/rng.hpp"
#include "agentps/training.hpp"

// Checkpoint layout:
//
//   bytes [0, 8)        header length H, little-endian uint64
//   bytes [8, 8 + H)    UTF-8 JSON header (compact, fixed key order)
//   bytes [8 + H, end)  payload: raw little-endian IEEE floats
//
// The header records the format version, the model config, the epoch
// counter, the optimizer step, the RNG key and state, caller metadata, and one
// entry per tensor {name, role, shape, offset, nbytes}. Offsets are relative
// to the payload start and tensors are stored back to back in canonical
// parameter order: all parameters, then Adam first moments, then second
// moments. Float checkpoints store 32-bit values; double checkpoints store
// 64-bit values so that round trips stay bitwise exact in both modes.

namespace agentps {

inline constexpr int kCheckpointVersion = 1;

template <class T>
struct Checkpoint {
  TrainState<T> state;
  Json metadata = Json::object();  // vocabulary, train config, ...
};

namespace detail {

template <class T>
constexpr const char* dtype_name() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? "float32" : "float64";
}

template <class T>
void put_le(std::string& out, T value) {
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  U bits;
  if constexpr (std::is_floating_point_v<T>) bits = std::bit_cast<U>(value);
  else bits = static_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

template <class T>
T get_le(const char* p) {
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  U bits = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    bits |= static_cast<U>(static_cast<unsigned char>(p[i])) << (8 * i);
  }
  if constexpr (std::is_floating_point_v<T>) return std::bit_cast<T>(bits);
  else return static_cast<T>(bits);
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xF];
  return s;
}

inline std::uint64_t parse_hex64(const std::string& s) {
  if (s.size() != 16) throw IntegrityError("malformed hex word '" + s + "' in checkpoint header");
  std::uint64_t v = 0;
  for (char c : s) {
    int d;
    if (c >= '0' && c <= '9') d = c - '0';
    else if (c >= 'a' && c <= 'f') d = c - 'a' + 10;
    else throw IntegrityError("malformed hex word '" + s + "' in checkpoint header");
    v = (v << 4) | static_cast<std::uint64_t>(d);
  }
  return v;
}

struct TensorEntry {
  std::string name, role;
  Shape shape;
  std::size_t offset = 0, nbytes = 0;
};

}  // namespace detail

/// Serializes a checkpoint to bytes. Deterministic: equal inputs give equal bytes.
template <class T>
std::string serialize_checkpoint(const Checkpoint<T>& ckpt) {
  const auto& st = ckpt.state;
  std::vector<std::pair<detail::TensorEntry, const T*>> entries;
  std::size_t offset = 0;
  auto add = [&](std::string name, const char* role, const Shape& shape, const T* data) {
    detail::TensorEntry e{std::move(name), role, shape, offset, shape_size(shape) * sizeof(T)};
    offset += e.nbytes;
    entries.emplace_back(std::move(e), data);
  };
  std::vector<std::pair<std::string, Shape>> params;
  st.model.for_each_parameter([&](const std::string& name, const Tensor<T>& t) {
    params.emplace_back(name, t.shape());
    add(name, "param", t.shape(), t.data().data());
  });
  const bool has_moments = !st.adam.m.empty();
  if (has_moments) {
    if (st.adam.m.size() != params.size() || st.adam.v.size() != params.size()) {
      throw ContractError("optimizer state does not match the parameter list");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      add("adam.m." + params[i].first, "adam_m", params[i].second, st.adam.m[i].data());
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      add("adam.v." + params[i].first, "adam_v", params[i].second, st.adam.v[i].data());
    }
  }

  Json header;
  header["format_version"] = kCheckpointVersion;
  header["dtype"] = detail::dtype_name<T>();
  header["model_config"] = to_json(st.model.config);
  header["epoch"] = st.epoch;
  header["adam_step"] = st.adam.step;
  Json rng;
  rng["key"] = detail::hex64(st.rng.key());
  auto words = Json::array();
  for (auto w : st.rng.state()) words.push_back(detail::hex64(w));
  rng["state"] = std::move(words);
  header["rng"] = std::move(rng);
  header["metadata"] = ckpt.metadata;
  auto tensors = Json::array();
  for (const auto& [e, _] : entries) {
    Json t;
    t["name"] = e.name;
    t["role"] = e.role;
    t["shape"] = e.shape;
    t["offset"] = e.offset;
    t["nbytes"] = e.nbytes;
    tensors.push_back(std::move(t));
  }
  header["tensors"] = std::move(tensors);
  header["payload_bytes"] = offset;

  const std::string head = header.dump();
  std::string out;
  out.reserve(8 + head.size() + offset);
  detail::put_le<std::uint64_t>(out, head.size());
  out += head;
  for (const auto& [e, data] : entries) {
    const std::size_t n = e.nbytes / sizeof(T);
    for (std::size_t i = 0; i < n; ++i) detail::put_le<T>(out, data[i]);
  }
  return out;
}

/// Parses and fully validates before constructing anything, so a failure
/// never yields a partially loaded state.
template <class T>
Checkpoint<T> deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < 8) throw IntegrityError("checkpoint shorter than its 8-byte length prefix");
  const auto head_len = detail::get_le<std::uint64_t>(bytes.data());
  if (head_len > bytes.size() - 8) {
    throw IntegrityError("checkpoint header length " + std::to_string(head_len) +
                         " exceeds file size " + std::to_string(bytes.size()));
  }
  Json header;
  try {
    header = Json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(head_len));
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }

  try {
    const int version = header.at("format_version").get<int>();
    if (version != kCheckpointVersion) {
      throw VersionError("checkpoint format version " + std::to_string(version) +
                         " is not supported (expected " + std::to_string(kCheckpointVersion) + ")");
    }
    const auto dtype = header.at("dtype").get<std::string>();
    if (dtype != detail::dtype_name<T>()) {
      throw IntegrityError("checkpoint holds " + dtype + " tensors, loader expects " +
                           detail::dtype_name<T>());
    }
    ModelConfig cfg;
    try {
      cfg = model_config_from_json(header.at("model_config"));
      cfg.validate();
    } catch (const ConfigError& e) {
      throw IntegrityError(std::string("checkpoint model config invalid: ") + e.what());
    }

    const std::size_t payload = header.at("payload_bytes").get<std::size_t>();
    const std::size_t available = bytes.size() - 8 - head_len;
    if (available != payload) {
      throw IntegrityError("checkpoint payload is " + std::to_string(available) +
                           " bytes, header declares " + std::to_string(payload) +
                           (available < payload ? " (truncated file)" : ""));
    }

    std::vector<detail::TensorEntry> entries;
    for (const auto& t : header.at("tensors")) {
      entries.push_back({t.at("name").get<std::string>(), t.at("role").get<std::string>(),
                         t.at("shape").get<Shape>(), t.at("offset").get<std::size_t>(),
                         t.at("nbytes").get<std::size_t>()});
    }

    // Expected layout from the config alone.
    ModelBundle<T> model = ModelBundle<T>::init(cfg, Rng(0));
    std::vector<std::pair<std::string, Shape>> expected;
    model.for_each_parameter(
        [&](const std::string& name, const Tensor<T>& t) { expected.emplace_back(name, t.shape()); });
    const std::size_t np = expected.size();
    if (entries.size() != np && entries.size() != 3 * np) {
      throw IntegrityError("checkpoint lists " + std::to_string(entries.size()) +
                           " tensors, model config implies " + std::to_string(np) + " or " +
                           std::to_string(3 * np));
    }
    std::size_t offset = 0;
    for (std::size_t i = 0; i < entries.size(); ++i) {
      const auto& e = entries[i];
      const auto& [name, shape] = expected[i % np];
      const char* role = i < np ? "param" : (i < 2 * np ? "adam_m" : "adam_v");
      const std::string want = i < np ? name : (i < 2 * np ? "adam.m." : "adam.v.") + name;
      if (e.name != want || e.role != role) {
        throw IntegrityError("checkpoint tensor #" + std::to_string(i) + " is '" + e.name +
                             "' (" + e.role + "), expected '" + want + "'");
      }
      if (e.shape != shape) {
        throw IntegrityError("checkpoint tensor '" + e.name + "' has shape " +
                             shape_string(e.shape) + ", model config implies " +
                             shape_string(shape));
      }
      if (e.offset != offset || e.nbytes != shape_size(shape) * sizeof(T)) {
        throw IntegrityError("checkpoint tensor '" + e.name + "' has inconsistent offset/nbytes");
      }
      offset += e.nbytes;
    }
    if (offset != payload) throw IntegrityError("tensor table does not cover the payload exactly");

    Checkpoint<T> out;
    const char* base = bytes.data() + 8 + head_len;
    std::size_t idx = 0;
    model.for_each_parameter([&](const std::string&, Tensor<T>& t) {
      const char* p = base + entries[idx++].offset;
      for (std::size_t j = 0; j < t.size(); ++j) t[j] = detail::get_le<T>(p + j * sizeof(T));
    });
    if (entries.size() == 3 * np) {
      for (auto* moments : {&out.state.adam.m, &out.state.adam.v}) {
        for (std::size_t k = 0; k < np; ++k, ++idx) {
          const auto& e = entries[idx];
          std::vector<T> values(e.nbytes / sizeof(T));
          for (std::size_t j = 0; j < values.size(); ++j) {
            values[j] = detail::get_le<T>(base + e.offset + j * sizeof(T));
          }
          moments->push_back(std::move(values));
        }
      }
    }
    const auto& rng = header.at("rng");
    Rng::State s{};
    const auto& words = rng.at("state");
    if (words.size() != s.size()) throw IntegrityError("checkpoint RNG state must hold 4 words");
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = detail::parse_hex64(words[i].get<std::string>());
    out.state.rng.set_state(detail::parse_hex64(rng.at("key").get<std::string>()), s);
    out.state.adam.step = header.at("adam_step").get<std::size_t>();
    out.state.epoch = header.at("epoch").get<std::size_t>();
    out.state.model = std::move(model);
    out.metadata = header.contains("metadata") ? header.at("metadata") : Json::object();
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError(std::string("checkpoint header malformed: ") + e.what());
  }
}

/// Writes to a temporary sibling and renames it into place, so an interrupted
/// save leaves any previous file intact.
template <class T>
void save_checkpoint(const Checkpoint<T>& ckpt, const std::filesystem::path& path) {
  const std::string bytes = serialize_checkpoint(ckpt);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FileError("cannot open '" + tmp.string() + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw FileError("write failed for '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw FileError("cannot move checkpoint into '" + path.string() + "': " + ec.message());
}

template <class T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FileError("cannot open checkpoint '" + path.string() + "'");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint<T>(bytes);
}

}  // namespace agentps
