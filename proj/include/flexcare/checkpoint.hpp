// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint directory: manifest.json plus one little-endian float32 file
// per tensor, named by canonical tensor order.
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "flexcare/config.hpp"
#include "flexcare/data.hpp"
#include "flexcare/digest.hpp"
#include "flexcare/model.hpp"

namespace flexcare {

inline constexpr const char* kCheckpointFormat = "flexcare-checkpoint";
inline constexpr int kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class CheckpointVersionError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class CorruptPayloadError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class CheckpointShapeError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

namespace detail {
inline std::string encode_f32le(const float* v, std::size_t n) {
  std::string out(n * 4, '\0');
  for (std::size_t i = 0; i < n; ++i) {
    std::uint32_t u = std::bit_cast<std::uint32_t>(v[i]);
    for (int b = 0; b < 4; ++b) out[i * 4 + b] = static_cast<char>((u >> (8 * b)) & 0xff);
  }
  return out;
}

inline void decode_f32le(const std::string& bytes, float* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    std::uint32_t u = 0;
    for (int b = 0; b < 4; ++b) u |= std::uint32_t(static_cast<unsigned char>(bytes[i * 4 + b])) << (8 * b);
    out[i] = std::bit_cast<float>(u);
  }
}
}  // namespace detail

/// Writes `model` (cast to float32) to `dir`. `extra` is stored verbatim
/// under the manifest key "extra".
template <typename T>
void save_checkpoint(const Model<T>& model, const std::filesystem::path& dir, const nlohmann::json& extra = {}) {
  std::filesystem::create_directories(dir);
  const ParamStore<T>& store = model.params();
  nlohmann::json tensors = nlohmann::json::array();
  for (std::size_t i = 0; i < store.size(); ++i) {
    const Matrix<float> v = store.value(i).template cast<float>();
    const std::string bytes = detail::encode_f32le(v.data(), v.size());
    char fname[32];
    std::snprintf(fname, sizeof fname, "t%04zu.bin", i);
    std::ofstream out(dir / fname, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("cannot write " + (dir / fname).string());
    tensors.push_back({{"name", store.name(i)},
                       {"shape", {v.rows(), v.cols()}},
                       {"file", fname},
                       {"bytes", bytes.size()},
                       {"sha256", sha256_hex(bytes)}});
  }
  nlohmann::json manifest = {{"format", kCheckpointFormat},
                             {"version", kCheckpointVersion},
                             {"dtype", "float32-le"},
                             {"model", to_json(model.config())},
                             {"tasks", registry_to_json(model.tasks())},
                             {"tensors", tensors}};
  if (!extra.is_null()) manifest["extra"] = extra;
  std::ofstream out(dir / "manifest.json");
  out << manifest.dump(2) << '\n';
  if (!out) throw CheckpointError("cannot write manifest in " + dir.string());
}

inline nlohmann::json read_checkpoint_manifest(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw CheckpointError("no manifest.json in " + dir.string());
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw CorruptPayloadError("malformed checkpoint manifest: " + std::string(e.what()));
  }
  if (!m.is_object() || m.value("format", "") != kCheckpointFormat)
    throw CheckpointError("not a checkpoint manifest: " + (dir / "manifest.json").string());
  if (!m.contains("version") || !m["version"].is_number_integer() || m["version"].get<int>() != kCheckpointVersion)
    throw CheckpointVersionError("checkpoint version " + (m.contains("version") ? m["version"].dump() : "missing") +
                                 " is not supported (expected " + std::to_string(kCheckpointVersion) + ")");
  return m;
}

template <typename T>
Model<T> load_checkpoint(const std::filesystem::path& dir) {
  const nlohmann::json m = read_checkpoint_manifest(dir);
  ModelConfig cfg;
  TaskRegistry tasks;
  try {
    cfg = model_config_from_json(m.at("model"));
    tasks = registry_from_json(m.at("tasks"));
  } catch (const nlohmann::json::exception& e) {
    throw CorruptPayloadError("checkpoint manifest: " + std::string(e.what()));
  }
  const auto expected = param_shapes(cfg, tasks);
  const auto& entries = m.at("tensors");
  if (!entries.is_array() || entries.size() != expected.size())
    throw CheckpointShapeError("checkpoint lists " + std::to_string(entries.size()) + " tensors, model needs " +
                               std::to_string(expected.size()));
  ParamStore<T> store;
  for (std::size_t i = 0; i < expected.size(); ++i) {
    const auto& e = entries[i];
    const std::string name = e.at("name").get<std::string>();
    const auto shape = e.at("shape").get<std::vector<std::size_t>>();
    if (name != expected[i].name || shape.size() != 2 || shape[0] != expected[i].rows || shape[1] != expected[i].cols)
      throw CheckpointShapeError("tensor " + std::to_string(i) + " (" + name + ") does not match expected " +
                                 expected[i].name + " " + shape_str(expected[i].rows, expected[i].cols));
    const std::size_t n = shape[0] * shape[1];
    std::string bytes;
    try {
      bytes = read_file_bytes(dir / e.at("file").get<std::string>());
    } catch (const std::runtime_error&) {
      throw CorruptPayloadError("missing payload for tensor " + name);
    }
    if (bytes.size() != n * 4 || e.at("bytes").get<std::size_t>() != n * 4)
      throw CorruptPayloadError("payload for tensor " + name + " has " + std::to_string(bytes.size()) +
                                " bytes, expected " + std::to_string(n * 4) + " (truncated or corrupt)");
    if (sha256_hex(bytes) != e.at("sha256").get<std::string>())
      throw CorruptPayloadError("payload digest mismatch for tensor " + name);
    Matrix<float> v(shape[0], shape[1]);
    detail::decode_f32le(bytes, v.data(), n);
    store.add(name, v.template cast<T>());
  }
  return Model<T>(cfg, tasks, std::move(store));
}

}  // namespace flexcare
