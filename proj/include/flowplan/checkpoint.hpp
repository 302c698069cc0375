// Parameter checkpointing: a JSON manifest (name -> shape -> byte offset) next
// to a single little-endian float32 blob. Save/load round-trips bit-exactly.
#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "flowplan/common.hpp"
#include "flowplan/param_store.hpp"

namespace flowplan {

namespace detail {
static_assert(sizeof(float) == 4, "float must be 32-bit");

inline bool is_little_endian() {
  const uint32_t x = 1;
  uint8_t b;
  std::memcpy(&b, &x, 1);
  return b == 1;
}

inline void write_f32_le(std::ofstream& out, const std::vector<float>& v) {
  if (is_little_endian()) {
    out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * 4));
  } else {
    for (float f : v) {
      uint32_t u;
      std::memcpy(&u, &f, 4);
      const char bytes[4] = {static_cast<char>(u), static_cast<char>(u >> 8),
                             static_cast<char>(u >> 16), static_cast<char>(u >> 24)};
      out.write(bytes, 4);
    }
  }
}

inline void read_f32_le(std::ifstream& in, std::vector<float>& v) {
  if (is_little_endian()) {
    in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * 4));
  } else {
    for (auto& f : v) {
      unsigned char b[4];
      in.read(reinterpret_cast<char*>(b), 4);
      const uint32_t u = static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
                         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
      std::memcpy(&f, &u, 4);
    }
  }
}
}  // namespace detail

inline constexpr int kCheckpointVersion = 1;

// Writes <stem>.manifest.json and <stem>.blob.
inline void save_checkpoint(const ParamStore& ps, const std::string& stem) {
  nlohmann::json manifest;
  manifest["format_version"] = kCheckpointVersion;
  nlohmann::json tensors = nlohmann::json::array();
  int64_t offset = 0;

  std::ofstream blob(stem + ".blob", std::ios::binary | std::ios::trunc);
  if (!blob) throw IoError("save_checkpoint: cannot open '" + stem + ".blob' for writing");
  for (const std::string& name : ps.names()) {
    const Tensor& t = ps.value(name);
    nlohmann::json e;
    e["name"] = name;
    e["shape"] = t.shape;
    e["offset"] = offset;
    tensors.push_back(e);
    detail::write_f32_le(blob, t.v);
    offset += t.size() * 4;
  }
  manifest["tensors"] = tensors;
  blob.close();
  if (!blob) throw IoError("save_checkpoint: short write to '" + stem + ".blob'");

  std::ofstream mf(stem + ".manifest.json", std::ios::trunc);
  if (!mf) throw IoError("save_checkpoint: cannot open '" + stem + ".manifest.json' for writing");
  mf << manifest.dump(2) << "\n";
}

// Loads a checkpoint into an existing store. Every manifest entry must match
// an existing parameter of identical shape (the model defines the layout).
inline void load_checkpoint(ParamStore& ps, const std::string& stem) {
  std::ifstream mf(stem + ".manifest.json");
  if (!mf) throw IoError("load_checkpoint: cannot open '" + stem + ".manifest.json'");
  nlohmann::json manifest;
  try {
    mf >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("load_checkpoint: bad manifest: ") + e.what());
  }
  if (!manifest.contains("format_version") || manifest["format_version"].get<int>() != kCheckpointVersion)
    throw IoError("load_checkpoint: unsupported format_version");

  std::ifstream blob(stem + ".blob", std::ios::binary);
  if (!blob) throw IoError("load_checkpoint: cannot open '" + stem + ".blob'");

  size_t seen = 0;
  for (const auto& e : manifest["tensors"]) {
    const std::string name = e["name"].get<std::string>();
    const std::vector<int> shape = e["shape"].get<std::vector<int>>();
    const int64_t offset = e["offset"].get<int64_t>();
    if (!ps.has(name)) throw ConfigError("load_checkpoint: checkpoint has unknown parameter '" + name + "'");
    Tensor& dst = ps.mutable_value(name);
    if (dst.shape != shape)
      throw ShapeError("load_checkpoint: shape mismatch for '" + name + "'");
    blob.seekg(offset);
    detail::read_f32_le(blob, dst.v);
    if (!blob) throw IoError("load_checkpoint: short read for '" + name + "'");
    ++seen;
  }
  if (seen != ps.size())
    throw ConfigError("load_checkpoint: checkpoint covers " + std::to_string(seen) + " of " +
                      std::to_string(ps.size()) + " parameters");
}

}  // namespace flowplan
