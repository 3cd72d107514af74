#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "cpdet/errors.hpp"
#include "cpdet/tensor.hpp"

namespace cpdet {

using ordered_json = nlohmann::ordered_json;

// Single-file tensor container: magic, u64 little-endian manifest length, a
// JSON manifest (names, shapes, dtypes, byte offsets, free-form meta), then
// the raw little-endian float payload. Round-tripping a file through
// load/save must reproduce it byte for byte.
inline constexpr char kCheckpointMagic[8] = {'C', 'P', 'D', 'T', '0', '0', '0', '1'};

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::string dtype;  // "f32" | "f64"
  uint64_t offset = 0;
};

struct Checkpoint {
  std::vector<CheckpointEntry> entries;
  ordered_json meta = ordered_json::object();
  std::vector<char> payload;

  const CheckpointEntry* find(const std::string& name) const {
    for (const auto& e : entries)
      if (e.name == name) return &e;
    return nullptr;
  }

  template <typename T>
  void add(const std::string& name, const Tensor<T>& t) {
    CheckpointEntry e;
    e.name = name;
    e.shape = t.shape();
    e.dtype = sizeof(T) == 4 ? "f32" : "f64";
    e.offset = payload.size();
    size_t bytes = t.numel() * sizeof(T);
    payload.resize(payload.size() + bytes);
    std::memcpy(payload.data() + e.offset, t.data().data(), bytes);
    entries.push_back(std::move(e));
  }

  template <typename T>
  std::vector<T> read(const CheckpointEntry& e) const {
    if (e.dtype != (sizeof(T) == 4 ? "f32" : "f64"))
      throw StateError("tensor '" + e.name + "' has dtype " + e.dtype + ", expected " +
                       (sizeof(T) == 4 ? "f32" : "f64"));
    size_t n = numel_of(e.shape);
    if (e.offset + n * sizeof(T) > payload.size())
      throw InputError("tensor '" + e.name + "' payload out of bounds");
    std::vector<T> out(n);
    std::memcpy(out.data(), payload.data() + e.offset, n * sizeof(T));
    return out;
  }

  template <typename T>
  void copy_into(const std::string& name, Tensor<T>& dst) const {
    const CheckpointEntry* e = find(name);
    if (!e) throw StateError("checkpoint is missing tensor '" + name + "'");
    if (e->shape != dst.shape())
      throw ShapeError("tensor '" + name + "' stored as " + shape_str(e->shape) + ", model wants " +
                       shape_str(dst.shape()));
    dst.data() = read<T>(*e);
  }
};

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  ordered_json manifest = ordered_json::object();
  ordered_json tensors = ordered_json::array();
  for (const auto& e : ckpt.entries) {
    ordered_json je = ordered_json::object();
    je["name"] = e.name;
    je["shape"] = e.shape;
    je["dtype"] = e.dtype;
    je["offset"] = e.offset;
    tensors.push_back(std::move(je));
  }
  manifest["tensors"] = std::move(tensors);
  manifest["meta"] = ckpt.meta;
  std::string mtext = manifest.dump();

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw InputError("cannot open '" + path + "' for writing");
  f.write(kCheckpointMagic, 8);
  uint64_t mlen = mtext.size();
  char lenbuf[8];
  for (int i = 0; i < 8; ++i) lenbuf[i] = static_cast<char>((mlen >> (8 * i)) & 0xff);
  f.write(lenbuf, 8);
  f.write(mtext.data(), static_cast<std::streamsize>(mtext.size()));
  f.write(ckpt.payload.data(), static_cast<std::streamsize>(ckpt.payload.size()));
  if (!f) throw InputError("write to '" + path + "' failed");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot open '" + path + "'");
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw InputError("'" + path + "' is not a tensor container");
  char lenbuf[8];
  f.read(lenbuf, 8);
  if (!f) throw InputError("'" + path + "' is truncated");
  uint64_t mlen = 0;
  for (int i = 0; i < 8; ++i) mlen |= static_cast<uint64_t>(static_cast<unsigned char>(lenbuf[i])) << (8 * i);
  std::string mtext(mlen, '\0');
  f.read(mtext.data(), static_cast<std::streamsize>(mlen));
  if (!f) throw InputError("'" + path + "' manifest is truncated");

  ordered_json manifest;
  try {
    manifest = ordered_json::parse(mtext);
  } catch (const std::exception& ex) {
    throw InputError(std::string("bad checkpoint manifest: ") + ex.what());
  }

  Checkpoint ckpt;
  for (const auto& je : manifest.at("tensors")) {
    CheckpointEntry e;
    e.name = je.at("name").get<std::string>();
    e.shape = je.at("shape").get<Shape>();
    e.dtype = je.at("dtype").get<std::string>();
    e.offset = je.at("offset").get<uint64_t>();
    if (e.dtype != "f32" && e.dtype != "f64") throw InputError("unknown dtype " + e.dtype);
    ckpt.entries.push_back(std::move(e));
  }
  if (manifest.contains("meta")) ckpt.meta = manifest.at("meta");

  ckpt.payload.assign(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
  return ckpt;
}

// FNV-1a over raw bytes; used for frozen-parameter identity checks.
inline uint64_t fnv1a64(const void* data, size_t len) {
  const auto* p = static_cast<const unsigned char*>(data);
  uint64_t h = 1469598103934665603ull;
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

template <typename T>
uint64_t tensor_bytes_hash(const Tensor<T>& t) {
  return fnv1a64(t.data().data(), t.numel() * sizeof(T));
}

}  // namespace cpdet
