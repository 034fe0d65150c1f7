#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "fpsa/model.hpp"
#include "fpsa/optim.hpp"

namespace fpsa {

inline constexpr const char* kCheckpointVersion = "fpsa-ckpt-1";
inline constexpr const char* kCheckpointMagic = "FPSACKPT";

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are little-endian scalar payloads");

inline uint64_t fnv1a64(const std::string& s) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

template <typename T>
struct CheckpointPayload {
  std::vector<std::pair<std::string, Tensor<T>>> tensors;
  nlohmann::json meta;  // config echo: model kind, dims, epoch, ...
};

template <typename T>
constexpr const char* dtype_name() {
  return sizeof(T) == 4 ? "f32" : "f64";
}

// File layout: 8-byte magic, u64 manifest length, manifest JSON, raw blob.
// The manifest lists every tensor's name/shape/dtype/offset and carries an
// FNV-1a hash of itself (computed with the hash field blank).
template <typename T>
void save_checkpoint_file(const std::string& path, const CheckpointPayload<T>& payload) {
  nlohmann::json manifest;
  manifest["version"] = kCheckpointVersion;
  manifest["dtype"] = dtype_name<T>();
  manifest["meta"] = payload.meta;
  nlohmann::json tensors = nlohmann::json::array();
  uint64_t offset = 0;
  for (const auto& [name, t] : payload.tensors) {
    nlohmann::json e;
    e["name"] = name;
    e["shape"] = t.shape;
    e["dtype"] = dtype_name<T>();
    e["offset"] = offset;
    e["bytes"] = static_cast<uint64_t>(t.data.size() * sizeof(T));
    tensors.push_back(e);
    offset += t.data.size() * sizeof(T);
  }
  manifest["tensors"] = tensors;
  manifest["manifest_fnv"] = "";
  std::string unhashed = manifest.dump();
  char hex[17];
  std::snprintf(hex, sizeof(hex), "%016llx",
                static_cast<unsigned long long>(fnv1a64(unhashed)));
  manifest["manifest_fnv"] = hex;
  const std::string text = manifest.dump();

  std::ofstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint for writing: " + path);
  f.write(kCheckpointMagic, 8);
  const uint64_t len = text.size();
  f.write(reinterpret_cast<const char*>(&len), sizeof(len));
  f.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, t] : payload.tensors)
    f.write(reinterpret_cast<const char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(T)));
  if (!f) throw CheckpointError("write failed for checkpoint: " + path);
}

template <typename T>
CheckpointPayload<T> load_checkpoint_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint: " + path);
  char magic[8];
  if (!f.read(magic, 8) || std::string(magic, 8) != kCheckpointMagic)
    throw CheckpointError("not a checkpoint file: " + path);
  uint64_t len = 0;
  if (!f.read(reinterpret_cast<char*>(&len), sizeof(len)))
    throw CheckpointError("truncated checkpoint manifest: " + path);
  std::string text(len, '\0');
  if (!f.read(text.data(), static_cast<std::streamsize>(len)))
    throw CheckpointError("truncated checkpoint manifest: " + path);
  nlohmann::json manifest = nlohmann::json::parse(text, nullptr, false);
  if (manifest.is_discarded()) throw CheckpointError("corrupt checkpoint manifest: " + path);

  const std::string stored_hash = manifest.value("manifest_fnv", "");
  manifest["manifest_fnv"] = "";
  char hex[17];
  std::snprintf(hex, sizeof(hex), "%016llx",
                static_cast<unsigned long long>(fnv1a64(manifest.dump())));
  if (stored_hash != hex)
    throw CheckpointError("manifest hash mismatch in " + path + " (stored " + stored_hash +
                          ", computed " + hex + ")");

  const std::string version = manifest.value("version", "");
  if (version != kCheckpointVersion)
    throw CheckpointError("checkpoint version '" + version + "' not supported (want '" +
                          kCheckpointVersion + "')");
  const std::string dtype = manifest.value("dtype", "");
  if (dtype != dtype_name<T>())
    throw CheckpointError("checkpoint dtype " + dtype + " does not match requested " +
                          dtype_name<T>());

  std::string blob((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  CheckpointPayload<T> payload;
  payload.meta = manifest["meta"];
  for (const auto& e : manifest["tensors"]) {
    const std::string name = e["name"];
    const uint64_t offset = e["offset"];
    const uint64_t bytes = e["bytes"];
    if (offset + bytes > blob.size())
      throw CheckpointError("checkpoint blob truncated: tensor '" + name + "' unreadable");
    Shape shape = e["shape"].get<Shape>();
    Tensor<T> t(shape);
    if (bytes != t.data.size() * sizeof(T))
      throw CheckpointError("tensor '" + name + "' byte count disagrees with its shape");
    std::memcpy(t.data.data(), blob.data() + offset, bytes);
    payload.tensors.emplace_back(name, std::move(t));
  }
  return payload;
}

// ---------------------------------------------------------------------------
// model-level save / load
// ---------------------------------------------------------------------------

template <typename T>
nlohmann::json model_config_echo(const Model<T>& m) {
  nlohmann::json j;
  j["kind"] = model_kind_name(m.spec.kind);
  j["vocab_size"] = m.spec.vocab_size;
  j["dim"] = m.spec.model_dim();
  j["heads"] = m.spec.n_heads();
  j["pos_emb"] = m.spec.use_pos_emb;
  return j;
}

template <typename T>
void save_model_checkpoint(const std::string& path, const Model<T>& m,
                           const AdamWState<T>* opt = nullptr, int64_t epoch = 0,
                           nlohmann::json extra = {}) {
  CheckpointPayload<T> p;
  for (auto& [name, v] : m.params()) p.tensors.emplace_back("param/" + name, v->value);
  p.tensors.emplace_back("buf/sn_u", m.layer.sn.u);
  p.tensors.emplace_back("buf/sn_v", m.layer.sn.v);
  if (opt) {
    auto params = m.params();
    for (size_t i = 0; i < params.size(); ++i) {
      p.tensors.emplace_back("adam/m/" + params[i].first, opt->m[i]);
      p.tensors.emplace_back("adam/v/" + params[i].first, opt->v[i]);
    }
  }
  p.meta["model"] = model_config_echo(m);
  p.meta["epoch"] = epoch;
  p.meta["adam_t"] = opt ? opt->t : 0;
  p.meta["has_optimizer"] = opt != nullptr;
  if (!extra.is_null() && !extra.empty()) p.meta["run"] = std::move(extra);
  save_checkpoint_file(path, p);
}

template <typename T>
int64_t load_model_checkpoint(const std::string& path, Model<T>& m,
                              AdamWState<T>* opt = nullptr) {
  CheckpointPayload<T> p = load_checkpoint_file<T>(path);
  const nlohmann::json echo = model_config_echo(m);
  const nlohmann::json& stored = p.meta["model"];
  for (auto& [key, val] : echo.items()) {
    if (!stored.contains(key) || stored[key] != val)
      throw CheckpointError("checkpoint model mismatch on '" + key + "': checkpoint has " +
                            (stored.contains(key) ? stored[key].dump() : "nothing") +
                            ", model wants " + val.dump());
  }
  auto find = [&](const std::string& name) -> Tensor<T>& {
    for (auto& [n, t] : p.tensors)
      if (n == name) return t;
    throw CheckpointError("checkpoint is missing tensor '" + name + "'");
  };
  auto assign = [&](const std::string& name, Tensor<T>& dst) {
    Tensor<T>& src = find(name);
    if (src.shape != dst.shape)
      throw CheckpointError("shape mismatch for '" + name + "': checkpoint " +
                            shape_str(src.shape) + " vs model " + shape_str(dst.shape));
    dst = src;
  };
  for (auto& [name, v] : m.params()) assign("param/" + name, v->value);
  assign("buf/sn_u", m.layer.sn.u);
  assign("buf/sn_v", m.layer.sn.v);
  m.layer.sn.initialized = true;
  if (opt) {
    if (!p.meta.value("has_optimizer", false))
      throw CheckpointError("checkpoint has no optimizer state, cannot resume");
    auto params = m.params();
    opt->m.clear();
    opt->v.clear();
    for (auto& [name, v] : params) {
      opt->m.push_back(find("adam/m/" + name));
      opt->v.push_back(find("adam/v/" + name));
    }
    opt->t = p.meta.value("adam_t", int64_t(0));
  }
  return p.meta.value("epoch", int64_t(0));
}

}  // namespace fpsa
