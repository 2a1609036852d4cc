#pragma once

// Checkpoint / dump envelope: one line of UTF-8 JSON (manifest), then raw
// little-endian float32 payloads concatenated in manifest order. The same
// envelope backs parameter checkpoints, dataset files and latent dumps.

#include <cstring>
#include <fstream>
#include <string>

#include <json.hpp>

#include "tvf/param_set.hpp"

namespace tvf {

constexpr int kArchiveFormatVersion = 1;

struct Archive {
  int format_version = kArchiveFormatVersion;
  std::string kind;
  ParamSet params;
  nlohmann::json extra;
};

inline void save_archive(const std::string& path, const ParamSet& ps, const std::string& kind,
                         const nlohmann::json& extra = nlohmann::json::object()) {
  nlohmann::json manifest;
  manifest["format_version"] = kArchiveFormatVersion;
  manifest["kind"] = kind;
  if (!extra.empty()) manifest["extra"] = extra;
  nlohmann::json entries = nlohmann::json::array();
  long offset = 0;
  for (const auto& [name, e] : ps.entries) {
    nlohmann::json ent;
    ent["name"] = name;
    ent["dtype"] = "f32";
    ent["shape"] = e.value.shape;
    ent["offset"] = offset;
    ent["trainable"] = e.trainable;
    entries.push_back(ent);
    offset += e.value.numel() * long(sizeof(float));
  }
  manifest["entries"] = entries;

  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  out << manifest.dump() << "\n";
  for (const auto& [name, e] : ps.entries) {
    out.write(reinterpret_cast<const char*>(e.value.data.data()),
              std::streamsize(e.value.data.size() * sizeof(float)));
  }
  if (!out) throw Error("write failed: " + path);
}

inline Archive load_archive(const std::string& path, const std::string& expect_kind = "") {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw PrereqError("missing file: " + path);
  std::string line;
  if (!std::getline(in, line)) throw Error("truncated archive: " + path);
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(line);
  } catch (const std::exception& e) {
    throw Error("bad archive manifest in " + path + ": " + e.what());
  }
  Archive ar;
  ar.format_version = manifest.value("format_version", -1);
  if (ar.format_version != kArchiveFormatVersion)
    throw Error("unsupported format_version " + std::to_string(ar.format_version) + " in " + path);
  ar.kind = manifest.value("kind", "");
  if (!expect_kind.empty() && ar.kind != expect_kind)
    throw Error("archive kind mismatch in " + path + ": want " + expect_kind + ", got " + ar.kind);
  if (manifest.contains("extra")) ar.extra = manifest["extra"];

  std::string payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  for (const auto& ent : manifest["entries"]) {
    std::string name = ent.at("name");
    if (ent.at("dtype") != "f32") throw Error("unsupported dtype for " + name + " in " + path);
    std::vector<int> shape = ent.at("shape").get<std::vector<int>>();
    long offset = ent.at("offset");
    bool trainable = ent.at("trainable");
    Tensor t(shape);
    size_t bytes = t.data.size() * sizeof(float);
    if (offset < 0 || size_t(offset) + bytes > payload.size())
      throw Error("archive payload out of range for " + name + " in " + path);
    std::memcpy(t.data.data(), payload.data() + offset, bytes);
    ar.params.add(name, std::move(t), trainable);
  }
  return ar;
}

inline std::string file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

inline bool file_exists(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return bool(in);
}

// Adam moments plus step counter, written beside the parameter checkpoint so
// interrupted training resumes exactly.
inline void save_adam_state(const std::string& path, const AdamState& state) {
  ParamSet ps;
  for (const auto& [name, t] : state.m) ps.add("adam.m." + name, t, false);
  for (const auto& [name, t] : state.v) ps.add("adam.v." + name, t, false);
  nlohmann::json extra;
  extra["step"] = state.step;
  save_archive(path, ps, "optstate", extra);
}

inline AdamState load_adam_state(const std::string& path) {
  Archive ar = load_archive(path, "optstate");
  AdamState st;
  st.step = ar.extra.at("step");
  for (const auto& [name, e] : ar.params.entries) {
    if (name.rfind("adam.m.", 0) == 0) st.m[name.substr(7)] = e.value;
    else if (name.rfind("adam.v.", 0) == 0) st.v[name.substr(7)] = e.value;
  }
  return st;
}

}  // namespace tvf
