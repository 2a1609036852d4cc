#pragma once

// Flat key = value run configuration. Every tunable default lives here;
// unknown keys are a hard error and every run logs the fully resolved config.

#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "tvf/common.hpp"

namespace tvf {

struct RunConfig {
  uint64_t seed = 0;
  int threads = 0;  // 0 = hardware default, capped by TVF_THREADS

  int latent_size = 16;
  double camera_fov_deg = 50.0;
  double camera_radius = 2.0;

  int triplane_resolution = 16;
  int triplane_channels = 8;
  // sqrt(3): any world-cube point stays inside the plane cube of a rotated
  // view frame, so no query region is untrainable
  double triplane_extent = 1.7320508075688772;

  int lift_model_dim = 32;

  int fusion_samples_per_ray = 32;
  bool fusion_decode_before_aggregate = false;
  bool fusion_uniform_weights = false;

  bool inject_use_xt = true;

  int backbone_base_channels = 32;
  int backbone_time_dim = 64;

  int schedule_steps = 100;
  double schedule_beta_start = 1e-4;
  double schedule_beta_end = 0.02;

  int data_train_objects = 200;
  int data_eval_objects = 20;
  int data_views = 12;

  int stage0_epochs = 10, stage1_epochs = 10, stage2_epochs = 10;
  int stage0_batch = 4, stage1_batch = 4, stage2_batch = 4;
  double stage0_lr = 2e-3, stage1_lr = 4e-3, stage2_lr = 2e-3;
  double stage2_w_diff = 1.0;
  double stage2_w_mse = 1.0;
};

namespace detail {

struct ConfigField {
  enum class Type { Int, U64, Double, Bool } type;
  void* ptr;
};

inline std::map<std::string, ConfigField> config_registry(RunConfig& c) {
  using T = ConfigField::Type;
  return {
      {"seed", {T::U64, &c.seed}},
      {"threads", {T::Int, &c.threads}},
      {"latent.size", {T::Int, &c.latent_size}},
      {"camera.fov_deg", {T::Double, &c.camera_fov_deg}},
      {"camera.radius", {T::Double, &c.camera_radius}},
      {"triplane.resolution", {T::Int, &c.triplane_resolution}},
      {"triplane.channels", {T::Int, &c.triplane_channels}},
      {"triplane.extent", {T::Double, &c.triplane_extent}},
      {"lift.model_dim", {T::Int, &c.lift_model_dim}},
      {"fusion.samples_per_ray", {T::Int, &c.fusion_samples_per_ray}},
      {"fusion.decode_before_aggregate", {T::Bool, &c.fusion_decode_before_aggregate}},
      {"fusion.uniform_weights", {T::Bool, &c.fusion_uniform_weights}},
      {"inject.use_xt", {T::Bool, &c.inject_use_xt}},
      {"backbone.base_channels", {T::Int, &c.backbone_base_channels}},
      {"backbone.time_dim", {T::Int, &c.backbone_time_dim}},
      {"schedule.steps", {T::Int, &c.schedule_steps}},
      {"schedule.beta_start", {T::Double, &c.schedule_beta_start}},
      {"schedule.beta_end", {T::Double, &c.schedule_beta_end}},
      {"data.train_objects", {T::Int, &c.data_train_objects}},
      {"data.eval_objects", {T::Int, &c.data_eval_objects}},
      {"data.views", {T::Int, &c.data_views}},
      {"stage0.epochs", {T::Int, &c.stage0_epochs}},
      {"stage0.batch", {T::Int, &c.stage0_batch}},
      {"stage0.lr", {T::Double, &c.stage0_lr}},
      {"stage1.epochs", {T::Int, &c.stage1_epochs}},
      {"stage1.batch", {T::Int, &c.stage1_batch}},
      {"stage1.lr", {T::Double, &c.stage1_lr}},
      {"stage2.epochs", {T::Int, &c.stage2_epochs}},
      {"stage2.batch", {T::Int, &c.stage2_batch}},
      {"stage2.lr", {T::Double, &c.stage2_lr}},
      {"stage2.w_diff", {T::Double, &c.stage2_w_diff}},
      {"stage2.w_mse", {T::Double, &c.stage2_w_mse}},
  };
}

inline std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

}  // namespace detail

inline void config_set(RunConfig& cfg, const std::string& key, const std::string& value) {
  auto reg = detail::config_registry(cfg);
  auto it = reg.find(key);
  if (it == reg.end()) throw ConfigError("unknown config key: " + key);
  const std::string v = detail::trim(value);
  try {
    switch (it->second.type) {
      case detail::ConfigField::Type::Int: *static_cast<int*>(it->second.ptr) = std::stoi(v); break;
      case detail::ConfigField::Type::U64: *static_cast<uint64_t*>(it->second.ptr) = std::stoull(v); break;
      case detail::ConfigField::Type::Double: *static_cast<double*>(it->second.ptr) = std::stod(v); break;
      case detail::ConfigField::Type::Bool:
        if (v == "true" || v == "1") *static_cast<bool*>(it->second.ptr) = true;
        else if (v == "false" || v == "0") *static_cast<bool*>(it->second.ptr) = false;
        else throw ConfigError("bad boolean for " + key + ": " + v);
        break;
    }
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception&) {
    throw ConfigError("bad value for " + key + ": " + v);
  }
}

inline void load_config_file(RunConfig& cfg, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key = value");
    config_set(cfg, detail::trim(line.substr(0, eq)), line.substr(eq + 1));
  }
}

// Canonical text of the fully resolved config; its hash identifies a run.
inline std::string resolved_config_text(const RunConfig& cfg) {
  RunConfig copy = cfg;
  auto reg = detail::config_registry(copy);
  std::ostringstream os;
  for (const auto& [key, field] : reg) {
    os << key << " = ";
    switch (field.type) {
      case detail::ConfigField::Type::Int: os << *static_cast<int*>(field.ptr); break;
      case detail::ConfigField::Type::U64: os << *static_cast<uint64_t*>(field.ptr); break;
      case detail::ConfigField::Type::Double: os << format_number(*static_cast<double*>(field.ptr)); break;
      case detail::ConfigField::Type::Bool: os << (*static_cast<bool*>(field.ptr) ? "true" : "false"); break;
    }
    os << "\n";
  }
  return os.str();
}

inline std::string config_hash(const RunConfig& cfg) { return hex64(fnv1a64(resolved_config_text(cfg))); }

inline void write_config_echo(const RunConfig& cfg, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  out << "# resolved configuration, hash " << config_hash(cfg) << "\n" << resolved_config_text(cfg);
}

}  // namespace tvf
