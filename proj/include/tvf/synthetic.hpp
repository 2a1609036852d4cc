#pragma once

// Procedural objects and the deterministic multi-view latent renderer that
// stands in for a pretrained image encoder: the "latent" of a view is the
// 4-channel first-hit feature image of the object itself, so reconstruction
// targets are exact ground truth.

#include <string>
#include <vector>

#include "tvf/archive.hpp"
#include "tvf/camera.hpp"
#include "tvf/tensor.hpp"

namespace tvf {

struct Primitive {
  enum class Kind { Box, Sphere };
  Kind kind = Kind::Box;
  Vec3 center;
  Vec3 half;  // per-axis half extents; spheres use half.x as radius
  std::array<float, 4> feature{};

  bool contains(const Vec3& p) const {
    if (kind == Kind::Box) {
      return std::abs(p.x - center.x) <= half.x && std::abs(p.y - center.y) <= half.y &&
             std::abs(p.z - center.z) <= half.z;
    }
    Vec3 d = p - center;
    return d.dot(d) <= half.x * half.x;
  }
};

struct SyntheticObject {
  uint64_t seed = 0;
  std::vector<Primitive> primitives;
};

struct LatentImage {
  Tensor grid;  // [4, H', W']
  CameraPose pose;
};

// 3-6 primitives inside [-0.8, 0.8]^3, the last one a marker offset from all
// three coordinate planes so no view pair is mirror-ambiguous.
inline SyntheticObject gen_object(uint64_t seed) {
  Rng rng(mix_seed(seed, 0x0B7EC7u));
  SyntheticObject obj;
  obj.seed = seed;
  int extra = 2 + rng.uniform_int(4);  // 2..5 plus the marker -> 3..6 total
  for (int i = 0; i < extra; ++i) {
    Primitive pr;
    pr.kind = rng.uniform_int(2) == 0 ? Primitive::Kind::Box : Primitive::Kind::Sphere;
    if (pr.kind == Primitive::Kind::Box) {
      pr.half = {rng.uniform(0.15, 0.45), rng.uniform(0.15, 0.45), rng.uniform(0.15, 0.45)};
    } else {
      double r = rng.uniform(0.15, 0.4);
      pr.half = {r, r, r};
    }
    pr.center = {rng.uniform(-0.8 + pr.half.x, 0.8 - pr.half.x),
                 rng.uniform(-0.8 + pr.half.y, 0.8 - pr.half.y),
                 rng.uniform(-0.8 + pr.half.z, 0.8 - pr.half.z)};
    for (auto& f : pr.feature) f = float(rng.uniform(-1.0, 1.0));
    obj.primitives.push_back(pr);
  }
  Primitive marker;
  marker.kind = Primitive::Kind::Box;
  double h = rng.uniform(0.08, 0.15);
  marker.half = {h, h, h};
  for (int a = 0; a < 3; ++a) {
    double sign = rng.uniform_int(2) == 0 ? -1.0 : 1.0;
    double mag = rng.uniform(0.25, 0.8 - h);
    (a == 0 ? marker.center.x : a == 1 ? marker.center.y : marker.center.z) = sign * mag;
  }
  for (auto& f : marker.feature) f = float(rng.uniform(0.5, 1.0) * (rng.uniform_int(2) == 0 ? -1.0 : 1.0));
  obj.primitives.push_back(marker);
  return obj;
}

// True when some primitive sits strictly clear of every coordinate plane.
inline bool asymmetry_ok(const SyntheticObject& obj) {
  for (const Primitive& pr : obj.primitives) {
    double cx = std::abs(pr.center.x) - pr.half.x;
    double cy = std::abs(pr.center.y) - pr.half.y;
    double cz = std::abs(pr.center.z) - pr.half.z;
    if (cx > 0.01 && cy > 0.01 && cz > 0.01) return true;
  }
  return false;
}

constexpr double kMarchStep = 2.0 / 64.0;

// Per-pixel fixed-step ray march; first-hit primitive wins, background is the
// zero vector.
inline LatentImage render_latent(const SyntheticObject& obj, const CameraPose& pose, int grid,
                                 double fov_deg = 50.0) {
  RayBatch rays = target_rays(pose, grid, grid, fov_deg);
  LatentImage img;
  img.pose = pose;
  img.grid = Tensor::zeros({4, grid, grid});
  long hw = long(grid) * grid;
  int steps = int((rays.far - rays.near) / kMarchStep) + 1;
  for (long pix = 0; pix < hw; ++pix) {
    const Vec3& o = rays.origins[size_t(pix)];
    const Vec3& d = rays.directions[size_t(pix)];
    for (int k = 0; k < steps; ++k) {
      double t = rays.near + (double(k) + 0.5) * kMarchStep;
      if (t > rays.far) break;
      Vec3 p = o + d * t;
      const Primitive* hit = nullptr;
      for (const Primitive& pr : obj.primitives) {
        if (pr.contains(p)) {
          hit = &pr;
          break;
        }
      }
      if (hit) {
        for (int c = 0; c < 4; ++c) img.grid[c * hw + pix] = hit->feature[size_t(c)];
        break;
      }
    }
  }
  return img;
}

// ---------------------------------------------------------------------------
// View sampling
// ---------------------------------------------------------------------------

struct TrainingViews {
  std::vector<LatentImage> inputs;  // front, back, random
  LatentImage target;
};

// The triplet scheme: a front view at a random azimuth, the opposing back
// view at the same elevation, one random view, and an independent target.
inline TrainingViews sample_training_views(const SyntheticObject& obj, Rng& rng, int grid,
                                           double fov_deg = 50.0, double radius = 2.0) {
  double az0 = rng.uniform(0.0, 360.0);
  double el0 = rng.uniform(-30.0, 30.0);
  double az_rand = rng.uniform(0.0, 360.0);
  double el_rand = rng.uniform(-60.0, 60.0);
  double az_tgt = rng.uniform(0.0, 360.0);
  double el_tgt = rng.uniform(-60.0, 60.0);
  TrainingViews tv;
  tv.inputs.push_back(render_latent(obj, pose_from_degrees(az0, el0, radius), grid, fov_deg));
  tv.inputs.push_back(render_latent(obj, pose_from_degrees(az0 + 180.0, el0, radius), grid, fov_deg));
  tv.inputs.push_back(render_latent(obj, pose_from_degrees(az_rand, el_rand, radius), grid, fov_deg));
  tv.target = render_latent(obj, pose_from_degrees(az_tgt, el_tgt, radius), grid, fov_deg);
  return tv;
}

struct EvalViews {
  std::vector<LatentImage> inputs;
  std::vector<LatentImage> targets;
};

// Fixed evaluation protocol: inputs at {0}, {0,180}, {0,90,180} or
// {0,90,180,270} degrees azimuth at zero elevation, plus 8 held-out targets
// at azimuths offset by 22.5 degrees.
inline EvalViews eval_views(const SyntheticObject& obj, int n, int grid, double fov_deg = 50.0,
                            double radius = 2.0) {
  if (n < 1 || n > 4) throw Error("eval_views: n must be in {1,2,3,4}");
  static const std::vector<std::vector<double>> kInputAz = {
      {0.0}, {0.0, 180.0}, {0.0, 90.0, 180.0}, {0.0, 90.0, 180.0, 270.0}};
  EvalViews ev;
  for (double az : kInputAz[size_t(n - 1)])
    ev.inputs.push_back(render_latent(obj, pose_from_degrees(az, 0.0, radius), grid, fov_deg));
  for (int k = 0; k < 8; ++k)
    ev.targets.push_back(render_latent(obj, pose_from_degrees(22.5 + 45.0 * k, 0.0, radius), grid, fov_deg));
  return ev;
}

// ---------------------------------------------------------------------------
// Dataset files (archive envelope; manifest carries seeds and poses in degrees)
// ---------------------------------------------------------------------------

struct Dataset {
  int grid = 16;
  double radius = 2.0;
  double fov_deg = 50.0;
  std::vector<uint64_t> object_seeds;
  std::vector<std::vector<CameraPose>> view_poses;
  std::vector<std::vector<Tensor>> view_latents;
};

inline Dataset build_dataset(uint64_t seed, int n_objects, int n_views, int grid, double fov_deg,
                             double radius, int threads = 0) {
  if (n_objects <= 0 || n_views <= 0) throw ConfigError("dataset: need positive object and view counts");
  Dataset ds;
  ds.grid = grid;
  ds.radius = radius;
  ds.fov_deg = fov_deg;
  ds.object_seeds.resize(size_t(n_objects));
  ds.view_poses.resize(size_t(n_objects));
  ds.view_latents.resize(size_t(n_objects));
  for (int i = 0; i < n_objects; ++i) ds.object_seeds[size_t(i)] = mix_seed(seed, 0xDA7Au, uint64_t(i));
  parallel_for(n_objects, threads, [&](int i) {
    SyntheticObject obj = gen_object(ds.object_seeds[size_t(i)]);
    for (int v = 0; v < n_views; ++v) {
      double az = 360.0 * double(v) / double(n_views);
      CameraPose pose = pose_from_degrees(az, 0.0, radius);
      ds.view_poses[size_t(i)].push_back(pose);
      ds.view_latents[size_t(i)].push_back(render_latent(obj, pose, grid, fov_deg).grid);
    }
  });
  return ds;
}

inline void save_dataset(const std::string& path, const Dataset& ds) {
  ParamSet ps;
  nlohmann::json objects = nlohmann::json::array();
  char name[32];
  for (size_t i = 0; i < ds.object_seeds.size(); ++i) {
    nlohmann::json obj;
    obj["seed"] = ds.object_seeds[i];
    nlohmann::json poses = nlohmann::json::array();
    for (const CameraPose& p : ds.view_poses[i]) {
      poses.push_back({{"theta_deg", rad_to_deg(p.theta)}, {"phi_deg", rad_to_deg(p.phi)}, {"radius", p.radius}});
    }
    obj["views"] = poses;
    objects.push_back(obj);
    std::snprintf(name, sizeof(name), "obj%05zu", i);
    int n_views = int(ds.view_latents[i].size());
    Tensor stack({n_views, 4, ds.grid, ds.grid});
    long per = 4l * ds.grid * ds.grid;
    for (int v = 0; v < n_views; ++v)
      std::copy(ds.view_latents[i][size_t(v)].data.begin(), ds.view_latents[i][size_t(v)].data.end(),
                stack.data.begin() + v * per);
    ps.add(name, std::move(stack), false);
  }
  nlohmann::json extra;
  extra["grid"] = ds.grid;
  extra["radius"] = ds.radius;
  extra["fov_deg"] = ds.fov_deg;
  extra["objects"] = objects;
  save_archive(path, ps, "dataset", extra);
}

inline Dataset load_dataset(const std::string& path) {
  Archive ar = load_archive(path, "dataset");
  Dataset ds;
  ds.grid = ar.extra.at("grid");
  ds.radius = ar.extra.at("radius");
  ds.fov_deg = ar.extra.at("fov_deg");
  char name[32];
  size_t i = 0;
  for (const auto& obj : ar.extra.at("objects")) {
    ds.object_seeds.push_back(obj.at("seed").get<uint64_t>());
    std::vector<CameraPose> poses;
    for (const auto& p : obj.at("views"))
      poses.push_back(pose_from_degrees(p.at("theta_deg"), p.at("phi_deg"), p.at("radius")));
    ds.view_poses.push_back(std::move(poses));
    std::snprintf(name, sizeof(name), "obj%05zu", i);
    const Tensor& stack = ar.params.value(name);
    int n_views = stack.dim(0);
    long per = 4l * ds.grid * ds.grid;
    std::vector<Tensor> lats;
    for (int v = 0; v < n_views; ++v) {
      Tensor t({4, ds.grid, ds.grid});
      std::copy(stack.data.begin() + v * per, stack.data.begin() + (v + 1) * per, t.data.begin());
      lats.push_back(std::move(t));
    }
    ds.view_latents.push_back(std::move(lats));
    ++i;
  }
  return ds;
}

}  // namespace tvf
