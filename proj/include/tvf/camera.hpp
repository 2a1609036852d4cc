#pragma once

// Spherical camera poses looking at the world origin (+z up), relative view
// deltas with their 4-vector embedding, rigid transforms and pinhole rays.

#include <algorithm>
#include <array>
#include <limits>
#include <vector>

#include "tvf/common.hpp"

namespace tvf {

struct Vec3 {
  double x = 0, y = 0, z = 0;
  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
  Vec3 cross(const Vec3& o) const {
    return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
  }
  double norm() const { return std::sqrt(dot(*this)); }
  Vec3 normalized() const {
    double n = norm();
    if (n == 0) throw Error("normalize: zero vector");
    return {x / n, y / n, z / n};
  }
};

struct Mat3 {
  // row-major
  std::array<double, 9> m{};
  Vec3 apply(const Vec3& v) const {
    return {m[0] * v.x + m[1] * v.y + m[2] * v.z, m[3] * v.x + m[4] * v.y + m[5] * v.z,
            m[6] * v.x + m[7] * v.y + m[8] * v.z};
  }
  Vec3 apply_transposed(const Vec3& v) const {
    return {m[0] * v.x + m[3] * v.y + m[6] * v.z, m[1] * v.x + m[4] * v.y + m[7] * v.z,
            m[2] * v.x + m[5] * v.y + m[8] * v.z};
  }
  static Mat3 from_rows(const Vec3& a, const Vec3& b, const Vec3& c) {
    Mat3 r;
    r.m = {a.x, a.y, a.z, b.x, b.y, b.z, c.x, c.y, c.z};
    return r;
  }
  double det() const {
    return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
           m[2] * (m[3] * m[7] - m[4] * m[6]);
  }
};

// Azimuth theta in [0, 2pi), elevation phi in [-pi/2, pi/2], radius > 0.
struct CameraPose {
  double theta = 0;
  double phi = 0;
  double radius = 1;
};

inline double wrap_azimuth(double theta) {
  double t = std::fmod(theta, kTwoPi);
  if (t < 0) t += kTwoPi;
  if (t >= kTwoPi) t = 0;  // fmod rounding at the boundary
  return t;
}

inline CameraPose make_pose(double theta, double phi, double radius) {
  if (!(radius > 0)) throw Error("camera pose: radius must be positive");
  if (!(phi >= -kPi / 2 && phi <= kPi / 2)) throw Error("camera pose: elevation out of [-pi/2, pi/2]");
  return CameraPose{wrap_azimuth(theta), phi, radius};
}

// Degree-path constructor. Wrapping happens in degrees so that integral
// inputs like 370 and 10 produce bitwise-identical poses.
inline CameraPose pose_from_degrees(double theta_deg, double phi_deg, double radius) {
  double t = std::fmod(theta_deg, 360.0);
  if (t < 0) t += 360.0;
  if (t >= 360.0) t = 0;
  return make_pose(deg_to_rad(t), deg_to_rad(phi_deg), radius);
}

inline Vec3 pose_position(const CameraPose& p) {
  double cp = std::cos(p.phi);
  return {p.radius * cp * std::cos(p.theta), p.radius * cp * std::sin(p.theta), p.radius * std::sin(p.phi)};
}

struct Extrinsics {
  Mat3 rotation;   // world -> camera
  Vec3 translation;
};

// Camera looks down its -z axis at the origin; +z world projects to camera up.
inline Extrinsics pose_to_extrinsics(const CameraPose& p) {
  if (std::abs(p.phi) >= kPi / 2 - 1e-9) throw Error("pose_to_extrinsics: gimbal pose |phi| = pi/2");
  Vec3 pos = pose_position(p);
  Vec3 zc = pos.normalized();                       // backward (toward camera)
  Vec3 xc = Vec3{0, 0, 1}.cross(zc).normalized();   // right
  Vec3 yc = zc.cross(xc);                           // up
  Extrinsics e;
  e.rotation = Mat3::from_rows(xc, yc, zc);
  Vec3 rp = e.rotation.apply(pos);
  e.translation = {-rp.x, -rp.y, -rp.z};
  return e;
}

// Rotation-only world->view-frame transform: the axes of the pose's camera,
// centered at the origin. Tri-planes are aligned to this frame.
inline Mat3 pose_frame_rotation(const CameraPose& p) {
  return pose_to_extrinsics(p).rotation;
}

inline Vec3 world_to_camera_point(const Extrinsics& e, const Vec3& p) {
  return e.rotation.apply(p) + e.translation;
}

inline std::vector<Vec3> world_to_camera(const CameraPose& pose, const std::vector<Vec3>& pts) {
  Extrinsics e = pose_to_extrinsics(pose);
  std::vector<Vec3> out;
  out.reserve(pts.size());
  for (const Vec3& p : pts) out.push_back(world_to_camera_point(e, p));
  return out;
}

// ---------------------------------------------------------------------------
// View deltas
// ---------------------------------------------------------------------------

// Signed azimuth delta wrapped to (-pi, pi]; the pi boundary maps to +pi.
struct ViewDelta {
  double d_theta = 0;
  double d_phi = 0;
  double d_radius = 0;
};

inline double wrap_signed_angle(double a) {
  double x = std::fmod(a, kTwoPi);
  if (x > kPi) x -= kTwoPi;
  if (x <= -kPi) x += kTwoPi;
  return x;
}

inline ViewDelta view_delta(const CameraPose& from, const CameraPose& to) {
  return ViewDelta{wrap_signed_angle(to.theta - from.theta), to.phi - from.phi, to.radius - from.radius};
}

// [d_theta, sin(d_phi), cos(d_phi), d_radius]
inline std::array<double, 4> embed_delta(const ViewDelta& d) {
  return {d.d_theta, std::sin(d.d_phi), std::cos(d.d_phi), d.d_radius};
}

// ---------------------------------------------------------------------------
// Target-view rays
// ---------------------------------------------------------------------------

struct RayBatch {
  int height = 0, width = 0;
  std::vector<Vec3> origins;     // H*W, row-major
  std::vector<Vec3> directions;  // unit length
  double near = 0, far = 0;
};

// Pinhole rays through an align-corners pixel grid: the image-plane corners
// sit exactly at the field-of-view boundary and the center pixel of an odd
// grid lies on the optical axis.
inline RayBatch target_rays(const CameraPose& pose, int height, int width, double fov_deg) {
  if (height < 2 || width < 2) throw Error("target_rays: grid must be at least 2x2");
  if (!(fov_deg > 0 && fov_deg < 120)) throw Error("target_rays: fov out of (0, 120) degrees");
  Extrinsics e = pose_to_extrinsics(pose);
  Vec3 pos = pose_position(pose);
  double th = std::tan(deg_to_rad(fov_deg) / 2.0);
  RayBatch rb;
  rb.height = height;
  rb.width = width;
  rb.origins.resize(size_t(height) * width);
  rb.directions.resize(size_t(height) * width);
  const double sqrt3 = std::sqrt(3.0);
  rb.near = std::max(pose.radius - sqrt3, 1e-3);
  rb.far = pose.radius + sqrt3;
  for (int py = 0; py < height; ++py) {
    double v = 1.0 - 2.0 * double(py) / double(height - 1);  // row 0 = top
    for (int px = 0; px < width; ++px) {
      double u = -1.0 + 2.0 * double(px) / double(width - 1);
      Vec3 dir_cam{u * th, v * th, -1.0};
      Vec3 dir_world = e.rotation.apply_transposed(dir_cam).normalized();
      size_t i = size_t(py) * width + px;
      rb.origins[i] = pos;
      rb.directions[i] = dir_world;
    }
  }
  return rb;
}

// Ray / axis-aligned cube [-half, half]^3 intersection (slab method).
// Returns false on miss; otherwise [t0, t1] with t0 >= 0.
inline bool ray_cube_intersect(const Vec3& o, const Vec3& d, double half, double& t0, double& t1) {
  double lo = 0.0, hi = std::numeric_limits<double>::infinity();
  const double oa[3] = {o.x, o.y, o.z};
  const double da[3] = {d.x, d.y, d.z};
  for (int a = 0; a < 3; ++a) {
    if (std::abs(da[a]) < 1e-12) {
      if (oa[a] < -half || oa[a] > half) return false;
      continue;
    }
    double tA = (-half - oa[a]) / da[a];
    double tB = (half - oa[a]) / da[a];
    if (tA > tB) std::swap(tA, tB);
    lo = std::max(lo, tA);
    hi = std::min(hi, tB);
  }
  if (hi <= lo) return false;
  t0 = lo;
  t1 = hi;
  return true;
}

}  // namespace tvf
