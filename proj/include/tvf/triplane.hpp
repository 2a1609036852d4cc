#pragma once

// Tri-plane features: three axis-aligned P x P x C planes (xy, xz, yz) in a
// view-aligned frame centered at the world origin. A 3D point's feature is
// the sum of bilinear samples from its three plane projections; anything
// outside the [-extent, extent]^3 cube reads as zero.

#include <vector>

#include "tvf/camera.hpp"
#include "tvf/tape.hpp"

namespace tvf {

constexpr int kPlaneXY = 0;
constexpr int kPlaneXZ = 1;
constexpr int kPlaneYZ = 2;

// Tape-backed tri-plane (planes usually produced by the lifting network).
template <typename S>
struct TriPlaneVar {
  Var<S> planes;  // [3, C, P, P]
  CameraPose frame;
  double extent = 1.0;

  int channels() const { return planes.tape->value(planes).dim(1); }
  int resolution() const { return planes.tape->value(planes).dim(2); }
};

// Plain-tensor tri-plane for code that does not differentiate.
template <typename S>
struct TriPlaneT {
  TensorT<S> planes;  // [3, C, P, P]
  CameraPose frame;
  double extent = 1.0;
};

template <typename S>
inline void check_triplane_shape(const TensorT<S>& planes) {
  if (planes.rank() != 4 || planes.dim(0) != 3 || planes.dim(2) != planes.dim(3))
    throw Error("triplane: want [3,C,P,P], got " + planes.shape_str());
  if (planes.dim(1) < 2) throw Error("triplane: need at least 2 channels (density + payload)");
}

// The (u,v) pair each plane reads for a point q in the plane frame.
inline void plane_uv(int which, const Vec3& q, double extent, double& u, double& v) {
  double x = q.x / extent, y = q.y / extent, z = q.z / extent;
  switch (which) {
    case kPlaneXY: u = x; v = y; break;
    case kPlaneXZ: u = x; v = z; break;
    default: u = y; v = z; break;
  }
}

inline bool point_in_cube(const Vec3& q, double extent) {
  return std::abs(q.x) <= extent && std::abs(q.y) <= extent && std::abs(q.z) <= extent;
}

// Differentiable point query: rotate into the plane frame, bilinear-sample the
// three planes, sum. Built from catalog ops so gradients w.r.t. plane values
// come from grid_sample.
template <typename S>
Var<S> query_points(const TriPlaneVar<S>& tp, const std::vector<Vec3>& points_world) {
  Tape<S>& tape = *tp.planes.tape;
  check_triplane_shape(tape.value(tp.planes));
  int n = int(points_world.size());
  if (n == 0) throw Error("query_points: empty point list");
  Mat3 rot = pose_frame_rotation(tp.frame);
  // Out-of-cube points get a sentinel uv outside [-1,1] so every plane reads zero.
  TensorT<S> uv[3] = {TensorT<S>({n, 2}), TensorT<S>({n, 2}), TensorT<S>({n, 2})};
  for (int i = 0; i < n; ++i) {
    Vec3 q = rot.apply(points_world[size_t(i)]);
    bool inside = point_in_cube(q, tp.extent);
    for (int k = 0; k < 3; ++k) {
      double u = -3.0, v = -3.0;
      if (inside) plane_uv(k, q, tp.extent, u, v);
      uv[k][long(i) * 2 + 0] = S(u);
      uv[k][long(i) * 2 + 1] = S(v);
    }
  }
  Var<S> acc;
  for (int k = 0; k < 3; ++k) {
    Var<S> uv_leaf = tape.leaf(std::move(uv[k]), false);
    Var<S> sample = grid_sample(select_plane(tp.planes, k), uv_leaf);
    acc = (k == 0) ? sample : add(acc, sample);
  }
  return acc;
}

// sigma = softplus(channel 0), payload = channels 1..C-1 unchanged.
template <typename S>
void decode_sigma_payload(const TensorT<S>& features, TensorT<S>& sigma, TensorT<S>& payload) {
  if (features.rank() != 2 || features.dim(1) < 2)
    throw Error("decode_sigma_payload: want [N,C>=2], got " + features.shape_str());
  int n = features.dim(0), c = features.dim(1);
  sigma = TensorT<S>({n});
  payload = TensorT<S>({n, c - 1});
  for (int i = 0; i < n; ++i) {
    sigma[i] = softplus_scalar(features[long(i) * c]);
    for (int j = 1; j < c; ++j) payload[long(i) * (c - 1) + j - 1] = features[long(i) * c + j];
  }
}

// ---------------------------------------------------------------------------
// Non-tape fast path shared with the fused renderer.
// ---------------------------------------------------------------------------

// Accumulates the summed 3-plane sample for one point into out[C] (adds, does
// not clear). Returns false (and adds nothing) when the point is outside the cube.
template <typename S>
inline bool sample_triplane_point(const TensorT<S>& planes, const Mat3& rot, double extent,
                                  const Vec3& p_world, S* out) {
  Vec3 q = rot.apply(p_world);
  if (!point_in_cube(q, extent)) return false;
  int C = planes.dim(1), P = planes.dim(2);
  long cpp = long(C) * P * P;
  long pp = long(P) * P;
  for (int k = 0; k < 3; ++k) {
    double u, v;
    plane_uv(k, q, extent, u, v);
    BilinearFoot f = bilinear_foot(P, P, u, v);
    if (!f.inside) continue;
    S w00 = S((1 - f.wx) * (1 - f.wy)), w10 = S(f.wx * (1 - f.wy));
    S w01 = S((1 - f.wx) * f.wy), w11 = S(f.wx * f.wy);
    const S* base = &planes.data[size_t(k) * cpp];
    bool x1ok = f.x0 + 1 < P, y1ok = f.y0 + 1 < P;
    for (int c = 0; c < C; ++c) {
      const S* pl = base + size_t(c) * pp;
      S acc = w00 * pl[size_t(f.y0) * P + f.x0];
      if (x1ok) acc += w10 * pl[size_t(f.y0) * P + f.x0 + 1];
      if (y1ok) acc += w01 * pl[size_t(f.y0 + 1) * P + f.x0];
      if (x1ok && y1ok) acc += w11 * pl[size_t(f.y0 + 1) * P + f.x0 + 1];
      out[c] += acc;
    }
  }
  return true;
}

// Adjoint of sample_triplane_point: scatters dfeat[C] into dplanes.
template <typename S>
inline void scatter_triplane_point(const TensorT<S>& planes, TensorT<S>& dplanes, const Mat3& rot,
                                   double extent, const Vec3& p_world, const S* dfeat) {
  Vec3 q = rot.apply(p_world);
  if (!point_in_cube(q, extent)) return;
  int C = planes.dim(1), P = planes.dim(2);
  long cpp = long(C) * P * P;
  long pp = long(P) * P;
  for (int k = 0; k < 3; ++k) {
    double u, v;
    plane_uv(k, q, extent, u, v);
    BilinearFoot f = bilinear_foot(P, P, u, v);
    if (!f.inside) continue;
    S w00 = S((1 - f.wx) * (1 - f.wy)), w10 = S(f.wx * (1 - f.wy));
    S w01 = S((1 - f.wx) * f.wy), w11 = S(f.wx * f.wy);
    S* base = &dplanes.data[size_t(k) * cpp];
    bool x1ok = f.x0 + 1 < P, y1ok = f.y0 + 1 < P;
    for (int c = 0; c < C; ++c) {
      S* pl = base + size_t(c) * pp;
      S g = dfeat[c];
      pl[size_t(f.y0) * P + f.x0] += g * w00;
      if (x1ok) pl[size_t(f.y0) * P + f.x0 + 1] += g * w10;
      if (y1ok) pl[size_t(f.y0 + 1) * P + f.x0] += g * w01;
      if (x1ok && y1ok) pl[size_t(f.y0 + 1) * P + f.x0 + 1] += g * w11;
    }
  }
}

}  // namespace tvf
