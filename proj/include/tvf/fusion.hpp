#pragma once

// Composited volume rendering of multiple tri-planes into a target-view
// latent: sample points along target rays, query every input tri-plane,
// aggregate per point with cosine azimuth weights, decode density, integrate
// with the volume rendering equation, project to 4 channels with a learned
// 1x1 readout. Implemented as one fused tape node with a hand-derived
// backward pass over tri-plane values and the readout (verified by fd_check).

#include <iostream>
#include <memory>
#include <vector>

#include "tvf/camera.hpp"
#include "tvf/triplane.hpp"

namespace tvf {

struct FusionConfig {
  int samples_per_ray = 32;
  double fov_deg = 50.0;
  bool decode_before_aggregate = false;  // experimental alternative ordering
  bool uniform_weights = false;          // ablation hook, bypasses Eq. weighting
};

// lambda_i = (cos d_theta + 1) / 2
inline double view_weight(double d_theta) { return (std::cos(d_theta) + 1.0) / 2.0; }

// Normalized to sum 1; all-zero input (every view exactly opposite the
// target) falls back to uniform weights with a warning.
inline std::vector<double> normalize_weights(const std::vector<double>& lambdas) {
  if (lambdas.empty()) throw Error("normalize_weights: empty weight list");
  double sum = 0;
  for (double l : lambdas) sum += l;
  std::vector<double> out(lambdas.size());
  if (sum <= 0.0) {
    std::cerr << "warning: all view weights are zero, falling back to uniform weights\n";
    for (auto& w : out) w = 1.0 / double(lambdas.size());
    return out;
  }
  for (size_t i = 0; i < lambdas.size(); ++i) out[i] = lambdas[i] / sum;
  return out;
}

// f_p = sum_i w_i f_i over rows of features[n,C]; weights must sum to 1.
template <typename S>
TensorT<S> aggregate_point(const TensorT<S>& features, const std::vector<double>& weights_norm) {
  if (features.rank() != 2 || size_t(features.dim(0)) != weights_norm.size())
    throw Error("aggregate_point: shape mismatch " + features.shape_str());
  double sum = 0;
  for (double w : weights_norm) sum += w;
  if (std::abs(sum - 1.0) > 1e-6) throw Error("aggregate_point: weights must sum to 1");
  int n = features.dim(0), c = features.dim(1);
  TensorT<S> out({c});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j) out[j] += S(weights_norm[size_t(i)]) * features[long(i) * c + j];
  return out;
}

// Discrete volume rendering quadrature:
//   alpha_j = 1 - exp(-sigma_j delta_j), T_j = prod_{k<j} (1 - alpha_k),
//   out = sum T_j alpha_j payload_j.  Also reports opacity = sum T_j alpha_j.
template <typename S>
TensorT<S> integrate_ray(const TensorT<S>& sigmas, const TensorT<S>& payloads, const TensorT<S>& deltas,
                         S* opacity_out = nullptr) {
  if (sigmas.rank() != 1 || deltas.rank() != 1 || payloads.rank() != 2 || payloads.dim(0) != sigmas.dim(0) ||
      deltas.dim(0) != sigmas.dim(0))
    throw Error("integrate_ray: shape mismatch");
  int steps = sigmas.dim(0), c = payloads.dim(1);
  TensorT<S> out({c});
  S transmittance = 1;
  S opacity = 0;
  for (int j = 0; j < steps; ++j) {
    S alpha = S(1) - std::exp(-sigmas[j] * deltas[j]);
    S w = transmittance * alpha;
    for (int k = 0; k < c; ++k) out[k] += w * payloads[long(j) * c + k];
    opacity += w;
    transmittance *= S(1) - alpha;
  }
  if (opacity_out) *opacity_out = opacity;
  return out;
}

// ---------------------------------------------------------------------------
// Fused render node
// ---------------------------------------------------------------------------

template <typename S>
struct FusedRender {
  Var<S> latent;       // [4, H, W]
  TensorT<S> opacity;  // [H, W], diagnostic only
  CameraPose target_pose;
};

namespace detail {

template <typename S>
struct RenderPlan {
  RayBatch rays;
  std::vector<Mat3> rotations;
  std::vector<double> extents;
  std::vector<S> weights;  // normalized per-view weights
  FusionConfig cfg;
  int height = 0, width = 0, payload_ch = 0, feat_ch = 0;
  bool jitter = false;
  uint64_t jitter_seed = 0;
};

// One pixel's forward march. When stash pointers are given, per-sample
// quantities are recorded for the adjoint pass.
template <typename S>
void march_pixel(const RenderPlan<S>& plan, const std::vector<const TensorT<S>*>& planes, long pix,
                 S* out_integral /*payload_ch*/, S* out_opacity, std::vector<S>* stash_feat,
                 std::vector<S>* stash_per_view_sigma_in, std::vector<Vec3>* stash_points,
                 std::vector<S>* stash_alpha, S* stash_seg) {
  const int n_views = int(planes.size());
  const int C = plan.feat_ch;
  const int pc = plan.payload_ch;
  const int steps = plan.cfg.samples_per_ray;
  for (int k = 0; k < pc; ++k) out_integral[k] = 0;
  *out_opacity = 0;
  double t0, t1;
  const Vec3& o = plan.rays.origins[size_t(pix)];
  const Vec3& d = plan.rays.directions[size_t(pix)];
  if (!ray_cube_intersect(o, d, 1.0, t0, t1)) {
    if (stash_seg) *stash_seg = S(-1);
    return;
  }
  t0 = std::max(t0, plan.rays.near);
  t1 = std::min(t1, plan.rays.far);
  if (t1 <= t0) {
    if (stash_seg) *stash_seg = S(-1);
    return;
  }
  double dt = (t1 - t0) / double(steps);
  if (stash_seg) *stash_seg = S(dt);
  Rng jrng(mix_seed(plan.jitter_seed, uint64_t(pix)));
  S transmittance = 1;
  std::vector<S> q(size_t(n_views) * C);
  for (int j = 0; j < steps; ++j) {
    double off = plan.jitter ? jrng.u01() : 0.5;
    double t = t0 + (double(j) + off) * dt;
    Vec3 p = o + d * t;
    std::fill(q.begin(), q.end(), S(0));
    for (int i = 0; i < n_views; ++i)
      sample_triplane_point(*planes[size_t(i)], plan.rotations[size_t(i)], plan.extents[size_t(i)], p,
                            &q[size_t(i) * C]);
    S sigma, payload[64];
    if (plan.cfg.decode_before_aggregate) {
      sigma = 0;
      for (int k = 0; k < pc; ++k) payload[k] = 0;
      for (int i = 0; i < n_views; ++i) {
        const S* qi = &q[size_t(i) * C];
        sigma += plan.weights[size_t(i)] * softplus_scalar(qi[0]);
        for (int k = 0; k < pc; ++k) payload[k] += plan.weights[size_t(i)] * qi[1 + k];
      }
    } else {
      S f[64];
      for (int k = 0; k < C; ++k) {
        S acc = 0;
        for (int i = 0; i < n_views; ++i) acc += plan.weights[size_t(i)] * q[size_t(i) * C + k];
        f[k] = acc;
      }
      sigma = softplus_scalar(f[0]);
      for (int k = 0; k < pc; ++k) payload[k] = f[1 + k];
      if (stash_feat) (*stash_feat)[size_t(j)] = f[0];
    }
    if (stash_per_view_sigma_in && plan.cfg.decode_before_aggregate)
      for (int i = 0; i < n_views; ++i) (*stash_per_view_sigma_in)[size_t(j) * n_views + i] = q[size_t(i) * C];
    if (stash_points) (*stash_points)[size_t(j)] = p;
    S alpha = S(1) - std::exp(-sigma * S(dt));
    if (stash_alpha) (*stash_alpha)[size_t(j)] = alpha;
    S w = transmittance * alpha;
    for (int k = 0; k < pc; ++k) out_integral[k] += w * payload[k];
    *out_opacity += w;
    transmittance *= S(1) - alpha;
  }
}

}  // namespace detail

// Renders n tri-planes into a target-view latent. Differentiable w.r.t. all
// tri-plane values and the readout weight/bias; poses and sample positions
// are treated as constants.
template <typename S>
FusedRender<S> render_fused(Tape<S>& tape, const std::vector<TriPlaneVar<S>>& tps, const CameraPose& target,
                            const FusionConfig& cfg, Var<S> readout_w, Var<S> readout_b, int height,
                            int width, bool training_jitter = false, uint64_t jitter_seed = 0) {
  if (tps.empty()) throw Error("render_fused: empty tri-plane list");
  if (cfg.samples_per_ray < 2) throw Error("render_fused: samples_per_ray must be >= 2");
  const auto& wv = tape.value(readout_w);
  const auto& bv = tape.value(readout_b);
  const TensorT<S>& planes0 = tape.value(tps[0].planes);
  check_triplane_shape(planes0);
  const int C = planes0.dim(1);
  const int pc = C - 1;
  if (pc > 63) throw Error("render_fused: payload channel limit exceeded");
  if (wv.rank() != 2 || wv.dim(0) != 4 || wv.dim(1) != pc || bv.rank() != 1 || bv.dim(0) != 4)
    throw Error("render_fused: readout shape mismatch w" + wv.shape_str() + " b" + bv.shape_str());

  auto plan = std::make_shared<detail::RenderPlan<S>>();
  plan->rays = target_rays(target, height, width, cfg.fov_deg);
  plan->cfg = cfg;
  plan->height = height;
  plan->width = width;
  plan->feat_ch = C;
  plan->payload_ch = pc;
  plan->jitter = training_jitter;
  plan->jitter_seed = jitter_seed;
  std::vector<double> lambdas;
  for (const auto& tp : tps) {
    const TensorT<S>& pv = tape.value(tp.planes);
    check_triplane_shape(pv);
    if (pv.dim(1) != C) throw Error("render_fused: tri-plane channel mismatch");
    plan->rotations.push_back(pose_frame_rotation(tp.frame));
    plan->extents.push_back(tp.extent);
    lambdas.push_back(cfg.uniform_weights ? 1.0 : view_weight(view_delta(tp.frame, target).d_theta));
  }
  for (double w : normalize_weights(lambdas)) plan->weights.push_back(S(w));

  std::vector<const TensorT<S>*> plane_ptrs;
  std::vector<int> plane_ids;
  std::vector<Var<S>> parents;
  for (const auto& tp : tps) {
    plane_ptrs.push_back(&tape.value(tp.planes));
    plane_ids.push_back(tp.planes.id);
    parents.push_back(tp.planes);
  }
  parents.push_back(readout_w);
  parents.push_back(readout_b);

  const long hw = long(height) * width;
  auto integrals = std::make_shared<TensorT<S>>(TensorT<S>::zeros({int(hw), pc}));
  TensorT<S> opacity({height, width});
  TensorT<S> out({4, height, width});
  for (long pix = 0; pix < hw; ++pix) {
    S op = 0;
    detail::march_pixel<S>(*plan, plane_ptrs, pix, &(*integrals)[pix * pc], &op, nullptr, nullptr, nullptr,
                           nullptr, nullptr);
    opacity[pix] = op;
    for (int c = 0; c < 4; ++c) {
      S acc = bv[c];
      for (int k = 0; k < pc; ++k) acc += wv[long(c) * pc + k] * (*integrals)[pix * pc + k];
      out[long(c) * hw + pix] = acc;
    }
  }

  int w_id = readout_w.id, b_id = readout_b.id;
  Var<S> latent = tape.emit(
      "render_fused", std::move(out), parents,
      [plan, plane_ids, w_id, b_id, integrals](Tape<S>& tp, int self) {
        const TensorT<S>& g = tp.grad_buffer(self);
        const int n_views = int(plane_ids.size());
        const int C = plan->feat_ch;
        const int pc = plan->payload_ch;
        const int steps = plan->cfg.samples_per_ray;
        const long hw = long(plan->height) * plan->width;
        const TensorT<S>& wv = tp.value(w_id);
        std::vector<const TensorT<S>*> planes;
        std::vector<TensorT<S>> dplanes;
        bool any_plane_grad = false;
        for (int i = 0; i < n_views; ++i) {
          planes.push_back(&tp.value(plane_ids[size_t(i)]));
          dplanes.push_back(TensorT<S>::zeros(planes.back()->shape));
          any_plane_grad = any_plane_grad || tp.needs_grad(Var<S>{&tp, plane_ids[size_t(i)]});
        }
        TensorT<S> dw = TensorT<S>::zeros({4, pc});
        TensorT<S> db = TensorT<S>::zeros({4});
        std::vector<S> stash_feat(size_t(steps), S(0));
        std::vector<S> stash_pv(size_t(steps) * size_t(n_views), S(0));
        std::vector<Vec3> stash_points(size_t(steps), Vec3{});
        std::vector<S> stash_alpha(size_t(steps), S(0));
        std::vector<S> integral(size_t(pc), S(0));
        std::vector<S> dfeat(size_t(pc), S(0));
        std::vector<S> dq(size_t(C), S(0));
        for (long pix = 0; pix < hw; ++pix) {
          // readout backward
          S dpix[4];
          for (int c = 0; c < 4; ++c) dpix[c] = g[long(c) * hw + pix];
          for (int c = 0; c < 4; ++c) {
            db[c] += dpix[c];
            for (int k = 0; k < pc; ++k) dw[long(c) * pc + k] += dpix[c] * (*integrals)[pix * pc + k];
          }
          if (!any_plane_grad) continue;
          for (int k = 0; k < pc; ++k) {
            S acc = 0;
            for (int c = 0; c < 4; ++c) acc += wv[long(c) * pc + k] * dpix[c];
            dfeat[size_t(k)] = acc;
          }
          // recompute march with stashes
          S op = 0, seg = 0;
          detail::march_pixel(*plan, planes, pix, integral.data(), &op, &stash_feat, &stash_pv, &stash_points,
                              &stash_alpha, &seg);
          if (seg < 0) continue;  // ray missed the cube
          S dt = seg;
          // prefix transmittance T_j = prod_{k<j}(1 - alpha_k)
          std::vector<S> T(size_t(steps) + 1);
          T[0] = 1;
          for (int j = 0; j < steps; ++j) T[size_t(j) + 1] = T[size_t(j)] * (S(1) - stash_alpha[size_t(j)]);
          // adjoint of the compositing recurrence, back to front
          S dT_next = 0;
          std::vector<S> q(size_t(n_views) * C);
          for (int j = steps - 1; j >= 0; --j) {
            const Vec3& p = stash_points[size_t(j)];
            std::fill(q.begin(), q.end(), S(0));
            for (int i = 0; i < n_views; ++i)
              sample_triplane_point(*planes[size_t(i)], plan->rotations[size_t(i)], plan->extents[size_t(i)],
                                    p, &q[size_t(i) * C]);
            // payload channels pass through decoding unchanged in both modes
            S payload[64];
            for (int k = 0; k < pc; ++k) {
              S acc = 0;
              for (int i = 0; i < n_views; ++i) acc += plan->weights[size_t(i)] * q[size_t(i) * C + 1 + k];
              payload[k] = acc;
            }
            S alpha = stash_alpha[size_t(j)];
            S Tj = T[size_t(j)];
            S gdotc = 0;
            for (int k = 0; k < pc; ++k) gdotc += dfeat[size_t(k)] * payload[k];
            S dalpha = Tj * gdotc - dT_next * Tj;
            S dTj = dT_next * (S(1) - alpha) + alpha * gdotc;
            dT_next = dTj;
            // d sigma: alpha = 1 - exp(-sigma dt)
            S exp_term = S(1) - alpha;
            S dsigma = dalpha * dt * exp_term;
            // distribute into per-view feature grads
            for (int i = 0; i < n_views; ++i) {
              S wgt = plan->weights[size_t(i)];
              if (plan->cfg.decode_before_aggregate) {
                dq[0] = dsigma * wgt * sigmoid_scalar(stash_pv[size_t(j) * n_views + i]);
              } else {
                dq[0] = dsigma * wgt * sigmoid_scalar(stash_feat[size_t(j)]);
              }
              for (int k = 0; k < pc; ++k) dq[size_t(1 + k)] = Tj * alpha * dfeat[size_t(k)] * wgt;
              scatter_triplane_point(*planes[size_t(i)], dplanes[size_t(i)], plan->rotations[size_t(i)],
                                     plan->extents[size_t(i)], p, dq.data());
            }
          }
        }
        for (int i = 0; i < n_views; ++i) tp.accum_grad(plane_ids[size_t(i)], dplanes[size_t(i)]);
        tp.accum_grad(w_id, dw);
        tp.accum_grad(b_id, db);
      });

  FusedRender<S> fr;
  fr.latent = latent;
  fr.opacity = std::move(opacity);
  fr.target_pose = target;
  return fr;
}

}  // namespace tvf
