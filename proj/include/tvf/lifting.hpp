#pragma once

// Target-aware 2D-to-3D lifting: a convolutional encoder over the per-view
// latent image with self-attention and delta-conditioned cross-attention at
// the low resolution, upsampled to a tri-plane aligned with the input view.
// One parameter set is shared across all input views.

#include <vector>

#include "tvf/nn.hpp"
#include "tvf/synthetic.hpp"
#include "tvf/triplane.hpp"

namespace tvf {

struct LiftingConfig {
  int latent_size = 16;    // H' = W', also the plane resolution after the head
  int in_channels = 4;
  int model_dim = 32;
  int plane_channels = 8;  // C, density + payload
  double plane_extent = 1.0;

  int plane_res() const { return latent_size; }
};

inline ParamSet init_lifting_params(const LiftingConfig& cfg, Rng& rng) {
  if (cfg.latent_size % 2 != 0) throw Error("lifting: latent size must be even (one stride-2 level)");
  ParamSet ps;
  int d = cfg.model_dim;
  init_conv(ps, "lift.stem", d, cfg.in_channels, 3, rng);
  init_res_block(ps, "lift.res_hi_0", d, d, 0, rng);
  init_res_block(ps, "lift.res_hi_1", d, d, 0, rng);
  init_conv(ps, "lift.down", d, d, 3, rng);
  init_res_block(ps, "lift.res_lo_0", d, d, 0, rng);
  init_res_block(ps, "lift.res_lo_1", d, d, 0, rng);
  init_attn_block(ps, "lift.sattn", d, 0, rng);
  init_attn_block(ps, "lift.xattn", d, 4, rng);
  init_conv_t(ps, "lift.up", d, d, 4, rng);
  init_gn(ps, "lift.head_gn", d);
  init_conv(ps, "lift.head", 3 * cfg.plane_channels, d, 3, rng);
  return ps;
}

// Lifts one latent image into a tri-plane aligned with `frame`, conditioned
// on the view-to-target delta through cross-attention.
template <typename S>
TriPlaneVar<S> lift(Tape<S>& tape, const LiftingConfig& cfg, const BoundParams<S>& p, Var<S> latent,
                    Var<S> delta_embed4, const CameraPose& frame) {
  const auto& lv = tape.value(latent);
  if (lv.rank() != 3 || lv.dim(0) != cfg.in_channels || lv.dim(1) != cfg.latent_size ||
      lv.dim(2) != cfg.latent_size)
    throw Error("lift: latent shape mismatch, got " + lv.shape_str());
  Var<S> h = conv_fwd(p, "lift.stem", latent, 1, 1);
  h = res_block_fwd(p, "lift.res_hi_0", h);
  h = res_block_fwd(p, "lift.res_hi_1", h);
  h = conv_fwd(p, "lift.down", h, 2, 1);
  h = res_block_fwd(p, "lift.res_lo_0", h);
  h = res_block_fwd(p, "lift.res_lo_1", h);
  h = attn_block_fwd(p, "lift.sattn", h);
  h = attn_block_fwd(p, "lift.xattn", h, delta_embed4);
  h = conv_t_fwd(p, "lift.up", h, 2, 1);
  h = conv_fwd(p, "lift.head", silu(gn_fwd(p, "lift.head_gn", h)), 1, 1);
  int pr = cfg.plane_res();
  TriPlaneVar<S> tp;
  tp.planes = reshape(h, {3, cfg.plane_channels, pr, pr});
  tp.frame = frame;
  tp.extent = cfg.plane_extent;
  return tp;
}

// Lifts every input view with its own view-to-target delta, order preserved.
template <typename S>
std::vector<TriPlaneVar<S>> lift_all(Tape<S>& tape, const LiftingConfig& cfg, const BoundParams<S>& p,
                                     const std::vector<Var<S>>& latents,
                                     const std::vector<CameraPose>& poses, const CameraPose& target) {
  if (latents.empty()) throw Error("lift_all: empty view list");
  if (latents.size() != poses.size()) throw Error("lift_all: latent/pose count mismatch");
  std::vector<TriPlaneVar<S>> out;
  out.reserve(latents.size());
  for (size_t i = 0; i < latents.size(); ++i) {
    Var<S> d = delta_leaf(tape, embed_delta(view_delta(poses[i], target)));
    out.push_back(lift(tape, cfg, p, latents[i], d, poses[i]));
  }
  return out;
}

}  // namespace tvf
