#pragma once

// Target-view feature injection: a trainable clone of the backbone encoder
// consuming the fused target-view latent (and the noisy latent), emitting one
// residual per decoder skip junction through zero-initialized 1x1 links, so
// the full model starts exactly at the frozen backbone's behavior.

#include <vector>

#include "tvf/camera.hpp"
#include "tvf/diffusion.hpp"

namespace tvf {

struct InjectionConfig {
  BackboneConfig backbone;
  bool use_xt = true;  // condition on the noisy latent alongside f_t
};

// Clones the backbone encoder (weights copied bitwise), re-initializes the
// input stem for the f_t (+ x_t) channel count, and adds all-zero link layers.
inline ParamSet init_injection_from_backbone(const ParamSet& backbone_params, const InjectionConfig& cfg,
                                             Rng& rng, const std::string& backbone_prefix = "backbone.",
                                             const std::string& prefix = "inject.") {
  static const char* kClonedBlocks[] = {"time.mlp1", "time.mlp2", "enc_hi_0", "enc_hi_1", "down",
                                        "enc_lo_0",  "enc_lo_1",  "xattn"};
  ParamSet ps;
  for (const auto& [name, e] : backbone_params.entries) {
    if (name.rfind(backbone_prefix, 0) != 0) continue;
    std::string tail = name.substr(backbone_prefix.size());
    for (const char* block : kClonedBlocks) {
      std::string b(block);
      if (tail.rfind(b + ".", 0) == 0) {
        ps.add(prefix + tail, e.value, true);
        break;
      }
    }
  }
  int in_ch = cfg.backbone.latent_channels * (cfg.use_xt ? 2 : 1);
  init_conv(ps, prefix + "stem", cfg.backbone.base_channels, in_ch, 3, rng);
  std::vector<int> skip_ch = cfg.backbone.skip_channels();
  for (size_t i = 0; i < skip_ch.size(); ++i) {
    std::string link = prefix + "link" + std::to_string(i);
    ps.add(link + ".w", Tensor::zeros({skip_ch[i], skip_ch[i], 1, 1}));
    ps.add(link + ".b", Tensor::zeros({skip_ch[i]}));
  }
  return ps;
}

// Exact parameter count the clone must have, from config arithmetic alone.
inline long expected_injection_param_count(const InjectionConfig& cfg) {
  int b = cfg.backbone.base_channels, l = cfg.backbone.lo_channels(), td = cfg.backbone.time_dim;
  auto conv_n = [](int oc, int ic, int k) { return long(oc) * ic * k * k + oc; };
  auto lin_n = [](int din, int dout) { return long(din) * dout + dout; };
  auto res_n = [&](int cin, int cout) {
    long n = 2 * cin + conv_n(cout, cin, 3) + lin_n(td, cout) + 2 * cout + conv_n(cout, cout, 3);
    if (cin != cout) n += conv_n(cout, cin, 1);
    return n;
  };
  auto attn_n = [&](int dim, int ctx) {
    return 2l * dim + 4 * lin_n(dim, dim) + (ctx > 0 ? lin_n(ctx, kCtxTokens * dim) : 0);
  };
  long n = 2 * lin_n(td, td);                       // time MLP
  n += res_n(b, b) * 2 + conv_n(l, b, 3) + res_n(l, l) * 2 + attn_n(l, 4);
  n += conv_n(b, cfg.backbone.latent_channels * (cfg.use_xt ? 2 : 1), 3);  // fresh stem
  for (int c : cfg.backbone.skip_channels()) n += conv_n(c, c, 1);         // links
  return n;
}

// Runs the cloned encoder on f_t (optionally concatenated with x_t) and maps
// each stage output through its link layer. All residuals are exactly zero
// while the links are at their zero initialization.
template <typename S>
std::vector<Var<S>> compute_residuals(Tape<S>& tape, const InjectionConfig& cfg, const BoundParams<S>& p,
                                      Var<S> f_t, Var<S> x_t, int t, Var<S> delta_embed4,
                                      const std::string& prefix = "inject.") {
  const auto& fv = tape.value(f_t);
  if (fv.rank() != 3 || fv.dim(0) != cfg.backbone.latent_channels)
    throw Error("compute_residuals: bad f_t " + fv.shape_str());
  Var<S> t_emb = time_embedding_fwd(tape, p, prefix, t, cfg.backbone.time_dim);
  Var<S> x = cfg.use_xt ? concat_ch(f_t, x_t) : f_t;
  std::vector<Var<S>> stages = encoder_fwd(p, prefix, x, t_emb, delta_embed4);
  std::vector<Var<S>> residuals;
  for (size_t i = 0; i < stages.size(); ++i)
    residuals.push_back(conv_fwd(p, prefix + "link" + std::to_string(i), stages[i], 1, 0));
  return residuals;
}

// Mean residual magnitude as a function of the main-to-target azimuth delta.
// Diagnostic only; emitted as CSV (delta_deg, mean_residual_norm) by the CLI.
inline std::vector<double> gating_probe(const InjectionConfig& cfg, const ParamSet& params,
                                        const Tensor& f_t, const Tensor& x_t, int t,
                                        const std::vector<double>& delta_degs,
                                        const std::string& prefix = "inject.") {
  std::vector<double> mags;
  for (double deg : delta_degs) {
    Tape<float> tape;
    BoundParams<float> p = bind_params(tape, params, false);
    Var<float> fv = tape.leaf(f_t, false);
    Var<float> xv = tape.leaf(x_t, false);
    std::array<double, 4> d4 = embed_delta(ViewDelta{wrap_signed_angle(deg_to_rad(deg)), 0.0, 0.0});
    auto residuals = compute_residuals(tape, cfg, p, fv, xv, t, delta_leaf(tape, d4), prefix);
    double sq = 0;
    long n = 0;
    for (const auto& r : residuals) {
      const Tensor& rv = tape.value(r);
      for (long i = 0; i < rv.numel(); ++i) sq += double(rv[i]) * double(rv[i]);
      n += rv.numel();
    }
    mags.push_back(std::sqrt(sq / double(n)));
  }
  return mags;
}

}  // namespace tvf
