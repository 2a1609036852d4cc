#pragma once

// Desk-scale latent DDPM: a small UNet predicting the added noise from the
// noisy target latent concatenated with the main-view latent, conditioned on
// the main-to-target camera delta (cross-attention) and the timestep
// (sinusoidal embedding through an MLP). Decoder skip junctions accept
// additive residuals, which is where the injection module hooks in.

#include <functional>
#include <vector>

#include "tvf/nn.hpp"

namespace tvf {

struct NoiseSchedule {
  int steps = 100;                 // T
  std::vector<double> betas;       // betas[t-1] for t = 1..T
  std::vector<double> alpha_bars;  // alpha_bars[t] for t = 0..T, alpha_bar(0) = 1
};

// Strided subsample of the standard linear beta grid (1e-4 to 0.02 over 1000
// reference steps) so that short schedules still end in near-pure noise:
// beta_t = 1 - abar_ref(k_t) / abar_ref(k_{t-1}).
inline NoiseSchedule make_schedule(int steps = 100, double beta_start = 1e-4, double beta_end = 0.02,
                                   int ref_steps = 1000) {
  if (steps < 1 || steps > ref_steps) throw Error("schedule: steps must be in [1, ref_steps]");
  std::vector<double> abar_ref(size_t(ref_steps) + 1, 1.0);
  for (int i = 0; i < ref_steps; ++i) {
    double beta = beta_start + (beta_end - beta_start) * double(i) / double(ref_steps - 1);
    abar_ref[size_t(i) + 1] = abar_ref[size_t(i)] * (1.0 - beta);
  }
  NoiseSchedule s;
  s.steps = steps;
  s.alpha_bars.assign(size_t(steps) + 1, 1.0);
  for (int t = 1; t <= steps; ++t) {
    long k = long(t) * ref_steps / steps;
    long k_prev = long(t - 1) * ref_steps / steps;
    double beta = 1.0 - abar_ref[size_t(k)] / abar_ref[size_t(k_prev)];
    if (!(beta > 0.0 && beta < 1.0)) throw Error("schedule: beta out of (0,1)");
    s.betas.push_back(beta);
    s.alpha_bars[size_t(t)] = s.alpha_bars[size_t(t - 1)] * (1.0 - beta);
  }
  for (int t = 1; t <= steps; ++t)
    if (!(s.alpha_bars[size_t(t)] < s.alpha_bars[size_t(t - 1)])) throw Error("schedule: alpha_bar not decreasing");
  return s;
}

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
template <typename S>
TensorT<S> q_sample(const TensorT<S>& x0, int t, const TensorT<S>& eps, const NoiseSchedule& sched) {
  if (t < 1 || t > sched.steps) throw Error("q_sample: t out of [1, T]");
  if (!x0.same_shape(eps)) throw Error("q_sample: x0/eps shape mismatch");
  double ab = sched.alpha_bars[size_t(t)];
  S a = S(std::sqrt(ab)), b = S(std::sqrt(1.0 - ab));
  TensorT<S> out = x0;
  for (long i = 0; i < out.numel(); ++i) out[i] = a * x0[i] + b * eps[i];
  return out;
}

struct BackboneConfig {
  int latent_size = 16;
  int latent_channels = 4;
  int base_channels = 32;  // level-2 channels are 2 * base
  int time_dim = 64;

  int lo_channels() const { return 2 * base_channels; }
  // channel count of each decoder skip junction, stem to deepest
  std::vector<int> skip_channels() const {
    int b = base_channels, l = lo_channels();
    return {b, b, b, l, l, l};
  }
};

inline ParamSet init_backbone_params(const BackboneConfig& cfg, Rng& rng, const std::string& prefix = "backbone.") {
  if (cfg.latent_size % 2 != 0) throw Error("backbone: latent size must be even");
  ParamSet ps;
  int b = cfg.base_channels, l = cfg.lo_channels(), td = cfg.time_dim;
  init_linear(ps, prefix + "time.mlp1", td, td, rng);
  init_linear(ps, prefix + "time.mlp2", td, td, rng);
  init_conv(ps, prefix + "stem", b, 2 * cfg.latent_channels, 3, rng);
  init_res_block(ps, prefix + "enc_hi_0", b, b, td, rng);
  init_res_block(ps, prefix + "enc_hi_1", b, b, td, rng);
  init_conv(ps, prefix + "down", l, b, 3, rng);
  init_res_block(ps, prefix + "enc_lo_0", l, l, td, rng);
  init_res_block(ps, prefix + "enc_lo_1", l, l, td, rng);
  init_attn_block(ps, prefix + "xattn", l, 4, rng);
  init_res_block(ps, prefix + "mid", l, l, td, rng);
  init_res_block(ps, prefix + "dec_lo_0", 2 * l, l, td, rng);
  init_res_block(ps, prefix + "dec_lo_1", 2 * l, l, td, rng);
  init_res_block(ps, prefix + "dec_lo_2", 2 * l, l, td, rng);
  init_conv_t(ps, prefix + "up", l, b, 4, rng);
  init_res_block(ps, prefix + "dec_hi_0", 2 * b, b, td, rng);
  init_res_block(ps, prefix + "dec_hi_1", 2 * b, b, td, rng);
  init_res_block(ps, prefix + "dec_hi_2", 2 * b, b, td, rng);
  init_gn(ps, prefix + "out_gn", b);
  init_conv(ps, prefix + "out", cfg.latent_channels, b, 3, rng);
  return ps;
}

template <typename S>
Var<S> time_embedding_fwd(Tape<S>& tape, const BoundParams<S>& p, const std::string& prefix, int t,
                          int time_dim) {
  Var<S> sin = tape.leaf(sinusoidal_embedding<S>(t, time_dim), false);
  return linear_fwd(p, prefix + "time.mlp2", silu(linear_fwd(p, prefix + "time.mlp1", sin)));
}

// Shared by the backbone and the injection encoder clone: stem plus the two
// encoder levels with cross-attention on the camera delta. Returns all six
// per-stage outputs (the decoder skip junctions).
template <typename S>
std::vector<Var<S>> encoder_fwd(const BoundParams<S>& p, const std::string& prefix, Var<S> x, Var<S> t_emb,
                                Var<S> delta_embed4) {
  std::vector<Var<S>> s;
  s.push_back(conv_fwd(p, prefix + "stem", x, 1, 1));
  s.push_back(res_block_fwd(p, prefix + "enc_hi_0", s.back(), t_emb));
  s.push_back(res_block_fwd(p, prefix + "enc_hi_1", s.back(), t_emb));
  s.push_back(conv_fwd(p, prefix + "down", s.back(), 2, 1));
  s.push_back(res_block_fwd(p, prefix + "enc_lo_0", s.back(), t_emb));
  s.push_back(attn_block_fwd(p, prefix + "xattn", res_block_fwd(p, prefix + "enc_lo_1", s.back(), t_emb),
                             delta_embed4));
  return s;
}

// UNet forward. `residuals`, when present, must hold one tensor per decoder
// skip junction; each is added to its junction. Absent residuals are treated
// as zeros through the identical code path, so a zero residual list and no
// residual list produce bitwise-equal outputs.
template <typename S>
Var<S> predict_eps(Tape<S>& tape, const BackboneConfig& cfg, const BoundParams<S>& p,
                   const std::string& prefix, Var<S> x_t, int t, Var<S> main_latent, Var<S> delta_embed4,
                   const std::vector<Var<S>>* residuals = nullptr) {
  const auto& xv = tape.value(x_t);
  if (xv.rank() != 3 || xv.dim(0) != cfg.latent_channels) throw Error("predict_eps: bad x_t " + xv.shape_str());
  if (!tape.value(main_latent).same_shape(xv))
    throw Error("predict_eps: main latent shape mismatch " + tape.value(main_latent).shape_str());
  Var<S> t_emb = time_embedding_fwd(tape, p, prefix, t, cfg.time_dim);
  Var<S> x = concat_ch(x_t, main_latent);
  std::vector<Var<S>> skips = encoder_fwd(p, prefix, x, t_emb, delta_embed4);

  if (residuals && residuals->size() != skips.size())
    throw Error("predict_eps: want " + std::to_string(skips.size()) + " residuals, got " +
                std::to_string(residuals ? residuals->size() : 0));
  for (size_t i = 0; i < skips.size(); ++i) {
    Var<S> r;
    if (residuals) {
      r = (*residuals)[i];
      if (!tape.value(r).same_shape(tape.value(skips[i])))
        throw Error("predict_eps: residual " + std::to_string(i) + " shape mismatch: " +
                    tape.value(r).shape_str() + " vs " + tape.value(skips[i]).shape_str());
    } else {
      r = tape.leaf(TensorT<S>::zeros(tape.value(skips[i]).shape), false);
    }
    skips[i] = add(skips[i], r);
  }

  Var<S> h = res_block_fwd(p, prefix + "mid", skips[5], t_emb);
  h = res_block_fwd(p, prefix + "dec_lo_0", concat_ch(h, skips[5]), t_emb);
  h = res_block_fwd(p, prefix + "dec_lo_1", concat_ch(h, skips[4]), t_emb);
  h = res_block_fwd(p, prefix + "dec_lo_2", concat_ch(h, skips[3]), t_emb);
  h = conv_t_fwd(p, prefix + "up", h, 2, 1);
  h = res_block_fwd(p, prefix + "dec_hi_0", concat_ch(h, skips[2]), t_emb);
  h = res_block_fwd(p, prefix + "dec_hi_1", concat_ch(h, skips[1]), t_emb);
  h = res_block_fwd(p, prefix + "dec_hi_2", concat_ch(h, skips[0]), t_emb);
  return conv_fwd(p, prefix + "out", silu(gn_fwd(p, prefix + "out_gn", h)), 1, 1);
}

// eps-prediction MSE at a uniformly drawn timestep.
template <typename S>
Var<S> diffusion_loss(Tape<S>& tape, const BackboneConfig& cfg, const BoundParams<S>& p,
                      const std::string& prefix, const TensorT<S>& x0, const TensorT<S>& main_latent,
                      const std::array<double, 4>& delta4, const NoiseSchedule& sched, Rng& rng,
                      const std::vector<Var<S>>* residuals = nullptr) {
  int t = 1 + rng.uniform_int(sched.steps);
  TensorT<S> eps(x0.shape);
  for (long i = 0; i < eps.numel(); ++i) eps[i] = S(rng.normal());
  TensorT<S> xt = q_sample(x0, t, eps, sched);
  Var<S> xt_leaf = tape.leaf(std::move(xt), false);
  Var<S> main_leaf = tape.leaf(main_latent, false);
  Var<S> eps_hat = predict_eps(tape, cfg, p, prefix, xt_leaf, t, main_leaf, delta_leaf(tape, delta4),
                               residuals);
  return mse(eps_hat, tape.leaf(std::move(eps), false));
}

// Residual supplier for sampling with injected conditions.
using Injector = std::function<std::vector<Tensor>(const Tensor& x_t, int t)>;

// Ancestral DDPM sampling, deterministic given the rng seed. Parameters are
// bound once; per-step graph nodes are truncated away between steps.
inline Tensor ddpm_sample(const BackboneConfig& cfg, const ParamSet& params, const std::string& prefix,
                          const Tensor& main_latent, const std::array<double, 4>& delta4,
                          const NoiseSchedule& sched, Rng& rng, const Injector* injector = nullptr,
                          bool verbose = false) {
  Tensor x({cfg.latent_channels, cfg.latent_size, cfg.latent_size});
  for (long i = 0; i < x.numel(); ++i) x[i] = float(rng.normal());
  Tape<float> tape;
  BoundParams<float> p = bind_params(tape, params, /*grad_mode=*/false);
  const size_t mark = tape.size();
  for (int t = sched.steps; t >= 1; --t) {
    tape.truncate(mark);
    Var<float> xt = tape.leaf(x, false);
    Var<float> main = tape.leaf(main_latent, false);
    std::vector<Var<float>> res_vars;
    const std::vector<Var<float>>* res_ptr = nullptr;
    if (injector) {
      for (Tensor& r : (*injector)(x, t)) res_vars.push_back(tape.leaf(std::move(r), false));
      res_ptr = &res_vars;
    }
    Var<float> eps_hat = predict_eps(tape, cfg, p, prefix, xt, t, main, delta_leaf(tape, delta4), res_ptr);
    const Tensor& eh = tape.value(eps_hat);
    double beta = sched.betas[size_t(t - 1)];
    double ab_t = sched.alpha_bars[size_t(t)];
    double ab_prev = sched.alpha_bars[size_t(t - 1)];
    double inv_sqrt_alpha = 1.0 / std::sqrt(1.0 - beta);
    double eps_coef = beta / std::sqrt(1.0 - ab_t);
    double sigma = std::sqrt(beta * (1.0 - ab_prev) / (1.0 - ab_t));
    double mean_sq = 0;
    for (long i = 0; i < x.numel(); ++i) {
      double mean = inv_sqrt_alpha * (double(x[i]) - eps_coef * double(eh[i]));
      double z = (t > 1) ? rng.normal() : 0.0;
      x[i] = float(mean + sigma * z);
      mean_sq += double(x[i]) * double(x[i]);
    }
    check_finite("ddpm_sample", x);
    if (verbose)
      std::fprintf(stderr, "ddpm t=%3d beta=%.5f rms=%.4f\n", t, beta, std::sqrt(mean_sq / double(x.numel())));
  }
  return x;
}

}  // namespace tvf
