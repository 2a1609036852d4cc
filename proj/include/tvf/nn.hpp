#pragma once

// Shared network building blocks: convolution/linear/group-norm parameter
// initialization plus residual and attention block forwards used by the
// lifting network, the denoiser backbone and the injection encoder.

#include <string>

#include "tvf/param_set.hpp"

namespace tvf {

inline void init_conv(ParamSet& ps, const std::string& name, int oc, int ic, int k, Rng& rng) {
  ps.add(name + ".w", trunc_normal({oc, ic, k, k}, rng));
  ps.add(name + ".b", Tensor::zeros({oc}));
}

inline void init_conv_t(ParamSet& ps, const std::string& name, int ic, int oc, int k, Rng& rng) {
  ps.add(name + ".w", trunc_normal({ic, oc, k, k}, rng));
  ps.add(name + ".b", Tensor::zeros({oc}));
}

inline void init_linear(ParamSet& ps, const std::string& name, int din, int dout, Rng& rng) {
  ps.add(name + ".w", trunc_normal({din, dout}, rng));
  ps.add(name + ".b", Tensor::zeros({dout}));
}

inline void init_gn(ParamSet& ps, const std::string& name, int c) {
  ps.add(name + ".g", Tensor::full({c}, 1.0f));
  ps.add(name + ".b", Tensor::zeros({c}));
}

// time_dim == 0 -> plain residual block without time conditioning.
inline void init_res_block(ParamSet& ps, const std::string& prefix, int cin, int cout, int time_dim,
                           Rng& rng) {
  init_gn(ps, prefix + ".gn1", cin);
  init_conv(ps, prefix + ".conv1", cout, cin, 3, rng);
  if (time_dim > 0) init_linear(ps, prefix + ".temb", time_dim, cout, rng);
  init_gn(ps, prefix + ".gn2", cout);
  init_conv(ps, prefix + ".conv2", cout, cout, 3, rng);
  if (cin != cout) init_conv(ps, prefix + ".skip", cout, cin, 1, rng);
}

// ctx_dim == 0 -> self-attention; otherwise keys/values come from a learned
// linear embedding of a context vector (the 4-vector camera delta). The
// embedding emits two context tokens: softmax over a single key is the
// constant 1 and would starve the query/key path of gradient.
constexpr int kCtxTokens = 2;

inline void init_attn_block(ParamSet& ps, const std::string& prefix, int dim, int ctx_dim, Rng& rng) {
  init_gn(ps, prefix + ".gn", dim);
  init_linear(ps, prefix + ".q", dim, dim, rng);
  init_linear(ps, prefix + ".k", dim, dim, rng);
  init_linear(ps, prefix + ".v", dim, dim, rng);
  init_linear(ps, prefix + ".o", dim, dim, rng);
  if (ctx_dim > 0) init_linear(ps, prefix + ".ctx", ctx_dim, kCtxTokens * dim, rng);
}

template <typename S>
Var<S> conv_fwd(const BoundParams<S>& p, const std::string& prefix, Var<S> x, int stride, int pad) {
  return conv2d(x, p(prefix + ".w"), p(prefix + ".b"), stride, pad);
}

template <typename S>
Var<S> conv_t_fwd(const BoundParams<S>& p, const std::string& prefix, Var<S> x, int stride, int pad) {
  return conv_transpose2d(x, p(prefix + ".w"), p(prefix + ".b"), stride, pad);
}

template <typename S>
Var<S> linear_fwd(const BoundParams<S>& p, const std::string& prefix, Var<S> x) {
  return linear(x, p(prefix + ".w"), p(prefix + ".b"));
}

template <typename S>
Var<S> gn_fwd(const BoundParams<S>& p, const std::string& prefix, Var<S> x) {
  int c = x.tape->value(x).dim(0);
  return group_norm(x, p(prefix + ".g"), p(prefix + ".b"), pick_gn_groups(c));
}

// t_emb is a [1, time_dim] row or an invalid Var for unconditioned blocks.
template <typename S>
Var<S> res_block_fwd(const BoundParams<S>& p, const std::string& prefix, Var<S> x, Var<S> t_emb = {}) {
  Tape<S>& tape = *x.tape;
  int cin = tape.value(x).dim(0);
  Var<S> h = conv_fwd(p, prefix + ".conv1", silu(gn_fwd(p, prefix + ".gn1", x)), 1, 1);
  if (t_emb.valid()) {
    Var<S> tvec = linear_fwd(p, prefix + ".temb", silu(t_emb));
    int oc = tape.value(tvec).dim(1);
    h = add_channel_bias(h, reshape(tvec, {oc}));
  }
  h = conv_fwd(p, prefix + ".conv2", silu(gn_fwd(p, prefix + ".gn2", h)), 1, 1);
  int cout = tape.value(h).dim(0);
  Var<S> skip = (cin == cout) ? x : conv_fwd(p, prefix + ".skip", x, 1, 0);
  return add(h, skip);
}

// ctx is a [1, ctx_dim] row for cross-attention or an invalid Var for
// self-attention over the spatial tokens.
template <typename S>
Var<S> attn_block_fwd(const BoundParams<S>& p, const std::string& prefix, Var<S> x, Var<S> ctx = {}) {
  Tape<S>& tape = *x.tape;
  int C = tape.value(x).dim(0), H = tape.value(x).dim(1), W = tape.value(x).dim(2);
  Var<S> tokens = chw_to_nc(gn_fwd(p, prefix + ".gn", x));
  Var<S> q = linear_fwd(p, prefix + ".q", tokens);
  Var<S> kv_src = ctx.valid() ? reshape(linear_fwd(p, prefix + ".ctx", ctx), {kCtxTokens, C}) : tokens;
  Var<S> k = linear_fwd(p, prefix + ".k", kv_src);
  Var<S> v = linear_fwd(p, prefix + ".v", kv_src);
  Var<S> o = linear_fwd(p, prefix + ".o", attention(q, k, v));
  return add(x, nc_to_chw(o, H, W));
}

// Sinusoidal position features for a diffusion timestep, [1, dim].
template <typename S>
TensorT<S> sinusoidal_embedding(int t, int dim) {
  if (dim < 2 || dim % 2 != 0) throw Error("sinusoidal_embedding: dim must be even and >= 2");
  TensorT<S> out({1, dim});
  int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    double freq = std::exp(-std::log(10000.0) * double(i) / double(half > 1 ? half - 1 : 1));
    out[i] = S(std::sin(double(t) * freq));
    out[half + i] = S(std::cos(double(t) * freq));
  }
  return out;
}

// Camera delta 4-vector as a [1,4] tape row.
template <typename S>
Var<S> delta_leaf(Tape<S>& tape, const std::array<double, 4>& embed, bool needs_grad = false) {
  TensorT<S> t({1, 4});
  for (int i = 0; i < 4; ++i) t[i] = S(embed[size_t(i)]);
  return tape.leaf(std::move(t), needs_grad);
}

}  // namespace tvf
