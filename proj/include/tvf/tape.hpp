#pragma once

// Reverse-mode autodiff over dense tensors. A Tape owns the nodes of one
// forward computation; ops append nodes with hand-derived backward closures.
// Execution is sequential and allocation-ordered, so gradient accumulation
// has a fixed reduction order and results are bitwise reproducible.

#include <cassert>
#include <cmath>
#include <cstring>
#include <functional>
#include <utility>
#include <vector>

#include "tvf/tensor.hpp"

namespace tvf {

template <typename S>
class Tape;

template <typename S>
struct Var {
  Tape<S>* tape = nullptr;
  int id = -1;
  bool valid() const { return tape != nullptr && id >= 0; }
};

template <typename S>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<S> leaf(TensorT<S> value, bool needs_grad = false) {
    check_finite("leaf", value);
    nodes_.push_back(Node{std::move(value), {}, needs_grad, nullptr});
    return Var<S>{this, int(nodes_.size()) - 1};
  }

  // Registers a computed node. `back` reads grad(self) and accumulates into
  // parent grads; it is dropped when no parent needs gradients.
  Var<S> emit(const char* op, TensorT<S> value, const std::vector<Var<S>>& parents,
              std::function<void(Tape&, int)> back) {
    check_finite(op, value);
    bool needs = false;
    for (const auto& p : parents) {
      assert(p.tape == this);
      needs = needs || nodes_[size_t(p.id)].needs_grad;
    }
    nodes_.push_back(Node{std::move(value), {}, needs, needs ? std::move(back) : nullptr});
    return Var<S>{this, int(nodes_.size()) - 1};
  }

  // References invalidate when further ops are appended; copy the tensor if
  // it must outlive subsequent tape activity.
  const TensorT<S>& value(Var<S> v) const { return nodes_[size_t(v.id)].value; }
  const TensorT<S>& value(int id) const { return nodes_[size_t(id)].value; }

  // Gradient of the last backward() target w.r.t. node v; zeros if none flowed.
  TensorT<S> grad(Var<S> v) const {
    const Node& n = nodes_[size_t(v.id)];
    if (n.grad.numel() > 0) return n.grad;
    return TensorT<S>::zeros(n.value.shape);
  }

  bool needs_grad(Var<S> v) const { return nodes_[size_t(v.id)].needs_grad; }

  void accum_grad(int id, const TensorT<S>& contribution) {
    Node& n = nodes_[size_t(id)];
    if (!n.needs_grad) return;
    if (n.grad.numel() == 0) n.grad = TensorT<S>::zeros(n.value.shape);
    if (!n.grad.same_shape(contribution)) throw Error("grad shape mismatch");
    for (long i = 0; i < contribution.numel(); ++i) n.grad[i] += contribution[i];
  }

  // Raw accumulate for ops that write parent grads in place.
  TensorT<S>& grad_buffer(int id) {
    Node& n = nodes_[size_t(id)];
    if (n.grad.numel() == 0) n.grad = TensorT<S>::zeros(n.value.shape);
    return n.grad;
  }

  void backward(Var<S> loss) {
    const Node& ln = nodes_[size_t(loss.id)];
    if (ln.value.numel() != 1) throw Error("backward: loss must be scalar, got " + ln.value.shape_str());
    for (Node& n : nodes_) n.grad = TensorT<S>{};
    if (!ln.needs_grad) return;  // nothing trainable feeds the loss
    grad_buffer(loss.id)[0] = S(1);
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[size_t(i)];
      if (n.back && n.grad.numel() > 0) n.back(*this, i);
    }
    for (const Node& n : nodes_) {
      if (n.grad.numel() > 0 && !n.grad.all_finite()) throw NumericError("backward: non-finite gradient");
    }
  }

  size_t size() const { return nodes_.size(); }

  // Drops nodes appended after `mark`, keeping earlier leaves (e.g. bound
  // parameters) alive. Lets iterative samplers reuse one tape per step.
  void truncate(size_t mark) {
    if (mark > nodes_.size()) throw Error("tape truncate beyond end");
    nodes_.resize(mark);
  }

 private:
  struct Node {
    TensorT<S> value;
    TensorT<S> grad;  // empty until touched by backward
    bool needs_grad = false;
    std::function<void(Tape&, int)> back;
  };
  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

template <typename S>
Var<S> add(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  const auto& av = t.value(a);
  const auto& bv = t.value(b);
  if (!av.same_shape(bv)) throw Error("add: shape mismatch " + av.shape_str() + " vs " + bv.shape_str());
  TensorT<S> out = av;
  for (long i = 0; i < out.numel(); ++i) out[i] += bv[i];
  int ai = a.id, bi = b.id;
  return t.emit("add", std::move(out), {a, b}, [ai, bi](Tape<S>& tp, int self) {
    const auto& g = tp.grad_buffer(self);
    if (tp.needs_grad(Var<S>{&tp, ai})) tp.accum_grad(ai, g);
    if (tp.needs_grad(Var<S>{&tp, bi})) tp.accum_grad(bi, g);
  });
}

template <typename S>
Var<S> sub(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  const auto& av = t.value(a);
  const auto& bv = t.value(b);
  if (!av.same_shape(bv)) throw Error("sub: shape mismatch " + av.shape_str() + " vs " + bv.shape_str());
  TensorT<S> out = av;
  for (long i = 0; i < out.numel(); ++i) out[i] -= bv[i];
  int ai = a.id, bi = b.id;
  return t.emit("sub", std::move(out), {a, b}, [ai, bi](Tape<S>& tp, int self) {
    const auto& g = tp.grad_buffer(self);
    if (tp.needs_grad(Var<S>{&tp, ai})) tp.accum_grad(ai, g);
    if (tp.needs_grad(Var<S>{&tp, bi})) {
      TensorT<S> neg = g;
      for (long i = 0; i < neg.numel(); ++i) neg[i] = -neg[i];
      tp.accum_grad(bi, neg);
    }
  });
}

template <typename S>
Var<S> mul(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  const auto& av = t.value(a);
  const auto& bv = t.value(b);
  if (!av.same_shape(bv)) throw Error("mul: shape mismatch " + av.shape_str() + " vs " + bv.shape_str());
  TensorT<S> out = av;
  for (long i = 0; i < out.numel(); ++i) out[i] *= bv[i];
  int ai = a.id, bi = b.id;
  return t.emit("mul", std::move(out), {a, b}, [ai, bi](Tape<S>& tp, int self) {
    const auto& g = tp.grad_buffer(self);
    const auto& av2 = tp.value(ai);
    const auto& bv2 = tp.value(bi);
    if (tp.needs_grad(Var<S>{&tp, ai})) {
      TensorT<S> da = g;
      for (long i = 0; i < da.numel(); ++i) da[i] *= bv2[i];
      tp.accum_grad(ai, da);
    }
    if (tp.needs_grad(Var<S>{&tp, bi})) {
      TensorT<S> db = g;
      for (long i = 0; i < db.numel(); ++i) db[i] *= av2[i];
      tp.accum_grad(bi, db);
    }
  });
}

template <typename S>
Var<S> scale(Var<S> a, double c) {
  Tape<S>& t = *a.tape;
  TensorT<S> out = t.value(a);
  for (long i = 0; i < out.numel(); ++i) out[i] = S(out[i] * S(c));
  int ai = a.id;
  return t.emit("scale", std::move(out), {a}, [ai, c](Tape<S>& tp, int self) {
    TensorT<S> g = tp.grad_buffer(self);
    for (long i = 0; i < g.numel(); ++i) g[i] = S(g[i] * S(c));
    tp.accum_grad(ai, g);
  });
}

template <typename S>
Var<S> silu(Var<S> a) {
  Tape<S>& t = *a.tape;
  const auto& av = t.value(a);
  TensorT<S> out = av;
  for (long i = 0; i < out.numel(); ++i) {
    S x = av[i];
    S s = S(1) / (S(1) + std::exp(-x));
    out[i] = x * s;
  }
  int ai = a.id;
  return t.emit("silu", std::move(out), {a}, [ai](Tape<S>& tp, int self) {
    const auto& g = tp.grad_buffer(self);
    const auto& av2 = tp.value(ai);
    TensorT<S> da = g;
    for (long i = 0; i < da.numel(); ++i) {
      S x = av2[i];
      S s = S(1) / (S(1) + std::exp(-x));
      da[i] = g[i] * (s + x * s * (S(1) - s));
    }
    tp.accum_grad(ai, da);
  });
}

template <typename S>
inline S softplus_scalar(S x) {
  if (x > S(30)) return x;
  if (x < S(-30)) return std::exp(x);
  return std::log1p(std::exp(x));
}

template <typename S>
inline S sigmoid_scalar(S x) {
  return S(1) / (S(1) + std::exp(-x));
}

template <typename S>
Var<S> softplus(Var<S> a) {
  Tape<S>& t = *a.tape;
  const auto& av = t.value(a);
  TensorT<S> out = av;
  for (long i = 0; i < out.numel(); ++i) out[i] = softplus_scalar(av[i]);
  int ai = a.id;
  return t.emit("softplus", std::move(out), {a}, [ai](Tape<S>& tp, int self) {
    const auto& g = tp.grad_buffer(self);
    const auto& av2 = tp.value(ai);
    TensorT<S> da = g;
    for (long i = 0; i < da.numel(); ++i) da[i] = g[i] * sigmoid_scalar(av2[i]);
    tp.accum_grad(ai, da);
  });
}

// ---------------------------------------------------------------------------
// Shape ops: explicit, never implicit broadcast
// ---------------------------------------------------------------------------

template <typename S>
Var<S> reshape(Var<S> a, std::vector<int> new_shape) {
  Tape<S>& t = *a.tape;
  const auto& av = t.value(a);
  if (TensorT<S>::numel_of(new_shape) != av.numel())
    throw Error("reshape: numel mismatch " + av.shape_str() + " -> " + shape_str(new_shape));
  TensorT<S> out(new_shape, av.data);
  int ai = a.id;
  std::vector<int> old_shape = av.shape;
  return t.emit("reshape", std::move(out), {a}, [ai, old_shape](Tape<S>& tp, int self) {
    TensorT<S> g(old_shape, tp.grad_buffer(self).data);
    tp.accum_grad(ai, g);
  });
}

// [C,H,W] -> token matrix [H*W, C]
template <typename S>
Var<S> chw_to_nc(Var<S> a) {
  Tape<S>& t = *a.tape;
  const auto& av = t.value(a);
  if (av.rank() != 3) throw Error("chw_to_nc: want rank-3, got " + av.shape_str());
  int C = av.dim(0), H = av.dim(1), W = av.dim(2);
  long N = long(H) * W;
  TensorT<S> out({int(N), C});
  for (int c = 0; c < C; ++c)
    for (long n = 0; n < N; ++n) out[n * C + c] = av[long(c) * N + n];
  int ai = a.id;
  return t.emit("chw_to_nc", std::move(out), {a}, [ai, C, H, W](Tape<S>& tp, int self) {
    const auto& g = tp.grad_buffer(self);
    long N = long(H) * W;
    TensorT<S> da({C, H, W});
    for (int c = 0; c < C; ++c)
      for (long n = 0; n < N; ++n) da[long(c) * N + n] = g[n * C + c];
    tp.accum_grad(ai, da);
  });
}

template <typename S>
Var<S> nc_to_chw(Var<S> a, int H, int W) {
  Tape<S>& t = *a.tape;
  const auto& av = t.value(a);
  if (av.rank() != 2 || av.dim(0) != H * W) throw Error("nc_to_chw: bad input " + av.shape_str());
  int C = av.dim(1);
  long N = long(H) * W;
  TensorT<S> out({C, H, W});
  for (int c = 0; c < C; ++c)
    for (long n = 0; n < N; ++n) out[long(c) * N + n] = av[n * C + c];
  int ai = a.id;
  return t.emit("nc_to_chw", std::move(out), {a}, [ai, C, H, W](Tape<S>& tp, int self) {
    const auto& g = tp.grad_buffer(self);
    long N = long(H) * W;
    TensorT<S> da({int(N), C});
    for (int c = 0; c < C; ++c)
      for (long n = 0; n < N; ++n) da[n * C + c] = g[long(c) * N + n];
    tp.accum_grad(ai, da);
  });
}

template <typename S>
Var<S> concat_ch(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  const auto& av = t.value(a);
  const auto& bv = t.value(b);
  if (av.rank() != 3 || bv.rank() != 3 || av.dim(1) != bv.dim(1) || av.dim(2) != bv.dim(2))
    throw Error("concat_ch: shape mismatch " + av.shape_str() + " vs " + bv.shape_str());
  int Ca = av.dim(0), Cb = bv.dim(0), H = av.dim(1), W = av.dim(2);
  TensorT<S> out({Ca + Cb, H, W});
  std::copy(av.data.begin(), av.data.end(), out.data.begin());
  std::copy(bv.data.begin(), bv.data.end(), out.data.begin() + av.numel());
  int ai = a.id, bi = b.id;
  return t.emit("concat_ch", std::move(out), {a, b}, [ai, bi, Ca, Cb, H, W](Tape<S>& tp, int self) {
    const auto& g = tp.grad_buffer(self);
    long hw = long(H) * W;
    if (tp.needs_grad(Var<S>{&tp, ai})) {
      TensorT<S> da({Ca, H, W});
      std::copy(g.data.begin(), g.data.begin() + Ca * hw, da.data.begin());
      tp.accum_grad(ai, da);
    }
    if (tp.needs_grad(Var<S>{&tp, bi})) {
      TensorT<S> db({Cb, H, W});
      std::copy(g.data.begin() + Ca * hw, g.data.end(), db.data.begin());
      tp.accum_grad(bi, db);
    }
  });
}

// Selects sub-plane k of a [K,C,P,P] stack -> [C,P,P].
template <typename S>
Var<S> select_plane(Var<S> a, int k) {
  Tape<S>& t = *a.tape;
  const auto& av = t.value(a);
  if (av.rank() != 4) throw Error("select_plane: want rank-4, got " + av.shape_str());
  int K = av.dim(0), C = av.dim(1), P = av.dim(2), Q = av.dim(3);
  if (k < 0 || k >= K) throw Error("select_plane: index out of range");
  long sz = long(C) * P * Q;
  TensorT<S> out({C, P, Q});
  std::copy(av.data.begin() + k * sz, av.data.begin() + (k + 1) * sz, out.data.begin());
  int ai = a.id;
  std::vector<int> full_shape = av.shape;
  return t.emit("select_plane", std::move(out), {a}, [ai, k, sz, full_shape](Tape<S>& tp, int self) {
    const auto& g = tp.grad_buffer(self);
    TensorT<S> da(full_shape);
    std::copy(g.data.begin(), g.data.end(), da.data.begin() + k * sz);
    tp.accum_grad(ai, da);
  });
}

// ---------------------------------------------------------------------------
// Bias adds (the explicit shape coercions the networks need)
// ---------------------------------------------------------------------------

// x[C,H,W] + b[C] per channel
template <typename S>
Var<S> add_channel_bias(Var<S> x, Var<S> b) {
  Tape<S>& t = *x.tape;
  const auto& xv = t.value(x);
  const auto& bv = t.value(b);
  if (xv.rank() != 3 || bv.rank() != 1 || bv.dim(0) != xv.dim(0))
    throw Error("add_channel_bias: shape mismatch " + xv.shape_str() + " vs " + bv.shape_str());
  int C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
  long hw = long(H) * W;
  TensorT<S> out = xv;
  for (int c = 0; c < C; ++c)
    for (long i = 0; i < hw; ++i) out[c * hw + i] += bv[c];
  int xi = x.id, bi = b.id;
  return t.emit("add_channel_bias", std::move(out), {x, b}, [xi, bi, C, hw](Tape<S>& tp, int self) {
    const auto& g = tp.grad_buffer(self);
    if (tp.needs_grad(Var<S>{&tp, xi})) tp.accum_grad(xi, g);
    if (tp.needs_grad(Var<S>{&tp, bi})) {
      TensorT<S> db({C});
      for (int c = 0; c < C; ++c) {
        S acc = 0;
        for (long i = 0; i < hw; ++i) acc += g[c * hw + i];
        db[c] = acc;
      }
      tp.accum_grad(bi, db);
    }
  });
}

// x[N,D] + b[D] per row
template <typename S>
Var<S> add_row_bias(Var<S> x, Var<S> b) {
  Tape<S>& t = *x.tape;
  const auto& xv = t.value(x);
  const auto& bv = t.value(b);
  if (xv.rank() != 2 || bv.rank() != 1 || bv.dim(0) != xv.dim(1))
    throw Error("add_row_bias: shape mismatch " + xv.shape_str() + " vs " + bv.shape_str());
  int N = xv.dim(0), D = xv.dim(1);
  TensorT<S> out = xv;
  for (int n = 0; n < N; ++n)
    for (int d = 0; d < D; ++d) out[long(n) * D + d] += bv[d];
  int xi = x.id, bi = b.id;
  return t.emit("add_row_bias", std::move(out), {x, b}, [xi, bi, N, D](Tape<S>& tp, int self) {
    const auto& g = tp.grad_buffer(self);
    if (tp.needs_grad(Var<S>{&tp, xi})) tp.accum_grad(xi, g);
    if (tp.needs_grad(Var<S>{&tp, bi})) {
      TensorT<S> db({D});
      for (int n = 0; n < N; ++n)
        for (int d = 0; d < D; ++d) db[d] += g[long(n) * D + d];
      tp.accum_grad(bi, db);
    }
  });
}

// ---------------------------------------------------------------------------
// Matrix multiply
// ---------------------------------------------------------------------------

namespace detail {

// Valid output range [lo, hi] so that ox*stride + k - pad lands in [0, n).
inline void conv_span(int out_n, int in_n, int k, int stride, int pad, int& lo, int& hi) {
  lo = 0;
  while (lo < out_n && lo * stride + k - pad < 0) ++lo;
  hi = out_n - 1;
  while (hi >= lo && hi * stride + k - pad >= in_n) --hi;
}

// Eight-chain unit-stride dot product: FP reductions do not auto-vectorize
// under strict math, so break the dependency chain by hand.
template <typename S>
inline S dot_unit(const S* a, const S* b, int n) {
  S acc0 = 0, acc1 = 0, acc2 = 0, acc3 = 0, acc4 = 0, acc5 = 0, acc6 = 0, acc7 = 0;
  int i = 0;
  for (; i + 8 <= n; i += 8) {
    acc0 += a[i] * b[i];
    acc1 += a[i + 1] * b[i + 1];
    acc2 += a[i + 2] * b[i + 2];
    acc3 += a[i + 3] * b[i + 3];
    acc4 += a[i + 4] * b[i + 4];
    acc5 += a[i + 5] * b[i + 5];
    acc6 += a[i + 6] * b[i + 6];
    acc7 += a[i + 7] * b[i + 7];
  }
  for (; i < n; ++i) acc0 += a[i] * b[i];
  return ((acc0 + acc1) + (acc2 + acc3)) + ((acc4 + acc5) + (acc6 + acc7));
}

}  // namespace detail


template <typename S>
Var<S> matmul(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  const auto& av = t.value(a);
  const auto& bv = t.value(b);
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0))
    throw Error("matmul: shape mismatch " + av.shape_str() + " vs " + bv.shape_str());
  int M = av.dim(0), K = av.dim(1), N = bv.dim(1);
  TensorT<S> out({M, N});
  for (int m = 0; m < M; ++m) {
    S* orow = &out.data[size_t(m) * N];
    for (int k = 0; k < K; ++k) {
      S aval = av[long(m) * K + k];
      const S* brow = &bv.data[size_t(k) * N];
      for (int n = 0; n < N; ++n) orow[n] += aval * brow[n];
    }
  }
  int ai = a.id, bi = b.id;
  return t.emit("matmul", std::move(out), {a, b}, [ai, bi, M, K, N](Tape<S>& tp, int self) {
    const auto& g = tp.grad_buffer(self);
    const auto& av2 = tp.value(ai);
    const auto& bv2 = tp.value(bi);
    if (tp.needs_grad(Var<S>{&tp, ai})) {
      TensorT<S> da({M, K});  // dA = G * B^T
      for (int m = 0; m < M; ++m)
        for (int k = 0; k < K; ++k) {
          const S* grow = &g.data[size_t(m) * N];
          const S* brow = &bv2.data[size_t(k) * N];
          da[long(m) * K + k] = detail::dot_unit(grow, brow, N);
        }
      tp.accum_grad(ai, da);
    }
    if (tp.needs_grad(Var<S>{&tp, bi})) {
      TensorT<S> db({K, N});  // dB = A^T * G
      for (int m = 0; m < M; ++m) {
        const S* grow = &g.data[size_t(m) * N];
        for (int k = 0; k < K; ++k) {
          S aval = av2[long(m) * K + k];
          S* drow = &db.data[size_t(k) * N];
          for (int n = 0; n < N; ++n) drow[n] += aval * grow[n];
        }
      }
      tp.accum_grad(bi, db);
    }
  });
}

// a[M,K] * b[N,K]^T -> [M,N]
template <typename S>
Var<S> matmul_nt(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  const auto& av = t.value(a);
  const auto& bv = t.value(b);
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(1))
    throw Error("matmul_nt: shape mismatch " + av.shape_str() + " vs " + bv.shape_str());
  int M = av.dim(0), K = av.dim(1), N = bv.dim(0);
  TensorT<S> out({M, N});
  for (int m = 0; m < M; ++m)
    for (int n = 0; n < N; ++n) {
      const S* arow = &av.data[size_t(m) * K];
      const S* brow = &bv.data[size_t(n) * K];
      out[long(m) * N + n] = detail::dot_unit(arow, brow, K);
    }
  int ai = a.id, bi = b.id;
  return t.emit("matmul_nt", std::move(out), {a, b}, [ai, bi, M, K, N](Tape<S>& tp, int self) {
    const auto& g = tp.grad_buffer(self);
    const auto& av2 = tp.value(ai);
    const auto& bv2 = tp.value(bi);
    if (tp.needs_grad(Var<S>{&tp, ai})) {
      TensorT<S> da({M, K});  // dA = G * B
      for (int m = 0; m < M; ++m)
        for (int n = 0; n < N; ++n) {
          S gv = g[long(m) * N + n];
          const S* brow = &bv2.data[size_t(n) * K];
          S* drow = &da.data[size_t(m) * K];
          for (int k = 0; k < K; ++k) drow[k] += gv * brow[k];
        }
      tp.accum_grad(ai, da);
    }
    if (tp.needs_grad(Var<S>{&tp, bi})) {
      TensorT<S> db({N, K});  // dB = G^T * A
      for (int m = 0; m < M; ++m)
        for (int n = 0; n < N; ++n) {
          S gv = g[long(m) * N + n];
          const S* arow = &av2.data[size_t(m) * K];
          S* drow = &db.data[size_t(n) * K];
          for (int k = 0; k < K; ++k) drow[k] += gv * arow[k];
        }
      tp.accum_grad(bi, db);
    }
  });
}

// ---------------------------------------------------------------------------
// Convolutions, x[C,H,W]
// ---------------------------------------------------------------------------

namespace detail {

// Unrolls x[C,H,W] into col[C*KH*KW, OH*OW] with zero padding; the conv then
// runs as long contiguous row operations instead of overhead-bound 3x3 loops.
template <typename S>
void im2col(const TensorT<S>& x, int KH, int KW, int OH, int OW, int stride, int pad,
            std::vector<S>& col) {
  int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  long ohw = long(OH) * OW;
  col.assign(size_t(C) * KH * KW * ohw, S(0));
  for (int ic = 0; ic < C; ++ic) {
    const S* xplane = &x.data[size_t(ic) * H * W];
    for (int ky = 0; ky < KH; ++ky)
      for (int kx = 0; kx < KW; ++kx) {
        S* crow_base = &col[size_t((size_t(ic) * KH + ky) * KW + kx) * ohw];
        int lo, hi;
        conv_span(OW, W, kx, stride, pad, lo, hi);
        for (int oy = 0; oy < OH; ++oy) {
          int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= H) continue;
          const S* xrow = xplane + size_t(iy) * W + kx - pad;
          S* crow = crow_base + size_t(oy) * OW;
          if (stride == 1) {
            for (int ox = lo; ox <= hi; ++ox) crow[ox] = xrow[ox];
          } else {
            for (int ox = lo; ox <= hi; ++ox) crow[ox] = xrow[ox * stride];
          }
        }
      }
  }
}

// Adjoint of im2col: scatters dcol back into dx.
template <typename S>
void col2im(const std::vector<S>& dcol, int KH, int KW, int OH, int OW, int stride, int pad,
            TensorT<S>& dx) {
  int C = dx.dim(0), H = dx.dim(1), W = dx.dim(2);
  long ohw = long(OH) * OW;
  for (int ic = 0; ic < C; ++ic) {
    S* xplane = &dx.data[size_t(ic) * H * W];
    for (int ky = 0; ky < KH; ++ky)
      for (int kx = 0; kx < KW; ++kx) {
        const S* crow_base = &dcol[size_t((size_t(ic) * KH + ky) * KW + kx) * ohw];
        int lo, hi;
        conv_span(OW, W, kx, stride, pad, lo, hi);
        for (int oy = 0; oy < OH; ++oy) {
          int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= H) continue;
          S* xrow = xplane + size_t(iy) * W + kx - pad;
          const S* crow = crow_base + size_t(oy) * OW;
          if (stride == 1) {
            for (int ox = lo; ox <= hi; ++ox) xrow[ox] += crow[ox];
          } else {
            for (int ox = lo; ox <= hi; ++ox) xrow[ox * stride] += crow[ox];
          }
        }
      }
  }
}

}  // namespace detail

template <typename S>
Var<S> conv2d(Var<S> x, Var<S> w, Var<S> b, int stride, int pad) {
  Tape<S>& t = *x.tape;
  const auto& xv = t.value(x);
  const auto& wv = t.value(w);
  const auto& bv = t.value(b);
  if (xv.rank() != 3 || wv.rank() != 4 || wv.dim(1) != xv.dim(0) || bv.rank() != 1 || bv.dim(0) != wv.dim(0))
    throw Error("conv2d: shape mismatch x" + xv.shape_str() + " w" + wv.shape_str() + " b" + bv.shape_str());
  int C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
  int OC = wv.dim(0), KH = wv.dim(2), KW = wv.dim(3);
  int OH = (H + 2 * pad - KH) / stride + 1;
  int OW = (W + 2 * pad - KW) / stride + 1;
  if (OH <= 0 || OW <= 0) throw Error("conv2d: empty output for x" + xv.shape_str());
  const int K = C * KH * KW;
  const long ohw = long(OH) * OW;
  std::vector<S> col;
  detail::im2col(xv, KH, KW, OH, OW, stride, pad, col);
  TensorT<S> out({OC, OH, OW});
  for (int oc = 0; oc < OC; ++oc) {
    S* orow = &out.data[size_t(oc) * ohw];
    for (long i = 0; i < ohw; ++i) orow[i] = bv[oc];
    const S* wrow = &wv.data[size_t(oc) * K];
    for (int k = 0; k < K; ++k) {
      S wval = wrow[k];
      const S* crow = &col[size_t(k) * ohw];
      for (long i = 0; i < ohw; ++i) orow[i] += wval * crow[i];
    }
  }
  int xi = x.id, wi = w.id, bi = b.id;
  return t.emit("conv2d", std::move(out), {x, w, b},
                [xi, wi, bi, C, H, W, OC, KH, KW, OH, OW, stride, pad](Tape<S>& tp, int self) {
    const auto& g = tp.grad_buffer(self);
    const auto& xv2 = tp.value(xi);
    const auto& wv2 = tp.value(wi);
    bool need_x = tp.needs_grad(Var<S>{&tp, xi});
    bool need_w = tp.needs_grad(Var<S>{&tp, wi});
    bool need_b = tp.needs_grad(Var<S>{&tp, bi});
    const int K = C * KH * KW;
    const long ohw = long(OH) * OW;
    std::vector<S> col;
    if (need_w) detail::im2col(xv2, KH, KW, OH, OW, stride, pad, col);
    if (need_b) {
      TensorT<S> db({OC});
      for (int oc = 0; oc < OC; ++oc) {
        const S* grow = &g.data[size_t(oc) * ohw];
        S acc0 = 0, acc1 = 0;
        long i = 0;
        for (; i + 2 <= ohw; i += 2) {
          acc0 += grow[i];
          acc1 += grow[i + 1];
        }
        for (; i < ohw; ++i) acc0 += grow[i];
        db[oc] = acc0 + acc1;
      }
      tp.accum_grad(bi, db);
    }
    if (need_w) {
      TensorT<S> dw({OC, C, KH, KW});
      for (int oc = 0; oc < OC; ++oc) {
        const S* grow = &g.data[size_t(oc) * ohw];
        S* dwrow = &dw.data[size_t(oc) * K];
        for (int k = 0; k < K; ++k)
          dwrow[k] = detail::dot_unit(grow, &col[size_t(k) * ohw], int(ohw));
      }
      tp.accum_grad(wi, dw);
    }
    if (need_x) {
      std::vector<S> dcol(size_t(K) * ohw, S(0));
      for (int oc = 0; oc < OC; ++oc) {
        const S* grow = &g.data[size_t(oc) * ohw];
        const S* wrow = &wv2.data[size_t(oc) * K];
        for (int k = 0; k < K; ++k) {
          S wval = wrow[k];
          S* drow = &dcol[size_t(k) * ohw];
          for (long i = 0; i < ohw; ++i) drow[i] += wval * grow[i];
        }
      }
      TensorT<S> dx = TensorT<S>::zeros({C, H, W});
      detail::col2im(dcol, KH, KW, OH, OW, stride, pad, dx);
      tp.accum_grad(xi, dx);
    }
  });
}

// Transposed conv, w[C_in, C_out, KH, KW]; OH = (H-1)*stride - 2*pad + KH.
template <typename S>
Var<S> conv_transpose2d(Var<S> x, Var<S> w, Var<S> b, int stride, int pad) {
  Tape<S>& t = *x.tape;
  const auto& xv = t.value(x);
  const auto& wv = t.value(w);
  const auto& bv = t.value(b);
  if (xv.rank() != 3 || wv.rank() != 4 || wv.dim(0) != xv.dim(0) || bv.rank() != 1 || bv.dim(0) != wv.dim(1))
    throw Error("conv_transpose2d: shape mismatch x" + xv.shape_str() + " w" + wv.shape_str() + " b" +
                bv.shape_str());
  int C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
  int OC = wv.dim(1), KH = wv.dim(2), KW = wv.dim(3);
  int OH = (H - 1) * stride - 2 * pad + KH;
  int OW = (W - 1) * stride - 2 * pad + KW;
  if (OH <= 0 || OW <= 0) throw Error("conv_transpose2d: empty output");
  const long ihw = long(H) * W;
  // out viewed as the input-gradient of a conv: accumulate per-tap planes,
  // then scatter with col2im (input coordinates play the conv's output role)
  std::vector<S> taps(size_t(OC) * KH * KW * ihw, S(0));
  for (int ic = 0; ic < C; ++ic) {
    const S* xplane = &xv.data[size_t(ic) * ihw];
    const S* wrow = &wv.data[size_t(ic) * OC * KH * KW];
    for (long k = 0; k < long(OC) * KH * KW; ++k) {
      S wval = wrow[k];
      if (wval == S(0)) continue;
      S* trow = &taps[size_t(k) * ihw];
      for (long i = 0; i < ihw; ++i) trow[i] += wval * xplane[i];
    }
  }
  TensorT<S> out({OC, OH, OW});
  for (int oc = 0; oc < OC; ++oc) {
    S* oplane = &out.data[size_t(oc) * OH * OW];
    for (long i = 0; i < long(OH) * OW; ++i) oplane[i] = bv[oc];
  }
  detail::col2im(taps, KH, KW, H, W, stride, pad, out);
  int xi = x.id, wi = w.id, bi = b.id;
  return t.emit("conv_transpose2d", std::move(out), {x, w, b},
                [xi, wi, bi, C, H, W, OC, KH, KW, OH, OW, stride, pad](Tape<S>& tp, int self) {
    const auto& g = tp.grad_buffer(self);
    const auto& xv2 = tp.value(xi);
    const auto& wv2 = tp.value(wi);
    bool need_x = tp.needs_grad(Var<S>{&tp, xi});
    bool need_w = tp.needs_grad(Var<S>{&tp, wi});
    bool need_b = tp.needs_grad(Var<S>{&tp, bi});
    const long ihw = long(H) * W;
    if (need_b) {
      TensorT<S> db({OC});
      for (int oc = 0; oc < OC; ++oc) {
        const S* grow = &g.data[size_t(oc) * OH * OW];
        S acc0 = 0, acc1 = 0;
        long i = 0;
        for (; i + 2 <= long(OH) * OW; i += 2) {
          acc0 += grow[i];
          acc1 += grow[i + 1];
        }
        for (; i < long(OH) * OW; ++i) acc0 += grow[i];
        db[oc] = acc0 + acc1;
      }
      tp.accum_grad(bi, db);
    }
    if (need_x || need_w) {
      // colg[(oc,ky,kx)][ihw]: the output gradient gathered at each tap
      std::vector<S> colg;
      detail::im2col(g, KH, KW, H, W, stride, pad, colg);
      if (need_x) {
        TensorT<S> dx({C, H, W});
        for (int ic = 0; ic < C; ++ic) {
          S* dxplane = &dx.data[size_t(ic) * ihw];
          const S* wrow = &wv2.data[size_t(ic) * OC * KH * KW];
          for (long k = 0; k < long(OC) * KH * KW; ++k) {
            S wval = wrow[k];
            if (wval == S(0)) continue;
            const S* crow = &colg[size_t(k) * ihw];
            for (long i = 0; i < ihw; ++i) dxplane[i] += wval * crow[i];
          }
        }
        tp.accum_grad(xi, dx);
      }
      if (need_w) {
        TensorT<S> dw({C, OC, KH, KW});
        for (int ic = 0; ic < C; ++ic) {
          const S* xplane = &xv2.data[size_t(ic) * ihw];
          S* dwrow = &dw.data[size_t(ic) * OC * KH * KW];
          for (long k = 0; k < long(OC) * KH * KW; ++k)
            dwrow[k] = detail::dot_unit(xplane, &colg[size_t(k) * ihw], int(ihw));
        }
        tp.accum_grad(wi, dw);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Group normalization, x[C,H,W], affine per channel
// ---------------------------------------------------------------------------

inline int pick_gn_groups(int channels) {
  for (int g : {8, 4, 2}) {
    if (channels % g == 0 && channels >= g) return g;
  }
  return 1;
}

template <typename S>
Var<S> group_norm(Var<S> x, Var<S> gamma, Var<S> beta, int groups, double eps = 1e-5) {
  Tape<S>& t = *x.tape;
  const auto& xv = t.value(x);
  const auto& gv = t.value(gamma);
  const auto& bv = t.value(beta);
  if (xv.rank() != 3 || gv.rank() != 1 || gv.dim(0) != xv.dim(0) || bv.rank() != 1 || bv.dim(0) != xv.dim(0))
    throw Error("group_norm: shape mismatch x" + xv.shape_str() + " gamma" + gv.shape_str());
  int C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
  if (groups <= 0 || C % groups != 0) throw Error("group_norm: groups must divide channels");
  long hw = long(H) * W;
  int cpg = C / groups;
  long gsz = cpg * hw;
  TensorT<S> out({C, H, W});
  std::vector<S> mean(size_t(groups), S(0));
  std::vector<S> inv_std(size_t(groups), S(0));
  for (int g = 0; g < groups; ++g) {
    const S* base = &xv.data[size_t(g) * gsz];
    S m = 0;
    for (long i = 0; i < gsz; ++i) m += base[i];
    m /= S(gsz);
    S var = 0;
    for (long i = 0; i < gsz; ++i) {
      S d = base[i] - m;
      var += d * d;
    }
    var /= S(gsz);
    mean[size_t(g)] = m;
    inv_std[size_t(g)] = S(1) / std::sqrt(var + S(eps));
  }
  for (int c = 0; c < C; ++c) {
    int g = c / cpg;
    S m = mean[size_t(g)], is = inv_std[size_t(g)];
    const S* xrow = &xv.data[size_t(c) * hw];
    S* orow = &out.data[size_t(c) * hw];
    for (long i = 0; i < hw; ++i) orow[i] = (xrow[i] - m) * is * gv[c] + bv[c];
  }
  int xi = x.id, gi = gamma.id, bi = beta.id;
  return t.emit("group_norm", std::move(out), {x, gamma, beta},
                [xi, gi, bi, C, H, W, groups, mean, inv_std](Tape<S>& tp, int self) {
    const auto& g = tp.grad_buffer(self);
    const auto& xv2 = tp.value(xi);
    const auto& gv2 = tp.value(gi);
    long hw = long(H) * W;
    int cpg = C / groups;
    long gsz = cpg * hw;
    bool need_x = tp.needs_grad(Var<S>{&tp, xi});
    if (tp.needs_grad(Var<S>{&tp, gi}) || tp.needs_grad(Var<S>{&tp, bi})) {
      TensorT<S> dgamma({C}), dbeta({C});
      for (int c = 0; c < C; ++c) {
        int grp = c / cpg;
        S m = mean[size_t(grp)], is = inv_std[size_t(grp)];
        const S* xrow = &xv2.data[size_t(c) * hw];
        const S* grow = &g.data[size_t(c) * hw];
        S dg = 0, db = 0;
        for (long i = 0; i < hw; ++i) {
          dg += grow[i] * (xrow[i] - m) * is;
          db += grow[i];
        }
        dgamma[c] = dg;
        dbeta[c] = db;
      }
      tp.accum_grad(gi, dgamma);
      tp.accum_grad(bi, dbeta);
    }
    if (need_x) {
      TensorT<S> dx({C, H, W});
      for (int grp = 0; grp < groups; ++grp) {
        S m = mean[size_t(grp)], is = inv_std[size_t(grp)];
        // dxhat = g * gamma (per channel); dx = is*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
        S sum_dxhat = 0, sum_dxhat_xhat = 0;
        for (int cc = 0; cc < cpg; ++cc) {
          int c = grp * cpg + cc;
          const S* xrow = &xv2.data[size_t(c) * hw];
          const S* grow = &g.data[size_t(c) * hw];
          for (long i = 0; i < hw; ++i) {
            S xhat = (xrow[i] - m) * is;
            S dxhat = grow[i] * gv2[c];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
          }
        }
        S mean_dxhat = sum_dxhat / S(gsz);
        S mean_dxhat_xhat = sum_dxhat_xhat / S(gsz);
        for (int cc = 0; cc < cpg; ++cc) {
          int c = grp * cpg + cc;
          const S* xrow = &xv2.data[size_t(c) * hw];
          const S* grow = &g.data[size_t(c) * hw];
          S* dxrow = &dx.data[size_t(c) * hw];
          for (long i = 0; i < hw; ++i) {
            S xhat = (xrow[i] - m) * is;
            S dxhat = grow[i] * gv2[c];
            dxrow[i] = is * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
          }
        }
      }
      tp.accum_grad(xi, dx);
    }
  });
}

// ---------------------------------------------------------------------------
// Softmax over rows of [N,D]
// ---------------------------------------------------------------------------

template <typename S>
Var<S> softmax_rows(Var<S> x) {
  Tape<S>& t = *x.tape;
  const auto& xv = t.value(x);
  if (xv.rank() != 2) throw Error("softmax: want rank-2, got " + xv.shape_str());
  int N = xv.dim(0), D = xv.dim(1);
  TensorT<S> out({N, D});
  for (int n = 0; n < N; ++n) {
    const S* xrow = &xv.data[size_t(n) * D];
    S* orow = &out.data[size_t(n) * D];
    S mx = xrow[0];
    for (int d = 1; d < D; ++d) mx = std::max(mx, xrow[d]);
    S sum = 0;
    for (int d = 0; d < D; ++d) {
      orow[d] = std::exp(xrow[d] - mx);
      sum += orow[d];
    }
    for (int d = 0; d < D; ++d) orow[d] /= sum;
  }
  int xi = x.id;
  return t.emit("softmax", std::move(out), {x}, [xi, N, D](Tape<S>& tp, int self) {
    const auto& g = tp.grad_buffer(self);
    const auto& yv = tp.value(self);
    TensorT<S> dx({N, D});
    for (int n = 0; n < N; ++n) {
      const S* yrow = &yv.data[size_t(n) * D];
      const S* grow = &g.data[size_t(n) * D];
      S dot = 0;
      for (int d = 0; d < D; ++d) dot += grow[d] * yrow[d];
      S* drow = &dx.data[size_t(n) * D];
      for (int d = 0; d < D; ++d) drow[d] = yrow[d] * (grow[d] - dot);
    }
    tp.accum_grad(xi, dx);
  });
}

// ---------------------------------------------------------------------------
// Bilinear grid sample, plane[C,P,Q], uv[N,2] in [-1,1]^2 (align-corners,
// zeros outside). Differentiable w.r.t. plane values and uv.
// ---------------------------------------------------------------------------

struct BilinearFoot {
  int x0 = 0, y0 = 0;
  double wx = 0, wy = 0;  // fractional weights toward x0+1 / y0+1
  bool inside = false;
};

// Shared between the tape op and the fused renderer so both sample the same way.
inline BilinearFoot bilinear_foot(int P, int Q, double u, double v) {
  BilinearFoot f;
  if (u < -1.0 || u > 1.0 || v < -1.0 || v > 1.0) return f;
  double x = (u + 1.0) * 0.5 * double(Q - 1);
  double y = (v + 1.0) * 0.5 * double(P - 1);
  f.x0 = int(std::floor(x));
  f.y0 = int(std::floor(y));
  f.wx = x - double(f.x0);
  f.wy = y - double(f.y0);
  f.inside = true;
  return f;
}

template <typename S>
Var<S> grid_sample(Var<S> plane, Var<S> uv) {
  Tape<S>& t = *plane.tape;
  const auto& pv = t.value(plane);
  const auto& uvv = t.value(uv);
  if (pv.rank() != 3 || uvv.rank() != 2 || uvv.dim(1) != 2)
    throw Error("grid_sample: shape mismatch plane" + pv.shape_str() + " uv" + uvv.shape_str());
  int C = pv.dim(0), P = pv.dim(1), Q = pv.dim(2);
  int N = uvv.dim(0);
  long pq = long(P) * Q;
  TensorT<S> out({N, C});
  for (int n = 0; n < N; ++n) {
    BilinearFoot f = bilinear_foot(P, Q, double(uvv[n * 2]), double(uvv[n * 2 + 1]));
    if (!f.inside) continue;
    S w00 = S((1 - f.wx) * (1 - f.wy)), w10 = S(f.wx * (1 - f.wy));
    S w01 = S((1 - f.wx) * f.wy), w11 = S(f.wx * f.wy);
    for (int c = 0; c < C; ++c) {
      const S* pl = &pv.data[size_t(c) * pq];
      S acc = 0;
      auto texel = [&](int yy, int xx) -> S {
        return (xx >= 0 && xx < Q && yy >= 0 && yy < P) ? pl[size_t(yy) * Q + xx] : S(0);
      };
      acc += w00 * texel(f.y0, f.x0);
      acc += w10 * texel(f.y0, f.x0 + 1);
      acc += w01 * texel(f.y0 + 1, f.x0);
      acc += w11 * texel(f.y0 + 1, f.x0 + 1);
      out[long(n) * C + c] = acc;
    }
  }
  int pi = plane.id, ui = uv.id;
  return t.emit("grid_sample", std::move(out), {plane, uv}, [pi, ui, C, P, Q, N](Tape<S>& tp, int self) {
    const auto& g = tp.grad_buffer(self);
    const auto& pv2 = tp.value(pi);
    const auto& uvv2 = tp.value(ui);
    long pq = long(P) * Q;
    bool need_p = tp.needs_grad(Var<S>{&tp, pi});
    bool need_uv = tp.needs_grad(Var<S>{&tp, ui});
    TensorT<S> dp = need_p ? TensorT<S>::zeros({C, P, Q}) : TensorT<S>{};
    TensorT<S> duv = need_uv ? TensorT<S>::zeros({N, 2}) : TensorT<S>{};
    for (int n = 0; n < N; ++n) {
      BilinearFoot f = bilinear_foot(P, Q, double(uvv2[n * 2]), double(uvv2[n * 2 + 1]));
      if (!f.inside) continue;
      S w00 = S((1 - f.wx) * (1 - f.wy)), w10 = S(f.wx * (1 - f.wy));
      S w01 = S((1 - f.wx) * f.wy), w11 = S(f.wx * f.wy);
      auto in_bounds = [&](int yy, int xx) { return xx >= 0 && xx < Q && yy >= 0 && yy < P; };
      S du_acc = 0, dv_acc = 0;
      for (int c = 0; c < C; ++c) {
        S gv = g[long(n) * C + c];
        if (gv == S(0)) continue;
        const S* pl = &pv2.data[size_t(c) * pq];
        auto texel = [&](int yy, int xx) -> S { return in_bounds(yy, xx) ? pl[size_t(yy) * Q + xx] : S(0); };
        if (need_p) {
          S* dpl = &dp.data[size_t(c) * pq];
          if (in_bounds(f.y0, f.x0)) dpl[size_t(f.y0) * Q + f.x0] += gv * w00;
          if (in_bounds(f.y0, f.x0 + 1)) dpl[size_t(f.y0) * Q + f.x0 + 1] += gv * w10;
          if (in_bounds(f.y0 + 1, f.x0)) dpl[size_t(f.y0 + 1) * Q + f.x0] += gv * w01;
          if (in_bounds(f.y0 + 1, f.x0 + 1)) dpl[size_t(f.y0 + 1) * Q + f.x0 + 1] += gv * w11;
        }
        if (need_uv) {
          S v00 = texel(f.y0, f.x0), v10 = texel(f.y0, f.x0 + 1);
          S v01 = texel(f.y0 + 1, f.x0), v11 = texel(f.y0 + 1, f.x0 + 1);
          S dval_dx = S((1 - f.wy)) * (v10 - v00) + S(f.wy) * (v11 - v01);
          S dval_dy = S((1 - f.wx)) * (v01 - v00) + S(f.wx) * (v11 - v10);
          du_acc += gv * dval_dx;
          dv_acc += gv * dval_dy;
        }
      }
      if (need_uv) {
        duv[long(n) * 2 + 0] = du_acc * S(0.5 * double(Q - 1));
        duv[long(n) * 2 + 1] = dv_acc * S(0.5 * double(P - 1));
      }
    }
    if (need_p) tp.accum_grad(pi, dp);
    if (need_uv) tp.accum_grad(ui, duv);
  });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename S>
Var<S> mean_square(Var<S> x) {
  Tape<S>& t = *x.tape;
  const auto& xv = t.value(x);
  long n = xv.numel();
  S acc = 0;
  for (long i = 0; i < n; ++i) acc += xv[i] * xv[i];
  TensorT<S> out = TensorT<S>::scalar(acc / S(n));
  int xi = x.id;
  return t.emit("mean_square", std::move(out), {x}, [xi, n](Tape<S>& tp, int self) {
    S gv = tp.grad_buffer(self)[0];
    const auto& xv2 = tp.value(xi);
    TensorT<S> dx(xv2.shape);
    S k = S(2) * gv / S(n);
    for (long i = 0; i < n; ++i) dx[i] = k * xv2[i];
    tp.accum_grad(xi, dx);
  });
}

template <typename S>
Var<S> mse(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  const auto& av = t.value(a);
  const auto& bv = t.value(b);
  if (!av.same_shape(bv)) throw Error("mse: shape mismatch " + av.shape_str() + " vs " + bv.shape_str());
  long n = av.numel();
  S acc = 0;
  for (long i = 0; i < n; ++i) {
    S d = av[i] - bv[i];
    acc += d * d;
  }
  TensorT<S> out = TensorT<S>::scalar(acc / S(n));
  int ai = a.id, bi = b.id;
  return t.emit("mse", std::move(out), {a, b}, [ai, bi, n](Tape<S>& tp, int self) {
    S gv = tp.grad_buffer(self)[0];
    const auto& av2 = tp.value(ai);
    const auto& bv2 = tp.value(bi);
    S k = S(2) * gv / S(n);
    if (tp.needs_grad(Var<S>{&tp, ai})) {
      TensorT<S> da(av2.shape);
      for (long i = 0; i < n; ++i) da[i] = k * (av2[i] - bv2[i]);
      tp.accum_grad(ai, da);
    }
    if (tp.needs_grad(Var<S>{&tp, bi})) {
      TensorT<S> db(bv2.shape);
      for (long i = 0; i < n; ++i) db[i] = -k * (av2[i] - bv2[i]);
      tp.accum_grad(bi, db);
    }
  });
}

// ---------------------------------------------------------------------------
// Composites
// ---------------------------------------------------------------------------

// x[N,Din] * w[Din,Dout] + b[Dout]
template <typename S>
Var<S> linear(Var<S> x, Var<S> w, Var<S> b) {
  return add_row_bias(matmul(x, w), b);
}

// Scaled dot-product attention: softmax(q k^T / sqrt(D)) v.
// q[N,D], k[M,D], v[M,Dv] -> [N,Dv]; covers self- and cross-attention.
template <typename S>
Var<S> attention(Var<S> q, Var<S> k, Var<S> v) {
  const auto& qv = q.tape->value(q);
  Var<S> logits = scale(matmul_nt(q, k), 1.0 / std::sqrt(double(qv.dim(1))));
  return matmul(softmax_rows(logits), v);
}

}  // namespace tvf
