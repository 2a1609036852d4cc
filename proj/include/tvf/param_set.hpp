#pragma once

#include <map>
#include <set>
#include <string>

#include "tvf/tape.hpp"
#include "tvf/tensor.hpp"

namespace tvf {

// Named parameter tensors with a trainable/frozen flag per entry. Storage is
// float32 (the checkpoint dtype); verification code casts to double.
template <typename S>
struct ParamSetT {
  struct Entry {
    TensorT<S> value;
    bool trainable = true;
  };
  std::map<std::string, Entry> entries;  // ordered: deterministic iteration

  void add(const std::string& name, TensorT<S> value, bool trainable = true) {
    if (entries.count(name)) throw Error("param set: duplicate name " + name);
    entries[name] = Entry{std::move(value), trainable};
  }

  bool has(const std::string& name) const { return entries.count(name) > 0; }

  TensorT<S>& value(const std::string& name) {
    auto it = entries.find(name);
    if (it == entries.end()) throw Error("param set: unknown name " + name);
    return it->second.value;
  }
  const TensorT<S>& value(const std::string& name) const {
    auto it = entries.find(name);
    if (it == entries.end()) throw Error("param set: unknown name " + name);
    return it->second.value;
  }

  void set_trainable(const std::string& prefix, bool trainable) {
    for (auto& [name, e] : entries)
      if (name.rfind(prefix, 0) == 0) e.trainable = trainable;
  }

  // Merge another set under its own names; duplicate names are an error.
  void absorb(const ParamSetT& other) {
    for (const auto& [name, e] : other.entries) add(name, e.value, e.trainable);
  }

  ParamSetT subset(const std::string& prefix) const {
    ParamSetT out;
    for (const auto& [name, e] : entries)
      if (name.rfind(prefix, 0) == 0) out.add(name, e.value, e.trainable);
    return out;
  }

  long total_scalars() const {
    long n = 0;
    for (const auto& [name, e] : entries) n += e.value.numel();
    return n;
  }

  template <typename T2>
  ParamSetT<T2> cast() const {
    ParamSetT<T2> out;
    for (const auto& [name, e] : entries) out.add(name, e.value.template cast<T2>(), e.trainable);
    return out;
  }
};

using ParamSet = ParamSetT<float>;
using ParamSetD = ParamSetT<double>;

// ---------------------------------------------------------------------------
// Tape binding
// ---------------------------------------------------------------------------

template <typename S>
struct BoundParams {
  Tape<S>* tape = nullptr;
  std::map<std::string, Var<S>> vars;
  std::set<std::string> trainable;

  Var<S> operator()(const std::string& name) const {
    auto it = vars.find(name);
    if (it == vars.end()) throw Error("bound params: unknown name " + name);
    return it->second;
  }
};

// Inserts every entry as a tape leaf. Trainable entries get gradients unless
// grad_mode is false (pure inference).
template <typename S, typename P>
BoundParams<S> bind_params(Tape<S>& tape, const ParamSetT<P>& ps, bool grad_mode = true) {
  BoundParams<S> out;
  out.tape = &tape;
  for (const auto& [name, e] : ps.entries) {
    TensorT<S> v = e.value.template cast<S>();
    out.vars[name] = tape.leaf(std::move(v), grad_mode && e.trainable);
    if (e.trainable) out.trainable.insert(name);
  }
  return out;
}

// d(loss)/d(param) for every trainable entry; frozen entries are absent.
template <typename S>
std::map<std::string, TensorT<S>> grad(Tape<S>& tape, Var<S> loss, const BoundParams<S>& bound) {
  tape.backward(loss);
  std::map<std::string, TensorT<S>> out;
  for (const auto& name : bound.trainable) out[name] = tape.grad(bound.vars.at(name));
  return out;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::map<std::string, Tensor> m, v;
  long step = 0;
};

// One Adam update over the trainable entries; frozen entries are untouched.
inline void opt_step(ParamSet& params, const std::map<std::string, Tensor>& grads, double lr, AdamState& state,
                     const AdamConfig& cfg = {}) {
  state.step += 1;
  double bc1 = 1.0 - std::pow(cfg.beta1, double(state.step));
  double bc2 = 1.0 - std::pow(cfg.beta2, double(state.step));
  for (auto& [name, e] : params.entries) {
    if (!e.trainable) continue;
    auto git = grads.find(name);
    if (git == grads.end()) throw Error("opt_step: missing gradient for trainable entry " + name);
    const Tensor& g = git->second;
    if (!g.same_shape(e.value)) throw Error("opt_step: gradient shape mismatch for " + name);
    Tensor& m = state.m.try_emplace(name, Tensor::zeros(e.value.shape)).first->second;
    Tensor& v = state.v.try_emplace(name, Tensor::zeros(e.value.shape)).first->second;
    for (long i = 0; i < g.numel(); ++i) {
      m[i] = float(cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i]);
      v[i] = float(cfg.beta2 * v[i] + (1.0 - cfg.beta2) * double(g[i]) * double(g[i]));
      double mhat = m[i] / bc1;
      double vhat = v[i] / bc2;
      e.value[i] = float(e.value[i] - lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
    check_finite("opt_step", e.value);
  }
}

// ---------------------------------------------------------------------------
// Finite-difference gradient oracle (verification mode: double precision).
// Central differences (f(p+eps)-f(p-eps))/(2 eps), compared per element
// against an analytic gradient map with denominator max(|a|,|b|,1e-8).
// ---------------------------------------------------------------------------

struct FdReport {
  double max_rel_err = 0.0;
  std::string worst_name;
  long worst_index = -1;
  long checked = 0;
};

inline FdReport fd_check(const std::function<double(const ParamSetD&)>& f, ParamSetD params,
                         const std::map<std::string, TensorD>& analytic, double eps) {
  if (!(eps > 0)) throw Error("fd_check: eps must be positive");
  FdReport rep;
  for (auto& [name, e] : params.entries) {
    if (!e.trainable) continue;
    auto ait = analytic.find(name);
    if (ait == analytic.end()) throw Error("fd_check: analytic gradient missing for " + name);
    const TensorD& ag = ait->second;
    for (long i = 0; i < e.value.numel(); ++i) {
      double orig = e.value[i];
      e.value[i] = orig + eps;
      double fp = f(params);
      e.value[i] = orig - eps;
      double fm = f(params);
      e.value[i] = orig;
      double fd = (fp - fm) / (2.0 * eps);
      double an = ag[i];
      double denom = std::max({std::abs(fd), std::abs(an), 1e-8});
      double rel = std::abs(fd - an) / denom;
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst_name = name;
        rep.worst_index = i;
      }
      ++rep.checked;
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Initializers
// ---------------------------------------------------------------------------

// Truncated normal (resample beyond 2 sigma), std 0.02 unless stated.
inline Tensor trunc_normal(std::vector<int> shape, Rng& rng, double std_dev = 0.02) {
  Tensor t(std::move(shape));
  for (long i = 0; i < t.numel(); ++i) {
    double z = rng.normal();
    while (std::abs(z) > 2.0) z = rng.normal();
    t[i] = float(z * std_dev);
  }
  return t;
}

}  // namespace tvf
