#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <vector>

#include "tvf/common.hpp"

namespace tvf {

// Dense row-major tensor. float for training, double for gradient
// verification; the whole op stack is templated on the scalar type.
template <typename S>
struct TensorT {
  std::vector<int> shape;
  std::vector<S> data;

  TensorT() = default;
  explicit TensorT(std::vector<int> sh) : shape(std::move(sh)), data(size_t(numel_of(shape)), S(0)) {}
  TensorT(std::vector<int> sh, std::vector<S> d) : shape(std::move(sh)), data(std::move(d)) {
    if (long(data.size()) != numel_of(shape)) throw Error("tensor: data size does not match shape " + shape_str());
  }

  static long numel_of(const std::vector<int>& sh) {
    long n = 1;
    for (int d : sh) {
      if (d <= 0) throw Error("tensor: non-positive dimension");
      n *= d;
    }
    return n;
  }

  static TensorT zeros(std::vector<int> sh) { return TensorT(std::move(sh)); }

  static TensorT full(std::vector<int> sh, S v) {
    TensorT t(std::move(sh));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }

  static TensorT scalar(S v) { return TensorT({1}, {v}); }

  long numel() const { return long(data.size()); }

  int dim(int i) const { return shape[size_t(i)]; }
  int rank() const { return int(shape.size()); }

  S& operator[](long i) { return data[size_t(i)]; }
  const S& operator[](long i) const { return data[size_t(i)]; }

  bool same_shape(const TensorT& o) const { return shape == o.shape; }

  std::string shape_str() const {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << "]";
    return os.str();
  }

  template <typename T2>
  TensorT<T2> cast() const {
    TensorT<T2> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (size_t i = 0; i < data.size(); ++i) out.data[i] = T2(data[i]);
    return out;
  }

  bool all_finite() const {
    for (S v : data)
      if (!std::isfinite(double(v))) return false;
    return true;
  }
};

using Tensor = TensorT<float>;
using TensorD = TensorT<double>;

template <typename S>
inline void check_finite(const char* op, const TensorT<S>& t) {
  if (!t.all_finite()) throw NumericError(std::string(op) + ": non-finite value in output " + t.shape_str());
}

inline std::string shape_str(const std::vector<int>& sh) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < sh.size(); ++i) os << (i ? "x" : "") << sh[i];
  os << "]";
  return os.str();
}

}  // namespace tvf
