#pragma once

// Latent-space image metrics. Peak / dynamic range is 2.0 (features live in
// [-1, 1]); identical inputs report the PSNR sentinel 99.0 and SSIM 1.0.

#include "tvf/tensor.hpp"

namespace tvf {

constexpr double kLatentPeak = 2.0;
constexpr double kPsnrSentinel = 99.0;

inline double latent_mse(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw Error("latent_mse: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
  double acc = 0;
  for (long i = 0; i < a.numel(); ++i) {
    double d = double(a[i]) - double(b[i]);
    acc += d * d;
  }
  return acc / double(a.numel());
}

inline double psnr(const Tensor& a, const Tensor& b, double peak = kLatentPeak) {
  double m = latent_mse(a, b);
  if (m == 0.0) return kPsnrSentinel;
  return 10.0 * std::log10(peak * peak / m);
}

// SSIM with a 7x7 box window over valid positions, per channel then averaged,
// standard constants at dynamic range 2.0. Inputs are [C,H,W].
inline double ssim(const Tensor& a, const Tensor& b, double range = kLatentPeak, int window = 7) {
  if (!a.same_shape(b)) throw Error("ssim: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
  if (a.rank() != 3) throw Error("ssim: want [C,H,W], got " + a.shape_str());
  int C = a.dim(0), H = a.dim(1), W = a.dim(2);
  if (H < window || W < window) throw Error("ssim: image smaller than window");
  const double c1 = (0.01 * range) * (0.01 * range);
  const double c2 = (0.03 * range) * (0.03 * range);
  const double n = double(window) * window;
  double total = 0;
  long count = 0;
  for (int c = 0; c < C; ++c) {
    const float* pa = &a.data[size_t(c) * H * W];
    const float* pb = &b.data[size_t(c) * H * W];
    for (int y = 0; y + window <= H; ++y)
      for (int x = 0; x + window <= W; ++x) {
        double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
        for (int wy = 0; wy < window; ++wy)
          for (int wx = 0; wx < window; ++wx) {
            double va = pa[size_t(y + wy) * W + x + wx];
            double vb = pb[size_t(y + wy) * W + x + wx];
            sa += va;
            sb += vb;
            saa += va * va;
            sbb += vb * vb;
            sab += va * vb;
          }
        double mu_a = sa / n, mu_b = sb / n;
        double var_a = saa / n - mu_a * mu_a;
        double var_b = sbb / n - mu_b * mu_b;
        double cov = sab / n - mu_a * mu_b;
        total += ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) /
                 ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
        ++count;
      }
  }
  return total / double(count);
}

}  // namespace tvf
