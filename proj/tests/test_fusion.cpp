#include <doctest.h>

#include <cstring>

#include "test_support.hpp"
#include "tvf/fusion.hpp"

using namespace tvf;
using namespace tvf_test;

namespace {

template <typename S>
TriPlaneVar<S> make_tp(Tape<S>& tape, TensorT<S> planes, const CameraPose& frame, double extent,
                       bool needs_grad = false) {
  return TriPlaneVar<S>{tape.leaf(std::move(planes), needs_grad), frame, extent};
}

struct ReadoutVars {
  Var<float> w, b;
};

ReadoutVars identityish_readout(Tape<float>& t, int payload_ch, float bias = 0.0f) {
  Tensor w = Tensor::zeros({4, payload_ch});
  for (int c = 0; c < 4 && c < payload_ch; ++c) w[c * payload_ch + c] = 1.0f;
  return {t.leaf(std::move(w)), t.leaf(Tensor::full({4}, bias))};
}

}  // namespace

TEST_CASE("view_weight hits its exact anchor values") {
  CHECK(view_weight(0.0) == 1.0);
  CHECK(view_weight(kPi) == 0.0);
  CHECK(view_weight(kPi / 2) == 0.5);
  CHECK(view_weight(-kPi / 2) == 0.5);  // even in d_theta
  Rng rng(2);
  for (int i = 0; i < 50; ++i) {
    double d = rng.uniform(-kPi, kPi);
    double w = view_weight(d);
    CHECK(w >= 0.0);
    CHECK(w <= 1.0);
    CHECK(w == view_weight(-d));
  }
}

TEST_CASE("normalize_weights: proportional, sums to one, uniform fallback") {
  auto w = normalize_weights({0.75, 0.0});
  CHECK(w[0] == 1.0);
  CHECK(w[1] == 0.0);

  CHECK(normalize_weights({1.0}) == std::vector<double>{1.0});

  auto fb = normalize_weights({0.0, 0.0});  // all views opposite the target
  CHECK(fb[0] == 0.5);
  CHECK(fb[1] == 0.5);

  Rng rng(4);
  for (int i = 0; i < 30; ++i) {
    std::vector<double> lambdas;
    for (int j = 0; j < 1 + rng.uniform_int(5); ++j) lambdas.push_back(rng.uniform(0.0, 1.0));
    auto nw = normalize_weights(lambdas);
    double sum = 0;
    for (double v : nw) sum += v;
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("aggregate_point convexity") {
  Tensor one({1, 3}, {1, 2, 3});
  Tensor out = aggregate_point(one, {1.0});
  CHECK(out[0] == 1.0f);
  CHECK(out[2] == 3.0f);

  Tensor equal({2, 2}, {0.5f, -0.25f, 0.5f, -0.25f});
  Tensor eq = aggregate_point(equal, {0.3, 0.7});
  CHECK(eq[0] == doctest::Approx(0.5));
  CHECK(eq[1] == doctest::Approx(-0.25));

  Tensor two({2, 2}, {2, 0, 0, 2});
  Tensor mix = aggregate_point(two, {0.75, 0.25});
  CHECK(mix[0] == doctest::Approx(1.5));
  CHECK(mix[1] == doctest::Approx(0.5));

  CHECK_THROWS_AS(aggregate_point(two, {0.9, 0.3}), Error);  // weights must sum to 1
}

TEST_CASE("integrate_ray against the constant-medium closed form") {
  SUBCASE("transparent medium") {
    TensorD sig({4});
    TensorD pay = TensorD::full({4, 2}, 5.0);
    TensorD del = TensorD::full({4}, 0.25);
    double opacity = -1;
    TensorD out = integrate_ray(sig, pay, del, &opacity);
    CHECK(out[0] == 0.0);
    CHECK(out[1] == 0.0);
    CHECK(opacity == 0.0);
  }
  SUBCASE("constant sigma and payload converge to c (1 - exp(-sigma L))") {
    const int steps = 256;
    const double sigma = 1.3, length = 2.0, c = 0.7;
    TensorD sig = TensorD::full({steps}, sigma);
    TensorD pay = TensorD::full({steps, 1}, c);
    TensorD del = TensorD::full({steps}, length / steps);
    double opacity = 0;
    TensorD out = integrate_ray(sig, pay, del, &opacity);
    double expect = c * (1.0 - std::exp(-sigma * length));
    CHECK(out[0] == doctest::Approx(expect).epsilon(1e-3));
    CHECK(opacity <= 1.0);
    CHECK(opacity >= 0.0);
  }
  SUBCASE("an opaque first sample hides everything behind it") {
    TensorD sig({3}, {1000.0, 5.0, 5.0});
    TensorD pay({3, 1}, {0.8, -0.3, 0.4});
    TensorD del = TensorD::full({3}, 0.5);
    TensorD out = integrate_ray(sig, pay, del);
    CHECK(out[0] == doctest::Approx(0.8).epsilon(1e-6));
  }
  SUBCASE("transmittance is non-increasing along any ray") {
    Rng rng(9);
    TensorD sig({32}), pay({32, 1}), del = TensorD::full({32}, 0.1);
    for (int i = 0; i < 32; ++i) {
      sig[i] = rng.uniform(0, 3);
      pay[i] = rng.uniform(-1, 1);
    }
    double transmittance = 1.0;
    for (int i = 0; i < 32; ++i) {
      double next = transmittance * std::exp(-sig[i] * del[i]);
      CHECK(next <= transmittance);
      transmittance = next;
    }
    double opacity = 0;
    integrate_ray(sig, pay, del, &opacity);
    CHECK(opacity >= 0.0);
    CHECK(opacity <= 1.0);
  }
}

TEST_CASE("render_fused: zero planes reproduce the readout bias everywhere") {
  Tape<float> t;
  FusionConfig cfg;
  auto ro = identityish_readout(t, 7, 0.375f);
  std::vector<TriPlaneVar<float>> tps{make_tp(t, Tensor::zeros({3, 8, 8, 8}), pose_from_degrees(20, 0, 2), 1.0)};
  FusedRender<float> fr = render_fused(t, tps, pose_from_degrees(100, 0, 2), cfg, ro.w, ro.b, 8, 8);
  const Tensor& out = t.value(fr.latent);
  for (long i = 0; i < out.numel(); ++i) CHECK(out[i] == 0.375f);
  for (long i = 0; i < fr.opacity.numel(); ++i) {
    CHECK(fr.opacity[i] >= 0.0f);
    CHECK(fr.opacity[i] <= 1.0f);
  }
}

TEST_CASE("render_fused: single aligned view equals the uniform-weight render") {
  Rng rng(12);
  Tensor planes = random_tensor_f({3, 8, 8, 8}, rng);
  CameraPose frame = pose_from_degrees(45, 0, 2);
  Tape<float> t;
  auto ro = identityish_readout(t, 7);
  FusionConfig cosine;
  FusionConfig uniform;
  uniform.uniform_weights = true;
  std::vector<TriPlaneVar<float>> tps{make_tp(t, planes, frame, 1.0)};
  const Tensor a = t.value(render_fused(t, tps, frame, cosine, ro.w, ro.b, 8, 8).latent);
  const Tensor b = t.value(render_fused(t, tps, frame, uniform, ro.w, ro.b, 8, 8).latent);
  CHECK(std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(float)) == 0);
}

TEST_CASE("render_fused: identical tri-planes at symmetric azimuths render like one") {
  Rng rng(13);
  // constant-valued planes with a full-cube extent are frame-invariant, so
  // the convex combination of Eq. 3 must reproduce the single-view render
  Tensor planes = Tensor::zeros({3, 6, 8, 8});
  for (int k = 0; k < 3; ++k)
    for (int c = 0; c < 6; ++c) {
      float v = float(rng.uniform(-0.5, 0.5));
      for (int i = 0; i < 64; ++i) planes[(long(k) * 6 + c) * 64 + i] = v;
    }
  const double ext = std::sqrt(3.0);
  CameraPose target = pose_from_degrees(0, 0, 2);
  Tape<float> t;
  auto ro = identityish_readout(t, 5);
  FusionConfig cfg;
  std::vector<TriPlaneVar<float>> pair{make_tp(t, planes, pose_from_degrees(60, 0, 2), ext),
                                       make_tp(t, planes, pose_from_degrees(300, 0, 2), ext)};
  std::vector<TriPlaneVar<float>> solo{make_tp(t, planes, pose_from_degrees(60, 0, 2), ext)};
  const Tensor a = t.value(render_fused(t, pair, target, cfg, ro.w, ro.b, 8, 8).latent);
  const Tensor b = t.value(render_fused(t, solo, target, cfg, ro.w, ro.b, 8, 8).latent);
  for (long i = 0; i < a.numel(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-5).scale(1.0));
}

TEST_CASE("render_fused is permutation invariant in its inputs") {
  Rng rng(14);
  Tensor p1 = random_tensor_f({3, 6, 8, 8}, rng);
  Tensor p2 = random_tensor_f({3, 6, 8, 8}, rng);
  Tensor p3 = random_tensor_f({3, 6, 8, 8}, rng);
  CameraPose f1 = pose_from_degrees(10, 5, 2), f2 = pose_from_degrees(130, -10, 2),
             f3 = pose_from_degrees(250, 15, 2);
  CameraPose target = pose_from_degrees(75, 0, 2);
  Tape<float> t;
  auto ro = identityish_readout(t, 5);
  FusionConfig cfg;
  std::vector<TriPlaneVar<float>> abc{make_tp(t, p1, f1, 1.0), make_tp(t, p2, f2, 1.0), make_tp(t, p3, f3, 1.0)};
  std::vector<TriPlaneVar<float>> cba{abc[2], abc[1], abc[0]};
  const Tensor a = t.value(render_fused(t, abc, target, cfg, ro.w, ro.b, 8, 8).latent);
  const Tensor b = t.value(render_fused(t, cba, target, cfg, ro.w, ro.b, 8, 8).latent);
  for (long i = 0; i < a.numel(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-6).scale(1.0));
}

TEST_CASE("cosine weighting is live: uniform ablation changes unequal inputs") {
  Rng rng(15);
  Tensor p1 = random_tensor_f({3, 6, 8, 8}, rng);
  Tensor p2 = random_tensor_f({3, 6, 8, 8}, rng);
  CameraPose f1 = pose_from_degrees(20, 0, 2), f2 = pose_from_degrees(200, 0, 2);
  CameraPose target = pose_from_degrees(40, 0, 2);
  Tape<float> t;
  auto ro = identityish_readout(t, 5);
  FusionConfig cosine;
  FusionConfig uniform;
  uniform.uniform_weights = true;
  std::vector<TriPlaneVar<float>> tps{make_tp(t, p1, f1, 1.0), make_tp(t, p2, f2, 1.0)};
  const Tensor a = t.value(render_fused(t, tps, target, cosine, ro.w, ro.b, 8, 8).latent);
  const Tensor b = t.value(render_fused(t, tps, target, uniform, ro.w, ro.b, 8, 8).latent);
  double diff = 0;
  for (long i = 0; i < a.numel(); ++i) diff += std::abs(double(a[i]) - double(b[i]));
  CHECK(diff > 1e-3);
}

TEST_CASE("rays missing the scene cube contribute exactly the readout bias") {
  // corner rays clear the scene cube once the fov exceeds 90 degrees at radius 2
  CameraPose target = pose_from_degrees(0, 0, 2);
  RayBatch rays = target_rays(target, 16, 16, 100.0);
  long miss = -1;
  for (long pix = 0; pix < 256 && miss < 0; ++pix) {
    double t0, t1;
    if (!ray_cube_intersect(rays.origins[size_t(pix)], rays.directions[size_t(pix)], 1.0, t0, t1)) miss = pix;
  }
  REQUIRE(miss >= 0);

  Rng rng(16);
  Tape<float> t;
  auto ro = identityish_readout(t, 7, -0.125f);
  FusionConfig cfg;
  cfg.fov_deg = 100.0;
  std::vector<TriPlaneVar<float>> tps{make_tp(t, random_tensor_f({3, 8, 8, 8}, rng), pose_from_degrees(90, 0, 2), 1.0)};
  FusedRender<float> fr = render_fused(t, tps, target, cfg, ro.w, ro.b, 16, 16);
  const Tensor& out = t.value(fr.latent);
  long hw = 16 * 16;
  for (int c = 0; c < 4; ++c) CHECK(out[c * hw + miss] == -0.125f);
  CHECK(fr.opacity[miss] == 0.0f);
}

TEST_CASE("integration converges: doubling samples changes a smooth render < 1e-3 RMS") {
  Rng rng(17);
  Tensor planes = random_tensor_f({3, 6, 8, 8}, rng, -0.5, 0.5);
  CameraPose frame = pose_from_degrees(30, 0, 2);
  CameraPose target = pose_from_degrees(70, 0, 2);
  Tape<float> t;
  auto ro = identityish_readout(t, 5);
  FusionConfig c128, c256;
  c128.samples_per_ray = 128;
  c256.samples_per_ray = 256;
  std::vector<TriPlaneVar<float>> tps{make_tp(t, planes, frame, 1.0)};
  const Tensor a = t.value(render_fused(t, tps, target, c128, ro.w, ro.b, 8, 8).latent);
  const Tensor b = t.value(render_fused(t, tps, target, c256, ro.w, ro.b, 8, 8).latent);
  double acc = 0;
  for (long i = 0; i < a.numel(); ++i) {
    double d = double(a[i]) - double(b[i]);
    acc += d * d;
  }
  CHECK(std::sqrt(acc / double(a.numel())) < 1e-3);
}

TEST_CASE("training jitter is per-ray seeded and reproducible") {
  Rng rng(18);
  Tensor planes = random_tensor_f({3, 6, 8, 8}, rng);
  CameraPose frame = pose_from_degrees(10, 0, 2);
  CameraPose target = pose_from_degrees(80, 0, 2);
  Tape<float> t;
  auto ro = identityish_readout(t, 5);
  FusionConfig cfg;
  std::vector<TriPlaneVar<float>> tps{make_tp(t, planes, frame, 1.0)};
  const Tensor a = t.value(render_fused(t, tps, target, cfg, ro.w, ro.b, 8, 8, true, 555).latent);
  const Tensor b = t.value(render_fused(t, tps, target, cfg, ro.w, ro.b, 8, 8, true, 555).latent);
  const Tensor c = t.value(render_fused(t, tps, target, cfg, ro.w, ro.b, 8, 8, true, 556).latent);
  CHECK(std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(float)) == 0);
  double diff = 0;
  for (long i = 0; i < a.numel(); ++i) diff += std::abs(double(a[i]) - double(c[i]));
  CHECK(diff > 0.0);
}

TEST_CASE("render gradients match finite differences on a 2x2 render") {
  Rng rng(19);
  // both views within ~40 degrees of the target keep all view weights
  // comparable, so no tri-plane gradient sits below the fd noise floor
  CameraPose f1 = pose_from_degrees(15, 10, 2), f2 = pose_from_degrees(100, -5, 2);
  CameraPose target = pose_from_degrees(60, 0, 2);
  for (bool decode_first : {false, true}) {
    ParamSetD ps;
    ps.add("planes1", random_tensor_d({3, 4, 4, 4}, rng), true);
    ps.add("planes2", random_tensor_d({3, 4, 4, 4}, rng), true);
    ps.add("ro.w", random_tensor_d({4, 3}, rng), true);
    ps.add("ro.b", random_tensor_d({4}, rng), true);
    FusionConfig cfg;
    cfg.samples_per_ray = 8;
    cfg.decode_before_aggregate = decode_first;
    auto rep = grad_vs_fd(ps, [&](Tape<double>& tape, BoundParams<double>& p) {
      std::vector<TriPlaneVar<double>> tps{TriPlaneVar<double>{p("planes1"), f1, 1.0},
                                           TriPlaneVar<double>{p("planes2"), f2, 1.0}};
      FusedRender<double> fr = render_fused(tape, tps, target, cfg, p("ro.w"), p("ro.b"), 2, 2);
      return mean_square(fr.latent);
    });
    CHECK_MESSAGE(rep.max_rel_err < 1e-4, "decode_first=", decode_first, " worst=", rep.worst_name);
  }
}
