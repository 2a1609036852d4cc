#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace tvf {

// Base error. Subclasses map to CLI exit codes (see tools/).
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad config file / bad usage -> exit 2.
struct ConfigError : Error {
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// Missing prerequisite (dataset, checkpoint) -> exit 3.
struct PrereqError : Error {
  explicit PrereqError(const std::string& msg) : Error(msg) {}
};

// NaN/Inf escaped a numeric kernel -> exit 4.
struct NumericError : Error {
  explicit NumericError(const std::string& msg) : Error(msg) {}
};

constexpr double kPi = 3.14159265358979323846;
constexpr double kTwoPi = 2.0 * kPi;

inline double deg_to_rad(double d) { return d * (kPi / 180.0); }
inline double rad_to_deg(double r) { return r * (180.0 / kPi); }

// ---------------------------------------------------------------------------
// Deterministic RNG. All stochastic draws in the project go through this so
// that a (seed, stream, counter) triple fully pins every random decision:
// training is resumable and every CLI run is bitwise reproducible.
// ---------------------------------------------------------------------------

inline uint64_t splitmix64(uint64_t& state) {
  state += 0x9e3779b97f4a7c15ull;
  uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline uint64_t mix_seed(uint64_t a, uint64_t b) {
  uint64_t s = a;
  (void)splitmix64(s);
  s ^= b + 0x9e3779b97f4a7c15ull + (s << 6) + (s >> 2);
  return splitmix64(s);
}

inline uint64_t mix_seed(uint64_t a, uint64_t b, uint64_t c) {
  return mix_seed(mix_seed(a, b), c);
}

inline uint64_t mix_seed(uint64_t a, uint64_t b, uint64_t c, uint64_t d) {
  return mix_seed(mix_seed(a, b, c), d);
}

class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {
    // Warm up so nearby seeds decorrelate.
    splitmix64(state_);
    splitmix64(state_);
  }

  uint64_t next_u64() { return splitmix64(state_); }

  // Uniform in [0, 1).
  double u01() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * u01(); }

  // Uniform integer in [0, n).
  int uniform_int(int n) {
    return int(next_u64() % uint64_t(n));
  }

  // Standard normal via Box-Muller (one value per call, fully pinned).
  double normal() {
    double u1 = u01();
    double u2 = u01();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(kTwoPi * u2);
  }

 private:
  uint64_t state_;
};

// ---------------------------------------------------------------------------
// Worker pool. Work items are independent and write disjoint slots, so the
// schedule cannot change results; TVF_THREADS caps the worker count.
// ---------------------------------------------------------------------------

inline int resolve_threads(int requested) {
  int hw = int(std::thread::hardware_concurrency());
  if (hw <= 0) hw = 1;
  int n = requested > 0 ? requested : hw;
  if (const char* env = std::getenv("TVF_THREADS")) {
    int cap = std::atoi(env);
    if (cap > 0 && cap < n) n = cap;
  }
  return n < 1 ? 1 : n;
}

// Runs fn(i) for i in [0, n) across `threads` workers with a static partition.
inline void parallel_for(int n, int threads, const std::function<void(int)>& fn) {
  threads = resolve_threads(threads);
  if (threads <= 1 || n <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  if (threads > n) threads = n;
  std::vector<std::thread> pool;
  pool.reserve(size_t(threads));
  for (int w = 0; w < threads; ++w) {
    pool.emplace_back([=, &fn]() {
      for (int i = w; i < n; i += threads) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

inline std::string format_number(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

// FNV-1a, used for config hashes.
inline uint64_t fnv1a64(const std::string& s) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string hex64(uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", (unsigned long long)v);
  return buf;
}

}  // namespace tvf
