#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

namespace magik {

/// Deterministic random stream. The engine sequence is pinned by the C++
/// standard and every distribution transform is implemented here, so a seed
/// produces the same values on any platform/compiler.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t next_u64() { return eng_(); }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). Rejection-free modulo is fine here: n is tiny
  /// compared to 2^64, the bias is unobservable and the stream stays portable.
  int uniform_int(int n) { return static_cast<int>(next_u64() % static_cast<std::uint64_t>(n)); }

  /// Standard normal via Box-Muller. No spare caching: two uniforms per draw
  /// keeps the stream position independent of call history.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log1p(-u1));
    return r * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Standard Gumbel draw, -log(-log(U)).
  double gumbel() {
    double u = uniform();
    if (u < 1e-300) u = 1e-300;
    return -std::log(-std::log(u));
  }

  /// Derive an independent child stream. Children with distinct ids do not
  /// collide with each other or with the parent stream.
  Rng split(std::uint64_t stream_id) {
    std::uint64_t s = next_u64() ^ (0x9e3779b97f4a7c15ULL * (stream_id + 1));
    // splitmix64 finalizer
    s += 0x9e3779b97f4a7c15ULL;
    s = (s ^ (s >> 30)) * 0xbf58476d1ce4e5b9ULL;
    s = (s ^ (s >> 27)) * 0x94d049bb133111ebULL;
    return Rng(s ^ (s >> 31));
  }

 private:
  std::mt19937_64 eng_;
};

}  // namespace magik
