#pragma once

#include <cmath>
#include <random>
#include <string_view>

#include "structkd/common.hpp"

namespace structkd {

/// Deterministic random source. The mt19937_64 core is fully specified by
/// the standard; the distribution transforms are hand-rolled so sequences
/// are identical across standard library implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  static Rng stream(uint64_t seed, std::string_view name) {
    return Rng(stream_seed(seed, name));
  }

  uint64_t next_u64() { return eng_(); }

  /// Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [lo, hi] inclusive.
  int uniform_int(int lo, int hi) {
    uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    return lo + static_cast<int>(eng_() % span);
  }

  /// Standard normal via Box-Muller, one spare cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    // Avoid log(0).
    if (u1 < 1e-300) u1 = 1e-300;
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  /// Fisher-Yates permutation of {0..n-1}.
  std::vector<int> permutation(int n) {
    std::vector<int> p(n);
    for (int i = 0; i < n; ++i) p[i] = i;
    for (int i = n - 1; i > 0; --i) {
      int j = uniform_int(0, i);
      std::swap(p[i], p[j]);
    }
    return p;
  }

 private:
  std::mt19937_64 eng_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace structkd
