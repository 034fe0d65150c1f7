#pragma once

#include <cstdint>
#include <vector>

#include "fpsa/tensor.hpp"

namespace fpsa {

// splitmix64 generator. Small, fast, and the bit stream is fixed by the
// standard arithmetic itself, so runs are reproducible across toolchains
// (std:: distributions do not guarantee that).
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1).
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  // Uniform integer in [0, n). Rejection sampling keeps it unbiased.
  uint64_t next_below(uint64_t n) {
    if (n == 0) return 0;
    uint64_t threshold = (~n + 1) % n;  // 2^64 mod n
    for (;;) {
      uint64_t r = next_u64();
      if (r >= threshold) return r % n;
    }
  }

  // Standard normal via Box-Muller.
  double next_normal() {
    double u1 = next_double();
    double u2 = next_double();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  template <typename T>
  void fill_uniform(Tensor<T>& t, double lo, double hi) {
    for (auto& v : t.data) v = static_cast<T>(uniform(lo, hi));
  }

  template <typename T>
  void fill_normal(Tensor<T>& t, double stddev) {
    for (auto& v : t.data) v = static_cast<T>(next_normal() * stddev);
  }

  template <typename IndexT>
  void shuffle(std::vector<IndexT>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(next_below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  uint64_t state_;
};

// Stable derivation of sub-seeds (per epoch, per stream) from a master seed.
inline uint64_t derive_seed(uint64_t master, uint64_t stream) {
  Rng r(master ^ (0x5851f42d4c957f2dULL * (stream + 1)));
  return r.next_u64();
}

}  // namespace fpsa
