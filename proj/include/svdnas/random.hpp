#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>

#include "svdnas/ops.hpp"

namespace svdnas {

// Seeded generator shared by every stochastic routine. Distribution sampling
// is done by hand so sequences do not depend on the standard library vendor.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in the open interval (0, 1).
  double uniform() {
    const double u = static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    return std::clamp(u, std::numeric_limits<double>::min(), 1.0 - 0x1.0p-53);
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  Index uniform_index(Index n) { return static_cast<Index>(engine_() % static_cast<std::uint64_t>(n)); }

  // Box-Muller.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = uniform(), u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * M_PI * u2);
    has_spare_ = true;
    return r * std::cos(2.0 * M_PI * u2);
  }

  double gumbel() { return -std::log(-std::log(uniform())); }

  // Independent stream derived from this generator's seed material.
  Rng fork() { return Rng(next_u64() ^ 0x9e3779b97f4a7c15ULL); }

  template <typename T>
  NdArray<T> normal_array(Shape shape, T stddev = T(1)) {
    NdArray<T> a(std::move(shape));
    for (Index i = 0; i < a.numel(); ++i) a[i] = static_cast<T>(normal()) * stddev;
    return a;
  }

  template <typename T>
  NdArray<T> uniform_array(Shape shape, T lo, T hi) {
    NdArray<T> a(std::move(shape));
    for (Index i = 0; i < a.numel(); ++i) a[i] = static_cast<T>(uniform(lo, hi));
    return a;
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// softmax((logits + g) / temperature) with g ~ Gumbel(0, 1) i.i.d.
template <typename T>
Tensor<T> gumbel_softmax(const Tensor<T>& logits, T temperature, Rng& rng) {
  if (logits.numel() < 1) throw ContractError("gumbel_softmax: empty logits");
  if (!(temperature > T(0))) throw ContractError("gumbel_softmax: temperature must be positive");
  NdArray<T> noise(logits.shape());
  for (Index i = 0; i < noise.numel(); ++i) noise[i] = static_cast<T>(rng.gumbel());
  return softmax(scale(add_constant(logits, noise), T(1) / temperature));
}

}  // namespace svdnas
