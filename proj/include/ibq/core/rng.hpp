#pragma once

#include <cstdint>

#include "ibq/core/tensor.hpp"

namespace ibq {

// Counter-based generator: the n-th output (n = 1, 2, ...) is
// splitmix64_mix(key + n * 0x9E3779B97F4A7C15), which is exactly the
// SplitMix64 sequence seeded with `key`. The stream is therefore a pure
// function of (key, counter) and can be reproduced in any language.
// See docs/rng.md for the derivation of substream keys and float mapping.
class Rng {
 public:
  struct State {
    std::uint64_t key = 0;
    std::uint64_t counter = 0;
  };

  explicit Rng(std::uint64_t seed) : state_{seed, 0} {}
  static Rng from_state(State state) {
    Rng r(0);
    r.state_ = state;
    return r;
  }

  std::uint64_t next_u64();
  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Box-Muller, cosine branch; consumes two uniforms.
  double normal();
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

  // Independent generator whose key is derived from this key and `stream`;
  // does not advance this generator.
  Rng fork(std::uint64_t stream) const;

  State state() const { return state_; }

 private:
  State state_;
};

std::uint64_t splitmix64_mix(std::uint64_t z);

Tensor rng_uniform(Rng& rng, Shape shape, double lo = 0.0, double hi = 1.0,
                   DType dtype = DType::f32);
// Fills pairs (cos, sin) from each Box-Muller draw.
Tensor rng_normal(Rng& rng, Shape shape, double mean = 0.0, double stddev = 1.0,
                  DType dtype = DType::f32);

}  // namespace ibq
