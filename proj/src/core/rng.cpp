#include "ibq/core/rng.hpp"

#include <cmath>
#include <numbers>

namespace ibq {
namespace {

constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ULL;

}  // namespace

std::uint64_t splitmix64_mix(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::uint64_t Rng::next_u64() {
  ++state_.counter;
  return splitmix64_mix(state_.key + state_.counter * kGamma);
}

double Rng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::normal() {
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t Rng::below(std::uint64_t n) {
  if (n == 0) throw ContractError("Rng::below(0)");
  // Rejection keeps the result unbiased.
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return x % n;
}

Rng Rng::fork(std::uint64_t stream) const {
  return Rng(splitmix64_mix(state_.key ^ splitmix64_mix(stream + kGamma)));
}

Tensor rng_uniform(Rng& rng, Shape shape, double lo, double hi, DType dtype) {
  Tensor t = Tensor::zeros(std::move(shape), dtype);
  dispatch(dtype, [&]<class T>() {
    for (T& v : t.mutable_data<T>()) v = static_cast<T>(rng.uniform(lo, hi));
  });
  return t;
}

Tensor rng_normal(Rng& rng, Shape shape, double mean, double stddev,
                  DType dtype) {
  Tensor t = Tensor::zeros(std::move(shape), dtype);
  dispatch(dtype, [&]<class T>() {
    auto d = t.mutable_data<T>();
    for (std::size_t i = 0; i < d.size(); i += 2) {
      const double u1 = 1.0 - rng.uniform();
      const double u2 = rng.uniform();
      const double r = std::sqrt(-2.0 * std::log(u1));
      const double theta = 2.0 * std::numbers::pi * u2;
      d[i] = static_cast<T>(mean + stddev * r * std::cos(theta));
      if (i + 1 < d.size()) {
        d[i + 1] = static_cast<T>(mean + stddev * r * std::sin(theta));
      }
    }
  });
  return t;
}

}  // namespace ibq
