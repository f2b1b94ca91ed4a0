#pragma once

#include <cmath>
#include <cstdint>

#include "epd/tensor.hpp"

namespace epd {

// Counter-based generator keyed by (seed, stream_id, draw index). Draw k of a
// given (seed, stream) is a pure function of those three values, so replaying
// any part of the pipeline reproduces the same noise regardless of what other
// streams were consumed in between.
class Rng {
 public:
  Rng(std::uint64_t seed, std::uint64_t stream_id)
      : key_(mix(mix(seed ^ 0x6a09e667f3bcc909ULL) ^
                 mix(stream_id * 0x9e3779b97f4a7c15ULL + 0xbb67ae8584caa73bULL))) {}

  // Derive a child stream id deterministically, for per-window / per-step use.
  static std::uint64_t substream(std::uint64_t a, std::uint64_t b) {
    return mix(a * 0x9e3779b97f4a7c15ULL + b + 0x3c6ef372fe94f82bULL);
  }

  std::uint64_t next_u64() { return mix(key_ ^ mix(ctr_++ * 0xd1342543de82ef95ULL + 1)); }

  // Uniform on the open interval (0,1); never returns 0 or 1.
  double uniform() {
    return (static_cast<double>(next_u64() >> 11) + 0.5) * (1.0 / 9007199254740992.0);
  }

  // Standard normal via Box-Muller; consumes two counter slots per draw.
  double normal() {
    const double u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
  }

  std::uint64_t uniform_int(std::uint64_t n) { return next_u64() % n; }

  Tensor normal_tensor(std::size_t r, std::size_t c) {
    Tensor t = Tensor::zeros(r, c);
    for (double& v : t.data) v = normal();
    return t;
  }

  Tensor uniform_tensor(std::size_t r, std::size_t c, double lo, double hi) {
    Tensor t = Tensor::zeros(r, c);
    for (double& v : t.data) v = lo + (hi - lo) * uniform();
    return t;
  }

 private:
  static std::uint64_t mix(std::uint64_t x) {
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ULL;
    x ^= x >> 27;
    x *= 0x94d049bb133111ebULL;
    x ^= x >> 31;
    return x;
  }

  std::uint64_t key_;
  std::uint64_t ctr_ = 0;
};

// Public sampling entry matching the library-wide convention.
inline Tensor rng_normal(std::size_t r, std::size_t c, std::uint64_t stream_id,
                         std::uint64_t seed) {
  Rng rng(seed, stream_id);
  return rng.normal_tensor(r, c);
}

}  // namespace epd
