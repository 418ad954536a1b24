#pragma once

// Counter-based pseudo-random generator.
//
// Every draw is a pure function of (key, counter), so any value in a run can
// be regenerated without replaying the sequence. Streams are derived from a
// root seed by mixing sub-stream ids into the key; this keeps corpus
// generation, parameter init, training noise and sampling noise independent
// of each other and of evaluation order.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>

namespace duodiff {

namespace detail {

// 64-bit finalizer used by splitmix64; full avalanche.
inline constexpr uint64_t mix64(uint64_t z) {
  z ^= z >> 30;
  z *= 0xbf58476d1ce4e5b9ULL;
  z ^= z >> 27;
  z *= 0x94d049bb133111ebULL;
  z ^= z >> 31;
  return z;
}

inline constexpr uint64_t golden = 0x9e3779b97f4a7c15ULL;

}  // namespace detail

class counter_rng {
 public:
  explicit counter_rng(uint64_t seed) : key_(detail::mix64(seed + detail::golden)) {}

  // Derive an independent sub-stream. Chaining is allowed:
  // rng.stream(a).stream(b) != rng.stream(b).stream(a) in general.
  counter_rng stream(uint64_t id) const {
    counter_rng r(*this);
    r.key_ = detail::mix64(key_ ^ detail::mix64(id + detail::golden));
    return r;
  }

  uint64_t bits(uint64_t counter) const {
    return detail::mix64(key_ + counter * detail::golden);
  }

  // Uniform in [0, 1), 24 bits of precision (exact in float).
  float uniform(uint64_t counter) const {
    return static_cast<float>(bits(counter) >> 40) * 0x1.0p-24f;
  }

  // Uniform integer in [0, n). n must be > 0. Modulo bias is negligible for
  // the small n used here (n << 2^64).
  uint64_t uniform_index(uint64_t counter, uint64_t n) const {
    return bits(counter) % n;
  }

  // Standard normal via Box-Muller; one draw consumes one counter, using the
  // two 32-bit halves of one mixed word, so draws at distinct counters are
  // independent.
  float normal(uint64_t counter) const {
    uint64_t w = bits(counter);
    uint32_t hi = static_cast<uint32_t>(w >> 32);
    uint32_t lo = static_cast<uint32_t>(w);
    // u1 in (0, 1] so log is finite; u2 in [0, 1).
    double u1 = (static_cast<double>(hi) + 1.0) * 0x1.0p-32;
    double u2 = static_cast<double>(lo) * 0x1.0p-32;
    double r = std::sqrt(-2.0 * std::log(u1));
    return static_cast<float>(r * std::cos(2.0 * std::numbers::pi * u2));
  }

  void fill_normal(std::span<float> out, uint64_t counter0 = 0) const {
    for (size_t i = 0; i < out.size(); ++i)
      out[i] = normal(counter0 + i);
  }

  void fill_uniform(std::span<float> out, uint64_t counter0 = 0) const {
    for (size_t i = 0; i < out.size(); ++i)
      out[i] = uniform(counter0 + i);
  }

  uint64_t key() const { return key_; }

 private:
  uint64_t key_;
};

// Fixed top-level stream ids so independent subsystems never collide.
namespace rng_streams {
inline constexpr uint64_t corpus = 1;
inline constexpr uint64_t param_init = 2;
inline constexpr uint64_t train = 3;
inline constexpr uint64_t sampler = 4;
inline constexpr uint64_t eval = 5;
}  // namespace rng_streams

}  // namespace duodiff
