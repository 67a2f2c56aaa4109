#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace nsr {

/**
 * Counter-based pseudo random stream.
 *
 * Draw number n (n = 1, 2, ...) of the stream (seed, id) is
 *
 *     key  = mix(seed ^ mix(id + 0x6A09E667F3BCC909))
 *     bits = mix(key + n * 0x9E3779B97F4A7C15)
 *
 * where mix is the SplitMix64 finalizer
 *
 *     z ^= z >> 30; z *= 0xBF58476D1CE4E5B9;
 *     z ^= z >> 27; z *= 0x94D049BB133111EB;
 *     z ^= z >> 31;
 *
 * All arithmetic is modulo 2^64, so the integer sequence is identical on every
 * platform. Uniform doubles take the top 53 bits: (bits >> 11) * 2^-53.
 *
 * A stream has a single owner. Parallel consumers take child streams with
 * derive(), which keys a fresh stream off (key, child id) and leaves the parent
 * untouched.
 */
class RandStream {
 public:
  RandStream() : RandStream(0, 0) {}
  RandStream(std::uint64_t seed, std::uint64_t stream_id)
      : seed_(seed), id_(stream_id), key_(mix(seed ^ mix(stream_id + kIdSalt))) {}

  static constexpr std::uint64_t mix(std::uint64_t z) {
    z ^= z >> 30;
    z *= 0xBF58476D1CE4E5B9ULL;
    z ^= z >> 27;
    z *= 0x94D049BB133111EBULL;
    z ^= z >> 31;
    return z;
  }

  std::uint64_t next_u64() {
    ++counter_;
    return mix(key_ + counter_ * kGolden);
  }

  /// Uniform in [0, 1).
  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n) {
    // Rejection keeps the draw unbiased.
    const std::uint64_t limit = n * ((~std::uint64_t{0}) / n);
    std::uint64_t v = next_u64();
    while (v >= limit) v = next_u64();
    return v % n;
  }

  double normal(double mu, double sigma) {
    // Box-Muller, one value per pair of uniforms.
    const double u1 = 1.0 - uniform01();  // (0, 1]
    const double u2 = uniform01();
    return mu + sigma * std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// -1 or +1 with equal probability.
  int sign() { return (next_u64() >> 63) ? 1 : -1; }

  RandStream derive(std::uint64_t child_id) const { return RandStream(key_, child_id); }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream_id() const { return id_; }
  std::uint64_t counter() const { return counter_; }

 private:
  static constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;
  static constexpr std::uint64_t kIdSalt = 0x6A09E667F3BCC909ULL;

  std::uint64_t seed_;
  std::uint64_t id_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace nsr
