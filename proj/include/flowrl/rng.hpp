#pragma once

#include <cmath>
#include <cstdint>

namespace flowrl {

/// Counter-based random number generator: the i-th output is a pure hash of
/// (key, i), so a stream can be split into independent substreams by deriving
/// new keys from tags. Results do not depend on how work is scheduled across
/// threads, and the bit patterns are identical on every platform with IEEE
/// doubles.
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t key) : key_(key) {}

  /// Independent substream; derive(key, tag) is itself a strong hash.
  CounterRng stream(std::uint64_t tag) const {
    return CounterRng(mix(key_ ^ 0x6a09e667f3bcc909ull, tag));
  }
  CounterRng stream(std::uint64_t a, std::uint64_t b) const {
    return stream(a).stream(b);
  }

  std::uint64_t next_u64() { return mix(key_, counter_++); }

  /// Uniform in [0, 1).
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::int64_t uniform_int(std::int64_t n) {
    return std::int64_t(double(n) * uniform());
  }

  /// Standard normal via Box-Muller (consumes two counter values).
  double normal() {
    double u1 = double((next_u64() >> 11) + 1) * 0x1.0p-53;  // (0, 1]
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
  }

  double lognormal(double mu, double sigma) {
    return std::exp(mu + sigma * normal());
  }

  static std::uint64_t mix(std::uint64_t key, std::uint64_t counter) {
    std::uint64_t z = key + 0x9e3779b97f4a7c15ull * (counter + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    z ^= key ^ (z >> 31);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace flowrl
