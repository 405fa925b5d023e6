#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

#include "driqa/common.hpp"

namespace driqa::rng {

// SplitMix64 finalizer. Counter-based generation means every draw is a pure
// function of (key, counter): replays are bit-exact and independent streams
// never interfere, no matter in which order callers consume them.
inline std::uint64_t mix(std::uint64_t z) {
  z += 0x9E3779B97F4A7C15ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

// Hierarchical stream key: derive children with sub(); order-sensitive.
struct Key {
  std::uint64_t state = 0;

  Key sub(std::uint64_t v) const { return Key{mix(state ^ mix(v + 0x8000000000000000ull))}; }
  Key sub(std::string_view name) const { return sub(fnv1a(name)); }
};

inline double u64_to_unit(std::uint64_t x) {
  // 53 high bits -> [0,1).
  return static_cast<double>(x >> 11) * 0x1.0p-53;
}

// Deterministic stream over a key. Stateful only in its counter, so a
// freshly constructed stream with the same key replays the same sequence.
class Stream {
 public:
  explicit Stream(Key key) : key_(key) {}
  Stream(Key key, std::string_view name) : key_(key.sub(name)) {}

  std::uint64_t next_u64() { return mix(key_.state ^ mix(counter_++ + 0x51ED2701ull)); }

  double uniform() { return u64_to_unit(next_u64()); }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller; consumes two uniforms per pair, caches the spare.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double t = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(t);
    has_spare_ = true;
    return r * std::cos(t);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    require(n > 0, "rng: below(0)");
    return next_u64() % n;
  }

  template <typename T>
  void shuffle(T& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  Key key_;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// One-shot draw keyed by (key, counter); used where even a Stream's counter
// would be awkward to thread through.
inline double uniform_at(Key key, std::uint64_t counter) {
  return u64_to_unit(mix(key.state ^ mix(counter + 0x51ED2701ull)));
}

}  // namespace driqa::rng
