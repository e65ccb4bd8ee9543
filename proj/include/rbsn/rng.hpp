#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string_view>
#include <utility>

namespace rbsn {

std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t fnv1a64(std::string_view text);

/// Seeded generator. All distributions are computed here from raw 64-bit
/// draws so that results do not depend on the standard library's
/// distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(splitmix64(seed)) {}

  /// Independent child stream identified by name; used to hand each
  /// component (weights, scores, attack, augmentation...) its own stream.
  static Rng derive(std::uint64_t master_seed, std::string_view name) {
    return Rng(splitmix64(master_seed ^ fnv1a64(name)));
  }
  Rng child(std::string_view name) const { return derive(seed_, name); }
  Rng child(std::uint64_t index) const { return Rng(splitmix64(seed_ + 0x9e3779b97f4a7c15ULL * (index + 1))); }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t next() { return engine_(); }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer on [0, n).
  std::uint64_t below(std::uint64_t n);
  bool coin() { return (next() >> 63) != 0; }
  /// +1 or -1 with equal probability.
  int sign() { return coin() ? 1 : -1; }
  double normal();

  template <typename T>
  void shuffle(std::span<T> values) {
    for (std::size_t i = values.size(); i > 1; --i) {
      std::size_t j = below(i);
      std::swap(values[i - 1], values[j]);
    }
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace rbsn
