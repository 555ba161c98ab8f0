#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string_view>
#include <vector>

namespace casam::tensor {

/// Seeded generator with platform-independent transforms. The engine is
/// std::mt19937_64 (fully specified by the standard); the uniform, normal and
/// shuffle transforms are implemented here because the standard library
/// distributions are not bit-reproducible across implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  [[nodiscard]] std::uint64_t seed() const { return seed_; }
  static constexpr std::string_view algorithm() { return "mt19937_64"; }

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform in [0, 1) with 53 bits of resolution.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  /// Standard normal via Box-Muller (no cached second value).
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

  [[nodiscard]] std::vector<std::size_t> permutation(std::size_t n);

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

/// Deterministically derives a child seed from a parent seed and a stream
/// label (SplitMix64 finalizer over the mixed inputs).
[[nodiscard]] std::uint64_t derive_seed(std::uint64_t parent, std::uint64_t label);
[[nodiscard]] std::uint64_t derive_seed(std::uint64_t parent, std::string_view label);

}  // namespace casam::tensor
