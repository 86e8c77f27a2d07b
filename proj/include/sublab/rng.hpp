// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

namespace sublab {

/// SplitMix64 output for state `n`: the golden-ratio increment followed by
/// the three xor-shift/multiply finalizer rounds.
std::uint64_t hash64(std::uint64_t n) noexcept;

/// FNV-1a over bytes. Used for config hashes and stream names.
std::uint64_t fnv1a64(std::string_view bytes) noexcept;

/// Seed for a named stream derived from a master seed.
std::uint64_t derive_seed(std::uint64_t master, std::string_view stream) noexcept;

/// xoshiro256** seeded through SplitMix64. All distributions are implemented
/// here so sequences do not depend on the standard library vendor.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) noexcept;

  std::uint64_t next() noexcept;
  /// Uniform integer in [0, bound). bound must be > 0.
  std::uint64_t uniform_index(std::uint64_t bound) noexcept;
  /// Uniform double in [0, 1) with 53 random bits.
  double uniform() noexcept;
  bool bernoulli(double p) noexcept { return uniform() < p; }
  /// Standard normal via Box-Muller; the second variate is cached.
  double normal() noexcept;

  template <typename T>
  void shuffle(std::span<T> items) noexcept {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(uniform_index(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::uint64_t s_[4];
  double cached_normal_ = 0.0;
  bool has_cached_ = false;
};

/// A permutation of 0..n-1.
std::vector<std::size_t> permutation(std::size_t n, Rng& rng);

}  // namespace sublab
