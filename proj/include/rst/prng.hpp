#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

namespace rst {

/// Deterministic generator: xoshiro256** seeded through SplitMix64.
///
/// Every derived quantity (uniform reals, normals, bounded integers, shuffles)
/// is computed here rather than through <random> distributions, whose
/// algorithms differ between standard libraries. Streams are therefore
/// bit-identical across platforms for a given seed.
///
/// `split(key)` derives an independent child stream from the construction
/// seed and a key. It does not advance the parent, so per-item streams
/// (e.g. one per dataset index) are stable regardless of visiting order.
class Prng {
 public:
  explicit Prng(std::uint64_t seed = 0);

  [[nodiscard]] std::uint64_t seed() const noexcept { return seed_; }

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi);
  /// Standard normal via Box-Muller (second variate cached).
  double normal();
  double normal(double mean, double stddev);
  /// Uniform integer in [0, bound); bound > 0. Rejection sampling, no modulo bias.
  std::uint64_t below(std::uint64_t bound);
  /// +1 or -1 with equal probability.
  int sign();
  /// Index drawn from a discrete distribution given by `weights` (sum > 0).
  std::size_t categorical(std::span<const double> weights);

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

  [[nodiscard]] Prng split(std::uint64_t key) const;

 private:
  std::uint64_t seed_;
  std::array<std::uint64_t, 4> state_{};
  bool has_spare_normal_ = false;
  double spare_normal_ = 0.0;
};

/// One SplitMix64 step; also used as a 64-bit mixing function.
std::uint64_t splitmix64(std::uint64_t& state);

}  // namespace rst
