#pragma once

#include <array>
#include <cstdint>
#include <string_view>

namespace prnpe {

/// Counter-based random stream (Philox4x32-10) keyed by a (seed, stream) pair.
///
/// Two generators with the same seed and stream id produce identical draws.
/// Streams are derived with split(), which never touches the parent state, so
/// independent replicates or pipeline stages can each own a stream without
/// sharing mutable state.
class Rng {
 public:
  using result_type = std::uint64_t;

  Rng(std::uint64_t seed, std::uint64_t stream) noexcept;

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream_id() const noexcept { return stream_; }

  /// Child stream; deterministic in (seed, stream, tag).
  Rng split(std::uint64_t tag) const noexcept;
  Rng split(std::string_view tag) const noexcept;

  std::uint64_t next_u64() noexcept;
  result_type operator()() noexcept { return next_u64(); }
  static constexpr result_type min() noexcept { return 0; }
  static constexpr result_type max() noexcept { return ~result_type{0}; }

  /// Uniform on the open interval (0, 1).
  double uniform() noexcept;
  double normal() noexcept;
  /// Uniform integer in [0, n); n must be positive.
  std::uint64_t uniform_index(std::uint64_t n) noexcept;

 private:
  void refill() noexcept;

  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t counter_ = 0;
  std::array<std::uint32_t, 4> block_{};
  int block_pos_ = 4;
  bool has_spare_normal_ = false;
  double spare_normal_ = 0.0;
};

/// FNV-1a, used to turn stage names into stream tags.
std::uint64_t hash_tag(std::string_view tag) noexcept;

}  // namespace prnpe
