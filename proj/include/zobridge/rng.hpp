// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>

#include "zobridge/linalg.hpp"

namespace zobridge {

/// Counter-based random source.
///
/// Every draw is a pure function of (key, counter), where the key is derived
/// from (seed, stream id). Child streams made with `split` are independent of
/// the parent's position, so per-sample direction streams do not depend on
/// the order in which samples are scheduled.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0) noexcept;

  /// Child stream keyed by (this key, id). Does not advance this stream.
  Rng split(std::uint64_t id) const noexcept;

  std::uint64_t next_u64() noexcept;
  /// Uniform on (0, 1].
  double uniform() noexcept;
  double normal() noexcept;

  std::uint64_t key() const noexcept { return key_; }
  std::uint64_t counter() const noexcept { return counter_; }

 private:
  Rng(std::uint64_t key, std::uint64_t counter, int) noexcept : key_(key), counter_(counter) {}

  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// n independent draws from Normal(0, sigma²).
Vec gaussian_vec(Rng& rng, Index n, double sigma);

std::uint64_t mix64(std::uint64_t x) noexcept;

}  // namespace zobridge
