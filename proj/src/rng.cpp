// SPDX-License-Identifier: Apache-2.0
#include "zobridge/rng.hpp"

#include <cmath>
#include <cstring>
#include <numbers>

namespace zobridge {

std::uint64_t mix64(std::uint64_t x) noexcept {
  // splitmix64 finalizer
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

Rng::Rng(std::uint64_t seed, std::uint64_t stream) noexcept
    : key_(mix64(mix64(seed) ^ (stream * 0xD1B54A32D192ED03ULL + 0x8CB92BA72F3D8DD7ULL))) {}

Rng Rng::split(std::uint64_t id) const noexcept {
  return Rng(mix64(key_ ^ mix64(id + 0x632BE59BD9B4E019ULL)), 0, 0);
}

std::uint64_t Rng::next_u64() noexcept {
  const std::uint64_t c = counter_++;
  return mix64(key_ ^ mix64(c));
}

double Rng::uniform() noexcept {
  return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
}

double Rng::normal() noexcept {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  const double u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

Vec gaussian_vec(Rng& rng, Index n, double sigma) {
  if (n < 1) throw InvalidArgument("gaussian_vec: n must be >= 1");
  if (!(sigma > 0.0) || !std::isfinite(sigma)) throw InvalidArgument("gaussian_vec: sigma must be > 0");
  Vec out(n);
  for (Index i = 0; i < n; ++i) out(i) = sigma * rng.normal();
  return out;
}

std::uint64_t hash_values(const Vec& v) noexcept {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (Index i = 0; i < v.size(); ++i) {
    unsigned char bytes[sizeof(double)];
    const double x = v(i);
    std::memcpy(bytes, &x, sizeof x);
    for (unsigned char b : bytes) {
      h ^= b;
      h *= 0x100000001B3ULL;
    }
  }
  return h;
}

}  // namespace zobridge
