#include "mmctl/rng.hpp"

#include <cmath>
#include <numbers>

#include "mmctl/hashing.hpp"

namespace mmctl {

std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

Rng::Rng(std::uint64_t seed, std::string_view label)
    : seed_(seed), key_(splitmix64(seed ^ splitmix64(fnv1a64(label)))) {}

Rng Rng::split(std::string_view label) const {
  return Rng(seed_, splitmix64(key_ ^ splitmix64(fnv1a64(label) + 0x632be59bd9b4e019ULL)));
}

std::uint64_t Rng::next_u64() {
  const std::uint64_t n = counter_++;
  return splitmix64(key_ + n * 0xd1b54a32d192ed03ULL);
}

double Rng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::normal() {
  // Box-Muller on (0, 1] x [0, 1).
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t Rng::below(std::uint64_t n) {
  if (n == 0) throw InputError("Rng::below: empty range");
  // Rejection sampling keeps the draw unbiased.
  const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
  for (;;) {
    const std::uint64_t x = next_u64();
    if (x < limit) return x % n;
  }
}

}  // namespace mmctl
