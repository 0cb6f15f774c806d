#pragma once

#include <cstdint>
#include <string>
#include <string_view>

#include "mmctl/tensor.hpp"

namespace mmctl {

// Counter-based generator. A stream is identified by a 64-bit key derived from
// (seed, label path); draw n of a stream is a pure function of (key, n), so
// values never depend on how many other streams were consumed first.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::string_view label = {});

  // Child stream keyed by `label`; independent of this stream's counter.
  Rng split(std::string_view label) const;
  Rng split(std::uint64_t index) const { return split(std::to_string(index)); }

  std::uint64_t next_u64();
  double uniform();  // [0, 1)
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  std::uint64_t below(std::uint64_t n);  // [0, n)
  bool bernoulli(double p) { return uniform() < p; }

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t key() const noexcept { return key_; }
  std::uint64_t counter() const noexcept { return counter_; }

  template <typename S>
  Matrix<S> normal_matrix(Index rows, Index cols, double stddev = 1.0) {
    Matrix<S> m(rows, cols);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(stddev * normal());
    return m;
  }

 private:
  Rng(std::uint64_t seed, std::uint64_t key) : seed_(seed), key_(key) {}

  std::uint64_t seed_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

std::uint64_t splitmix64(std::uint64_t x) noexcept;

}  // namespace mmctl
