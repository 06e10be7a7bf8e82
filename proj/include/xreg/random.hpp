#pragma once

#include <cstdint>
#include <random>

#include <boost/random/normal_distribution.hpp>
#include <span>
#include <string>

#include "xreg/tensor.hpp"

namespace xreg {

// Deterministic per-purpose random stream. Streams derived from the same
// root seed with different labels are statistically independent.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  Rng(std::uint64_t seed, std::string_view label);

  double normal() { return normal_(engine_); }
  double uniform() { return uniform_(engine_); }
  std::size_t index(std::size_t n);  // uniform in [0, n)
  void fill_normal(std::span<double> out);
  std::mt19937_64& engine() { return engine_; }

  std::string state() const;
  void restore(const std::string& state);

 private:
  std::mt19937_64 engine_;
  boost::random::normal_distribution<double> normal_{0.0, 1.0};  // ziggurat
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

std::uint64_t derive_seed(std::uint64_t seed, std::string_view label);

namespace ad {

// i.i.d. standard normal samples as a constant tensor (never requires grad).
Tensor gaussian_noise(const Shape& shape, Rng& rng);

}  // namespace ad
}  // namespace xreg
