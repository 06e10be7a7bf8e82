#include "xreg/random.hpp"

#include <cmath>
#include <sstream>

namespace xreg {

std::uint64_t derive_seed(std::uint64_t seed, std::string_view label) {
  // FNV-1a over the label, mixed with the seed through splitmix64.
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : label) {
    h ^= c;
    h *= 1099511628211ull;
  }
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (h | 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

Rng::Rng(std::uint64_t seed, std::string_view label) : engine_(derive_seed(seed, label)) {}

std::size_t Rng::index(std::size_t n) {
  std::uniform_int_distribution<std::size_t> dist(0, n - 1);
  return dist(engine_);
}

void Rng::fill_normal(std::span<double> out) {
  for (auto& v : out) v = normal_(engine_);
}

std::string Rng::state() const {
  std::ostringstream os;
  os << engine_ << ' ' << normal_;
  return os.str();
}

void Rng::restore(const std::string& state) {
  std::istringstream is(state);
  is >> engine_ >> normal_;
  if (!is) throw std::invalid_argument("malformed rng state");
}

namespace ad {

Tensor gaussian_noise(const Shape& shape, Rng& rng) {
  Tensor out(shape);
  rng.fill_normal(out.values());
  return out;
}

}  // namespace ad
}  // namespace xreg
