#pragma once

// Complex and real discrete Fourier transforms of arbitrary length.
//
// Lengths whose prime factors are all in {2, 3, 5} run through a mixed-radix
// Cooley-Tukey decomposition (radix 4 preferred over 2); any other length is
// handled with Bluestein's chirp-z algorithm on a power-of-two grid.

#include <complex>
#include <cstddef>
#include <memory>
#include <span>
#include <stdexcept>
#include <vector>

namespace xreg::fft {

using cplx = std::complex<double>;

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class Plan {
 public:
  explicit Plan(std::size_t n);
  ~Plan();
  Plan(const Plan&) = delete;
  Plan& operator=(const Plan&) = delete;

  std::size_t size() const { return n_; }
  bool uses_chirp() const { return chirp_ != nullptr; }
  const std::vector<std::size_t>& factors() const { return factors_; }

  // X_k = sum_j x_j exp(-2 pi i jk / n), in place, unnormalized.
  void forward(std::span<cplx> data) const;
  // x_j = sum_k X_k exp(+2 pi i jk / n), in place, unnormalized.
  void inverse(std::span<cplx> data) const;

 private:
  struct Chirp;

  void mixed_radix(std::span<cplx> data) const;
  void work(cplx* out, const cplx* in, std::size_t fstride, std::size_t level, cplx* scratch) const;
  void butterfly(cplx* out, std::size_t fstride, std::size_t p, std::size_t m, cplx* scratch) const;

  std::size_t n_;
  std::vector<std::size_t> factors_;
  std::vector<cplx> twiddles_;
  std::unique_ptr<Chirp> chirp_;
};

// Shared immutable plan for length n; thread-safe.
const Plan& plan_for(std::size_t n);

// Forward real transform: out receives the first out.size() <= n/2+1 bins.
void rfft(std::span<const double> x, std::span<cplx> out);

// Inverse real transform from the leading bins X[0..m) of a Hermitian
// spectrum (remaining bins treated as zero), normalized by 1/n. Imaginary
// parts of the DC and (for even n) Nyquist bins are ignored.
void irfft(std::span<const cplx> bins, std::span<double> out);

}  // namespace xreg::fft
