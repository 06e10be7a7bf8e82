#include "xreg/fft.hpp"

#include <map>
#include <mutex>
#include <numbers>
#include <string>

namespace xreg::fft {

namespace {

std::vector<std::size_t> factorize(std::size_t n) {
  std::vector<std::size_t> factors;
  while (n % 4 == 0) {
    factors.push_back(4);
    n /= 4;
  }
  for (std::size_t p : {2u, 3u, 5u}) {
    while (n % p == 0) {
      factors.push_back(p);
      n /= p;
    }
  }
  if (n != 1) return {};
  return factors;
}

std::size_t next_pow2(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

}  // namespace

struct Plan::Chirp {
  std::size_t m = 0;
  std::vector<cplx> w;       // exp(-i pi j^2 / n), j < n
  std::vector<cplx> kernel;  // forward transform of the conjugate chirp, length m
  std::unique_ptr<Plan> inner;
};

Plan::Plan(std::size_t n) : n_(n) {
  if (n == 0) throw ConfigError("FFT length must be positive");
  twiddles_.resize(n);
  for (std::size_t j = 0; j < n; ++j) {
    const double phase = -2.0 * std::numbers::pi * static_cast<double>(j) / static_cast<double>(n);
    twiddles_[j] = std::polar(1.0, phase);
  }
  factors_ = factorize(n);
  if (!factors_.empty() || n == 1) return;

  chirp_ = std::make_unique<Chirp>();
  chirp_->m = next_pow2(2 * n - 1);
  chirp_->inner = std::make_unique<Plan>(chirp_->m);
  chirp_->w.resize(n);
  const std::size_t two_n = 2 * n;
  for (std::size_t j = 0; j < n; ++j) {
    // j^2 mod 2n keeps the phase argument small for large j.
    const std::size_t jj = (j * j) % two_n;
    chirp_->w[j] = std::polar(1.0, -std::numbers::pi * static_cast<double>(jj) / static_cast<double>(n));
  }
  chirp_->kernel.assign(chirp_->m, cplx{});
  chirp_->kernel[0] = std::conj(chirp_->w[0]);
  for (std::size_t j = 1; j < n; ++j) {
    chirp_->kernel[j] = std::conj(chirp_->w[j]);
    chirp_->kernel[chirp_->m - j] = std::conj(chirp_->w[j]);
  }
  chirp_->inner->forward(chirp_->kernel);
}

Plan::~Plan() = default;

void Plan::butterfly(cplx* out, std::size_t fstride, std::size_t p, std::size_t m, cplx* scratch) const {
  for (std::size_t u = 0; u < m; ++u) {
    for (std::size_t q = 0; q < p; ++q) scratch[q] = out[u + q * m];
    for (std::size_t q1 = 0; q1 < p; ++q1) {
      const std::size_t k = u + q1 * m;
      cplx acc = scratch[0];
      std::size_t tw = 0;
      const std::size_t step = (fstride * k) % n_;
      for (std::size_t q = 1; q < p; ++q) {
        tw += step;
        if (tw >= n_) tw -= n_;
        acc += scratch[q] * twiddles_[tw];
      }
      out[k] = acc;
    }
  }
}

void Plan::work(cplx* out, const cplx* in, std::size_t fstride, std::size_t level, cplx* scratch) const {
  const std::size_t p = factors_[level];
  std::size_t m = 1;
  for (std::size_t l = level + 1; l < factors_.size(); ++l) m *= factors_[l];
  if (m == 1) {
    for (std::size_t j = 0; j < p; ++j) out[j] = in[j * fstride];
  } else {
    for (std::size_t q = 0; q < p; ++q) work(out + q * m, in + q * fstride, fstride * p, level + 1, scratch);
  }
  butterfly(out, fstride, p, m, scratch);
}

void Plan::mixed_radix(std::span<cplx> data) const {
  if (n_ == 1) return;
  std::vector<cplx> in(data.begin(), data.end());
  cplx scratch[8];
  work(data.data(), in.data(), 1, 0, scratch);
}

void Plan::forward(std::span<cplx> data) const {
  if (data.size() != n_) throw ConfigError("FFT buffer length " + std::to_string(data.size()) + " != plan length " + std::to_string(n_));
  if (!chirp_) {
    mixed_radix(data);
    return;
  }
  const Chirp& c = *chirp_;
  std::vector<cplx> a(c.m, cplx{});
  for (std::size_t j = 0; j < n_; ++j) a[j] = data[j] * c.w[j];
  c.inner->forward(a);
  for (std::size_t j = 0; j < c.m; ++j) a[j] *= c.kernel[j];
  c.inner->inverse(a);
  const double inv_m = 1.0 / static_cast<double>(c.m);
  for (std::size_t k = 0; k < n_; ++k) data[k] = a[k] * inv_m * c.w[k];
}

void Plan::inverse(std::span<cplx> data) const {
  for (auto& z : data) z = std::conj(z);
  forward(data);
  for (auto& z : data) z = std::conj(z);
}

const Plan& plan_for(std::size_t n) {
  static std::mutex mutex;
  static std::map<std::size_t, std::unique_ptr<Plan>> cache;
  std::lock_guard lock(mutex);
  auto& slot = cache[n];
  if (!slot) slot = std::make_unique<Plan>(n);
  return *slot;
}

void rfft(std::span<const double> x, std::span<cplx> out) {
  const std::size_t n = x.size();
  if (out.size() > n / 2 + 1) throw ConfigError("rfft: more output bins than n/2+1");
  std::vector<cplx> buf(x.begin(), x.end());
  plan_for(n).forward(buf);
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = buf[k];
}

void irfft(std::span<const cplx> bins, std::span<double> out) {
  const std::size_t n = out.size();
  const std::size_t m = bins.size();
  if (m > n / 2 + 1) throw ConfigError("irfft: more input bins than n/2+1");
  std::vector<cplx> buf(n, cplx{});
  for (std::size_t k = 0; k < m; ++k) {
    const bool self_conjugate = k == 0 || (n % 2 == 0 && k == n / 2);
    if (self_conjugate) {
      buf[k] = cplx(bins[k].real(), 0.0);
    } else {
      buf[k] = bins[k];
      buf[n - k] = std::conj(bins[k]);
    }
  }
  plan_for(n).inverse(buf);
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t j = 0; j < n; ++j) out[j] = buf[j].real() * inv_n;
}

}  // namespace xreg::fft
