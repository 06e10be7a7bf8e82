#include "xreg/ks.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "xreg/fft.hpp"

namespace xreg::ks {

void KsConfig::validate() const {
  if (n_points < 8) throw std::invalid_argument("n_points must be >= 8");
  if (!(dt > 0.0)) throw std::invalid_argument("dt must be positive");
  if (!(domain_length > 0.0)) throw std::invalid_argument("domain_length must be positive");
  if (train_horizon < 1 || test_horizon < 1) throw std::invalid_argument("horizons must be >= 1");
  if (substeps < 1) throw std::invalid_argument("substeps must be >= 1");
  if (ic_modes < 1 || ic_modes >= n_points / 3) throw std::invalid_argument("ic_modes must be in [1, n_points/3)");
}

EtdRk4Solver::EtdRk4Solver(std::size_t n_points, double domain_length, double dt, bool nonlinear)
    : n_(n_points), dt_(dt), nonlinear_(nonlinear) {
  k_.resize(n_);
  g_.resize(n_);
  e_.resize(n_);
  e2_.resize(n_);
  q_.resize(n_);
  f1_.resize(n_);
  f2_.resize(n_);
  f3_.resize(n_);
  const double base = 2.0 * std::numbers::pi / domain_length;
  const double cutoff = static_cast<double>(n_) / 3.0;
  // Contour points for the phi-function averages (Kassam & Trefethen).
  constexpr int kContour = 32;
  std::vector<cplx> roots(kContour);
  for (int m = 0; m < kContour; ++m) {
    roots[m] = std::exp(cplx(0.0, std::numbers::pi * (m + 0.5) / kContour));
  }
  for (std::size_t j = 0; j < n_; ++j) {
    const long idx = j <= n_ / 2 ? static_cast<long>(j) : static_cast<long>(j) - static_cast<long>(n_);
    const double k = base * static_cast<double>(idx);
    k_[j] = k;
    const bool nyquist = (n_ % 2 == 0) && j == n_ / 2;
    const bool keep = std::abs(static_cast<double>(idx)) < cutoff && !nyquist;
    g_[j] = keep ? cplx(0.0, -0.5 * k) : cplx(0.0, 0.0);

    const double lin = k * k - k * k * k * k;
    const double hl = dt * lin;
    e_[j] = std::exp(hl);
    e2_[j] = std::exp(hl / 2.0);
    cplx q{}, f1{}, f2{}, f3{};
    for (const cplx& r : roots) {
      const cplx lr = hl + r;
      const cplx elr = std::exp(lr);
      q += (std::exp(lr / 2.0) - 1.0) / lr;
      f1 += (-4.0 - lr + elr * (4.0 - 3.0 * lr + lr * lr)) / (lr * lr * lr);
      f2 += (2.0 + lr + elr * (-2.0 + lr)) / (lr * lr * lr);
      f3 += (-4.0 - 3.0 * lr - lr * lr + elr * (4.0 - lr)) / (lr * lr * lr);
    }
    // Real part of the symmetric contour mean; the upper half-circle suffices.
    q_[j] = dt * (q / static_cast<double>(kContour)).real();
    f1_[j] = dt * (f1 / static_cast<double>(kContour)).real();
    f2_[j] = dt * (f2 / static_cast<double>(kContour)).real();
    f3_[j] = dt * (f3 / static_cast<double>(kContour)).real();
  }
}

void EtdRk4Solver::nonlinear_term(const std::vector<cplx>& v, std::vector<cplx>& out) const {
  if (!nonlinear_) {
    std::fill(out.begin(), out.end(), cplx{});
    return;
  }
  const fft::Plan& plan = fft::plan_for(n_);
  out = v;
  plan.inverse(out);
  const double inv_n = 1.0 / static_cast<double>(n_);
  for (auto& z : out) {
    const double u = z.real() * inv_n;
    z = cplx(u * u, 0.0);
  }
  plan.forward(out);
  for (std::size_t j = 0; j < n_; ++j) out[j] *= g_[j];
}

Field EtdRk4Solver::step(const Field& u, std::size_t step_index) const {
  if (u.size() != n_) throw std::invalid_argument("field length does not match solver grid");
  const fft::Plan& plan = fft::plan_for(n_);
  std::vector<cplx> v(u.begin(), u.end());
  plan.forward(v);

  std::vector<cplx> nv(n_), na(n_), nb(n_), nc(n_), a(n_), b(n_), c(n_);
  nonlinear_term(v, nv);
  for (std::size_t j = 0; j < n_; ++j) a[j] = e2_[j] * v[j] + q_[j] * nv[j];
  nonlinear_term(a, na);
  for (std::size_t j = 0; j < n_; ++j) b[j] = e2_[j] * v[j] + q_[j] * na[j];
  nonlinear_term(b, nb);
  for (std::size_t j = 0; j < n_; ++j) c[j] = e2_[j] * a[j] + q_[j] * (2.0 * nb[j] - nv[j]);
  nonlinear_term(c, nc);
  for (std::size_t j = 0; j < n_; ++j) {
    v[j] = e_[j] * v[j] + nv[j] * f1_[j] + 2.0 * (na[j] + nb[j]) * f2_[j] + nc[j] * f3_[j];
  }

  plan.inverse(v);
  Field out(n_);
  const double inv_n = 1.0 / static_cast<double>(n_);
  for (std::size_t j = 0; j < n_; ++j) {
    out[j] = v[j].real() * inv_n;
    if (!std::isfinite(out[j])) {
      throw BlowUpError(step_index, "KS solver produced a non-finite value at step " + std::to_string(step_index));
    }
  }
  return out;
}

Field random_initial_condition(const KsConfig& cfg, Rng& rng) {
  Field u(cfg.n_points, 0.0);
  const double base = 2.0 * std::numbers::pi / static_cast<double>(cfg.n_points);
  for (std::size_t m = 1; m <= cfg.ic_modes; ++m) {
    const double a = rng.normal();
    const double b = rng.normal();
    for (std::size_t j = 0; j < cfg.n_points; ++j) {
      const double phase = base * static_cast<double>(m * j);
      u[j] += a * std::cos(phase) + b * std::sin(phase);
    }
  }
  double mean = 0.0;
  for (double x : u) mean += x;
  mean /= static_cast<double>(u.size());
  double var = 0.0;
  for (double x : u) var += (x - mean) * (x - mean);
  const double sd = std::sqrt(var / static_cast<double>(u.size()));
  for (double& x : u) x = (x - mean) / sd;
  return u;
}

Trajectory simulate(const KsConfig& cfg, const EtdRk4Solver& solver, Field u0, std::size_t horizon) {
  Field u = std::move(u0);
  std::size_t step = 0;
  for (std::size_t i = 0; i < cfg.n_warmup; ++i) u = solver.step(u, step++);
  Trajectory traj;
  traj.states.reserve(horizon + 1);
  traj.states.push_back(u);
  for (std::size_t t = 0; t < horizon; ++t) {
    for (std::size_t s = 0; s < cfg.substeps; ++s) u = solver.step(u, step++);
    traj.states.push_back(u);
  }
  return traj;
}

}  // namespace xreg::ks
