#pragma once

// Kuramoto-Sivashinsky trajectories on a periodic 1D domain:
//   u_t + u u_x + u_xx + u_xxxx = 0
// integrated with the exponential time-differencing RK4 scheme in Fourier
// space, with 2/3-rule dealiasing of the quadratic term.

#include <complex>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "xreg/random.hpp"

namespace xreg::ks {

using Field = std::vector<double>;

struct KsConfig {
  std::size_t n_points = 160;
  double domain_length = 64.0;
  double dt = 0.1;
  std::size_t substeps = 1;  // solver steps between stored states
  std::size_t n_warmup = 500;
  std::size_t train_horizon = 10;
  std::size_t test_horizon = 200;
  std::size_t ic_modes = 8;
  std::uint64_t seed = 0;

  void validate() const;  // throws std::invalid_argument
};

class BlowUpError : public std::runtime_error {
 public:
  BlowUpError(std::size_t step, const std::string& what) : std::runtime_error(what), step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

class EtdRk4Solver {
 public:
  EtdRk4Solver(std::size_t n_points, double domain_length, double dt, bool nonlinear = true);

  // Advances u by one time step; `step_index` only labels blow-up errors.
  Field step(const Field& u, std::size_t step_index = 0) const;

  std::size_t n_points() const { return n_; }
  double dt() const { return dt_; }
  // Physical wavenumber of Fourier bin j.
  double wavenumber(std::size_t j) const { return k_[j]; }

 private:
  using cplx = std::complex<double>;
  void nonlinear_term(const std::vector<cplx>& v, std::vector<cplx>& out) const;

  std::size_t n_;
  double dt_;
  bool nonlinear_;
  std::vector<double> k_;
  std::vector<double> e_, e2_, q_, f1_, f2_, f3_;
  std::vector<cplx> g_;  // -i k / 2 with dealiasing mask applied
};

struct Trajectory {
  std::vector<Field> states;  // horizon + 1 states
};

// Band-limited random initial condition over modes 1..ic_modes, rescaled to
// unit standard deviation.
Field random_initial_condition(const KsConfig& cfg, Rng& rng);

// Burn-in from `u0`, then records horizon+1 states every `substeps` steps.
Trajectory simulate(const KsConfig& cfg, const EtdRk4Solver& solver, Field u0, std::size_t horizon);

}  // namespace xreg::ks
