#pragma once

// Calibration and uncertainty metrics over Gaussian-mixture predictions.

#include <cstddef>
#include <span>
#include <vector>

namespace xreg::metrics {

struct CoverageGrid {
  std::vector<double> alphas;

  static CoverageGrid standard();  // 0.1, 0.2, ..., 0.9
  void validate() const;           // strictly increasing, inside (0, 1)
};

// S equal-weight Gaussian components per point. Row-major [S, P] arrays.
// var_gen is non-empty only for head-only predictions, where the component
// variance is var_pred + var_gen.
struct MixturePrediction {
  std::size_t samples = 0;
  std::size_t points = 0;
  std::vector<double> mu;
  std::vector<double> var_pred;
  std::vector<double> var_gen;
  std::vector<double> y;        // [P]
  std::vector<double> weights;  // [P]; empty = all observed

  double component_var(std::size_t s, std::size_t p) const;
  bool observed(std::size_t p) const { return weights.empty() || weights[p] > 0.0; }
  void validate() const;
};

double normal_cdf(double z);

// F(y) = (1/S) sum_s Phi((y - mu_s) / sigma_s) at point p.
double mixture_cdf(const MixturePrediction& pred, std::size_t p, double y);

// Fraction of observed points with F(y) in [(1 - alpha)/2, (1 + alpha)/2].
double central_interval_coverage(const MixturePrediction& pred, double alpha);

// Mean |coverage(alpha) - alpha| over the grid.
double ece_mix(std::span<const double> coverage, const CoverageGrid& grid);

// Observed-point mean of the mixture NLL, via the regularization objective.
double nll_mc(const MixturePrediction& pred);

struct CalibrationResult {
  std::vector<double> alphas;
  std::vector<double> coverage;
  double ece_mix = 0.0;
  double nll_mc = 0.0;
};

CalibrationResult calibrate(const MixturePrediction& pred, const CoverageGrid& grid = CoverageGrid::standard());

struct UncertaintyDecomposition {
  std::vector<double> u_pred;  // mean_s var_pred
  std::vector<double> u_gen;   // head-only: mean_s var_gen; otherwise unbiased Var_s[mu]
  std::vector<double> u_tot;
};

// Throws ad::UsageError when sampled means are needed and S < 2.
UncertaintyDecomposition decompose_uncertainty(const MixturePrediction& pred);

// Observed-point mean of sqrt(u_gen).
double mean_std_mu(const MixturePrediction& pred, const UncertaintyDecomposition& u);

// Spearman rank correlation with average ranks for ties. NaN when either
// input is constant or shorter than two.
double spearman(std::span<const double> a, std::span<const double> b);

// Space-time maps over a teacher-forced segment, each [T, n] row-major.
struct SpatialMaps {
  std::size_t steps = 0;
  std::size_t n_points = 0;
  std::vector<double> truth;
  std::vector<double> abs_error;  // |y - mixture mean|
  std::vector<double> std_mu;     // sqrt(u_gen)
  std::vector<double> total_std;  // sqrt(u_tot)
  double range_lo = 0.0, range_hi = 0.0;  // shared by error and uncertainty panels
  double spearman_error_total = 0.0;      // over observed points
};

// `pred` covers steps * n_points points in (time, space) order.
SpatialMaps spatial_diagnostics(const MixturePrediction& pred, std::size_t steps, std::size_t n_points);

}  // namespace xreg::metrics
