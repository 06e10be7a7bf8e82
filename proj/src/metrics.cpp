#include "xreg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <stdexcept>

#include "xreg/objectives.hpp"
#include "xreg/tensor.hpp"

namespace xreg::metrics {

CoverageGrid CoverageGrid::standard() {
  CoverageGrid g;
  for (int i = 1; i <= 9; ++i) g.alphas.push_back(i / 10.0);
  return g;
}

void CoverageGrid::validate() const {
  if (alphas.empty()) throw std::invalid_argument("coverage grid is empty");
  for (std::size_t i = 0; i < alphas.size(); ++i) {
    if (!(alphas[i] > 0.0 && alphas[i] < 1.0)) throw std::invalid_argument("coverage levels must lie in (0, 1)");
    if (i > 0 && !(alphas[i] > alphas[i - 1])) throw std::invalid_argument("coverage levels must be strictly increasing");
  }
}

double MixturePrediction::component_var(std::size_t s, std::size_t p) const {
  const std::size_t i = s * points + p;
  return var_gen.empty() ? var_pred[i] : var_pred[i] + var_gen[i];
}

void MixturePrediction::validate() const {
  if (samples == 0) throw ad::UsageError("mixture prediction needs at least one sample");
  const std::size_t n = samples * points;
  if (mu.size() != n || var_pred.size() != n || (!var_gen.empty() && var_gen.size() != n) || y.size() != points ||
      (!weights.empty() && weights.size() != points)) {
    throw ad::ShapeError("mixture prediction arrays do not match [samples, points]");
  }
}

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

double mixture_cdf(const MixturePrediction& pred, std::size_t p, double y) {
  double acc = 0.0;
  for (std::size_t s = 0; s < pred.samples; ++s) {
    const double sd = std::sqrt(pred.component_var(s, p));
    acc += normal_cdf((y - pred.mu[s * pred.points + p]) / sd);
  }
  return acc / static_cast<double>(pred.samples);
}

namespace {

std::vector<double> observed_pit(const MixturePrediction& pred) {
  pred.validate();
  std::vector<double> pit;
  pit.reserve(pred.points);
  for (std::size_t p = 0; p < pred.points; ++p) {
    if (pred.observed(p)) pit.push_back(mixture_cdf(pred, p, pred.y[p]));
  }
  return pit;
}

double coverage_from_pit(const std::vector<double>& pit, double alpha) {
  if (pit.empty()) return 0.0;
  const double lo = 0.5 * (1.0 - alpha), hi = 0.5 * (1.0 + alpha);
  std::size_t hit = 0;
  for (double f : pit) hit += (f >= lo && f <= hi) ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(pit.size());
}

}  // namespace

double central_interval_coverage(const MixturePrediction& pred, double alpha) {
  return coverage_from_pit(observed_pit(pred), alpha);
}

double ece_mix(std::span<const double> coverage, const CoverageGrid& grid) {
  grid.validate();
  if (coverage.size() != grid.alphas.size()) throw std::invalid_argument("coverage does not cover the full grid");
  double acc = 0.0;
  for (std::size_t i = 0; i < coverage.size(); ++i) acc += std::abs(coverage[i] - grid.alphas[i]);
  return acc / static_cast<double>(coverage.size());
}

double nll_mc(const MixturePrediction& pred) {
  pred.validate();
  ad::NoGradScope no_grad;
  std::vector<double> var(pred.samples * pred.points);
  for (std::size_t s = 0; s < pred.samples; ++s)
    for (std::size_t p = 0; p < pred.points; ++p) var[s * pred.points + p] = pred.component_var(s, p);
  obj::MixtureBatch batch{ad::Tensor({pred.samples, pred.points}, pred.mu), ad::Tensor({pred.samples, pred.points}, std::move(var)),
                          ad::Tensor({pred.points}, pred.y), pred.weights};
  return obj::reg_nll_mixture(batch).item();
}

CalibrationResult calibrate(const MixturePrediction& pred, const CoverageGrid& grid) {
  grid.validate();
  const auto pit = observed_pit(pred);
  CalibrationResult r;
  r.alphas = grid.alphas;
  for (double a : grid.alphas) r.coverage.push_back(coverage_from_pit(pit, a));
  r.ece_mix = ece_mix(r.coverage, grid);
  r.nll_mc = nll_mc(pred);
  return r;
}

UncertaintyDecomposition decompose_uncertainty(const MixturePrediction& pred) {
  pred.validate();
  const std::size_t S = pred.samples, P = pred.points;
  const bool head = !pred.var_gen.empty();
  if (!head && S < 2) throw ad::UsageError("sampled generalization variance needs at least two samples");
  UncertaintyDecomposition u;
  u.u_pred.assign(P, 0.0);
  u.u_gen.assign(P, 0.0);
  u.u_tot.assign(P, 0.0);
  for (std::size_t p = 0; p < P; ++p) {
    double vp = 0.0, vg = 0.0, m = 0.0;
    for (std::size_t s = 0; s < S; ++s) {
      vp += pred.var_pred[s * P + p];
      if (head) vg += pred.var_gen[s * P + p];
      m += pred.mu[s * P + p];
    }
    vp /= static_cast<double>(S);
    if (head) {
      vg /= static_cast<double>(S);
    } else {
      m /= static_cast<double>(S);
      for (std::size_t s = 0; s < S; ++s) {
        const double d = pred.mu[s * P + p] - m;
        vg += d * d;
      }
      vg /= static_cast<double>(S - 1);
    }
    u.u_pred[p] = vp;
    u.u_gen[p] = vg;
    u.u_tot[p] = vp + vg;
  }
  return u;
}

double mean_std_mu(const MixturePrediction& pred, const UncertaintyDecomposition& u) {
  double acc = 0.0;
  std::size_t n = 0;
  for (std::size_t p = 0; p < pred.points; ++p) {
    if (!pred.observed(p)) continue;
    acc += std::sqrt(u.u_gen[p]);
    ++n;
  }
  return n == 0 ? 0.0 : acc / static_cast<double>(n);
}

namespace {

std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> rank(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = r;
    i = j + 1;
  }
  return rank;
}

}  // namespace

double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("spearman: length mismatch");
  const std::size_t n = a.size();
  if (n < 2) return std::numeric_limits<double>::quiet_NaN();
  const auto ra = average_ranks(a), rb = average_ranks(b);
  const double mean = 0.5 * static_cast<double>(n + 1);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sab += (ra[i] - mean) * (rb[i] - mean);
    saa += (ra[i] - mean) * (ra[i] - mean);
    sbb += (rb[i] - mean) * (rb[i] - mean);
  }
  if (saa == 0.0 || sbb == 0.0) return std::numeric_limits<double>::quiet_NaN();
  return sab / std::sqrt(saa * sbb);
}

SpatialMaps spatial_diagnostics(const MixturePrediction& pred, std::size_t steps, std::size_t n_points) {
  pred.validate();
  if (steps * n_points != pred.points) throw ad::ShapeError("spatial maps: prediction does not cover steps x n_points");
  const auto u = decompose_uncertainty(pred);
  SpatialMaps m;
  m.steps = steps;
  m.n_points = n_points;
  m.truth = pred.y;
  m.abs_error.resize(pred.points);
  m.std_mu.resize(pred.points);
  m.total_std.resize(pred.points);
  std::vector<double> err_obs, tot_obs;
  for (std::size_t p = 0; p < pred.points; ++p) {
    double mean = 0.0;
    for (std::size_t s = 0; s < pred.samples; ++s) mean += pred.mu[s * pred.points + p];
    mean /= static_cast<double>(pred.samples);
    m.abs_error[p] = std::abs(pred.y[p] - mean);
    m.std_mu[p] = std::sqrt(u.u_gen[p]);
    m.total_std[p] = std::sqrt(u.u_tot[p]);
    if (pred.observed(p)) {
      err_obs.push_back(m.abs_error[p]);
      tot_obs.push_back(m.total_std[p]);
    }
  }
  const auto [lo, hi] = std::minmax_element(m.total_std.begin(), m.total_std.end());
  m.range_lo = *lo;
  m.range_hi = *hi;
  m.spearman_error_total = spearman(err_obs, tot_obs);
  return m;
}

}  // namespace xreg::metrics
