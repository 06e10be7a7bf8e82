#include "xreg/objectives.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

namespace xreg::obj {

using ad::Tensor;

namespace {

const double kLog2Pi = std::log(2.0 * std::numbers::pi);

void check_samples(const Tensor& mu, const Tensor& var, const Tensor& y, const char* op) {
  if (mu.rank() != 2) throw ad::ShapeError(std::string(op) + ": sample means must be [S, P]");
  if (mu.dim(0) == 0) throw ad::UsageError(std::string(op) + ": need at least one Monte Carlo sample");
  if (var.shape() != mu.shape()) throw ad::ShapeError(std::string(op) + ": variance shape differs from mean shape");
  if (y.size() != mu.dim(1)) throw ad::ShapeError(std::string(op) + ": target length differs from point count");
}

void check_positive(const Tensor& var, const char* op) {
  for (double v : var.values()) {
    if (!(v > 0.0)) throw NumericalGuardError(std::string(op) + ": non-positive variance " + std::to_string(v));
  }
}

// y tiled over S rows; a constant.
Tensor tile_target(const Tensor& y, std::size_t samples) {
  return ad::repeat_batch(ad::reshape(y, {1, y.size()}), samples);
}

Tensor average(const Tensor& pointwise, std::span<const double> weights) {
  if (weights.empty()) return ad::mean(pointwise);
  return ad::weighted_mean(pointwise, weights);
}

// log N(y; mu, var) elementwise on [S, P].
Tensor log_density(const Tensor& mu, const Tensor& var, const Tensor& y_tiled) {
  const Tensor sq = ad::square(ad::sub(y_tiled, mu));
  const Tensor inner = ad::add(ad::log(var), ad::div(sq, var));
  return ad::scale(ad::add_scalar(inner, kLog2Pi), -0.5);
}

// -log (1/S) sum_s exp(log p_s), [P]
Tensor negative_log_mean_exp(const Tensor& log_p) { return ad::neg(ad::logmeanexp_rows(log_p)); }

}  // namespace

Tensor mixture_nll_pointwise(const Tensor& mu, const Tensor& var, const Tensor& y) {
  check_samples(mu, var, y, "mixture_nll");
  check_positive(var, "mixture_nll");
  return negative_log_mean_exp(log_density(mu, var, tile_target(y, mu.dim(0))));
}

Tensor reg_nll_mixture(const MixtureBatch& batch) {
  return average(mixture_nll_pointwise(batch.mu, batch.var, batch.y), batch.weights);
}

MomentMatchedLoss reg_nll_moment_matched(const MixtureBatch& batch) {
  check_samples(batch.mu, batch.var, batch.y, "moment_matched_nll");
  check_positive(batch.var, "moment_matched_nll");
  const Tensor mu_mm = ad::mean_rows(batch.mu);
  const Tensor second = ad::mean_rows(ad::add(batch.var, ad::square(batch.mu)));
  Tensor var_mm = ad::sub(second, ad::square(mu_mm));
  MomentMatchedLoss out;
  for (double v : var_mm.values()) out.floored += v < kVarianceFloor ? 1 : 0;
  var_mm = ad::clamp(var_mm, kVarianceFloor, std::numeric_limits<double>::infinity());
  const Tensor mu_row = ad::reshape(mu_mm, {1, mu_mm.size()});
  const Tensor var_row = ad::reshape(var_mm, {1, var_mm.size()});
  const Tensor nll = ad::neg(ad::reshape(log_density(mu_row, var_row, ad::reshape(batch.y, {1, batch.y.size()})), {batch.y.size()}));
  out.loss = average(nll, batch.weights);
  return out;
}

Tensor train_nll_hierarchical(const Tensor& mu, const Tensor& var_pred, const Tensor& var_gen, const Tensor& y,
                              std::span<const double> weights) {
  check_samples(mu, var_pred, y, "train_nll");
  check_positive(var_pred, "train_nll");
  Tensor sq = ad::square(ad::sub(tile_target(y, mu.dim(0)), mu));
  if (var_gen.defined()) {
    if (var_gen.shape() != mu.shape()) throw ad::ShapeError("train_nll: var_gen shape differs from mean shape");
    sq = ad::add(sq, var_gen);
  }
  const Tensor inner = ad::add(ad::log(var_pred), ad::div(sq, var_pred));
  const Tensor log_p = ad::scale(ad::add_scalar(inner, kLog2Pi), -0.5);
  return average(negative_log_mean_exp(log_p), weights);
}

HeadOnlyLosses head_only_losses(const Tensor& mu, const Tensor& var_pred, const Tensor& var_gen, const Tensor& y,
                                std::span<const double> weights) {
  const std::size_t p = mu.size();
  if (var_pred.size() != p || var_gen.size() != p || y.size() != p) throw ad::ShapeError("head_only_losses: size mismatch");
  check_positive(var_pred, "head_only_losses");
  for (double v : var_gen.values()) {
    if (!(v >= 0.0)) throw NumericalGuardError("head_only_losses: negative generalization variance");
  }
  const auto row = [p](const Tensor& t) { return ad::reshape(t, {1, p}); };
  HeadOnlyLosses out;
  out.train = train_nll_hierarchical(row(mu), row(var_pred), row(var_gen), y, weights);
  const Tensor var_tot = ad::add(var_pred, var_gen);
  out.reg = average(mixture_nll_pointwise(row(mu), row(var_tot), y), weights);
  return out;
}

}  // namespace xreg::obj
