#pragma once

// Negative log-likelihood objectives over S Monte Carlo predictive samples.
//
// Sample tensors are [S, P]: row s holds one model realization's per-point
// mean or variance over P flattened (batch x grid) target points. Targets are
// [P]. Every loss is averaged over points with nonnegative weights (the
// observation mask), so unobserved targets never contribute.

#include <cstddef>
#include <span>
#include <stdexcept>

#include "xreg/tensor.hpp"

namespace xreg::obj {

class NumericalGuardError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

inline constexpr double kVarianceFloor = 1e-12;

struct MixtureBatch {
  ad::Tensor mu;                    // [S, P]
  ad::Tensor var;                   // [S, P], strictly positive
  ad::Tensor y;                     // [P]
  std::span<const double> weights;  // [P]; empty means uniform
};

// -log (1/S) sum_s N(y; mu_s, var_s) for each point, log-sum-exp stabilized. [P]
ad::Tensor mixture_nll_pointwise(const ad::Tensor& mu, const ad::Tensor& var, const ad::Tensor& y);

ad::Tensor reg_nll_mixture(const MixtureBatch& batch);

struct MomentMatchedLoss {
  ad::Tensor loss;
  std::size_t floored = 0;  // points whose matched variance hit kVarianceFloor
};

// Gaussian NLL under the mixture's first two moments.
MomentMatchedLoss reg_nll_moment_matched(const MixtureBatch& batch);

// Hierarchical train likelihood: per sample
//   log p = -1/2 [log(2 pi var_pred) + ((y - mu)^2 + var_gen) / var_pred],
// mixed over samples with log-sum-exp. `var_gen` may be undefined (internal
// mode, where generalization noise lives in the sampled means).
ad::Tensor train_nll_hierarchical(const ad::Tensor& mu, const ad::Tensor& var_pred, const ad::Tensor& var_gen,
                                  const ad::Tensor& y, std::span<const double> weights);

struct HeadOnlyLosses {
  ad::Tensor train;
  ad::Tensor reg;
};

// Head-only pair on [P] tensors: train keeps var_gen as a penalty over
// var_pred; reg scores the total variance var_pred + var_gen.
HeadOnlyLosses head_only_losses(const ad::Tensor& mu, const ad::Tensor& var_pred, const ad::Tensor& var_gen,
                                const ad::Tensor& y, std::span<const double> weights = {});

}  // namespace xreg::obj
