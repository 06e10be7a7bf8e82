#include "xreg/config.hpp"

#include <stdexcept>

namespace xreg {

std::string to_string(Method m) {
  switch (m) {
    case Method::xreg: return "xreg";
    case Method::mc_dropout: return "mc_dropout";
    case Method::deep_ensemble: return "deep_ensemble";
  }
  return "?";
}

Method method_from_string(const std::string& s) {
  if (s == "xreg") return Method::xreg;
  if (s == "mc_dropout") return Method::mc_dropout;
  if (s == "deep_ensemble") return Method::deep_ensemble;
  throw std::invalid_argument("unknown method '" + s + "' (expected xreg, mc_dropout or deep_ensemble)");
}

std::string to_string(RegObjective r) { return r == RegObjective::mixture ? "mixture" : "moment_matched"; }

RegObjective reg_objective_from_string(const std::string& s) {
  if (s == "mixture") return RegObjective::mixture;
  if (s == "moment_matched") return RegObjective::moment_matched;
  throw std::invalid_argument("unknown reg_objective '" + s + "' (expected mixture or moment_matched)");
}

void TrainConfig::validate() const {
  if (total_steps < 1) throw std::invalid_argument("train.total_steps must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("train.batch_size must be >= 1");
  if (k_reg < 1) throw std::invalid_argument("train.k_reg must be >= 1");
  if (samples < 1) throw std::invalid_argument("train.samples must be >= 1");
  if (eval_samples < 1) throw std::invalid_argument("train.eval_samples must be >= 1");
  if (eval_interval < 1) throw std::invalid_argument("train.eval_interval must be >= 1");
  for (double lr : {lr_theta_psi, lr_rho_internal, lr_rho_head, lr_psi_internal}) {
    if (!(lr > 0.0)) throw std::invalid_argument("learning rates must be > 0");
  }
}

void ExperimentConfig::validate() const {
  ks.validate();
  model.validate(ks.n_points);
  train.validate();
  if (data.observed_fraction && !(*data.observed_fraction > 0.0 && *data.observed_fraction <= 1.0)) {
    throw std::invalid_argument("data.observed_fraction must lie in (0, 1]");
  }
  if (!(generate.observed_fraction > 0.0 && generate.observed_fraction <= 1.0)) {
    throw std::invalid_argument("generate.observed_fraction must lie in (0, 1]");
  }
  if (generate.n_train < 1 || generate.n_reg < 1 || generate.n_test < 1) {
    throw std::invalid_argument("generate split sizes must be >= 1");
  }
  if (!(baseline.dropout_p >= 0.0 && baseline.dropout_p < 1.0)) throw std::invalid_argument("baseline.dropout_p must lie in [0, 1)");
  if (baseline.ensemble_members < 2) throw std::invalid_argument("baseline.ensemble_members must be >= 2");
}

}  // namespace xreg
