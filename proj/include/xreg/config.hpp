#pragma once

// Resolved experiment configuration. Every field carries its default, so an
// empty config file resolves to the reference setup.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "xreg/dataset.hpp"
#include "xreg/fno.hpp"
#include "xreg/ks.hpp"

namespace xreg {

enum class Method { xreg, mc_dropout, deep_ensemble };
std::string to_string(Method m);
Method method_from_string(const std::string& s);

enum class RegObjective { mixture, moment_matched };
std::string to_string(RegObjective r);
RegObjective reg_objective_from_string(const std::string& s);

struct TrainConfig {
  std::size_t total_steps = 30000;
  std::size_t batch_size = 16;
  std::size_t k_reg = 5;
  std::size_t samples = 10;  // Monte Carlo realizations per train/reg step
  double lr_theta_psi = 1e-3;
  double lr_rho_internal = 1e-2;
  double lr_rho_head = 1e-3;
  double lr_psi_internal = 1e-2;
  std::size_t eval_interval = 250;
  std::size_t eval_samples = 10;
  std::size_t eval_max_pairs = 512;        // periodic evals score a fixed strided subset; 0 = all
  std::size_t final_eval_max_pairs = 0;    // 0 = all
  std::size_t spatial_segment = 100;       // teacher-forced steps in the spatial maps
  RegObjective reg_objective = RegObjective::mixture;
  bool reg_updates = true;  // false gives the matched no-regularization timing baseline
  std::uint64_t seed = 0;

  void validate() const;  // throws std::invalid_argument
};

// Run-time view of a stored dataset. Unset mask fields keep the dataset's own mask.
struct DataConfig {
  std::optional<double> observed_fraction;
  std::optional<std::uint64_t> mask_seed;
  std::size_t train_trajectories = 0;  // 0 = every train trajectory in the dataset
};

struct BaselineConfig {
  double dropout_p = 0.1;
  std::size_t ensemble_members = 3;
};

struct ExperimentConfig {
  ks::KsConfig ks;
  data::GenerateOptions generate;
  DataConfig data;
  fno::FnoConfig model;
  TrainConfig train;
  BaselineConfig baseline;
  Method method = Method::xreg;

  void validate() const;
};

}  // namespace xreg
