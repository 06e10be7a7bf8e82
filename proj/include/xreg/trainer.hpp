#pragma once

// Alternating train/regularization optimization with ownership routing, the
// MC-dropout and deep-ensemble baselines, and the run-directory artifacts.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "xreg/config.hpp"
#include "xreg/dataset.hpp"
#include "xreg/fno.hpp"
#include "xreg/metrics.hpp"
#include "xreg/optimizer.hpp"

namespace xreg::train {

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(std::size_t step, const std::string& what) : std::runtime_error(what), step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

class RoutingViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

struct TimingRecord {
  std::size_t k_reg = 1;
  std::size_t train_steps = 0, reg_steps = 0;
  double train_seconds = 0.0, reg_seconds = 0.0;

  double c_train() const;
  double c_reg() const;
  double overhead_estimate() const;
};

// 1 + (1/k_reg) * (C_reg / C_train)
double overhead_estimate(std::size_t k_reg, double cost_ratio);

GroupRates rates_from(const TrainConfig& cfg);

// --- single steps ----------------------------------------------------------

struct Batch {
  ad::Tensor x;                  // [B, n, 2]
  ad::Tensor y;                  // [B * n]
  std::vector<double> weights;   // [B * n]
};
Batch make_batch(const data::PairDataset& ds, const std::vector<std::size_t>& rows);

// Uniform with replacement.
std::vector<std::size_t> sample_rows(std::size_t n_pairs, std::size_t batch, Rng& rng);

// Loss of S noise realizations, recorded on the active tape.
ad::Tensor xreg_train_loss(const fno::Model& model, const Batch& b, std::size_t samples, Rng& noise);
ad::Tensor xreg_reg_loss(const fno::Model& model, const Batch& b, std::size_t samples, RegObjective objective, Rng& noise);

// Train update: writes (theta, psi) only. Returns the loss.
double train_step(fno::Model& model, Optimizer& opt, const Batch& b, std::size_t samples, Rng& noise);
// Regularization update: writes rho only.
double reg_step(fno::Model& model, Optimizer& opt, const Batch& b, std::size_t samples, RegObjective objective, Rng& noise);

// Heteroscedastic Gaussian NLL step on (theta, psi); dropout when p > 0.
double baseline_step(fno::Model& model, Optimizer& opt, const Batch& b, double dropout_p, Rng& noise);

// --- prediction --------------------------------------------------------------

// S mixture components for one input batch; arrays are [S, B * n].
struct SampleBlock {
  std::size_t samples = 0;
  std::vector<double> mu, var_pred, var_gen;
};
using Sampler = std::function<SampleBlock(const ad::Tensor& x, Rng& rng)>;

// Internal mode: S noise realizations. Head-only: one component with the
// sigma_gen head reported separately.
Sampler xreg_sampler(const fno::Model& model, std::size_t samples);
Sampler dropout_sampler(const fno::Model& model, double p, std::size_t samples);
Sampler ensemble_sampler(std::vector<const fno::Model*> members);

metrics::MixturePrediction predict(const Sampler& sampler, const data::PairDataset& ds, const std::vector<std::size_t>& rows,
                                   Rng& rng);

// Every `stride`-th pair so that at most max_pairs remain; 0 keeps all.
std::vector<std::size_t> eval_rows(const data::PairDataset& ds, std::size_t max_pairs);

struct EvalRecord {
  metrics::CalibrationResult calibration;
  double mean_std_mu = 0.0;
  double mean_sigma_pred = 0.0;
  double mean_log_sigma_gen_head = 0.0;  // head-only mode
  std::size_t pairs = 0;
};
EvalRecord evaluate(const Sampler& sampler, const data::PairDataset& ds, const std::vector<std::size_t>& rows, Rng& rng);

// Teacher-forced segment: the first `steps` pairs of test trajectory 0.
metrics::SpatialMaps spatial_maps(const Sampler& sampler, const data::PairDataset& test, std::size_t steps, Rng& rng);

// --- runs --------------------------------------------------------------------

enum class StepKind { train, reg };

struct StepEvent {
  std::size_t step;
  StepKind kind;
  double loss;
  const fno::Model& model;
};

struct MetricsRow {
  std::size_t step = 0;
  double train_loss = 0.0, reg_loss = 0.0;
  EvalRecord reg, test;
  std::vector<double> log_sigma_gen;  // per latent site (internal xreg)
};

struct RunOptions {
  std::filesystem::path run_dir;  // empty: nothing is written
  bool resume = true;
  bool audit_routing = true;      // digest (theta, psi) and rho around every step
  bool write_spatial_maps = true;
  nlohmann::json provenance = nlohmann::json::object();  // echoed into config.json
  std::function<void(const StepEvent&)> on_step;
  std::function<void(const MetricsRow&)> on_eval;
};

struct RunResult {
  std::vector<MetricsRow> history;
  TimingRecord timing;
  std::size_t reg_updates = 0;
  std::size_t resumed_from = 0;
  metrics::SpatialMaps maps;
  const MetricsRow& final() const { return history.back(); }
};

// Applies DataConfig (mask override, train-trajectory subset) to a stored dataset.
data::DatasetBundle prepare_data(const data::DatasetBundle& stored, const DataConfig& cfg);

// Dispatches on cfg.method.
RunResult run(const data::DatasetBundle& data, const ExperimentConfig& cfg, const RunOptions& options = {});

RunResult run_xreg(const data::DatasetBundle& data, const ExperimentConfig& cfg, const RunOptions& options = {});
RunResult run_mc_dropout(const data::DatasetBundle& data, const ExperimentConfig& cfg, const RunOptions& options = {});
RunResult run_deep_ensemble(const data::DatasetBundle& data, const ExperimentConfig& cfg, const RunOptions& options = {});

// Re-scores the checkpoint(s) of a finished run on one split.
EvalRecord evaluate_run(const std::filesystem::path& run_dir, const data::DatasetBundle& data, data::Split split,
                        std::size_t max_pairs = 0);

// Column header of metrics.csv for a method/model combination.
std::string metrics_header(const ExperimentConfig& cfg);

// Build-time digest of the library sources.
std::string code_digest();

}  // namespace xreg::train
