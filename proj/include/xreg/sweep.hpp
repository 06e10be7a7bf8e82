#pragma once

// Sweep orchestration over observed fraction or train size, one run
// directory per (value, method, seed), plus the summary table and the
// aggregate plot-data files.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "xreg/config.hpp"
#include "xreg/dataset.hpp"

namespace xreg::sweep {

enum class Axis { observed_fraction, train_size };
std::string to_string(Axis a);
Axis axis_from_string(const std::string& s);

inline constexpr std::string_view kSummaryHeader =
    "axis,value,method,seed,test_nll_mc,test_ece_mix,reg_ece_mix,mean_std_mu,status";
inline constexpr std::string_view kPlotHeader = "axis,value,method,n_seeds,mean,min,max";

struct SweepSpec {
  Axis axis = Axis::observed_fraction;
  std::vector<double> values;
  std::vector<Method> methods{Method::xreg, Method::mc_dropout, Method::deep_ensemble};
  std::vector<std::uint64_t> seeds{0};
  double fixed_observed_fraction = 0.7;  // train-size axis only
  std::size_t fixed_train_size = 50;     // observed-fraction axis only
  std::size_t workers = 1;

  // Defaults: {0.4, 0.6, 0.8, 1.0} or {20, 30, 40, 70}.
  static SweepSpec defaults(Axis axis);
  void validate() const;  // throws std::invalid_argument
};

struct PointResult {
  double value = 0.0;
  Method method = Method::xreg;
  std::uint64_t seed = 0;
  std::filesystem::path run_dir;
  std::string status;  // "ok" or "failed: <reason>"
  double test_nll_mc = 0.0, test_ece_mix = 0.0, reg_ece_mix = 0.0, mean_std_mu = 0.0;
};

// Run directory of one point, relative to the sweep directory.
std::filesystem::path point_dir(const SweepSpec& spec, double value, Method method, std::uint64_t seed);

// The experiment configuration of one sweep point.
ExperimentConfig point_config(const ExperimentConfig& base, const SweepSpec& spec, double value, Method method,
                              std::uint64_t seed);

// Runs (or resumes) every point. Failures are recorded in the status column
// and the sweep continues.
std::vector<PointResult> run_sweep(const data::DatasetBundle& stored, const ExperimentConfig& base, const SweepSpec& spec,
                                   const std::filesystem::path& dir, const std::string& dataset_ref,
                                   const std::function<void(const PointResult&)>& progress = {});

std::string value_label(double v);

void write_summary(const std::filesystem::path& path, const SweepSpec& spec, const std::vector<PointResult>& points);
std::vector<PointResult> read_summary(const std::filesystem::path& path);

// nll_vs_axis.csv, ece_vs_axis.csv, std_mu_vs_axis.csv, reg_ece_vs_axis.csv
// under dir/plot_data, aggregated over seeds (failed points skipped).
std::vector<std::filesystem::path> write_plot_data(const std::filesystem::path& dir, Axis axis,
                                                   const std::vector<PointResult>& points);

}  // namespace xreg::sweep
