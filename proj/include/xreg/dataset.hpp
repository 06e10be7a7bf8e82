#pragma once

// Teacher-forced one-step pair datasets built from KS trajectories, with a
// fixed spatial observation mask and trajectory-disjoint train/reg/test splits.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "xreg/ks.hpp"
#include "xreg/tensor.hpp"

namespace xreg::data {

using ks::Field;

enum class Split { train, reg, test };
std::string to_string(Split split);

struct ObservationMask {
  double observed_fraction = 1.0;
  std::uint64_t seed = 0;
  std::size_t n_points = 0;
  std::vector<std::size_t> indices;  // sorted, unique

  // 1.0 at observed points, 0.0 elsewhere.
  std::vector<double> indicator() const;
  std::size_t observed() const { return indices.size(); }
};

// Samples round(fraction * n_points) distinct grid points from `seed`.
ObservationMask make_mask(std::size_t n_points, double observed_fraction, std::uint64_t seed);

struct MaskedField {
  Field values;     // unobserved points zeroed
  Field indicator;  // 1 observed, 0 unobserved
};

MaskedField apply_mask(const Field& field, const ObservationMask& mask);

struct PairDataset {
  Split split = Split::train;
  std::size_t n_points = 0;
  std::vector<Field> inputs;
  std::vector<Field> targets;
  std::vector<std::size_t> trajectory;  // trajectory index within the split
  std::vector<std::size_t> time;        // index of the input state
  ObservationMask mask;

  std::size_t size() const { return inputs.size(); }
  std::size_t n_trajectories() const;
};

struct DatasetBundle {
  ks::KsConfig ks;
  std::size_t n_train = 0, n_reg = 0, n_test = 0;
  std::size_t max_retries = 0;
  PairDataset train, reg, test;

  const PairDataset& split(Split s) const;
};

struct GenerateOptions {
  std::size_t n_train = 50;
  std::size_t n_reg = 50;
  std::size_t n_test = 50;
  double observed_fraction = 1.0;
  std::uint64_t mask_seed = 0;
  std::size_t max_retries = 10;
};

// Independent random initial conditions per trajectory; train and reg use
// the train horizon, test uses the test horizon. Deterministic in cfg.seed.
DatasetBundle generate_dataset(const ks::KsConfig& cfg, const GenerateOptions& opts);

// Pairs of the first `n_traj` trajectories (trajectory indices are in
// generation order, so this equals generating with a smaller split).
PairDataset first_trajectories(const PairDataset& ds, std::size_t n_traj);

// Replaces the mask of every split.
void set_mask(DatasetBundle& bundle, const ObservationMask& mask);

// Model input [batch, n, 2]: masked field and observation indicator.
ad::Tensor model_input(const PairDataset& ds, const std::vector<std::size_t>& rows);
// Targets [batch, n] (unmasked; losses weight by the mask).
ad::Tensor target_tensor(const PairDataset& ds, const std::vector<std::size_t>& rows);
// Per-point loss weights [batch * n]: the mask indicator tiled over rows.
std::vector<double> target_weights(const PairDataset& ds, std::size_t batch);

// --- persistence -------------------------------------------------------------

// Writes manifest.json plus one binary array per split and role.
void save_dataset(const DatasetBundle& bundle, const std::filesystem::path& dir);
DatasetBundle load_dataset(const std::filesystem::path& dir);

}  // namespace xreg::data
