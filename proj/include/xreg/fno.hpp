#pragma once

// 1D Fourier Neural Operator with a mean head, a log sigma_pred head, an
// optional log sigma_gen head, and multiplicative Gaussian noise sites
// h -> h * (1 + sigma * eps) driven by generalization-noise parameters.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "xreg/random.hpp"
#include "xreg/spectral.hpp"
#include "xreg/tensor.hpp"

namespace xreg::fno {

enum class HeadMode { head_only, internal };
std::string to_string(HeadMode mode);
HeadMode head_mode_from_string(const std::string& s);

struct FnoConfig {
  std::size_t n_layers = 4;
  std::size_t n_modes = 12;
  std::size_t width = 8;
  std::size_t in_channels = 2;  // masked field + observation indicator
  HeadMode head_mode = HeadMode::internal;
  bool spectral_noise = false;
  bool internal_predictive_noise = false;
  double log_scale_init = -5.0;
  double log_scale_min = -12.0;
  double log_scale_max = 4.0;

  void validate(std::size_t n_points) const;  // throws std::invalid_argument
  // Latent noise sites: one after each spectral layer, plus the pre-head.
  std::size_t latent_sites() const { return n_layers + 1; }
};

// Owner of each trainable parameter. Train updates write theta and psi;
// regularization updates write rho (internal scales and head weights).
enum class Group { theta, psi, rho_internal, rho_head };
std::string to_string(Group g);
bool train_routed(Group g);

struct Param {
  std::string name;
  Group group;
  ad::Tensor value;
  bool internal_scale = false;  // per-site noise log-scale rather than a weight
};

// Standard-normal draws for one batch of model instances; a batch built by
// repeating inputs S times carries S independent realizations.
struct NoiseRealization {
  std::vector<ad::Tensor> latent;      // per site [rows, n, width]
  std::vector<ad::Tensor> spectral;    // per layer [rows, modes, width, 2] (re/im share a draw)
  std::vector<ad::Tensor> predictive;  // per site [rows, n, width], when internal predictive noise is on
};

struct PredictionMoments {
  ad::Tensor mu;              // [batch, n]
  ad::Tensor log_sigma_pred;  // [batch, n], clamped
  ad::Tensor log_sigma_gen;   // [batch, n], head_only mode only
};

class NonFiniteError : public std::runtime_error {
 public:
  NonFiniteError(std::size_t layer, const std::string& what) : std::runtime_error(what), layer_(layer) {}
  std::size_t layer() const { return layer_; }

 private:
  std::size_t layer_;
};

class Model {
 public:
  Model(const FnoConfig& cfg, std::uint64_t seed);
  // Parameters are shared handles, so copies must be explicit.
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;
  Model clone() const;

  const FnoConfig& config() const { return cfg_; }

  // Deterministic mean path when omega is null; otherwise noise sites use omega.
  PredictionMoments forward(const ad::Tensor& x, const NoiseRealization* omega = nullptr) const;

  // Inverted dropout with keep-probability 1-p after every activation.
  PredictionMoments dropout_forward(const ad::Tensor& x, double p, Rng& rng) const;

  NoiseRealization sample_noise(std::size_t rows, std::size_t n, Rng& rng) const;

  std::vector<Param>& params() { return params_; }
  const std::vector<Param>& params() const { return params_; }
  const Param& param(const std::string& name) const;
  Param& param(const std::string& name);

  std::size_t parameter_count() const;
  std::size_t parameter_count(Group g) const;

  // Clamped generalization-noise log-scales per latent site (internal mode).
  std::vector<double> latent_log_scales() const;

  // Flat parameter vector in params() order, and the inverse.
  std::vector<double> flatten() const;
  void unflatten(const std::vector<double>& flat);
  // Digest of the values held by one group.
  std::string group_digest(Group g) const;
  // Digest of (name, group, shape) of every parameter of a group.
  std::string layout_digest(Group g) const;

  void zero_grad();

 private:
  Param& add(std::string name, Group group, ad::Tensor value, bool internal_scale = false);
  ad::Tensor noise_scale(const ad::Tensor& log_scale) const;
  const ad::Tensor& t(std::size_t index) const { return params_[index].value; }

  FnoConfig cfg_;
  std::vector<Param> params_;
  std::size_t lift_w_ = 0, lift_b_ = 0, proj_w_ = 0, proj_b_ = 0;
  std::size_t mu_w_ = 0, mu_b_ = 0, sp_w_ = 0, sp_b_ = 0;
  std::optional<std::size_t> sg_w_, sg_b_;
  std::vector<std::size_t> kernel_, conv_w_, conv_b_;
  std::vector<std::size_t> gen_scale_, spec_scale_, pred_scale_;
};

// Inverted-dropout multiplier: 0 with probability p, else 1/(1-p).
ad::Tensor dropout_mask(const ad::Shape& shape, double p, Rng& rng);

// Checkpoint = checkpoint.json (config, layout, step, digests) + params.f64.
void save_checkpoint(const Model& model, const std::filesystem::path& dir, std::size_t step);
struct LoadedCheckpoint {
  Model model;
  std::size_t step;
};
LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace xreg::fno
