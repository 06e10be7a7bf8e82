#include "xreg/serialize.hpp"

#include <fstream>
#include <optional>
#include <set>

namespace xreg::serialize {

namespace {

// Reads known keys from one JSON object and rejects the rest.
class Reader {
 public:
  Reader(const json& j, std::string section) : j_(j), section_(std::move(section)) {
    if (!j_.is_object()) throw ConfigError("section '" + section_ + "' must be an object");
  }

  template <typename T>
  void get(const char* key, T& field) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      field = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(section_ + "." + key + ": " + e.what());
    }
  }

  template <typename T>
  void get_optional(const char* key, std::optional<T>& field) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    if (j_.at(key).is_null()) {
      field.reset();
      return;
    }
    T v{};
    get(key, v);
    field = v;
  }

  template <typename T, typename Parse>
  void get_enum(const char* key, T& field, Parse parse) {
    std::string s;
    get(key, s);
    if (j_.contains(key)) {
      try {
        field = parse(s);
      } catch (const std::invalid_argument& e) {
        throw ConfigError(section_ + "." + key + ": " + e.what());
      }
    }
  }

  void sub(const char* key) { seen_.insert(key); }

  void finish() const {
    for (const auto& [key, _] : j_.items()) {
      if (!seen_.count(key)) throw ConfigError("unknown key '" + section_ + "." + key + "'");
    }
  }

 private:
  const json& j_;
  std::string section_;
  std::set<std::string> seen_;
};

}  // namespace

json to_json(const ks::KsConfig& c) {
  return {{"n_points", c.n_points},         {"domain_length", c.domain_length}, {"dt", c.dt},
          {"substeps", c.substeps},         {"n_warmup", c.n_warmup},           {"train_horizon", c.train_horizon},
          {"test_horizon", c.test_horizon}, {"ic_modes", c.ic_modes},           {"seed", c.seed}};
}

json to_json(const data::GenerateOptions& o) {
  return {{"n_train", o.n_train},
          {"n_reg", o.n_reg},
          {"n_test", o.n_test},
          {"observed_fraction", o.observed_fraction},
          {"mask_seed", o.mask_seed},
          {"max_retries", o.max_retries}};
}

json to_json(const DataConfig& c) {
  json j = {{"observed_fraction", nullptr}, {"mask_seed", nullptr}, {"train_trajectories", c.train_trajectories}};
  if (c.observed_fraction) j["observed_fraction"] = *c.observed_fraction;
  if (c.mask_seed) j["mask_seed"] = *c.mask_seed;
  return j;
}

json to_json(const fno::FnoConfig& c) {
  return {{"n_layers", c.n_layers},
          {"n_modes", c.n_modes},
          {"width", c.width},
          {"in_channels", c.in_channels},
          {"head_mode", fno::to_string(c.head_mode)},
          {"spectral_noise", c.spectral_noise},
          {"internal_predictive_noise", c.internal_predictive_noise},
          {"log_scale_init", c.log_scale_init},
          {"log_scale_min", c.log_scale_min},
          {"log_scale_max", c.log_scale_max}};
}

json to_json(const TrainConfig& c) {
  return {{"total_steps", c.total_steps},
          {"batch_size", c.batch_size},
          {"k_reg", c.k_reg},
          {"samples", c.samples},
          {"lr_theta_psi", c.lr_theta_psi},
          {"lr_rho_internal", c.lr_rho_internal},
          {"lr_rho_head", c.lr_rho_head},
          {"lr_psi_internal", c.lr_psi_internal},
          {"eval_interval", c.eval_interval},
          {"eval_samples", c.eval_samples},
          {"eval_max_pairs", c.eval_max_pairs},
          {"final_eval_max_pairs", c.final_eval_max_pairs},
          {"spatial_segment", c.spatial_segment},
          {"reg_objective", to_string(c.reg_objective)},
          {"reg_updates", c.reg_updates},
          {"seed", c.seed}};
}

json to_json(const BaselineConfig& c) { return {{"dropout_p", c.dropout_p}, {"ensemble_members", c.ensemble_members}}; }

json to_json(const ExperimentConfig& c) {
  return {{"method", to_string(c.method)}, {"ks", to_json(c.ks)},       {"generate", to_json(c.generate)},
          {"data", to_json(c.data)},       {"model", to_json(c.model)}, {"train", to_json(c.train)},
          {"baseline", to_json(c.baseline)}};
}

ks::KsConfig ks_from_json(const json& j, ks::KsConfig c) {
  Reader r(j, "ks");
  r.get("n_points", c.n_points);
  r.get("domain_length", c.domain_length);
  r.get("dt", c.dt);
  r.get("substeps", c.substeps);
  r.get("n_warmup", c.n_warmup);
  r.get("train_horizon", c.train_horizon);
  r.get("test_horizon", c.test_horizon);
  r.get("ic_modes", c.ic_modes);
  r.get("seed", c.seed);
  r.finish();
  return c;
}

data::GenerateOptions generate_from_json(const json& j, data::GenerateOptions o) {
  Reader r(j, "generate");
  r.get("n_train", o.n_train);
  r.get("n_reg", o.n_reg);
  r.get("n_test", o.n_test);
  r.get("observed_fraction", o.observed_fraction);
  r.get("mask_seed", o.mask_seed);
  r.get("max_retries", o.max_retries);
  r.finish();
  return o;
}

DataConfig data_from_json(const json& j, DataConfig c) {
  Reader r(j, "data");
  r.get_optional("observed_fraction", c.observed_fraction);
  r.get_optional("mask_seed", c.mask_seed);
  r.get("train_trajectories", c.train_trajectories);
  r.finish();
  return c;
}

fno::FnoConfig fno_from_json(const json& j, fno::FnoConfig c) {
  Reader r(j, "model");
  r.get("n_layers", c.n_layers);
  r.get("n_modes", c.n_modes);
  r.get("width", c.width);
  r.get("in_channels", c.in_channels);
  r.get_enum("head_mode", c.head_mode, fno::head_mode_from_string);
  r.get("spectral_noise", c.spectral_noise);
  r.get("internal_predictive_noise", c.internal_predictive_noise);
  r.get("log_scale_init", c.log_scale_init);
  r.get("log_scale_min", c.log_scale_min);
  r.get("log_scale_max", c.log_scale_max);
  r.finish();
  return c;
}

TrainConfig train_from_json(const json& j, TrainConfig c) {
  Reader r(j, "train");
  r.get("total_steps", c.total_steps);
  r.get("batch_size", c.batch_size);
  r.get("k_reg", c.k_reg);
  r.get("samples", c.samples);
  r.get("lr_theta_psi", c.lr_theta_psi);
  r.get("lr_rho_internal", c.lr_rho_internal);
  r.get("lr_rho_head", c.lr_rho_head);
  r.get("lr_psi_internal", c.lr_psi_internal);
  r.get("eval_interval", c.eval_interval);
  r.get("eval_samples", c.eval_samples);
  r.get("eval_max_pairs", c.eval_max_pairs);
  r.get("final_eval_max_pairs", c.final_eval_max_pairs);
  r.get("spatial_segment", c.spatial_segment);
  r.get_enum("reg_objective", c.reg_objective, reg_objective_from_string);
  r.get("reg_updates", c.reg_updates);
  r.get("seed", c.seed);
  r.finish();
  return c;
}

BaselineConfig baseline_from_json(const json& j, BaselineConfig c) {
  Reader r(j, "baseline");
  r.get("dropout_p", c.dropout_p);
  r.get("ensemble_members", c.ensemble_members);
  r.finish();
  return c;
}

ExperimentConfig experiment_from_json(const json& j, ExperimentConfig c) {
  Reader r(j, "config");
  r.get_enum("method", c.method, method_from_string);
  const auto section = [&](const char* key, auto parse, auto& field) {
    r.sub(key);
    if (j.contains(key)) field = parse(j.at(key), field);
  };
  section("ks", ks_from_json, c.ks);
  section("generate", generate_from_json, c.generate);
  section("data", data_from_json, c.data);
  section("model", fno_from_json, c.model);
  section("train", train_from_json, c.train);
  section("baseline", baseline_from_json, c.baseline);
  r.finish();
  return c;
}

void apply_override(json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like section.key=value: " + assignment);
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::parse_error&) {
    value = text;
  }
  json* node = &config;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ConfigError("empty key in override " + assignment);
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    node = &(*node)[key];
    if (!node->is_object()) *node = json::object();
    start = dot + 1;
  }
}

ExperimentConfig load_experiment(const std::string& path, const std::vector<std::string>& overrides) {
  json j = json::object();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    try {
      j = json::parse(in, nullptr, true, true);
    } catch (const json::parse_error& e) {
      throw ConfigError(path + ": " + e.what());
    }
  }
  for (const auto& o : overrides) apply_override(j, o);
  ExperimentConfig cfg = experiment_from_json(j);
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return cfg;
}

}  // namespace xreg::serialize
