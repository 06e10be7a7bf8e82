#pragma once

// JSON forms of every configuration struct. Readers start from the defaults,
// apply the keys present, and reject unknown keys.

#include <string>
#include <vector>

#include <json.hpp>

#include "xreg/config.hpp"

namespace xreg::serialize {

using nlohmann::json;

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

json to_json(const ks::KsConfig& cfg);
json to_json(const data::GenerateOptions& opts);
json to_json(const DataConfig& cfg);
json to_json(const fno::FnoConfig& cfg);
json to_json(const TrainConfig& cfg);
json to_json(const BaselineConfig& cfg);
json to_json(const ExperimentConfig& cfg);

ks::KsConfig ks_from_json(const json& j, ks::KsConfig base = {});
data::GenerateOptions generate_from_json(const json& j, data::GenerateOptions base = {});
DataConfig data_from_json(const json& j, DataConfig base = {});
fno::FnoConfig fno_from_json(const json& j, fno::FnoConfig base = {});
TrainConfig train_from_json(const json& j, TrainConfig base = {});
BaselineConfig baseline_from_json(const json& j, BaselineConfig base = {});
ExperimentConfig experiment_from_json(const json& j, ExperimentConfig base = {});

// Applies "section.key=value" overrides; the value is parsed as JSON when it
// parses, otherwise taken as a string.
void apply_override(json& config, const std::string& assignment);

ExperimentConfig load_experiment(const std::string& path, const std::vector<std::string>& overrides = {});

}  // namespace xreg::serialize
