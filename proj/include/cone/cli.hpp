#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

#include <json.hpp>

#include "cone/data.hpp"
#include "cone/trainer.hpp"

namespace cone {

inline constexpr std::string_view kToolVersion = "1.0.0";

/// Where a run's data comes from. With train_csv empty the synthetic
/// multi-mode generator is used.
struct DataConfig {
  std::string train_csv;
  std::string test_csv;  // empty: split train_csv by test_fraction
  bool csv_has_header = true;
  std::size_t data_classes = 4;
  std::size_t data_modes = 2;
  std::size_t data_dim = 2;
  std::size_t data_n_per_mode = 250;
  double data_separation = 10.0;
  double data_std = 1.0;
  std::size_t data_max_samples = 0;  // 0 keeps every generated sample
  std::size_t data_center_attempts = kMaxCenterAttempts;
  double test_fraction = 0.2;

  MultimodeParams multimode() const;
  bool operator==(const DataConfig &) const = default;
};

struct RunConfig {
  TrainConfig train;
  DataConfig data;
  bool operator==(const RunConfig &) const = default;
};

/// Invalid configuration; `field` names the offending key.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string field, const std::string &what)
      : std::runtime_error(field + ": " + what), field_(std::move(field)) {}
  const std::string &field() const { return field_; }

 private:
  std::string field_;
};

/// Flat JSON object with every field materialized.
nlohmann::json config_to_json(const RunConfig &config);

/// Missing keys keep their defaults; unknown keys and ill-typed values throw
/// ConfigError. The result is validated.
RunConfig config_from_json(const nlohmann::json &doc);

/// Applies "KEY=VALUE" to `doc`. VALUE is parsed as JSON, falling back to a
/// plain string. Unknown keys throw ConfigError.
void apply_override(nlohmann::json &doc, std::string_view assignment);

/// FNV-1a of the canonical serialization, as 16 hex digits.
std::string config_hash(const RunConfig &config);

/// Synthetic data per config, split with the "data" sub-seed, or the CSV
/// files it names.
std::pair<Dataset, Dataset> load_run_data(const RunConfig &config);

/// Entry point of the `cone` executable; returns the process exit code.
int run_cli(int argc, char **argv);

}  // namespace cone
