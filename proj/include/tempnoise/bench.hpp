#pragma once

// Experiment harness: configuration, multi-seed execution, metrics and
// report / table emission.

#include "tempnoise/data.hpp"
#include "tempnoise/noise.hpp"
#include "tempnoise/train.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace tempnoise::bench {

inline constexpr const char* kVersion = "0.1.0";

/// Not an estimator: trained with plain NLL on the clean labels, used as the
/// reference point for corrected training.
inline constexpr const char* kCleanReference = "clean";

struct NoiseConfig {
  /// static, linear, decay, growth, periodic, mixed or identity.
  std::string family = "periodic";
  /// Used when `params` is empty: the calibrated benchmark regime.
  double target_mean = 0.3;
  /// Flat parameter map (see noise::from_param_map); overrides the regime.
  std::map<std::string, double> params;

  noise::NoiseFunctionSpec resolve(int C, int T) const;
};

struct ExperimentConfig {
  std::optional<HmmSpec> generator = HmmSpec{};
  std::optional<std::filesystem::path> dataset_file;
  double test_fraction = 0.2;
  NoiseConfig noise;
  std::vector<std::string> estimators;
  train::TrainConfig train;
  std::vector<std::uint64_t> seeds{0};
  int parallelism = 1;
  std::filesystem::path output;
  bool write_artifacts = true;

  /// Throws ConfigError when no estimator or seed is given, names are
  /// unknown, or the noise spec does not match the data shape.
  void validate() const;
};

ExperimentConfig config_from_json(const nlohmann::json& doc);
/// Every field, defaults included.
nlohmann::json to_json(const ExperimentConfig& config);
ExperimentConfig load_config(const std::filesystem::path& path);

train::TrainConfig train_config_from_json(const nlohmann::json& doc);
nlohmann::json to_json(const train::TrainConfig& config);

struct CellResult {
  std::string estimator;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  double clean_test_error = 0.0;              // percent
  std::optional<double> approximation_error;  // percent
  double runtime_seconds = 0.0;
};

struct Aggregate {
  std::string estimator;
  int runs = 0;
  double test_error_mean = 0.0;
  double test_error_std = 0.0;
  std::optional<double> approx_error_mean;
  std::optional<double> approx_error_std;
};

struct ExperimentReport {
  nlohmann::json config;  // fully resolved
  nlohmann::json noise;   // family + parameter map actually used
  std::vector<CellResult> cells;
  std::vector<Aggregate> aggregates;

  bool all_ok() const;
  const Aggregate* aggregate(const std::string& estimator) const;
  /// Runtimes are left out so that reruns are byte-identical.
  nlohmann::json to_json() const;
};

/// Mean and population standard deviation over per-seed rows, in estimator order.
std::vector<Aggregate> aggregate(const std::vector<CellResult>& cells, const std::vector<std::string>& order);

/// 100 * fraction of (sequence, t) pairs whose predicted label differs from the clean label.
double clean_test_error(const model::GruClassifier& classifier, const SequenceDataset& test);

struct EmpiricalNoise {
  noise::NoiseTrajectory trajectory;  // not validated
  Matrix counts;                      // T x C, count of clean label i at step t
  std::vector<std::pair<int, int>> empty_rows;  // (t, i), 1-based, replaced by the identity row
};

/// Per-step disagreement rates between the clean and noisy label tracks.
EmpiricalNoise empirical_noise_estimate(const SequenceDataset& dataset);
void write_empirical_noise(const EmpiricalNoise& estimate, const std::filesystem::path& path);

/// T rows x C^2 columns with a "# T=.. C=.." header line.
void write_trajectory(const noise::NoiseTrajectory& trajectory, const std::filesystem::path& path);
noise::NoiseTrajectory read_trajectory(const std::filesystem::path& path);

struct CurveRow {
  std::string estimator;
  int t = 0;  // 1-based
  int i = 0;  // 1-based
  int j = 0;  // 1-based
  double truth = 0.0;
  double estimate = 0.0;
};

/// Long table (estimator, t, i, j, true, estimated): one row per estimator, step and entry.
void emit_reconstruction_curves(const noise::NoiseFunctionSpec& truth,
                                const std::vector<std::pair<std::string, noise::NoiseTrajectory>>& trajectories,
                                const std::filesystem::path& path);
std::vector<CurveRow> read_reconstruction_curves(const std::filesystem::path& path);

void write_training_curve(const std::vector<train::EpochRecord>& curve, const std::filesystem::path& path);

/// Runs every (estimator, seed) cell and, when `write_artifacts` is set,
/// writes report.json, per-metric tables, timings, checkpoints, trajectories,
/// training curves and reconstruction tables under `output`.
ExperimentReport run_experiment(const ExperimentConfig& config);

}  // namespace tempnoise::bench
