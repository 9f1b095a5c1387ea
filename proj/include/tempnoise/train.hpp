#pragma once

// Training procedures: a noise-ignoring baseline, forward training with a
// known trajectory, two static estimators and three temporal estimators.

#include "tempnoise/data.hpp"
#include "tempnoise/model.hpp"
#include "tempnoise/noise.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace tempnoise::train {

enum class Estimator {
  Ignore,
  Oracle,        // forward loss with the true trajectory
  OracleStatic,  // forward loss with the time-averaged true matrix
  Anchor,
  VolMin,
  PlugIn,
  Discontinuous,
  Continuous,
};

std::string to_string(Estimator estimator);
Estimator parse_estimator(const std::string& name);
/// True for the estimators that need the true noise spec.
bool needs_truth(Estimator estimator);

struct ContinuousConfig {
  int outer_iterations = 15;
  int inner_epochs = 10;
  double lambda0 = 1.0;
  double c0 = 1.0;
  double gamma = 2.0;
  double eta = 2.0;
  /// false: raise c when R_k > R_{k-1} / gamma (insufficient decrease).
  /// true: raise c when R_k > gamma * R_{k-1}, as the pseudocode is written.
  bool literal_ratio_test = false;
  /// Reset Adam moments at the start of every outer iteration.
  bool reset_optimizer = true;
  int hidden_layers = 4;
  int width = 32;
};

struct TrainConfig {
  int epochs = 150;
  double learning_rate = 0.01;
  int batch_size = 64;
  std::uint64_t seed = kDefaultSeed;
  int hidden = 32;
  double volmin_lambda = 1e-4;
  int warmup_epochs = 25;
  double anchor_percentile = 97.0;
  int min_cell_candidates = 20;
  ContinuousConfig continuous;

  /// Throws ConfigError on non-positive sizes or rates.
  void validate() const;
};

struct EpochRecord {
  int epoch = 0;          // 1-based, counted over all stages
  std::string stage;      // "warmup", "fit", "outer<k>"
  double objective = 0.0; // mean over batches of the optimized objective
  double fit = 0.0;       // mean over batches of the (forward) NLL term
  double residual = 0.0;  // Continuous: R over the training set after the outer iteration, else NaN
  double lambda = 0.0;
  double c = 0.0;
};

struct TrainedModel {
  Estimator estimator;
  model::GruClassifier classifier;
  std::optional<noise::NoiseTrajectory> trajectory;
  std::vector<EpochRecord> curve;
  /// Noise-model parameters, when the estimator learns them.
  std::vector<diff::Parameter> noise_parameters;
};

TrainedModel train_ignore(const TrainingSet& data, const TrainConfig& config);

/// Forward training with the true trajectory, or with average_noise(spec)
/// repeated over time when `static_average` is set.
TrainedModel train_oracle_q(const TrainingSet& data, const noise::NoiseFunctionSpec& truth, const TrainConfig& config,
                            bool static_average = false);

TrainedModel train_static_anchor(const TrainingSet& data, const TrainConfig& config);
TrainedModel train_static_volmin(const TrainingSet& data, const TrainConfig& config);
TrainedModel train_plugin(const TrainingSet& data, const TrainConfig& config);
TrainedModel train_discontinuous(const TrainingSet& data, const TrainConfig& config);
TrainedModel train_continuous(const TrainingSet& data, const TrainConfig& config);

struct Multipliers {
  double lambda = 1.0;
  double c = 1.0;
};

/// One outer-iteration update: lambda += c * r_bar, and c *= eta when r_bar
/// failed the ratio test against `previous` (infinity on the first iteration).
Multipliers update_multipliers(const ContinuousConfig& config, Multipliers current, double r_bar, double previous);

/// Dispatch by estimator kind; `truth` is required for the oracle kinds.
TrainedModel train_estimator(Estimator estimator, const TrainingSet& data, const TrainConfig& config,
                             const noise::NoiseFunctionSpec* truth = nullptr);

/// Index of the `percentile` point of `count` sorted values, rounding up.
std::size_t percentile_rank(std::size_t count, double percentile);

/// One C x C matrix from noisy posteriors (one T x C matrix per sequence)
/// pooled over all steps: row i is the posterior of the instance at the
/// given percentile of p(noisy = i). Rows without anchor mass fall back to
/// the identity row; dominance is repaired.
Matrix estimate_anchor_matrix(std::span<const Matrix> posteriors, double percentile);

struct PlugInEstimate {
  noise::NoiseTrajectory trajectory;
  int fallback_cells = 0;
};

/// Per-step version: row i of Q(t) comes from the instance at the given
/// percentile of p_t(noisy = i) over all sequences. Cells where fewer than
/// `min_candidates` sequences predict class i at t use the pooled anchor row.
PlugInEstimate estimate_plugin_trajectory(std::span<const Matrix> posteriors, double percentile, int min_candidates);

/// Noisy-label NLL of the classifier on a training set.
double noisy_nll(const model::GruClassifier& classifier, const TrainingSet& data);

/// Time-averaged forward-loss residual over a whole training set.
std::vector<double> residuals(const model::GruClassifier& classifier, const TrainingSet& data,
                              const noise::NoiseTrajectory& trajectory);

}  // namespace tempnoise::train
