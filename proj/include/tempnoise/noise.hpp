#pragma once

// Temporal label-noise functions Q(t): C x C row-stochastic, diagonally
// dominant matrices whose entry (i, j) is P(noisy = j | clean = i) at step t.

#include "tempnoise/data.hpp"
#include "tempnoise/diffcore.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace tempnoise::noise {

/// Flip rates are clamped to [kFlipFloor, 0.5 - kFlipFloor].
inline constexpr double kFlipFloor = 0.01;
inline constexpr double kRowSumTolerance = 1e-9;

enum class Family { Static, Linear, Decay, Growth, Periodic, Mixed };

/// Shape of a single flip-rate curve rho(t).
enum class Shape { Static, Linear, Decay, Growth, Periodic };

std::string to_string(Family family);
std::string to_string(Shape shape);
Family parse_family(const std::string& name);

/// rho(t) for one row (or one class pair). Only the fields of `shape` are used:
///   Static    rho
///   Linear    rho_start -> rho_end over t = 1..T
///   Decay     offset + a * exp(-b t)
///   Growth    offset + a / (1 + exp(-b (t - gamma)))
///   Periodic  offset + amplitude * sin(alpha t + phi)
struct FlipCurve {
  Shape shape = Shape::Static;
  double rho = 0.3;
  double rho_start = 0.4;
  double rho_end = 0.2;
  double a = 0.4;
  double b = 0.05;
  double gamma = 25.0;
  double alpha = 0.1;
  double phi = 0.0;
  double offset = 0.0;
  double amplitude = 0.5;

  bool operator==(const FlipCurve&) const = default;
};

/// Unclamped curve value at real time t for horizon T.
double raw_rate(const FlipCurve& curve, double t, int T);
/// Curve value clamped to [kFlipFloor, 0.5 - kFlipFloor].
double flip_rate(const FlipCurve& curve, double t, int T);

struct NoiseFunctionSpec {
  Family family = Family::Static;
  int C = 2;
  int T = 50;
  /// Row i's total off-diagonal mass, split equally over the C - 1 other classes.
  std::vector<FlipCurve> rows;
  /// Optional per-pair curves (i, j), i != j, overriding the equal split.
  std::map<std::pair<int, int>, FlipCurve> pairs;
  /// When false, rates are used as given (only the identity spec does this).
  bool clamp = true;

  void validate() const;
  bool operator==(const NoiseFunctionSpec&) const = default;
};

/// Family with the same curve on every row (Mixed: growth on row 0, decay on
/// row 1, static elsewhere) using the FlipCurve defaults.
NoiseFunctionSpec make_spec(Family family, int C, int T);

/// Identity corruption: rho(t) = 0 exactly, clamping disabled.
NoiseFunctionSpec identity_spec(int C, int T);

/// The benchmark regimes with each row's offset calibrated so that the
/// time-averaged (clamped) flip rate equals `target_mean`.
///   Static    rho = target
///   Linear    target + 0.15 falling to target - 0.15
///   Decay     a = 0.3, b = 4 / T
///   Growth    a = 0.3, b = 10 / T, gamma = T / 2
///   Periodic  amplitude 0.2, one period over T, phases spread over classes
///   Mixed     Growth on class 0, Decay on class 1
NoiseFunctionSpec standard_regime(Family family, int C, int T, double target_mean = 0.3);

/// Flat parameter map used by config files: keys apply to every row, and
/// "row<i>.<name>" / "pair<i>_<j>.<name>" override single rows or pairs.
std::map<std::string, double> to_param_map(const NoiseFunctionSpec& spec);
NoiseFunctionSpec from_param_map(Family family, int C, int T, const std::map<std::string, double>& params);

/// Q_t for 1 <= t <= T. Out-of-range flip rates are clamped with a one-time warning.
Matrix eval_noise(const NoiseFunctionSpec& spec, int t);

/// T matrices stored flat: row k holds Q_{k+1} in row-major order.
struct NoiseTrajectory {
  int C = 0;
  Matrix flat;  // T x C*C

  int T() const { return static_cast<int>(flat.rows()); }
  /// Matrix at 0-based index k (time step k + 1).
  Matrix at(int k) const;
  void set(int k, const Matrix& q);
  static NoiseTrajectory repeat(const Matrix& q, int T);
};

NoiseTrajectory sample_trajectory(const NoiseFunctionSpec& spec);

struct ValidationReport {
  bool ok = true;
  std::vector<std::string> violations;
};

/// Checks entries in [0, 1], rows summing to 1 within 1e-9 and strict
/// diagonal dominance.
ValidationReport validate_matrix(const Matrix& q);
ValidationReport validate_trajectory(const NoiseTrajectory& trajectory);

/// Draws each noisy label independently from row y_t of Q_t. Sequence i uses
/// the stream derived from (seed, i).
SequenceDataset corrupt_labels(SequenceDataset dataset, const NoiseFunctionSpec& spec, std::uint64_t seed);

/// Entrywise time average of the trajectory with rows renormalized.
Matrix average_noise(const NoiseFunctionSpec& spec);

/// (1/T) sum_t mean_{ij} |Q_t - Qhat_t|, as a fraction.
double approximation_error(const NoiseTrajectory& truth, const NoiseTrajectory& estimate);

/// Blends an invalid row toward the identity row with the smallest weight
/// that makes the diagonal exceed every other entry by `margin`.
Matrix repair_dominance(Matrix q, double margin = 0.01);

}  // namespace tempnoise::noise
