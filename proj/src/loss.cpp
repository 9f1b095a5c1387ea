#include "tempnoise/loss.hpp"

#include "tempnoise/error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace tempnoise::loss {

namespace {

double neg_log(double p) { return -std::log(std::max(p, diff::kProbFloor)); }

LossValue from_terms(std::vector<double> terms) {
  LossValue out;
  out.scalar = terms.empty() ? 0.0 : std::accumulate(terms.begin(), terms.end(), 0.0) / terms.size();
  out.per_time = std::move(terms);
  return out;
}

void check_labels(const Matrix& probs, std::span<const int> labels, const char* what) {
  if (static_cast<Eigen::Index>(labels.size()) != probs.rows())
    throw ConfigError(std::string(what) + ": " + std::to_string(probs.rows()) + " probability rows but " +
                      std::to_string(labels.size()) + " labels");
  for (int y : labels)
    if (y < 0 || y >= probs.cols())
      throw ConfigError(std::string(what) + ": label " + std::to_string(y) + " out of range for C = " +
                        std::to_string(probs.cols()));
}

void check_trajectory(const noise::NoiseTrajectory& trajectory, Eigen::Index T, Eigen::Index C) {
  if (trajectory.T() != T || trajectory.C != C)
    throw ConfigError("trajectory is " + std::to_string(trajectory.T()) + " steps of " + std::to_string(trajectory.C) +
                      " classes, expected " + std::to_string(T) + " x " + std::to_string(C));
  const noise::ValidationReport report = noise::validate_trajectory(trajectory);
  if (!report.ok) throw ConfigError("invalid noise trajectory: " + report.violations.front());
}

}  // namespace

LossValue nll_sequence(const Matrix& probs, std::span<const int> labels) {
  check_labels(probs, labels, "nll_sequence");
  std::vector<double> terms(labels.size());
  for (std::size_t t = 0; t < labels.size(); ++t) terms[t] = neg_log(probs(t, labels[t]));
  return from_terms(std::move(terms));
}

LossValue forward_loss_sequence(const Matrix& probs, const noise::NoiseTrajectory& trajectory,
                                std::span<const int> noisy_labels) {
  check_labels(probs, noisy_labels, "forward_loss_sequence");
  check_trajectory(trajectory, probs.rows(), probs.cols());
  const Eigen::Index C = probs.cols();
  std::vector<double> terms(noisy_labels.size());
  for (std::size_t t = 0; t < noisy_labels.size(); ++t) {
    Eigen::Map<const Matrix> q(trajectory.flat.row(t).data(), C, C);
    const int y = noisy_labels[t];
    double mixed = 0.0;
    for (Eigen::Index i = 0; i < C; ++i) mixed += probs(t, i) * q(i, y);
    terms[t] = neg_log(mixed);
  }
  return from_terms(std::move(terms));
}

double volume_surrogate(const Matrix& q) { return q.norm(); }

std::vector<double> constraint_violation(std::span<const Matrix> probs, std::span<const std::vector<int>> noisy_labels,
                                         const noise::NoiseTrajectory& trajectory) {
  if (probs.empty() || probs.size() != noisy_labels.size())
    throw ConfigError("constraint_violation: need a nonempty batch with one label track per sequence");
  std::vector<double> r(trajectory.T(), 0.0);
  for (std::size_t b = 0; b < probs.size(); ++b) {
    const LossValue l = forward_loss_sequence(probs[b], trajectory, noisy_labels[b]);
    for (std::size_t t = 0; t < r.size(); ++t) r[t] += l.per_time[t];
  }
  for (double& v : r) v /= static_cast<double>(probs.size());
  return r;
}

double constraint_violation(std::span<const Matrix> probs, std::span<const std::vector<int>> noisy_labels,
                            const noise::NoiseTrajectory& trajectory, int t) {
  if (t < 1 || t > trajectory.T()) throw ConfigError("constraint_violation: t = " + std::to_string(t) + " out of range");
  return constraint_violation(probs, noisy_labels, trajectory)[t - 1];
}

LossValue augmented_lagrangian(const noise::NoiseTrajectory& trajectory, std::span<const double> residuals,
                               double lambda, double c) {
  if (!std::isfinite(lambda) || !(c > 0.0))
    throw ConfigError("augmented_lagrangian: need finite lambda and c > 0");
  if (static_cast<int>(residuals.size()) != trajectory.T())
    throw ConfigError("augmented_lagrangian: residual count does not match the trajectory length");
  std::vector<double> terms(residuals.size());
  for (std::size_t t = 0; t < residuals.size(); ++t) {
    const double r = residuals[t];
    terms[t] = volume_surrogate(trajectory.at(static_cast<int>(t))) + lambda * r + 0.5 * c * r * r;
  }
  return from_terms(std::move(terms));
}

LossValue augmented_lagrangian(std::span<const Matrix> probs, std::span<const std::vector<int>> noisy_labels,
                               const noise::NoiseTrajectory& trajectory, double lambda, double c) {
  const std::vector<double> r = constraint_violation(probs, noisy_labels, trajectory);
  return augmented_lagrangian(trajectory, r, lambda, c);
}

namespace graph {

Var nll(Var probs, const Labels& labels) { return scale(mean(diff::log(pick(probs, labels))), -1.0); }

Var forward_nll(Var probs, Var flat_q, Eigen::Index block, const Labels& labels) {
  return nll(time_mix(probs, flat_q, block), labels);
}

Var residuals(Var probs, Var flat_q, Eigen::Index block, const Labels& labels) {
  Var picked = diff::log(pick(time_mix(probs, flat_q, block), labels));
  return scale(row_mean(reshape(picked, flat_q.rows(), block)), -1.0);
}

Var mean_volume(Var flat_q) { return mean(row_norm(flat_q)); }

Var augmented_lagrangian(Var flat_q, Var r, double lambda, double c) {
  Var volume = row_norm(flat_q);
  Var penalty = add(scale(r, lambda), scale(mul(r, r), 0.5 * c));
  return mean(add(volume, penalty));
}

}  // namespace graph

}  // namespace tempnoise::loss
