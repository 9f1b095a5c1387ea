#pragma once

// Sequence losses. Value-level functions work on plain matrices and return a
// per-step breakdown; the graph-level versions record the same computation
// on a tape for training.

#include "tempnoise/diffcore.hpp"
#include "tempnoise/noise.hpp"

#include <memory>
#include <span>
#include <vector>

namespace tempnoise::loss {

struct LossValue {
  double scalar = 0.0;
  std::vector<double> per_time;
};

/// (1/T) sum_t -log p[t, y_t] with p clamped at 1e-12. Labels are 0-based.
LossValue nll_sequence(const Matrix& probs, std::span<const int> labels);

/// (1/T) sum_t -log (Q_t^T p_t)[y~_t]. Throws ConfigError if the trajectory
/// fails validation or has the wrong shape.
LossValue forward_loss_sequence(const Matrix& probs, const noise::NoiseTrajectory& trajectory,
                                std::span<const int> noisy_labels);

/// Frobenius norm of Q.
double volume_surrogate(const Matrix& q);

/// R_t for every t: the forward loss at step t averaged over the batch.
std::vector<double> constraint_violation(std::span<const Matrix> probs, std::span<const std::vector<int>> noisy_labels,
                                         const noise::NoiseTrajectory& trajectory);
/// R_t for a single step t (1-based).
double constraint_violation(std::span<const Matrix> probs, std::span<const std::vector<int>> noisy_labels,
                            const noise::NoiseTrajectory& trajectory, int t);

/// (1/T) sum_t ||Q_t||_F + lambda R_t + (c/2) R_t^2, from precomputed residuals.
LossValue augmented_lagrangian(const noise::NoiseTrajectory& trajectory, std::span<const double> residuals,
                               double lambda, double c);
LossValue augmented_lagrangian(std::span<const Matrix> probs, std::span<const std::vector<int>> noisy_labels,
                               const noise::NoiseTrajectory& trajectory, double lambda, double c);

namespace graph {

using diff::Var;
using Labels = std::shared_ptr<const std::vector<int>>;

/// Mean of -log p over all rows of a (T*B x C) probability node.
Var nll(Var probs, const Labels& labels);

/// Mean forward loss; `flat_q` is T x C*C and `block` the batch size B of
/// the time-major probability rows.
Var forward_nll(Var probs, Var flat_q, Eigen::Index block, const Labels& labels);

/// T x 1 residuals R_t, each averaged over the B sequences of the batch.
Var residuals(Var probs, Var flat_q, Eigen::Index block, const Labels& labels);

/// Mean over t of ||Q_t||_F for a T x C*C node.
Var mean_volume(Var flat_q);

/// mean_t ||Q_t||_F + lambda R_t + (c/2) R_t^2.
Var augmented_lagrangian(Var flat_q, Var residuals, double lambda, double c);

}  // namespace graph

}  // namespace tempnoise::loss
