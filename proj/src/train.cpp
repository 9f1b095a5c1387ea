#include "tempnoise/train.hpp"

#include "tempnoise/error.hpp"
#include "tempnoise/loss.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <sstream>

namespace tempnoise::train {

using diff::Tape;
using diff::Var;
using model::Batch;
using model::GruClassifier;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// Independent streams of one training run.
enum Stream : std::uint64_t {
  kClassifierInit = 1,
  kNoiseInit = 2,
  kShuffle = 3,
  kWarmupInit = 4,
  kWarmupShuffle = 5,
};

struct BatchLoss {
  Var total;
  Var fit;
};

using BatchObjective = std::function<BatchLoss(Tape&, const Batch&)>;

struct EpochTotals {
  double objective = 0.0;
  double fit = 0.0;
};

class EpochRunner {
 public:
  EpochRunner(const TrainingSet& data, int batch_size, std::uint64_t seed, Stream stream)
      : data_(data), batch_size_(batch_size), rng_(make_rng(seed, stream)), order_(data.size()) {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
  }

  EpochTotals run(const diff::ParameterList& params, diff::AdamState& adam, const BatchObjective& objective,
                  const std::string& context) {
    shuffle_in_place(std::span(order_), rng_);
    EpochTotals totals;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order_.size(); start += batch_size_) {
      const std::size_t count = std::min<std::size_t>(batch_size_, order_.size() - start);
      const Batch batch =
          model::make_batch(data_.features, data_.noisy_labels, std::span(order_).subspan(start, count));
      Tape tape;
      const BatchLoss loss = objective(tape, batch);
      const double total = loss.total.scalar();
      if (!std::isfinite(total)) throw RuntimeFailure("non-finite loss at " + context);
      diff::zero_grads(params);
      tape.backward(loss.total);
      try {
        diff::adam_step(adam, params);
      } catch (const RuntimeFailure& e) {
        throw RuntimeFailure(std::string(e.what()) + " at " + context);
      }
      totals.objective += total;
      totals.fit += loss.fit.scalar();
      ++batches;
    }
    totals.objective /= static_cast<double>(batches);
    totals.fit /= static_cast<double>(batches);
    return totals;
  }

 private:
  const TrainingSet& data_;
  std::size_t batch_size_;
  Rng rng_;
  std::vector<std::size_t> order_;
};

void require_noisy(const TrainingSet& data, const char* who) {
  if (data.size() == 0) throw ConfigError(std::string(who) + ": empty training set");
  if (data.noisy_labels.size() != data.size())
    throw ConfigError(std::string(who) + ": training set has no noisy labels");
  for (const auto& labels : data.noisy_labels)
    if (static_cast<int>(labels.size()) != data.T) throw ConfigError(std::string(who) + ": label track length != T");
}

GruClassifier fresh_classifier(const TrainingSet& data, const TrainConfig& config, Stream stream) {
  Rng rng = make_rng(config.seed, stream);
  return GruClassifier(data.d, config.hidden, data.C, rng);
}

std::string epoch_context(int epoch) { return "epoch " + std::to_string(epoch); }

void append(std::vector<EpochRecord>& curve, const std::string& stage, const EpochTotals& totals) {
  EpochRecord rec;
  rec.epoch = static_cast<int>(curve.size()) + 1;
  rec.stage = stage;
  rec.objective = totals.objective;
  rec.fit = totals.fit;
  rec.residual = kNaN;
  rec.lambda = kNaN;
  rec.c = kNaN;
  curve.push_back(rec);
}

// Plain NLL training of `classifier` for `epochs` epochs.
void fit_nll(GruClassifier& classifier, const TrainingSet& data, const TrainConfig& config, int epochs,
             Stream shuffle, const std::string& stage, std::vector<EpochRecord>& curve) {
  auto params = classifier.parameters();
  diff::AdamState adam(params, config.learning_rate);
  EpochRunner runner(data, config.batch_size, config.seed, shuffle);
  const BatchObjective objective = [&](Tape& tape, const Batch& batch) {
    Var l = loss::graph::nll(classifier.forward(tape, batch), batch.labels);
    return BatchLoss{l, l};
  };
  for (int e = 0; e < epochs; ++e)
    append(curve, stage, runner.run(params, adam, objective, epoch_context(static_cast<int>(curve.size()) + 1)));
}

// Forward-loss training of `classifier` with a fixed trajectory.
void fit_forward(GruClassifier& classifier, const TrainingSet& data, const TrainConfig& config,
                 const noise::NoiseTrajectory& trajectory, std::vector<EpochRecord>& curve) {
  auto params = classifier.parameters();
  diff::AdamState adam(params, config.learning_rate);
  EpochRunner runner(data, config.batch_size, config.seed, kShuffle);
  const BatchObjective objective = [&](Tape& tape, const Batch& batch) {
    Var q = tape.constant(trajectory.flat);
    Var l = loss::graph::forward_nll(classifier.forward(tape, batch), q, batch.size, batch.labels);
    return BatchLoss{l, l};
  };
  for (int e = 0; e < config.epochs; ++e)
    append(curve, "fit", runner.run(params, adam, objective, epoch_context(static_cast<int>(curve.size()) + 1)));
}

// Joint training of the classifier and a block parameterization of Q.
TrainedModel fit_blocks(Estimator kind, const TrainingSet& data, const TrainConfig& config, int steps) {
  TrainedModel out{kind, fresh_classifier(data, config, kClassifierInit), std::nullopt, {}, {}};
  model::NoiseBlocks blocks(data.C, steps, steps == 1 ? "noise.static" : "noise.blocks");
  auto params = out.classifier.parameters();
  params.push_back(&blocks.raw);
  diff::AdamState adam(params, config.learning_rate);
  EpochRunner runner(data, config.batch_size, config.seed, kShuffle);
  const BatchObjective objective = [&](Tape& tape, const Batch& batch) {
    Var q = blocks.forward(tape, data.T);
    Var fit = loss::graph::forward_nll(out.classifier.forward(tape, batch), q, batch.size, batch.labels);
    Var total = add(fit, scale(loss::graph::mean_volume(q), config.volmin_lambda));
    return BatchLoss{total, fit};
  };
  for (int e = 0; e < config.epochs; ++e)
    append(out.curve, "fit", runner.run(params, adam, objective, epoch_context(e + 1)));
  out.trajectory = noise::NoiseTrajectory{data.C, blocks.trajectory(data.T)};
  out.noise_parameters.push_back(blocks.raw);
  return out;
}

void check_trajectory(const noise::NoiseTrajectory& trajectory, const char* who) {
  const auto report = noise::validate_trajectory(trajectory);
  if (!report.ok) throw RuntimeFailure(std::string(who) + " produced an invalid trajectory: " + report.violations.front());
}

}  // namespace

std::string to_string(Estimator estimator) {
  switch (estimator) {
    case Estimator::Ignore: return "ignore";
    case Estimator::Oracle: return "oracle";
    case Estimator::OracleStatic: return "oracle-static";
    case Estimator::Anchor: return "anchor";
    case Estimator::VolMin: return "volmin";
    case Estimator::PlugIn: return "plugin";
    case Estimator::Discontinuous: return "discontinuous";
    case Estimator::Continuous: return "continuous";
  }
  return "?";
}

Estimator parse_estimator(const std::string& name) {
  for (Estimator e : {Estimator::Ignore, Estimator::Oracle, Estimator::OracleStatic, Estimator::Anchor,
                      Estimator::VolMin, Estimator::PlugIn, Estimator::Discontinuous, Estimator::Continuous})
    if (to_string(e) == name) return e;
  throw ConfigError("unknown estimator '" + name + "'");
}

bool needs_truth(Estimator estimator) {
  return estimator == Estimator::Oracle || estimator == Estimator::OracleStatic;
}

void TrainConfig::validate() const {
  auto positive = [](bool ok, const char* what) {
    if (!ok) throw ConfigError(std::string("train config: ") + what);
  };
  positive(epochs > 0, "epochs must be > 0");
  positive(learning_rate > 0.0 && std::isfinite(learning_rate), "learning_rate must be > 0");
  positive(batch_size > 0, "batch_size must be > 0");
  positive(hidden > 0, "hidden must be > 0");
  positive(volmin_lambda >= 0.0, "volmin_lambda must be >= 0");
  positive(warmup_epochs > 0, "warmup_epochs must be > 0");
  positive(anchor_percentile > 0.0 && anchor_percentile <= 100.0, "anchor_percentile must lie in (0, 100]");
  positive(min_cell_candidates >= 0, "min_cell_candidates must be >= 0");
  const ContinuousConfig& k = continuous;
  positive(k.outer_iterations > 0 && k.inner_epochs > 0, "continuous iterations must be > 0");
  positive(k.c0 > 0.0 && k.gamma > 0.0 && k.eta > 0.0, "continuous c0, gamma and eta must be > 0");
  positive(std::isfinite(k.lambda0), "continuous lambda0 must be finite");
  positive(k.hidden_layers > 0 && k.width > 0, "noise network depth and width must be > 0");
}

TrainedModel train_ignore(const TrainingSet& data, const TrainConfig& config) {
  config.validate();
  require_noisy(data, "train_ignore");
  TrainedModel out{Estimator::Ignore, fresh_classifier(data, config, kClassifierInit), std::nullopt, {}, {}};
  fit_nll(out.classifier, data, config, config.epochs, kShuffle, "fit", out.curve);
  return out;
}

TrainedModel train_oracle_q(const TrainingSet& data, const noise::NoiseFunctionSpec& truth, const TrainConfig& config,
                            bool static_average) {
  config.validate();
  require_noisy(data, "train_oracle_q");
  truth.validate();
  if (truth.C != data.C || truth.T != data.T)
    throw ConfigError("train_oracle_q: noise spec is C=" + std::to_string(truth.C) + ", T=" + std::to_string(truth.T) +
                      " but data is C=" + std::to_string(data.C) + ", T=" + std::to_string(data.T));
  noise::NoiseTrajectory trajectory = static_average ? noise::NoiseTrajectory::repeat(noise::average_noise(truth), data.T)
                                                     : noise::sample_trajectory(truth);
  TrainedModel out{static_average ? Estimator::OracleStatic : Estimator::Oracle,
                   fresh_classifier(data, config, kClassifierInit), trajectory, {}, {}};
  fit_forward(out.classifier, data, config, trajectory, out.curve);
  return out;
}

std::size_t percentile_rank(std::size_t count, double percentile) {
  if (count == 0) throw ConfigError("percentile of an empty set");
  const double pos = percentile / 100.0 * static_cast<double>(count - 1);
  return std::min(count - 1, static_cast<std::size_t>(std::ceil(pos - 1e-12)));
}

namespace {

struct Instance {
  double value;
  std::size_t seq;
  int t;
};

// The instance at the percentile of `candidates` by value; ties by position.
const Instance& at_percentile(std::vector<Instance>& candidates, double percentile) {
  const std::size_t k = percentile_rank(candidates.size(), percentile);
  std::nth_element(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(k), candidates.end(),
                   [](const Instance& a, const Instance& b) {
                     if (a.value != b.value) return a.value < b.value;
                     if (a.seq != b.seq) return a.seq < b.seq;
                     return a.t < b.t;
                   });
  return candidates[k];
}

void check_posteriors(std::span<const Matrix> posteriors) {
  if (posteriors.empty()) throw ConfigError("anchor estimation needs at least one sequence");
  for (const Matrix& p : posteriors)
    if (p.rows() != posteriors[0].rows() || p.cols() != posteriors[0].cols())
      throw ConfigError("anchor estimation: posteriors differ in shape");
}

}  // namespace

Matrix estimate_anchor_matrix(std::span<const Matrix> posteriors, double percentile) {
  check_posteriors(posteriors);
  const int T = static_cast<int>(posteriors[0].rows());
  const int C = static_cast<int>(posteriors[0].cols());
  Matrix q(C, C);
  std::vector<Instance> candidates;
  candidates.reserve(posteriors.size() * T);
  for (int i = 0; i < C; ++i) {
    candidates.clear();
    double best = 0.0;
    for (std::size_t s = 0; s < posteriors.size(); ++s)
      for (int t = 0; t < T; ++t) {
        candidates.push_back({posteriors[s](t, i), s, t});
        best = std::max(best, posteriors[s](t, i));
      }
    if (best < 1.0 / C + 0.05) {
      warn("anchor: no anchor mass for class " + std::to_string(i + 1) + ", using the identity row");
      q.row(i) = RowVector::Unit(C, i);
      continue;
    }
    const Instance& a = at_percentile(candidates, percentile);
    q.row(i) = posteriors[a.seq].row(a.t);
    q.row(i) /= q.row(i).sum();
  }
  return noise::repair_dominance(q);
}

PlugInEstimate estimate_plugin_trajectory(std::span<const Matrix> posteriors, double percentile, int min_candidates) {
  check_posteriors(posteriors);
  const int T = static_cast<int>(posteriors[0].rows());
  const int C = static_cast<int>(posteriors[0].cols());
  const Matrix pooled = estimate_anchor_matrix(posteriors, percentile);
  PlugInEstimate out{noise::NoiseTrajectory{C, Matrix(T, static_cast<Eigen::Index>(C) * C)}, 0};
  std::vector<Instance> candidates(posteriors.size());
  for (int t = 0; t < T; ++t) {
    Matrix q(C, C);
    for (int i = 0; i < C; ++i) {
      int predicted = 0;
      for (std::size_t s = 0; s < posteriors.size(); ++s) {
        candidates[s] = {posteriors[s](t, i), s, t};
        Eigen::Index arg = 0;
        posteriors[s].row(t).maxCoeff(&arg);
        if (arg == i) ++predicted;
      }
      if (predicted < min_candidates) {
        q.row(i) = pooled.row(i);
        ++out.fallback_cells;
        continue;
      }
      const Instance& a = at_percentile(candidates, percentile);
      q.row(i) = posteriors[a.seq].row(t);
      q.row(i) /= q.row(i).sum();
    }
    out.trajectory.set(t, noise::repair_dominance(q));
  }
  if (out.fallback_cells > 0)
    warn("plug-in: " + std::to_string(out.fallback_cells) + " (class, t) cells had fewer than " +
         std::to_string(min_candidates) + " candidate sequences and use the pooled anchor row");
  return out;
}

namespace {

// Warmup model on noisy NLL and its posteriors over the training set.
std::vector<Matrix> warmup_posteriors(const TrainingSet& data, const TrainConfig& config,
                                      std::vector<EpochRecord>& curve) {
  GruClassifier warm = fresh_classifier(data, config, kWarmupInit);
  fit_nll(warm, data, config, config.warmup_epochs, kWarmupShuffle, "warmup", curve);
  return warm.forward_many(data.features);
}

}  // namespace

TrainedModel train_static_anchor(const TrainingSet& data, const TrainConfig& config) {
  config.validate();
  require_noisy(data, "train_static_anchor");
  TrainedModel out{Estimator::Anchor, fresh_classifier(data, config, kClassifierInit), std::nullopt, {}, {}};
  const std::vector<Matrix> posteriors = warmup_posteriors(data, config, out.curve);
  out.trajectory = noise::NoiseTrajectory::repeat(estimate_anchor_matrix(posteriors, config.anchor_percentile), data.T);
  check_trajectory(*out.trajectory, "anchor");
  fit_forward(out.classifier, data, config, *out.trajectory, out.curve);
  return out;
}

TrainedModel train_plugin(const TrainingSet& data, const TrainConfig& config) {
  config.validate();
  require_noisy(data, "train_plugin");
  TrainedModel out{Estimator::PlugIn, fresh_classifier(data, config, kClassifierInit), std::nullopt, {}, {}};
  const std::vector<Matrix> posteriors = warmup_posteriors(data, config, out.curve);
  out.trajectory =
      estimate_plugin_trajectory(posteriors, config.anchor_percentile, config.min_cell_candidates).trajectory;
  check_trajectory(*out.trajectory, "plug-in");
  fit_forward(out.classifier, data, config, *out.trajectory, out.curve);
  return out;
}

TrainedModel train_static_volmin(const TrainingSet& data, const TrainConfig& config) {
  config.validate();
  require_noisy(data, "train_static_volmin");
  TrainedModel out = fit_blocks(Estimator::VolMin, data, config, 1);
  check_trajectory(*out.trajectory, "volmin");
  return out;
}

TrainedModel train_discontinuous(const TrainingSet& data, const TrainConfig& config) {
  config.validate();
  require_noisy(data, "train_discontinuous");
  TrainedModel out = fit_blocks(Estimator::Discontinuous, data, config, data.T);
  check_trajectory(*out.trajectory, "discontinuous");
  return out;
}

double noisy_nll(const GruClassifier& classifier, const TrainingSet& data) {
  const std::vector<Matrix> probs = classifier.forward_many(data.features);
  double total = 0.0;
  for (std::size_t s = 0; s < probs.size(); ++s) total += loss::nll_sequence(probs[s], data.noisy_labels[s]).scalar;
  return total / static_cast<double>(probs.size());
}

std::vector<double> residuals(const GruClassifier& classifier, const TrainingSet& data,
                              const noise::NoiseTrajectory& trajectory) {
  const std::vector<Matrix> probs = classifier.forward_many(data.features);
  return loss::constraint_violation(probs, data.noisy_labels, trajectory);
}

Multipliers update_multipliers(const ContinuousConfig& config, Multipliers current, double r_bar, double previous) {
  const bool stalled = config.literal_ratio_test ? r_bar > config.gamma * previous : r_bar > previous / config.gamma;
  return {current.lambda + current.c * r_bar, stalled ? current.c * config.eta : current.c};
}

TrainedModel train_continuous(const TrainingSet& data, const TrainConfig& config) {
  config.validate();
  require_noisy(data, "train_continuous");
  const ContinuousConfig& k = config.continuous;
  if (k.outer_iterations * k.inner_epochs != config.epochs)
    throw ConfigError("train_continuous: epochs (" + std::to_string(config.epochs) + ") must equal outer iterations x inner epochs (" +
                      std::to_string(k.outer_iterations) + " x " + std::to_string(k.inner_epochs) + ")");

  TrainedModel out{Estimator::Continuous, fresh_classifier(data, config, kClassifierInit), std::nullopt, {}, {}};
  Rng noise_rng = make_rng(config.seed, kNoiseInit);
  model::ContinuousNoiseNet net(data.C, k.hidden_layers, k.width, noise_rng);
  auto params = out.classifier.parameters();
  for (diff::Parameter* p : net.parameters()) params.push_back(p);
  diff::AdamState adam(params, config.learning_rate);
  EpochRunner runner(data, config.batch_size, config.seed, kShuffle);

  double lambda = k.lambda0;
  double c = k.c0;
  double previous = std::numeric_limits<double>::infinity();
  const BatchObjective objective = [&](Tape& tape, const Batch& batch) {
    Var q = net.forward(tape, data.T);
    Var r = loss::graph::residuals(out.classifier.forward(tape, batch), q, batch.size, batch.labels);
    return BatchLoss{loss::graph::augmented_lagrangian(q, r, lambda, c), mean(r)};
  };
  for (int outer = 1; outer <= k.outer_iterations; ++outer) {
    if (k.reset_optimizer) adam.reset();
    const std::string stage = "outer" + std::to_string(outer);
    for (int e = 0; e < k.inner_epochs; ++e) {
      std::ostringstream context;
      context << epoch_context(static_cast<int>(out.curve.size()) + 1) << " (lambda = " << lambda << ", c = " << c << ")";
      append(out.curve, stage, runner.run(params, adam, objective, context.str()));
    }
    const noise::NoiseTrajectory current{data.C, net.trajectory(data.T)};
    const std::vector<double> r = residuals(out.classifier, data, current);
    const double r_bar = std::accumulate(r.begin(), r.end(), 0.0) / static_cast<double>(r.size());
    if (!std::isfinite(r_bar)) {
      std::ostringstream os;
      os << "non-finite residual after outer iteration " << outer << " (lambda = " << lambda << ", c = " << c << ")";
      throw RuntimeFailure(os.str());
    }
    EpochRecord& last = out.curve.back();
    last.residual = r_bar;
    last.lambda = lambda;
    last.c = c;
    const Multipliers next = update_multipliers(k, {lambda, c}, r_bar, previous);
    lambda = next.lambda;
    c = next.c;
    previous = r_bar;
    if (r_bar == 0.0) break;
  }
  out.trajectory = noise::NoiseTrajectory{data.C, net.trajectory(data.T)};
  check_trajectory(*out.trajectory, "continuous");
  for (const diff::Parameter* p : std::as_const(net).parameters()) out.noise_parameters.push_back(*p);
  return out;
}

TrainedModel train_estimator(Estimator estimator, const TrainingSet& data, const TrainConfig& config,
                             const noise::NoiseFunctionSpec* truth) {
  switch (estimator) {
    case Estimator::Ignore: return train_ignore(data, config);
    case Estimator::Oracle:
    case Estimator::OracleStatic:
      if (!truth) throw ConfigError(to_string(estimator) + " needs the true noise spec");
      return train_oracle_q(data, *truth, config, estimator == Estimator::OracleStatic);
    case Estimator::Anchor: return train_static_anchor(data, config);
    case Estimator::VolMin: return train_static_volmin(data, config);
    case Estimator::PlugIn: return train_plugin(data, config);
    case Estimator::Discontinuous: return train_discontinuous(data, config);
    case Estimator::Continuous: return train_continuous(data, config);
  }
  throw ConfigError("unknown estimator");
}

}  // namespace tempnoise::train
