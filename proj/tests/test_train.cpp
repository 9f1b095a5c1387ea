#include "tempnoise/train.hpp"
#include "tempnoise/error.hpp"
#include "tempnoise/loss.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>

using namespace tempnoise;
using namespace tempnoise::train;
using noise::NoiseTrajectory;

namespace {

SequenceDataset hmm(int n, int T, std::uint64_t seed, double variance = 1.5, int d = 10) {
  HmmSpec s;
  s.n = n;
  s.d = d;
  s.T = T;
  s.variance = variance;
  s.seed = seed;
  return generate_hmm(s);
}

TrainConfig quick(int epochs, std::uint64_t seed = 0) {
  TrainConfig c;
  c.epochs = epochs;
  c.seed = seed;
  c.warmup_epochs = 2;
  c.continuous.outer_iterations = epochs;
  c.continuous.inner_epochs = 1;
  return c;
}

// Noisy posteriors of an oracle model: row y_t of Q_t for every step.
std::vector<Matrix> oracle_posteriors(const SequenceDataset& ds, const NoiseTrajectory& q) {
  std::vector<Matrix> out;
  for (const auto& s : ds.sequences) {
    Matrix p(ds.T, ds.C);
    for (int t = 0; t < ds.T; ++t) p.row(t) = q.at(t).row(s.clean_labels[t]);
    out.push_back(std::move(p));
  }
  return out;
}

double accuracy(const model::GruClassifier& m, const SequenceDataset& ds) {
  long hit = 0, total = 0;
  for (const auto& s : ds.sequences) {
    const auto pred = m.predict_labels(s.features);
    for (int t = 0; t < ds.T; ++t) hit += pred[t] == s.clean_labels[t];
    total += ds.T;
  }
  return static_cast<double>(hit) / total;
}

bool same_parameters(const model::GruClassifier& a, const model::GruClassifier& b) {
  const auto pa = a.parameters(), pb = b.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i)
    if (pa[i]->value != pb[i]->value) return false;
  return true;
}

double mean_off_diagonal(const NoiseTrajectory& q) {
  double sum = 0.0;
  for (int k = 0; k < q.T(); ++k) {
    const Matrix m = q.at(k);
    sum += (m.sum() - m.trace()) / (q.C * (q.C - 1));
  }
  return sum / q.T();
}

const Estimator kAll[] = {Estimator::Ignore, Estimator::Oracle,        Estimator::OracleStatic,
                          Estimator::Anchor, Estimator::VolMin,        Estimator::PlugIn,
                          Estimator::Discontinuous, Estimator::Continuous};

}  // namespace

TEST_CASE("estimator names round trip") {
  for (Estimator e : kAll) CHECK(parse_estimator(to_string(e)) == e);
  CHECK(to_string(Estimator::OracleStatic) == "oracle-static");
  CHECK(needs_truth(Estimator::Oracle));
  CHECK_FALSE(needs_truth(Estimator::Continuous));
  CHECK_THROWS_AS(parse_estimator("volminnet"), ConfigError);
}

TEST_CASE("default hyperparameters") {
  const TrainConfig c;
  CHECK(c.epochs == 150);
  CHECK(c.learning_rate == 0.01);
  CHECK(c.batch_size == 64);
  CHECK(c.volmin_lambda == 1e-4);
  CHECK(c.warmup_epochs == 25);
  CHECK(c.anchor_percentile == 97.0);
  CHECK(c.continuous.outer_iterations * c.continuous.inner_epochs == c.epochs);
  CHECK(c.continuous.gamma == 2.0);
  CHECK(c.continuous.eta == 2.0);
}

TEST_CASE("config validation") {
  TrainConfig c;
  c.learning_rate = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);

  const TrainingSet data = noisy_view(with_clean_as_noisy(hmm(10, 5, 0, 1.5, 2)));
  TrainConfig bad = quick(3);
  bad.continuous.outer_iterations = 2;
  CHECK_THROWS_AS(train_continuous(data, bad), ConfigError);
  CHECK_THROWS_AS(train_estimator(Estimator::Oracle, data, quick(1)), ConfigError);
}

TEST_CASE("multiplier schedule arithmetic") {
  const ContinuousConfig k;
  const double inf = std::numeric_limits<double>::infinity();
  Multipliers m = update_multipliers(k, {1.0, 1.0}, 0.5, inf);
  CHECK(m.lambda == 1.5);
  CHECK(m.c == 1.0);
  // Stagnating residual: 0.5 is not below 0.5 / 2.
  m = update_multipliers(k, {1.0, 1.0}, 0.5, 0.5);
  CHECK(m.lambda == 1.5);
  CHECK(m.c == 2.0);
  // Sufficient decrease keeps c.
  CHECK(update_multipliers(k, {1.0, 1.0}, 0.2, 0.5).c == 1.0);

  ContinuousConfig literal;
  literal.literal_ratio_test = true;
  CHECK(update_multipliers(literal, {1.0, 1.0}, 0.5, 0.5).c == 1.0);
  CHECK(update_multipliers(literal, {1.0, 1.0}, 1.1, 0.5).c == 2.0);
}

TEST_CASE("percentile rank rounds up") {
  CHECK(percentile_rank(100, 97.0) == 97);  // ceil(0.97 * 99)
  CHECK(percentile_rank(1, 97.0) == 0);
  CHECK(percentile_rank(10, 100.0) == 9);
  CHECK(percentile_rank(10, 0.0) == 0);
  CHECK(percentile_rank(11, 50.0) == 5);
}

TEST_CASE("anchor matrix from oracle posteriors recovers a static Q") {
  const SequenceDataset ds = hmm(400, 20, 3, 1.5, 1);
  const NoiseTrajectory truth = noise::sample_trajectory(noise::standard_regime(noise::Family::Static, 2, 20));
  const Matrix q = estimate_anchor_matrix(oracle_posteriors(ds, truth), 97.0);
  CHECK((q - truth.at(0)).cwiseAbs().maxCoeff() < 1e-12);

  const NoiseTrajectory id = NoiseTrajectory::repeat(Matrix::Identity(2, 2), 20);
  const Matrix qi = estimate_anchor_matrix(oracle_posteriors(ds, id), 97.0);
  CHECK(qi.diagonal().minCoeff() >= 0.95);
}

TEST_CASE("anchor rows without anchor mass fall back to the identity") {
  std::vector<Matrix> uniform(30, Matrix::Constant(5, 3, 1.0 / 3.0));
  CHECK(estimate_anchor_matrix(uniform, 97.0) == Matrix::Identity(3, 3));
}

TEST_CASE("anchor rows are repaired to dominance") {
  // Posteriors that never favour class 0 more than class 1.
  std::vector<Matrix> post;
  for (int s = 0; s < 50; ++s) {
    Matrix p(4, 2);
    for (int t = 0; t < 4; ++t) p.row(t) << 0.4 + 0.002 * s, 0.6 - 0.002 * s;
    post.push_back(p);
  }
  const Matrix q = estimate_anchor_matrix(post, 97.0);
  CHECK(noise::validate_matrix(q).ok);
}

TEST_CASE("plug-in reconstruction from oracle posteriors") {
  const int T = 50;
  const SequenceDataset ds = hmm(1000, T, 5, 1.5, 1);
  for (noise::Family f : {noise::Family::Periodic, noise::Family::Mixed, noise::Family::Linear}) {
    const NoiseTrajectory truth = noise::sample_trajectory(noise::standard_regime(f, 2, T));
    const PlugInEstimate est = estimate_plugin_trajectory(oracle_posteriors(ds, truth), 97.0, 20);
    CHECK(est.fallback_cells == 0);
    CHECK((est.trajectory.flat - truth.flat).cwiseAbs().maxCoeff() <= 0.05);
    CHECK(noise::validate_trajectory(est.trajectory).ok);
  }
  const NoiseTrajectory id = NoiseTrajectory::repeat(Matrix::Identity(2, 2), T);
  const PlugInEstimate est = estimate_plugin_trajectory(oracle_posteriors(ds, id), 97.0, 20);
  for (int k = 0; k < T; ++k) CHECK(est.trajectory.at(k).diagonal().minCoeff() >= 0.95);
}

TEST_CASE("plug-in cells with too few candidates use the pooled anchor row") {
  const SequenceDataset ds = hmm(30, 10, 7, 1.5, 1);
  const NoiseTrajectory truth = noise::sample_trajectory(noise::standard_regime(noise::Family::Static, 2, 10));
  const PlugInEstimate est = estimate_plugin_trajectory(oracle_posteriors(ds, truth), 97.0, 1000);
  CHECK(est.fallback_cells == 2 * 10);
  const Matrix pooled = estimate_anchor_matrix(oracle_posteriors(ds, truth), 97.0);
  for (int k = 0; k < 10; ++k) CHECK(est.trajectory.at(k) == pooled);
}

TEST_CASE("ignore under identity corruption equals clean training") {
  const SequenceDataset clean = hmm(80, 12, 2, 1.5, 3);
  const SequenceDataset corrupted = noise::corrupt_labels(clean, noise::identity_spec(2, 12), 9);
  const TrainedModel a = train_ignore(noisy_view(with_clean_as_noisy(clean)), quick(3, 4));
  const TrainedModel b = train_ignore(noisy_view(corrupted), quick(3, 4));
  CHECK(same_parameters(a.classifier, b.classifier));
  CHECK_FALSE(a.trajectory.has_value());
}

TEST_CASE("oracle with the identity spec equals ignore") {
  const TrainingSet data = noisy_view(noise::corrupt_labels(hmm(80, 12, 2, 1.5, 3), noise::identity_spec(2, 12), 1));
  const TrainedModel a = train_ignore(data, quick(3, 4));
  const TrainedModel b = train_oracle_q(data, noise::identity_spec(2, 12), quick(3, 4));
  CHECK(same_parameters(a.classifier, b.classifier));
}

TEST_CASE("training is deterministic and every trajectory is valid") {
  const noise::NoiseFunctionSpec spec = noise::standard_regime(noise::Family::Periodic, 2, 10);
  const TrainingSet data = noisy_view(noise::corrupt_labels(hmm(70, 10, 1, 1.5, 3), spec, 2));
  for (Estimator e : kAll) {
    CAPTURE(to_string(e));
    const TrainedModel a = train_estimator(e, data, quick(3, 5), &spec);
    const TrainedModel b = train_estimator(e, data, quick(3, 5), &spec);
    CHECK(same_parameters(a.classifier, b.classifier));
    REQUIRE(a.curve.size() == b.curve.size());
    for (std::size_t i = 0; i < a.curve.size(); ++i) CHECK(a.curve[i].objective == b.curve[i].objective);
    CHECK(a.trajectory.has_value() == (e != Estimator::Ignore));
    if (a.trajectory) {
      CHECK(a.trajectory->flat == b.trajectory->flat);
      CHECK(a.trajectory->T() == 10);
      CHECK(noise::validate_trajectory(*a.trajectory).ok);
    }
    for (std::size_t i = 0; i < a.curve.size(); ++i) CHECK(a.curve[i].epoch == static_cast<int>(i) + 1);
  }
  const TrainedModel other = train_ignore(data, quick(3, 6));
  CHECK_FALSE(same_parameters(other.classifier, train_ignore(data, quick(3, 5)).classifier));
}

TEST_CASE("warmup epochs are recorded separately") {
  const TrainingSet data = noisy_view(with_clean_as_noisy(hmm(40, 8, 1, 1.5, 2)));
  const TrainedModel m = train_plugin(data, quick(3));
  REQUIRE(m.curve.size() == 5);
  CHECK(m.curve[0].stage == "warmup");
  CHECK(m.curve[1].stage == "warmup");
  CHECK(m.curve[2].stage == "fit");
  const TrainedModel c = train_continuous(data, quick(3));
  REQUIRE(c.curve.size() == 3);
  CHECK(c.curve[2].stage == "outer3");
  CHECK(std::isfinite(c.curve[2].residual));
}

TEST_CASE("clean training on the desk HMM reaches 90% train accuracy") {
  const SequenceDataset ds = hmm(1000, 50, 0);
  TrainConfig c = quick(30);
  const TrainedModel m = train_ignore(noisy_view(with_clean_as_noisy(ds)), c);
  const double acc = accuracy(m.classifier, ds);
  MESSAGE("train accuracy " << acc);
  CHECK(acc >= 0.90);

  // Ten-epoch window medians of the training NLL do not increase.
  std::vector<double> medians;
  for (std::size_t w = 0; w + 10 <= m.curve.size(); w += 10) {
    std::vector<double> v;
    for (std::size_t i = w; i < w + 10; ++i) v.push_back(m.curve[i].fit);
    std::nth_element(v.begin(), v.begin() + 5, v.end());
    medians.push_back(v[5]);
  }
  for (std::size_t i = 1; i < medians.size(); ++i) CHECK(medians[i] <= medians[i - 1]);
}

TEST_CASE("static estimators recover 30% static noise at desk scale") {
  const noise::NoiseFunctionSpec spec = noise::standard_regime(noise::Family::Static, 2, 50);
  const TrainingSet data = noisy_view(noise::corrupt_labels(hmm(1000, 50, 1), spec, 3));
  TrainConfig c = quick(30);
  c.warmup_epochs = 10;
  for (Estimator e : {Estimator::Anchor, Estimator::VolMin, Estimator::Discontinuous}) {
    CAPTURE(to_string(e));
    const TrainedModel m = train_estimator(e, data, c);
    const double tol = e == Estimator::Discontinuous ? 0.07 : 0.05;
    double worst = 0.0;
    for (int k = 0; k < 50; ++k) {
      const Matrix q = m.trajectory->at(k);
      worst = std::max({worst, std::abs(q(0, 1) - 0.3), std::abs(q(1, 0) - 0.3)});
    }
    MESSAGE(to_string(e) << " worst off-diagonal deviation " << worst);
    CHECK(worst <= tol);
  }
}

TEST_CASE("continuous under identity corruption learns a near-identity trajectory") {
  const SequenceDataset ds = hmm(500, 50, 4, 0.1);
  const TrainingSet data = noisy_view(noise::corrupt_labels(ds, noise::identity_spec(2, 50), 1));
  TrainConfig c = quick(30);
  c.continuous.outer_iterations = 6;
  c.continuous.inner_epochs = 5;
  const TrainedModel m = train_continuous(data, c);
  MESSAGE("mean off-diagonal " << mean_off_diagonal(*m.trajectory));
  CHECK(mean_off_diagonal(*m.trajectory) <= 0.05);
}
