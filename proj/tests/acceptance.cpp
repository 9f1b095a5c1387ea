// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fail.
//
// Usage: acceptance [output-dir]

#include "tempnoise/bench.hpp"
#include "tempnoise/error.hpp"
#include "tempnoise/loss.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <numbers>
#include <sstream>

using namespace tempnoise;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

int failures = 0;
int example_failures = 0;

void verdict(int id, bool pass, const std::string& detail) {
  if (!pass) ++failures;
  std::printf("criterion %2d: %s  %s\n", id, pass ? "PASS" : "FAIL", detail.c_str());
  std::fflush(stdout);
}

void example(const std::string& name, bool pass, const std::string& detail) {
  if (!pass) ++example_failures;
  std::printf("example %s: %s  %s\n", name.c_str(), pass ? "PASS" : "FAIL", detail.c_str());
  std::fflush(stdout);
}

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os.precision(precision);
  os << v;
  return os.str();
}

Matrix random_matrix(Eigen::Index r, Eigen::Index c, Rng& rng, double scale) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * (2.0 * uniform01(rng) - 1.0);
  return m;
}

// Shared settings of the comparative grid (criteria 5 to 9). Warmup keeps its default.
train::TrainConfig grid_training() {
  train::TrainConfig c;
  c.epochs = 30;
  c.continuous.outer_iterations = 6;
  c.continuous.inner_epochs = 5;
  return c;
}

std::vector<std::uint64_t> ten_seeds() { return {0, 1, 2, 3, 4, 5, 6, 7, 8, 9}; }

bench::ExperimentReport run_grid(const std::string& family, std::vector<std::string> estimators, const fs::path& out) {
  bench::ExperimentConfig c;
  c.noise.family = family;
  c.noise.target_mean = 0.3;
  c.estimators = std::move(estimators);
  c.train = grid_training();
  c.seeds = ten_seeds();
  c.output = out;
  const auto start = Clock::now();
  bench::ExperimentReport r = bench::run_experiment(c);
  std::printf("  grid %-8s %zu cells in %.1f s\n", family.c_str(), r.cells.size(), seconds_since(start));
  for (const auto& a : r.aggregates) {
    std::printf("    %-14s test error %6.2f +- %5.2f %%", a.estimator.c_str(), a.test_error_mean, a.test_error_std);
    if (a.approx_error_mean) std::printf("   approximation error %6.2f +- %5.2f %%", *a.approx_error_mean, *a.approx_error_std);
    std::printf("   (%d runs)\n", a.runs);
  }
  std::fflush(stdout);
  return r;
}

double test_error(const bench::ExperimentReport& r, const std::string& e) { return r.aggregate(e)->test_error_mean; }
double approx_error(const bench::ExperimentReport& r, const std::string& e) {
  return r.aggregate(e)->approx_error_mean.value_or(std::nan(""));
}

// Step 1e-4: with an O(1) objective, 1e-5 lets roundoff dominate near-zero gradient entries.
void criterion1() {
  const auto start = Clock::now();
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng = make_rng(seed, 1);
    const int d = 3, T = 5, C = 2 + static_cast<int>(seed % 2), B = 3;
    model::GruClassifier clf(d, 4, C, rng);
    model::ContinuousNoiseNet net(C, 2, 5, rng);
    std::vector<Matrix> feats;
    std::vector<std::vector<int>> labels;
    for (int b = 0; b < B; ++b) {
      feats.push_back(random_matrix(T, d, rng, 2.0));
      std::vector<int> y(T);
      for (int& v : y) v = static_cast<int>(uniform01(rng) * C);
      labels.push_back(y);
    }
    const std::vector<std::size_t> idx = {0, 1, 2};
    const model::Batch batch = model::make_batch(feats, labels, idx);
    const double lambda = 0.5 + uniform01(rng), c = 0.5 + 2.0 * uniform01(rng);
    diff::ParameterList params = clf.parameters();
    for (auto* p : net.parameters()) params.push_back(p);
    const diff::Objective f = [&](diff::Tape& tape) {
      diff::Var q = net.forward(tape, T);
      diff::Var r = loss::graph::residuals(clf.forward(tape, batch), q, B, batch.labels);
      return loss::graph::augmented_lagrangian(q, r, lambda, c);
    };
    worst = std::max(worst, diff::finite_difference_check(f, params, 1e-4));
  }
  const double secs = seconds_since(start);
  verdict(1, worst < 1e-4 && secs < 60.0,
          "max relative error " + fmt(worst, 3) + " over 100 seeds (< 1e-4), " + fmt(secs, 3) + " s (< 60 s)");
}

void criterion2() {
  const auto start = Clock::now();
  constexpr noise::Family families[] = {noise::Family::Static, noise::Family::Linear, noise::Family::Decay,
                                        noise::Family::Growth, noise::Family::Periodic, noise::Family::Mixed};
  Rng rng(2);
  long probes = 0, invalid = 0;
  // eval_noise over random specs.
  for (int k = 0; k < 40000; ++k) {
    const int C = 2 + static_cast<int>(uniform01(rng) * 4), T = 1 + static_cast<int>(uniform01(rng) * 100);
    noise::NoiseFunctionSpec spec = noise::make_spec(families[k % 6], C, T);
    for (auto& r : spec.rows) {
      r.rho = -0.5 + 2.0 * uniform01(rng);
      r.rho_start = -0.5 + 2.0 * uniform01(rng);
      r.rho_end = -0.5 + 2.0 * uniform01(rng);
      r.a = -1.0 + 2.0 * uniform01(rng);
      r.b = 3.0 * uniform01(rng);
      r.gamma = T * uniform01(rng);
      r.alpha = 2.0 * uniform01(rng);
      r.phi = 2.0 * std::numbers::pi * uniform01(rng);
      r.offset = -0.5 + 1.5 * uniform01(rng);
      r.amplitude = uniform01(rng);
    }
    const int t = 1 + static_cast<int>(uniform01(rng) * T);
    invalid += !noise::validate_matrix(noise::eval_noise(spec, t)).ok;
    ++probes;
  }
  // noise_net_eval and discontinuous_eval, 100 time steps per random draw.
  for (int k = 0; k < 300; ++k) {
    const int C = 2 + k % 4, T = 100;
    Rng net_rng = make_rng(k, 3);
    model::ContinuousNoiseNet net(C, 1 + k % 4, 8, net_rng);
    const double scale = 1.0 + 10.0 * uniform01(rng);
    for (auto* p : net.parameters()) p->value *= scale;
    model::NoiseBlocks blocks(C, T);
    blocks.raw.value = random_matrix(T, C * C, rng, 30.0 * uniform01(rng));
    for (int t = 1; t <= T; ++t) {
      invalid += !noise::validate_matrix(model::noise_net_eval(net, t, T)).ok;
      invalid += !noise::validate_matrix(model::discontinuous_eval(blocks, t)).ok;
      probes += 2;
    }
  }
  const double secs = seconds_since(start);
  verdict(2, invalid == 0 && probes >= 100000 && secs < 60.0,
          std::to_string(invalid) + " invalid of " + std::to_string(probes) + " probes, " + fmt(secs, 3) + " s");
}

void criterion3() {
  const auto start = Clock::now();
  const int n = 10000, T = 50, C = 2;
  HmmSpec h;
  h.n = n;
  h.d = 1;
  h.T = T;
  h.seed = 3;
  const SequenceDataset base = generate_hmm(h);
  bool all = true;
  std::string detail;
  constexpr noise::Family families[] = {noise::Family::Static, noise::Family::Linear, noise::Family::Decay,
                                        noise::Family::Growth, noise::Family::Periodic, noise::Family::Mixed};
  for (noise::Family f : families) {
    const noise::NoiseFunctionSpec spec = noise::standard_regime(f, C, T, 0.3);
    const SequenceDataset ds = noise::corrupt_labels(base, spec, 30 + static_cast<int>(f));
    int inside = 0;
    for (int t = 0; t < T; ++t) {
      const Matrix q = noise::eval_noise(spec, t + 1);
      double flips = 0.0, expected = 0.0, variance = 0.0;
      for (const Sequence& s : ds.sequences) {
        const int y = s.clean_labels[t];
        const double rho = 1.0 - q(y, y);
        flips += (*s.noisy_labels)[t] != y;
        expected += rho;
        variance += rho * (1.0 - rho);
      }
      inside += std::abs(flips - expected) <= 3.0 * std::sqrt(variance);
    }
    const double frac = static_cast<double>(inside) / T;
    all = all && frac >= 0.99;
    detail += noise::to_string(f) + " " + std::to_string(inside) + "/" + std::to_string(T) + ", ";
  }
  const double secs = seconds_since(start);
  verdict(3, all && secs < 60.0, detail + "steps within 3 sigma (need >= 99% each), " + fmt(secs, 3) + " s");
}

void criterion4() {
  int mismatches = 0;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    Rng rng = make_rng(seed, 4);
    const int C = 2 + static_cast<int>(seed % 5), T = 1 + static_cast<int>(uniform01(rng) * 60);
    Matrix logits = random_matrix(T, C, rng, 5.0);
    const Matrix probs = diff::row_softmax(logits);
    std::vector<int> y(T);
    for (int& v : y) v = static_cast<int>(uniform01(rng) * C);
    const auto a = loss::nll_sequence(probs, y);
    const auto b = loss::forward_loss_sequence(probs, noise::NoiseTrajectory::repeat(Matrix::Identity(C, C), T), y);
    mismatches += !(a.scalar == b.scalar && a.per_time == b.per_time);
  }
  verdict(4, mismatches == 0, std::to_string(mismatches) + " of 1000 inputs differ bitwise");
}

struct Grid {
  bench::ExperimentReport periodic, mixed, stat;
};

Grid criteria5to9(const fs::path& out, double& grid_seconds) {
  const auto start = Clock::now();
  bench::ExperimentReport periodic = run_grid(
      "periodic", {"clean", "ignore", "oracle", "oracle-static", "continuous", "discontinuous", "anchor", "volmin"},
      out / "periodic");
  bench::ExperimentReport mixed = run_grid("mixed", {"continuous", "discontinuous", "anchor", "volmin"}, out / "mixed");
  bench::ExperimentReport stat = run_grid("static", {"continuous", "anchor", "volmin"}, out / "static");

  bool ok = periodic.all_ok() && mixed.all_ok() && stat.all_ok();
  if (!ok) std::printf("  some grid cells failed; see the reports under %s\n", out.string().c_str());

  {
    const double clean = test_error(periodic, "clean"), oracle = test_error(periodic, "oracle"),
                 ignore = test_error(periodic, "ignore");
    const bool near_clean = oracle - clean <= 3.0, beats_ignore = ignore - oracle >= 5.0;
    verdict(5, ok && near_clean && beats_ignore,
            "oracle " + fmt(oracle) + "% vs clean " + fmt(clean) + "% (gap " + fmt(oracle - clean, 3) +
                ", need <= 3): " + (near_clean ? "ok" : "no") + "; ignore " + fmt(ignore) + "% (margin " +
                fmt(ignore - oracle, 3) + ", need >= 5): " + (beats_ignore ? "ok" : "no"));
  }
  {
    const double temporal = test_error(periodic, "oracle"), averaged = test_error(periodic, "oracle-static");
    const double static_approx = approx_error(periodic, "oracle-static") / 100.0;
    const double oracle_approx = approx_error(periodic, "oracle") / 100.0;
    const double bound = 2.0 / std::numbers::pi * 0.2 - 0.03;
    verdict(6, ok && temporal <= averaged && static_approx >= bound && oracle_approx == 0.0,
            "test error temporal " + fmt(temporal) + "% vs static average " + fmt(averaged) +
                "%; approximation error static " + fmt(static_approx) + " (need >= " + fmt(bound) +
                "), temporal " + fmt(oracle_approx));
  }
  {
    bool pass = ok;
    std::string detail;
    for (const auto* r : {&periodic, &mixed}) {
      const double cont = approx_error(*r, "continuous") / 100.0, disc = approx_error(*r, "discontinuous") / 100.0;
      const double stat_best = std::min(approx_error(*r, "anchor"), approx_error(*r, "volmin")) / 100.0;
      const bool ordered = cont < disc && disc < stat_best && cont <= 0.15;
      pass = pass && ordered;
      detail += r->noise["family"].get<std::string>() + ": continuous " + fmt(cont) + " < discontinuous " +
                fmt(disc) + " < best static " + fmt(stat_best) + (ordered ? " ok" : " no") + "; ";
    }
    verdict(7, pass, detail + "continuous <= 0.15 required");
  }
  {
    const double cont = test_error(stat, "continuous");
    const double best = std::min(test_error(stat, "anchor"), test_error(stat, "volmin"));
    verdict(8, ok && cont - best <= 2.0,
            "continuous " + fmt(cont) + "% vs best static " + fmt(best) + "% (difference " + fmt(cont - best, 3) +
                ", need <= 2)");
  }
  grid_seconds = seconds_since(start);
  return {std::move(periodic), std::move(mixed), std::move(stat)};
}

void criterion9(const fs::path& out, double& seconds) {
  const auto start = Clock::now();
  // Separable data: emission variance 0.1 puts the classes 10 standard deviations apart in 10 dimensions.
  HmmSpec h;
  h.variance = 0.1;
  h.seed = 9;
  const SequenceDataset ds = generate_hmm(h);

  // Plug-In reconstruction from the oracle noisy posterior (row y_t of Q_t).
  double worst = 0.0;
  for (noise::Family f : {noise::Family::Periodic, noise::Family::Mixed}) {
    const noise::NoiseFunctionSpec spec = noise::standard_regime(f, 2, h.T, 0.3);
    const noise::NoiseTrajectory truth = noise::sample_trajectory(spec);
    const SequenceDataset noisy = noise::corrupt_labels(ds, spec, 91);
    std::vector<Matrix> post;
    for (const Sequence& s : noisy.sequences) {
      Matrix p(h.T, 2);
      for (int t = 0; t < h.T; ++t) p.row(t) = truth.at(t).row(s.clean_labels[t]);
      post.push_back(p);
    }
    const train::TrainConfig tc;
    const train::PlugInEstimate est = train::estimate_plugin_trajectory(post, tc.anchor_percentile, tc.min_cell_candidates);
    worst = std::max(worst, (est.trajectory.flat - truth.flat).cwiseAbs().maxCoeff());
  }

  // The trained estimator on the same data, reported but not gated.
  {
    bench::ExperimentConfig p;
    p.generator = h;
    p.noise.family = "periodic";
    p.estimators = {"plugin"};
    p.train = grid_training();
    p.seeds = {9};
    p.output = out / "plugin";
    bench::run_experiment(p);
    const noise::NoiseTrajectory est = bench::read_trajectory(p.output / "trajectories" / "plugin_seed9.csv");
    const noise::NoiseTrajectory truth =
        noise::sample_trajectory(noise::standard_regime(noise::Family::Periodic, 2, h.T, 0.3));
    std::printf("  trained plug-in on separable periodic data: max entrywise error %.4f\n",
                (est.flat - truth.flat).cwiseAbs().maxCoeff());
  }

  // Identity corruption: every estimator's trajectory stays near the identity.
  bench::ExperimentConfig c;
  c.generator = h;
  c.noise.family = "identity";
  c.estimators = {"oracle", "oracle-static", "anchor", "volmin", "plugin", "discontinuous", "continuous"};
  c.train = grid_training();
  c.seeds = {9};
  c.output = out / "identity";
  const bench::ExperimentReport r = bench::run_experiment(c);
  double worst_off = 0.0;
  std::string detail;
  for (const std::string& e : c.estimators) {
    const noise::NoiseTrajectory t = bench::read_trajectory(c.output / "trajectories" / (e + "_seed9.csv"));
    double off = 0.0;
    for (int k = 0; k < t.T(); ++k) off += (t.at(k).sum() - t.at(k).trace()) / 2.0;
    off /= t.T();
    worst_off = std::max(worst_off, off);
    detail += e + " " + fmt(off, 3) + ", ";
  }
  seconds = seconds_since(start);
  verdict(9, r.all_ok() && worst <= 0.05 && worst_off <= 0.05,
          "plug-in max entrywise error " + fmt(worst) + " (need <= 0.05); identity mean off-diagonal: " + detail +
              "max " + fmt(worst_off, 3) + " (need <= 0.05)");
}

void criterion10() {
  HmmSpec h;
  h.n = 5000;
  h.d = 1;
  h.seed = 10;
  const noise::NoiseFunctionSpec spec = noise::standard_regime(noise::Family::Periodic, 2, h.T, 0.3);
  const bench::EmpiricalNoise e = bench::empirical_noise_estimate(noise::corrupt_labels(generate_hmm(h), spec, 11));
  int inside = 0, cells = 0;
  for (int t = 1; t <= h.T; ++t) {
    const Matrix q = noise::eval_noise(spec, t);
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 2; ++j) {
        const double sigma = std::sqrt(q(i, j) * (1.0 - q(i, j)) / e.counts(t - 1, i));
        inside += std::abs(e.trajectory.at(t - 1)(i, j) - q(i, j)) <= 3.0 * sigma;
        ++cells;
      }
  }
  verdict(10, inside >= 0.99 * cells,
          std::to_string(inside) + "/" + std::to_string(cells) + " entries within 3 sigma (need >= 99%)");
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void criterion11(const fs::path& out) {
  bench::ExperimentConfig c;
  c.generator->n = 200;
  c.noise.family = "mixed";
  c.estimators = {"ignore", "anchor", "plugin", "discontinuous", "continuous"};
  c.train.epochs = 4;
  c.train.warmup_epochs = 2;
  c.train.continuous.outer_iterations = 2;
  c.train.continuous.inner_epochs = 2;
  c.seeds = {0, 1};
  c.output = out / "repro";
  bench::run_experiment(c);
  const std::string first = slurp(c.output / "report.json");
  const std::string first_curves = slurp(c.output / "reconstruction_seed1.csv");
  bench::run_experiment(c);
  const bool same = !first.empty() && first == slurp(c.output / "report.json") &&
                    first_curves == slurp(c.output / "reconstruction_seed1.csv");
  verdict(11, same, same ? "report.json and reconstruction tables byte-identical on re-run" : "re-run differs");
}


// Fit-term medians over consecutive 10-epoch windows, warmup kept apart.
bool curve_medians_decrease(const fs::path& csv) {
  std::ifstream is(csv);
  std::string line;
  std::getline(is, line);
  std::map<bool, std::vector<double>> fits;
  while (std::getline(is, line)) {
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string x; std::getline(ss, x, ',');) f.push_back(x);
    fits[f.at(1) == "warmup"].push_back(std::stod(f.at(3)));
  }
  for (auto& [warm, v] : fits) {
    double prev = std::numeric_limits<double>::infinity();
    for (std::size_t w = 0; w + 10 <= v.size(); w += 10) {
      std::vector<double> win(v.begin() + w, v.begin() + w + 10);
      std::nth_element(win.begin(), win.begin() + 5, win.end());
      if (win[5] > prev) return false;
      prev = win[5];
    }
  }
  return true;
}

double min_diagonal(const noise::NoiseTrajectory& t) {
  double m = 1.0;
  for (int k = 0; k < t.T(); ++k) m = std::min(m, t.at(k).diagonal().minCoeff());
  return m;
}

// Comparative per-op examples at desk scale. Reuses the grid and adds the
// estimators the criteria do not need.
void examples(const Grid& g, const fs::path& out) {
  const bench::ExperimentReport stat = run_grid("static", {"ignore", "oracle"}, out / "static_extra");
  const bench::ExperimentReport periodic = run_grid("periodic", {"plugin"}, out / "periodic_extra");
  const bench::ExperimentReport mixed = run_grid("mixed", {"plugin"}, out / "mixed_extra");

  {
    const double ignore = test_error(stat, "ignore"), oracle = test_error(stat, "oracle");
    example("ignore/static", ignore - oracle >= 3.0,
            "ignore " + fmt(ignore) + "% vs oracle " + fmt(oracle) + "% under static noise (need >= 3 points worse)");
  }
  {
    const double anchor = approx_error(g.periodic, "anchor") / 100.0, bound = 2.0 / std::numbers::pi * 0.2 - 0.03;
    example("anchor/periodic", anchor >= bound,
            "approximation error " + fmt(anchor) + " (need >= " + fmt(bound) + ")");
  }
  {
    const double vol = approx_error(g.periodic, "volmin"), cont = approx_error(g.periodic, "continuous");
    example("volmin/periodic", vol > cont,
            "approximation error " + fmt(vol / 100.0) + " vs continuous " + fmt(cont / 100.0));
  }
  {
    const double plug = approx_error(mixed, "plugin"), anchor = approx_error(g.mixed, "anchor");
    example("plugin/mixed", plug < anchor,
            "approximation error " + fmt(plug / 100.0) + " vs anchor " + fmt(anchor / 100.0));
  }
  {
    const double disc = approx_error(g.periodic, "discontinuous");
    const double best = std::min(approx_error(g.periodic, "anchor"), approx_error(g.periodic, "volmin"));
    example("discontinuous/periodic", disc < best,
            "approximation error " + fmt(disc / 100.0) + " vs best static " + fmt(best / 100.0));
  }
  {
    const double cont = approx_error(g.periodic, "continuous");
    double others = std::numeric_limits<double>::infinity();
    for (const auto* r : {&g.periodic, &periodic})
      for (const auto& a : r->aggregates)
        if (a.estimator != "continuous" && a.estimator != "oracle" && a.approx_error_mean)
          others = std::min(others, *a.approx_error_mean);
    example("continuous/periodic", cont / 100.0 <= 0.15 && cont < others,
            "approximation error " + fmt(cont / 100.0) + " vs lowest non-oracle estimator " + fmt(others / 100.0));
  }
  for (const std::string e : {"anchor", "plugin"}) {
    const double d = min_diagonal(bench::read_trajectory(out / "identity" / "trajectories" / (e + "_seed9.csv")));
    example(e + "/identity", d >= 0.95, "minimum diagonal " + fmt(d) + " on separable data (need >= 0.95)");
  }
  {
    int curves = 0, rising = 0;
    for (const auto& entry : fs::recursive_directory_iterator(out)) {
      if (entry.path().parent_path().filename() != "training_curves") continue;
      ++curves;
      if (!curve_medians_decrease(entry.path())) {
        if (++rising <= 5) std::printf("  rising window medians: %s\n", entry.path().string().c_str());
      }
    }
    example("training curves", rising == 0,
            std::to_string(curves - rising) + "/" + std::to_string(curves) +
                " curves with non-increasing 10-epoch window medians");
  }
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path out = argc > 1 ? fs::path(argv[1]) : fs::path("acceptance_out");
  fs::remove_all(out);
  fs::create_directories(out);
  try {
    criterion1();
    criterion2();
    criterion3();
    criterion4();
    double grid = 0.0, identity = 0.0;
    const Grid g = criteria5to9(out, grid);
    criterion9(out, identity);
    criterion10();
    criterion11(out);
    const double total = grid + identity;
    verdict(12, total < 600.0, "criteria 5-9 grid took " + fmt(total, 4) + " s (< 600 s)");
    examples(g, out);
  } catch (const std::exception& e) {
    std::printf("acceptance aborted: %s\n", e.what());
    return 2;
  }
  std::printf("%d criteria failed, %d examples failed\n", failures, example_failures);
  return failures == 0 && example_failures == 0 ? 0 : 1;
}
