// Command-line front end: dataset generation, corruption, training and
// experiment runs.
//
// Exit codes: 0 success, 1 configuration error, 2 runtime failure.

#include "tempnoise/bench.hpp"
#include "tempnoise/error.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <sstream>

using namespace tempnoise;
namespace fs = std::filesystem;

namespace {

std::vector<std::string> split_list(const std::string& list) {
  std::vector<std::string> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

void print_summary(const bench::ExperimentReport& report) {
  for (const bench::Aggregate& a : report.aggregates) {
    std::cout << a.estimator << ": test error " << a.test_error_mean << " +- " << a.test_error_std << " %";
    if (a.approx_error_mean) std::cout << ", approximation error " << *a.approx_error_mean << " +- " << *a.approx_error_std << " %";
    std::cout << " (" << a.runs << " runs)\n";
  }
}

int report_exit(const bench::ExperimentReport& report) {
  if (report.all_ok()) return 0;
  for (const bench::CellResult& c : report.cells)
    if (!c.ok) std::cerr << "failed cell: " << c.estimator << " seed " << c.seed << ": " << c.error << '\n';
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sequence classifiers under temporal label noise"};
  app.require_subcommand(1);

  std::string config_path, out, in_path, estimators, family = "periodic";
  std::uint64_t seed = kDefaultSeed;
  int parallelism = 0;
  double target_mean = 0.3;
  HmmSpec hmm;
  std::vector<std::string> trajectories;

  auto* generate = app.add_subcommand("generate", "Write a synthetic HMM dataset");
  generate->add_option("--config", config_path, "Config file; its dataset.generator section is used");
  generate->add_option("--n", hmm.n, "Number of sequences");
  generate->add_option("--d", hmm.d, "Feature dimension");
  generate->add_option("--T", hmm.T, "Sequence length");
  generate->add_option("--C", hmm.C, "Number of classes");
  generate->add_option("--variance", hmm.variance, "Emission variance");
  generate->add_option("--seed", seed, "Seed");
  generate->add_option("--out", out, "Output dataset file")->required();

  auto* corrupt = app.add_subcommand("corrupt", "Add noisy labels to a dataset");
  corrupt->add_option("--in", in_path, "Input dataset file")->required();
  corrupt->add_option("--config", config_path, "Config file; its noise section is used");
  corrupt->add_option("--family", family, "Noise family when no config is given");
  corrupt->add_option("--target-mean", target_mean, "Mean flip rate of the regime");
  corrupt->add_option("--seed", seed, "Seed");
  corrupt->add_option("--out", out, "Output dataset file")->required();

  auto* train_cmd = app.add_subcommand("train", "Train a single estimator on a single seed");
  train_cmd->add_option("--config", config_path, "Experiment config")->required();
  train_cmd->add_option("--estimators", estimators, "Estimator name")->required();
  train_cmd->add_option("--seed", seed, "Seed");
  train_cmd->add_option("--out", out, "Output directory");

  auto* run = app.add_subcommand("run", "Run a full experiment");
  run->add_option("--config", config_path, "Experiment config")->required();
  run->add_option("--out", out, "Output directory (overrides the config)");
  run->add_option("--parallelism", parallelism, "Concurrent cells");
  auto* run_seed = run->add_option("--seed", seed, "Run only this seed");
  run->add_option("--estimators", estimators, "Comma-separated estimator list (overrides the config)");

  auto* estimate = app.add_subcommand("estimate-noise", "Per-step disagreement rates from paired labels");
  estimate->add_option("--in", in_path, "Dataset with clean and noisy labels")->required();
  estimate->add_option("--out", out, "Output table")->required();

  auto* curves = app.add_subcommand("curves", "Long-format table of true and estimated trajectories");
  curves->add_option("--config", config_path, "Config holding the dataset shape and true noise")->required();
  curves->add_option("--traj", trajectories, "NAME=PATH of a trajectory file (repeatable)")->required();
  curves->add_option("--out", out, "Output table")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*generate) {
      HmmSpec spec = hmm;
      if (!config_path.empty()) {
        const bench::ExperimentConfig cfg = bench::load_config(config_path);
        if (!cfg.generator) throw ConfigError("config has no dataset.generator section");
        spec = *cfg.generator;
      }
      spec.seed = seed;
      const SequenceDataset ds = generate_hmm(spec);
      save_dataset(ds, out);
      std::cout << "wrote " << ds.size() << " sequences to " << out << '\n';
    } else if (*corrupt) {
      SequenceDataset ds = load_dataset(in_path);
      bench::NoiseConfig nc;
      if (!config_path.empty()) {
        nc = bench::load_config(config_path).noise;
      } else {
        nc.family = family;
        nc.target_mean = target_mean;
      }
      const noise::NoiseFunctionSpec spec = nc.resolve(ds.C, ds.T);
      ds = noise::corrupt_labels(std::move(ds), spec, seed);
      save_dataset(ds, out);
      std::cout << "wrote " << ds.size() << " corrupted sequences to " << out << '\n';
    } else if (*train_cmd || *run) {
      bench::ExperimentConfig cfg = bench::load_config(config_path);
      if (!estimators.empty()) cfg.estimators = split_list(estimators);
      if (*train_cmd) {
        if (cfg.estimators.size() != 1) throw ConfigError("train takes exactly one estimator");
        cfg.seeds = {seed};
        cfg.parallelism = 1;
      } else {
        if (*run_seed) cfg.seeds = {seed};
        if (parallelism > 0) cfg.parallelism = parallelism;
      }
      if (!out.empty()) cfg.output = out;
      if (cfg.output.empty()) throw ConfigError("no output directory: pass --out or set 'output'");
      const bench::ExperimentReport report = bench::run_experiment(cfg);
      print_summary(report);
      std::cout << "report written to " << (cfg.output / "report.json").string() << '\n';
      return report_exit(report);
    } else if (*estimate) {
      const SequenceDataset ds = load_dataset(in_path);
      const bench::EmpiricalNoise est = bench::empirical_noise_estimate(ds);
      bench::write_empirical_noise(est, out);
      if (!est.empty_rows.empty())
        warn(std::to_string(est.empty_rows.size()) + " (t, class) cells had no clean labels and were set to identity rows");
      std::cout << "wrote " << out << '\n';
    } else if (*curves) {
      const bench::ExperimentConfig cfg = bench::load_config(config_path);
      int C = 0, T = 0;
      if (cfg.generator) {
        C = cfg.generator->C;
        T = cfg.generator->T;
      } else {
        const SequenceDataset ds = load_dataset(*cfg.dataset_file);
        C = ds.C;
        T = ds.T;
      }
      std::vector<std::pair<std::string, noise::NoiseTrajectory>> trajs;
      for (const std::string& item : trajectories) {
        const auto eq = item.find('=');
        if (eq == std::string::npos || eq == 0) throw ConfigError("--traj expects NAME=PATH, got '" + item + "'");
        trajs.emplace_back(item.substr(0, eq), bench::read_trajectory(item.substr(eq + 1)));
      }
      bench::emit_reconstruction_curves(cfg.noise.resolve(C, T), trajs, out);
      std::cout << "wrote " << out << '\n';
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "runtime failure: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
