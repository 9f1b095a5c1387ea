#include "tempnoise/bench.hpp"

#include "tempnoise/error.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

namespace tempnoise::bench {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kCorruptionStream = 0xC0;
constexpr std::uint64_t kTrainingStream = 0x7A;

void check_keys(const json& obj, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, value] : obj.items()) {
    (void)value;
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; }))
      throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

template <class T>
void read(const json& obj, const char* key, T& out, const std::string& where) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(where + "." + key + ": wrong type");
  }
}

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw RuntimeFailure("cannot open '" + path.string() + "' for writing");
  os << std::setprecision(17);
  return os;
}

std::string cell_name(const std::string& estimator, std::uint64_t seed) {
  return estimator + "_seed" + std::to_string(seed);
}

json optional_number(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

}  // namespace

noise::NoiseFunctionSpec NoiseConfig::resolve(int C, int T) const {
  if (family == "identity") return noise::identity_spec(C, T);
  const noise::Family f = noise::parse_family(family);
  if (params.empty()) return noise::standard_regime(f, C, T, target_mean);
  return noise::from_param_map(f, C, T, params);
}

train::TrainConfig train_config_from_json(const json& doc) {
  const std::string where = "train";
  check_keys(doc, where,
             {"epochs", "learning_rate", "batch_size", "hidden", "volmin_lambda", "warmup_epochs", "anchor_percentile",
              "min_cell_candidates", "continuous", "seed"});
  train::TrainConfig c;
  read(doc, "epochs", c.epochs, where);
  read(doc, "learning_rate", c.learning_rate, where);
  read(doc, "batch_size", c.batch_size, where);
  read(doc, "hidden", c.hidden, where);
  read(doc, "volmin_lambda", c.volmin_lambda, where);
  read(doc, "warmup_epochs", c.warmup_epochs, where);
  read(doc, "anchor_percentile", c.anchor_percentile, where);
  read(doc, "min_cell_candidates", c.min_cell_candidates, where);
  read(doc, "seed", c.seed, where);
  if (doc.contains("continuous")) {
    const json& k = doc.at("continuous");
    const std::string w = "train.continuous";
    check_keys(k, w,
               {"outer_iterations", "inner_epochs", "lambda0", "c0", "gamma", "eta", "literal_ratio_test",
                "reset_optimizer", "hidden_layers", "width"});
    read(k, "outer_iterations", c.continuous.outer_iterations, w);
    read(k, "inner_epochs", c.continuous.inner_epochs, w);
    read(k, "lambda0", c.continuous.lambda0, w);
    read(k, "c0", c.continuous.c0, w);
    read(k, "gamma", c.continuous.gamma, w);
    read(k, "eta", c.continuous.eta, w);
    read(k, "literal_ratio_test", c.continuous.literal_ratio_test, w);
    read(k, "reset_optimizer", c.continuous.reset_optimizer, w);
    read(k, "hidden_layers", c.continuous.hidden_layers, w);
    read(k, "width", c.continuous.width, w);
  }
  c.validate();
  return c;
}

json to_json(const train::TrainConfig& c) {
  const train::ContinuousConfig& k = c.continuous;
  return {{"epochs", c.epochs},
          {"learning_rate", c.learning_rate},
          {"batch_size", c.batch_size},
          {"hidden", c.hidden},
          {"volmin_lambda", c.volmin_lambda},
          {"warmup_epochs", c.warmup_epochs},
          {"anchor_percentile", c.anchor_percentile},
          {"min_cell_candidates", c.min_cell_candidates},
          {"seed", c.seed},
          {"continuous",
           {{"outer_iterations", k.outer_iterations},
            {"inner_epochs", k.inner_epochs},
            {"lambda0", k.lambda0},
            {"c0", k.c0},
            {"gamma", k.gamma},
            {"eta", k.eta},
            {"literal_ratio_test", k.literal_ratio_test},
            {"reset_optimizer", k.reset_optimizer},
            {"hidden_layers", k.hidden_layers},
            {"width", k.width}}}};
}

ExperimentConfig config_from_json(const json& doc) {
  check_keys(doc, "config",
             {"dataset", "test_fraction", "noise", "estimators", "train", "seeds", "parallelism", "output",
              "write_artifacts"});
  ExperimentConfig c;
  if (doc.contains("dataset")) {
    const json& d = doc.at("dataset");
    check_keys(d, "dataset", {"generator", "file"});
    if (d.contains("generator") == d.contains("file"))
      throw ConfigError("dataset: give exactly one of 'generator' or 'file'");
    if (d.contains("file")) {
      c.generator.reset();
      c.dataset_file = d.at("file").get<std::string>();
    } else {
      const json& g = d.at("generator");
      const std::string w = "dataset.generator";
      check_keys(g, w, {"n", "d", "T", "C", "variance", "transition"});
      HmmSpec h;
      read(g, "n", h.n, w);
      read(g, "d", h.d, w);
      read(g, "T", h.T, w);
      read(g, "C", h.C, w);
      read(g, "variance", h.variance, w);
      if (g.contains("transition")) {
        const auto rows = g.at("transition").get<std::vector<std::vector<double>>>();
        h.transition.resize(static_cast<Eigen::Index>(rows.size()), rows.empty() ? 0 : rows[0].size());
        for (std::size_t i = 0; i < rows.size(); ++i) {
          if (rows[i].size() != rows[0].size()) throw ConfigError(w + ".transition: ragged rows");
          for (std::size_t j = 0; j < rows[i].size(); ++j) h.transition(i, j) = rows[i][j];
        }
      }
      h.validate();
      c.generator = h;
    }
  }
  read(doc, "test_fraction", c.test_fraction, "config");
  if (doc.contains("noise")) {
    const json& n = doc.at("noise");
    check_keys(n, "noise", {"family", "target_mean", "params"});
    read(n, "family", c.noise.family, "noise");
    read(n, "target_mean", c.noise.target_mean, "noise");
    read(n, "params", c.noise.params, "noise");
  }
  read(doc, "estimators", c.estimators, "config");
  if (doc.contains("train")) c.train = train_config_from_json(doc.at("train"));
  read(doc, "seeds", c.seeds, "config");
  read(doc, "parallelism", c.parallelism, "config");
  if (doc.contains("output")) c.output = doc.at("output").get<std::string>();
  read(doc, "write_artifacts", c.write_artifacts, "config");
  return c;
}

json to_json(const ExperimentConfig& c) {
  json dataset;
  if (c.dataset_file) {
    dataset["file"] = c.dataset_file->string();
  } else if (c.generator) {
    const HmmSpec& h = *c.generator;
    json g = {{"n", h.n}, {"d", h.d}, {"T", h.T}, {"C", h.C}, {"variance", h.variance}};
    const Matrix a = h.transition_matrix();
    std::vector<std::vector<double>> rows(a.rows(), std::vector<double>(a.cols()));
    for (Eigen::Index i = 0; i < a.rows(); ++i)
      for (Eigen::Index j = 0; j < a.cols(); ++j) rows[i][j] = a(i, j);
    g["transition"] = rows;
    dataset["generator"] = g;
  }
  return {{"dataset", dataset},
          {"test_fraction", c.test_fraction},
          {"noise", {{"family", c.noise.family}, {"target_mean", c.noise.target_mean}, {"params", c.noise.params}}},
          {"estimators", c.estimators},
          {"train", to_json(c.train)},
          {"seeds", c.seeds},
          {"parallelism", c.parallelism},
          {"output", c.output.string()},
          {"write_artifacts", c.write_artifacts}};
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config '" + path.string() + "'");
  json doc;
  try {
    doc = json::parse(is, nullptr, true, true);
  } catch (const json::parse_error& e) {
    throw ConfigError("config '" + path.string() + "': " + e.what());
  }
  try {
    return config_from_json(doc);
  } catch (const json::exception& e) {
    throw ConfigError("config '" + path.string() + "': " + e.what());
  }
}

void ExperimentConfig::validate() const {
  if (estimators.empty()) throw ConfigError("config: at least one estimator is required");
  if (seeds.empty()) throw ConfigError("config: at least one seed is required");
  if (std::set<std::string>(estimators.begin(), estimators.end()).size() != estimators.size())
    throw ConfigError("config: duplicate estimator");
  for (const std::string& e : estimators)
    if (e != kCleanReference) train::parse_estimator(e);
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size())
    throw ConfigError("config: duplicate seed");
  if (parallelism < 1) throw ConfigError("config: parallelism must be >= 1");
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw ConfigError("config: test_fraction must lie in (0, 1)");
  if (!generator && !dataset_file) throw ConfigError("config: no dataset source");
  train.validate();
  const auto& k = train.continuous;
  if (std::find(estimators.begin(), estimators.end(), "continuous") != estimators.end() &&
      k.outer_iterations * k.inner_epochs != train.epochs)
    throw ConfigError("config: train.epochs (" + std::to_string(train.epochs) +
                      ") must equal continuous.outer_iterations x continuous.inner_epochs (" +
                      std::to_string(k.outer_iterations) + " x " + std::to_string(k.inner_epochs) + ")");
  if (generator) {
    generator->validate();
    noise.resolve(generator->C, generator->T).validate();
  }
}

bool ExperimentReport::all_ok() const {
  return std::all_of(cells.begin(), cells.end(), [](const CellResult& c) { return c.ok; });
}

const Aggregate* ExperimentReport::aggregate(const std::string& estimator) const {
  for (const Aggregate& a : aggregates)
    if (a.estimator == estimator) return &a;
  return nullptr;
}

json ExperimentReport::to_json() const {
  json cells_json = json::array();
  for (const CellResult& c : cells) {
    json row = {{"estimator", c.estimator}, {"seed", c.seed}, {"status", c.ok ? "ok" : "failed"}};
    if (c.ok) {
      row["clean_test_error"] = c.clean_test_error;
      row["approximation_error"] = optional_number(c.approximation_error);
    } else {
      row["error"] = c.error;
    }
    cells_json.push_back(row);
  }
  json aggregates_json = json::array();
  for (const Aggregate& a : aggregates)
    aggregates_json.push_back({{"estimator", a.estimator},
                               {"runs", a.runs},
                               {"clean_test_error", {{"mean", a.test_error_mean}, {"std", a.test_error_std}}},
                               {"approximation_error",
                                {{"mean", optional_number(a.approx_error_mean)},
                                 {"std", optional_number(a.approx_error_std)}}}});
  return {{"format", "tempnoise-report"},
          {"version", 1},
          {"code_version", kVersion},
          {"units", {{"clean_test_error", "percent"}, {"approximation_error", "percent"}}},
          {"config", config},
          {"noise", noise},
          {"cells", cells_json},
          {"aggregates", aggregates_json}};
}

std::vector<Aggregate> aggregate(const std::vector<CellResult>& cells, const std::vector<std::string>& order) {
  std::vector<Aggregate> out;
  for (const std::string& name : order) {
    Aggregate a;
    a.estimator = name;
    std::vector<double> test, approx;
    for (const CellResult& c : cells) {
      if (c.estimator != name || !c.ok) continue;
      test.push_back(c.clean_test_error);
      if (c.approximation_error) approx.push_back(*c.approximation_error);
    }
    a.runs = static_cast<int>(test.size());
    auto stats = [](const std::vector<double>& v) {
      double mean = 0.0;
      for (double x : v) mean += x;
      mean /= static_cast<double>(v.size());
      double var = 0.0;
      for (double x : v) var += (x - mean) * (x - mean);
      return std::pair{mean, std::sqrt(var / static_cast<double>(v.size()))};
    };
    if (!test.empty()) std::tie(a.test_error_mean, a.test_error_std) = stats(test);
    if (!approx.empty() && approx.size() == test.size()) {
      const auto [m, s] = stats(approx);
      a.approx_error_mean = m;
      a.approx_error_std = s;
    }
    out.push_back(a);
  }
  return out;
}

double clean_test_error(const model::GruClassifier& classifier, const SequenceDataset& test) {
  if (test.size() == 0) throw ConfigError("clean_test_error: empty test set");
  std::vector<Matrix> features;
  features.reserve(test.size());
  for (const Sequence& s : test.sequences) features.push_back(s.features);
  const std::vector<Matrix> probs = classifier.forward_many(features);
  std::size_t wrong = 0, total = 0;
  for (std::size_t k = 0; k < probs.size(); ++k) {
    const std::vector<int> predicted = model::argmax_rows(probs[k]);
    const std::vector<int>& truth = test.sequences[k].clean_labels;
    for (std::size_t t = 0; t < truth.size(); ++t) {
      wrong += predicted[t] != truth[t];
      ++total;
    }
  }
  return 100.0 * static_cast<double>(wrong) / static_cast<double>(total);
}

EmpiricalNoise empirical_noise_estimate(const SequenceDataset& dataset) {
  if (dataset.size() == 0) throw ConfigError("empirical_noise_estimate: empty dataset");
  if (!dataset.has_noisy_labels())
    throw ConfigError("empirical_noise_estimate: dataset needs both clean and noisy labels");
  const int T = dataset.T, C = dataset.C;
  Matrix joint = Matrix::Zero(T, static_cast<Eigen::Index>(C) * C);
  Matrix counts = Matrix::Zero(T, C);
  for (const Sequence& s : dataset.sequences)
    for (int t = 0; t < T; ++t) {
      const int i = s.clean_labels[t];
      const int j = (*s.noisy_labels)[t];
      joint(t, i * C + j) += 1.0;
      counts(t, i) += 1.0;
    }
  EmpiricalNoise out{noise::NoiseTrajectory{C, Matrix::Zero(T, static_cast<Eigen::Index>(C) * C)}, counts, {}};
  for (int t = 0; t < T; ++t)
    for (int i = 0; i < C; ++i) {
      if (counts(t, i) == 0.0) {
        out.trajectory.flat(t, i * C + i) = 1.0;
        out.empty_rows.emplace_back(t + 1, i + 1);
        continue;
      }
      for (int j = 0; j < C; ++j) out.trajectory.flat(t, i * C + j) = joint(t, i * C + j) / counts(t, i);
    }
  return out;
}

void write_empirical_noise(const EmpiricalNoise& estimate, const fs::path& path) {
  std::ofstream os = open_out(path);
  const int C = estimate.trajectory.C;
  os << "# empirical noise, T=" << estimate.trajectory.T() << " C=" << C << "\n";
  os << "t,i,j,rate,count,empty\n";
  for (int t = 0; t < estimate.trajectory.T(); ++t)
    for (int i = 0; i < C; ++i) {
      const bool empty = estimate.counts(t, i) == 0.0;
      for (int j = 0; j < C; ++j)
        os << t + 1 << ',' << i + 1 << ',' << j + 1 << ',' << estimate.trajectory.flat(t, i * C + j) << ','
           << estimate.counts(t, i) << ',' << (empty ? 1 : 0) << '\n';
    }
}

void write_trajectory(const noise::NoiseTrajectory& trajectory, const fs::path& path) {
  std::ofstream os = open_out(path);
  const int C = trajectory.C;
  os << "# T=" << trajectory.T() << " C=" << C << "\n";
  os << "t";
  for (int i = 1; i <= C; ++i)
    for (int j = 1; j <= C; ++j) os << ",q" << i << '_' << j;
  os << '\n';
  for (int t = 0; t < trajectory.T(); ++t) {
    os << t + 1;
    for (Eigen::Index k = 0; k < trajectory.flat.cols(); ++k) os << ',' << trajectory.flat(t, k);
    os << '\n';
  }
}

noise::NoiseTrajectory read_trajectory(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open trajectory '" + path.string() + "'");
  std::string line;
  int T = 0, C = 0;
  if (!std::getline(is, line) || std::sscanf(line.c_str(), "# T=%d C=%d", &T, &C) != 2 || T <= 0 || C < 2)
    throw ConfigError(path.string() + ": line 1: expected '# T=<steps> C=<classes>'");
  std::getline(is, line);  // column names
  noise::NoiseTrajectory out{C, Matrix(T, static_cast<Eigen::Index>(C) * C)};
  for (int t = 0; t < T; ++t) {
    if (!std::getline(is, line)) throw ConfigError(path.string() + ": expected " + std::to_string(T) + " rows");
    std::stringstream row(line);
    std::string cell;
    std::getline(row, cell, ',');
    for (Eigen::Index k = 0; k < out.flat.cols(); ++k) {
      if (!std::getline(row, cell, ','))
        throw ConfigError(path.string() + ": line " + std::to_string(t + 3) + ": too few columns");
      try {
        out.flat(t, k) = std::stod(cell);
      } catch (const std::exception&) {
        throw ConfigError(path.string() + ": line " + std::to_string(t + 3) + ": bad number '" + cell + "'");
      }
    }
  }
  return out;
}

void emit_reconstruction_curves(const noise::NoiseFunctionSpec& truth,
                                const std::vector<std::pair<std::string, noise::NoiseTrajectory>>& trajectories,
                                const fs::path& path) {
  for (const auto& [name, traj] : trajectories)
    if (traj.T() != truth.T || traj.C != truth.C)
      throw ConfigError("reconstruction curves: trajectory '" + name + "' does not match the spec's T and C");
  const noise::NoiseTrajectory exact = noise::sample_trajectory(truth);
  std::ofstream os = open_out(path);
  os << "estimator,t,i,j,true,estimated\n";
  const int C = truth.C;
  for (const auto& [name, traj] : trajectories)
    for (int t = 0; t < truth.T; ++t)
      for (int i = 0; i < C; ++i)
        for (int j = 0; j < C; ++j)
          os << name << ',' << t + 1 << ',' << i + 1 << ',' << j + 1 << ',' << exact.flat(t, i * C + j) << ','
             << traj.flat(t, i * C + j) << '\n';
}

std::vector<CurveRow> read_reconstruction_curves(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open '" + path.string() + "'");
  std::string line;
  std::getline(is, line);
  std::vector<CurveRow> rows;
  int lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string f[6];
    for (auto& cell : f)
      if (!std::getline(ss, cell, ','))
        throw ConfigError(path.string() + ": line " + std::to_string(lineno) + ": expected 6 columns");
    try {
      rows.push_back({f[0], std::stoi(f[1]), std::stoi(f[2]), std::stoi(f[3]), std::stod(f[4]), std::stod(f[5])});
    } catch (const std::exception&) {
      throw ConfigError(path.string() + ": line " + std::to_string(lineno) + ": malformed row");
    }
  }
  return rows;
}

void write_training_curve(const std::vector<train::EpochRecord>& curve, const fs::path& path) {
  std::ofstream os = open_out(path);
  os << "epoch,stage,objective,fit,residual,lambda,c\n";
  for (const train::EpochRecord& r : curve) {
    os << r.epoch << ',' << r.stage << ',' << r.objective << ',' << r.fit;
    for (double v : {r.residual, r.lambda, r.c}) {
      os << ',';
      if (std::isfinite(v)) os << v;
    }
    os << '\n';
  }
}

namespace {

struct SeedData {
  SequenceDataset test;
  TrainingSet noisy;
  TrainingSet clean;
  noise::NoiseFunctionSpec spec;
  noise::NoiseTrajectory truth;
};

SeedData prepare_seed(const ExperimentConfig& config, const SequenceDataset* shared, std::uint64_t seed) {
  SequenceDataset full;
  if (shared) {
    full = *shared;
  } else {
    HmmSpec h = *config.generator;
    h.seed = seed;
    full = generate_hmm(h);
  }
  Split parts = split(full, config.test_fraction, seed);
  for (Sequence& s : parts.test.sequences) s.noisy_labels.reset();
  SeedData out;
  out.spec = config.noise.resolve(full.C, full.T);
  out.truth = noise::sample_trajectory(out.spec);
  out.noisy = noisy_view(noise::corrupt_labels(parts.train, out.spec, derive_seed(seed, kCorruptionStream)));
  out.clean = noisy_view(with_clean_as_noisy(parts.train));
  out.test = std::move(parts.test);
  return out;
}

struct CellOutput {
  CellResult result;
  std::optional<train::TrainedModel> model;
};

CellOutput run_cell(const ExperimentConfig& config, const SeedData& data, const std::string& estimator,
                    std::uint64_t seed) {
  CellOutput out;
  out.result.estimator = estimator;
  out.result.seed = seed;
  const auto start = std::chrono::steady_clock::now();
  train::TrainConfig tc = config.train;
  tc.seed = derive_seed(seed, kTrainingStream);
  if (estimator == kCleanReference) {
    out.model = train::train_ignore(data.clean, tc);
  } else {
    out.model = train::train_estimator(train::parse_estimator(estimator), data.noisy, tc, &data.spec);
  }
  out.result.clean_test_error = clean_test_error(out.model->classifier, data.test);
  if (out.model->trajectory)
    out.result.approximation_error = 100.0 * noise::approximation_error(data.truth, *out.model->trajectory);
  out.result.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  out.result.ok = true;
  return out;
}

void write_cell_artifacts(const fs::path& dir, const CellOutput& cell, const SeedData& data) {
  const std::string name = cell_name(cell.result.estimator, cell.result.seed);
  const train::TrainedModel& m = *cell.model;
  model::CheckpointHeader header;
  header.estimator = cell.result.estimator;
  header.input_dim = m.classifier.input_dim();
  header.hidden_dim = m.classifier.hidden_dim();
  header.classes = m.classifier.classes();
  header.T = data.noisy.T;
  header.seed = cell.result.seed;
  std::vector<const diff::Parameter*> params = m.classifier.parameters();
  for (const diff::Parameter& p : m.noise_parameters) params.push_back(&p);
  fs::create_directories(dir / "checkpoints");
  model::save_checkpoint(dir / "checkpoints" / (name + ".json"), header, params);
  if (m.trajectory) write_trajectory(*m.trajectory, dir / "trajectories" / (name + ".csv"));
  write_training_curve(m.curve, dir / "training_curves" / (name + ".csv"));
}

}  // namespace

ExperimentReport run_experiment(const ExperimentConfig& config) {
  config.validate();
  std::optional<SequenceDataset> shared;
  if (config.dataset_file) {
    shared = load_dataset(*config.dataset_file);
    config.noise.resolve(shared->C, shared->T).validate();
  }

  std::vector<SeedData> seeds;
  seeds.reserve(config.seeds.size());
  for (std::uint64_t s : config.seeds) seeds.push_back(prepare_seed(config, shared ? &*shared : nullptr, s));

  struct Job {
    std::size_t seed_index;
    std::string estimator;
  };
  std::vector<Job> jobs;
  for (std::size_t k = 0; k < seeds.size(); ++k)
    for (const std::string& e : config.estimators) jobs.push_back({k, e});

  std::vector<CellOutput> outputs(jobs.size());
  std::atomic<std::size_t> next{0};
  std::mutex io_mutex;
  auto worker = [&] {
    for (std::size_t j = next++; j < jobs.size(); j = next++) {
      const Job& job = jobs[j];
      const std::uint64_t seed = config.seeds[job.seed_index];
      try {
        outputs[j] = run_cell(config, seeds[job.seed_index], job.estimator, seed);
        if (config.write_artifacts && !config.output.empty())
          write_cell_artifacts(config.output, outputs[j], seeds[job.seed_index]);
      } catch (const std::exception& e) {
        outputs[j].result.estimator = job.estimator;
        outputs[j].result.seed = seed;
        outputs[j].result.ok = false;
        outputs[j].result.error = e.what();
        outputs[j].model.reset();
        std::lock_guard lock(io_mutex);
        std::cerr << "cell " << cell_name(job.estimator, seed) << " failed: " << e.what() << '\n';
      }
    }
  };
  const int threads = std::min<int>(config.parallelism, static_cast<int>(jobs.size()));
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int k = 0; k < threads; ++k) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();
  }

  ExperimentReport report;
  report.config = to_json(config);
  const SeedData& first = seeds.front();
  report.noise = {{"family", config.noise.family},
                  {"C", first.spec.C},
                  {"T", first.spec.T},
                  {"params", noise::to_param_map(first.spec)},
                  {"scale", {{"n_train", first.noisy.size()}, {"n_test", first.test.size()}, {"d", first.noisy.d}}}};
  for (const CellOutput& o : outputs) report.cells.push_back(o.result);
  report.aggregates = aggregate(report.cells, config.estimators);

  if (config.write_artifacts && !config.output.empty()) {
    const fs::path& dir = config.output;
    fs::create_directories(dir);
    {
      std::ofstream os = open_out(dir / "report.json");
      os << report.to_json().dump(2) << '\n';
    }
    {
      std::ofstream te = open_out(dir / "test_error.csv");
      std::ofstream ae = open_out(dir / "approximation_error.csv");
      std::ofstream tm = open_out(dir / "timings.csv");
      te << "estimator,seed,clean_test_error\n";
      ae << "estimator,seed,approximation_error\n";
      tm << "estimator,seed,seconds\n";
      for (const CellResult& c : report.cells) {
        if (!c.ok) continue;
        te << c.estimator << ',' << c.seed << ',' << c.clean_test_error << '\n';
        if (c.approximation_error) ae << c.estimator << ',' << c.seed << ',' << *c.approximation_error << '\n';
        tm << c.estimator << ',' << c.seed << ',' << c.runtime_seconds << '\n';
      }
    }
    for (std::size_t k = 0; k < seeds.size(); ++k) {
      std::vector<std::pair<std::string, noise::NoiseTrajectory>> trajs;
      for (std::size_t j = 0; j < jobs.size(); ++j)
        if (jobs[j].seed_index == k && outputs[j].model && outputs[j].model->trajectory)
          trajs.emplace_back(jobs[j].estimator, *outputs[j].model->trajectory);
      if (!trajs.empty())
        emit_reconstruction_curves(seeds[k].spec, trajs,
                                   dir / ("reconstruction_seed" + std::to_string(config.seeds[k]) + ".csv"));
    }
  }
  return report;
}

}  // namespace tempnoise::bench
