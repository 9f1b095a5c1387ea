#include "tempnoise/data.hpp"

#include "tempnoise/error.hpp"
#include "tempnoise/rng.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace tempnoise {

using nlohmann::json;

namespace {

constexpr const char* kFormatName = "tempnoise-sequences";
constexpr int kFormatVersion = 1;

void check_labels(const std::vector<int>& labels, int C, int T, const std::string& what, const std::string& id) {
  if (static_cast<int>(labels.size()) != T)
    throw ConfigError("sequence '" + id + "': " + what + " has " + std::to_string(labels.size()) +
                      " entries, expected " + std::to_string(T));
  for (int y : labels)
    if (y < 0 || y >= C)
      throw ConfigError("sequence '" + id + "': " + what + " contains out-of-range class " + std::to_string(y));
}

[[noreturn]] void parse_error(std::size_t line, const std::string& field, const std::string& what) {
  throw ConfigError("line " + std::to_string(line) + ": field '" + field + "': " + what);
}

int header_int(const json& j, const char* key, std::size_t line) {
  if (!j.contains(key) || !j[key].is_number_integer()) parse_error(line, key, "missing or not an integer");
  const int v = j[key].get<int>();
  if (v <= 0) parse_error(line, key, "must be positive");
  return v;
}

std::vector<int> parse_labels(const json& rec, const char* field, int C, int T, std::size_t line) {
  const json& arr = rec[field];
  if (!arr.is_array()) parse_error(line, field, "not an array");
  if (static_cast<int>(arr.size()) != T)
    parse_error(line, field, "has " + std::to_string(arr.size()) + " entries, expected " + std::to_string(T));
  std::vector<int> out;
  out.reserve(T);
  for (const auto& v : arr) {
    if (!v.is_number_integer()) parse_error(line, field, "non-integer label");
    const int y = v.get<int>();
    if (y < 1 || y > C)
      parse_error(line, field, "label " + std::to_string(y) + " outside [1, " + std::to_string(C) + "]");
    out.push_back(y - 1);
  }
  return out;
}

json labels_to_json(const std::vector<int>& labels) {
  json arr = json::array();
  for (int y : labels) arr.push_back(y + 1);
  return arr;
}

}  // namespace

bool SequenceDataset::has_noisy_labels() const {
  return !sequences.empty() &&
         std::all_of(sequences.begin(), sequences.end(), [](const Sequence& s) { return s.noisy_labels.has_value(); });
}

void SequenceDataset::validate() const {
  if (d <= 0 || T <= 0 || C < 2)
    throw ConfigError("dataset: invalid dimensions d=" + std::to_string(d) + " T=" + std::to_string(T) +
                      " C=" + std::to_string(C));
  for (const Sequence& s : sequences) {
    if (s.features.rows() != T || s.features.cols() != d) {
      std::ostringstream os;
      os << "sequence '" << s.id << "': features are " << s.features.rows() << "x" << s.features.cols()
         << ", expected " << T << "x" << d;
      throw ConfigError(os.str());
    }
    check_labels(s.clean_labels, C, T, "clean_labels", s.id);
    if (s.noisy_labels) check_labels(*s.noisy_labels, C, T, "noisy_labels", s.id);
  }
}

TrainingSet noisy_view(const SequenceDataset& dataset) {
  if (!dataset.has_noisy_labels()) throw ConfigError("training requires noisy labels on every sequence");
  TrainingSet out;
  out.d = dataset.d;
  out.T = dataset.T;
  out.C = dataset.C;
  out.features.reserve(dataset.size());
  out.noisy_labels.reserve(dataset.size());
  for (const Sequence& s : dataset.sequences) {
    out.features.push_back(s.features);
    out.noisy_labels.push_back(*s.noisy_labels);
  }
  return out;
}

SequenceDataset with_clean_as_noisy(SequenceDataset dataset) {
  for (Sequence& s : dataset.sequences) s.noisy_labels = s.clean_labels;
  return dataset;
}

Matrix HmmSpec::transition_matrix() const {
  if (transition.size() == 0) return Matrix::Constant(C, C, 1.0 / C);
  return transition;
}

void HmmSpec::validate() const {
  if (n <= 0 || d <= 0 || T <= 0 || C < 2)
    throw ConfigError("hmm spec: n, d, T must be positive and C >= 2");
  if (!(variance > 0.0)) throw ConfigError("hmm spec: variance must be positive");
  const Matrix a = transition_matrix();
  if (a.rows() != C || a.cols() != C) throw ConfigError("hmm spec: transition matrix must be C x C");
  for (Eigen::Index i = 0; i < C; ++i)
    if (std::abs(a.row(i).sum() - 1.0) > 1e-9 || (a.row(i).array() < 0.0).any())
      throw ConfigError("hmm spec: transition row " + std::to_string(i) + " is not a distribution");
}

SequenceDataset generate_hmm(const HmmSpec& spec) {
  spec.validate();
  const Matrix a = spec.transition_matrix();
  const double sd = std::sqrt(spec.variance);
  SequenceDataset out;
  out.d = spec.d;
  out.T = spec.T;
  out.C = spec.C;
  out.provenance = {"hmm", spec.seed, "variance=" + std::to_string(spec.variance)};
  out.sequences.reserve(spec.n);

  auto draw = [](Rng& rng, auto probs) {
    const double u = uniform01(rng);
    double acc = 0.0;
    for (Eigen::Index j = 0; j < probs.size(); ++j) {
      acc += probs(j);
      if (u < acc) return static_cast<int>(j);
    }
    return static_cast<int>(probs.size() - 1);
  };

  for (int i = 0; i < spec.n; ++i) {
    Rng rng = make_rng(spec.seed, static_cast<std::uint64_t>(i));
    std::normal_distribution<double> noise(0.0, sd);
    Sequence s;
    s.id = "seq-" + std::to_string(i);
    s.features.resize(spec.T, spec.d);
    s.clean_labels.resize(spec.T);
    int state = std::min(spec.C - 1, static_cast<int>(uniform01(rng) * spec.C));
    for (int t = 0; t < spec.T; ++t) {
      if (t > 0) state = draw(rng, a.row(state));
      s.clean_labels[t] = state;
      for (int k = 0; k < spec.d; ++k) s.features(t, k) = (state + 1) + noise(rng);
    }
    out.sequences.push_back(std::move(s));
  }
  return out;
}

Split split(const SequenceDataset& dataset, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0))
    throw ConfigError("split: test fraction must lie in (0, 1)");
  const std::size_t n = dataset.size();
  if (n < 2) throw ConfigError("split: need at least 2 sequences, got " + std::to_string(n));
  auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(n)));
  n_test = std::clamp<std::size_t>(n_test, 1, n - 1);

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng = make_rng(seed, 0x5e11);
  shuffle_in_place(std::span(order), rng);
  Split out;
  for (SequenceDataset* part : {&out.train, &out.test}) {
    part->d = dataset.d;
    part->T = dataset.T;
    part->C = dataset.C;
    part->provenance = dataset.provenance;
  }
  out.test.provenance.detail += (out.test.provenance.detail.empty() ? "" : ";") + std::string("split=test");
  out.train.provenance.detail += (out.train.provenance.detail.empty() ? "" : ";") + std::string("split=train");
  // Keep original order inside each part.
  std::vector<bool> is_test(n, false);
  for (std::size_t k = 0; k < n_test; ++k) is_test[order[k]] = true;
  for (std::size_t i = 0; i < n; ++i) (is_test[i] ? out.test : out.train).sequences.push_back(dataset.sequences[i]);
  return out;
}

void save_dataset(const SequenceDataset& dataset, const std::filesystem::path& path) {
  dataset.validate();
  std::ofstream os(path);
  if (!os) throw RuntimeFailure("cannot open '" + path.string() + "' for writing");
  json header = {{"format", kFormatName},
                 {"version", kFormatVersion},
                 {"n", dataset.size()},
                 {"d", dataset.d},
                 {"T", dataset.T},
                 {"C", dataset.C},
                 {"provenance",
                  {{"source", dataset.provenance.source},
                   {"seed", dataset.provenance.seed},
                   {"detail", dataset.provenance.detail}}}};
  os << header.dump() << '\n';
  for (const Sequence& s : dataset.sequences) {
    json features = json::array();
    for (Eigen::Index t = 0; t < s.features.rows(); ++t) {
      json row = json::array();
      for (Eigen::Index k = 0; k < s.features.cols(); ++k) row.push_back(s.features(t, k));
      features.push_back(std::move(row));
    }
    json rec = {{"id", s.id}, {"features", std::move(features)}, {"clean_labels", labels_to_json(s.clean_labels)}};
    if (s.noisy_labels) rec["noisy_labels"] = labels_to_json(*s.noisy_labels);
    os << rec.dump() << '\n';
  }
  if (!os) throw RuntimeFailure("write to '" + path.string() + "' failed");
}

SequenceDataset load_dataset(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open dataset '" + path.string() + "'");
  SequenceDataset out;
  std::string text;
  std::size_t line = 0;
  bool have_header = false;
  std::size_t declared_n = 0;
  while (std::getline(is, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    json rec;
    try {
      rec = json::parse(text);
    } catch (const json::parse_error& e) {
      throw ConfigError("line " + std::to_string(line) + ": invalid JSON: " + e.what());
    }
    if (!rec.is_object()) throw ConfigError("line " + std::to_string(line) + ": record is not an object");
    if (!have_header) {
      if (!rec.contains("format") || rec["format"] != kFormatName)
        parse_error(line, "format", std::string("expected \"") + kFormatName + "\"");
      out.d = header_int(rec, "d", line);
      out.T = header_int(rec, "T", line);
      out.C = header_int(rec, "C", line);
      if (out.C < 2) parse_error(line, "C", "must be >= 2");
      if (rec.contains("n") && rec["n"].is_number_unsigned()) declared_n = rec["n"].get<std::size_t>();
      if (rec.contains("provenance") && rec["provenance"].is_object()) {
        const json& p = rec["provenance"];
        out.provenance.source = p.value("source", std::string{});
        out.provenance.seed = p.value("seed", std::uint64_t{0});
        out.provenance.detail = p.value("detail", std::string{});
      } else {
        out.provenance.source = path.string();
      }
      have_header = true;
      continue;
    }
    Sequence s;
    if (!rec.contains("id") || !rec["id"].is_string()) parse_error(line, "id", "missing or not a string");
    s.id = rec["id"].get<std::string>();
    if (!rec.contains("features")) parse_error(line, "features", "missing");
    const json& feats = rec["features"];
    if (!feats.is_array() || static_cast<int>(feats.size()) != out.T)
      parse_error(line, "features", "expected " + std::to_string(out.T) + " rows");
    s.features.resize(out.T, out.d);
    for (int t = 0; t < out.T; ++t) {
      const json& row = feats[t];
      if (!row.is_array() || static_cast<int>(row.size()) != out.d)
        parse_error(line, "features", "row " + std::to_string(t) + " must have " + std::to_string(out.d) + " values");
      for (int k = 0; k < out.d; ++k) {
        if (!row[k].is_number()) parse_error(line, "features", "non-numeric value in row " + std::to_string(t));
        s.features(t, k) = row[k].get<double>();
      }
    }
    if (!rec.contains("clean_labels")) parse_error(line, "clean_labels", "missing");
    s.clean_labels = parse_labels(rec, "clean_labels", out.C, out.T, line);
    if (rec.contains("noisy_labels") && !rec["noisy_labels"].is_null())
      s.noisy_labels = parse_labels(rec, "noisy_labels", out.C, out.T, line);
    out.sequences.push_back(std::move(s));
  }
  if (!have_header) throw ConfigError("dataset '" + path.string() + "' has no header record");
  if (declared_n != 0 && declared_n != out.size())
    throw ConfigError("dataset '" + path.string() + "': header declares n = " + std::to_string(declared_n) +
                      " but " + std::to_string(out.size()) + " records were read");
  return out;
}

}  // namespace tempnoise
