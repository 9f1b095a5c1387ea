#include "tempnoise/model.hpp"

#include "tempnoise/error.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>

namespace tempnoise::model {

using diff::Parameter;
using diff::Tape;
using diff::Var;
using nlohmann::json;

namespace {

Matrix uniform_init(Eigen::Index rows, Eigen::Index cols, double fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(fan_in);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = (2.0 * uniform01(rng) - 1.0) * bound;
  return m;
}

// A saturated softmax row can round the diagonal down to exactly 1/2; the
// extra diagonal mass keeps dominance strict in floating point.
constexpr double kDiagonalMargin = 1e-12;

Matrix stacked_identity(int blocks, int C) {
  return ((1.0 + kDiagonalMargin) * Matrix::Identity(C, C)).replicate(blocks, 1);
}

}  // namespace

Batch make_batch(std::span<const Matrix> features, std::span<const std::vector<int>> labels,
                 std::span<const std::size_t> indices) {
  Batch batch = make_batch(features, indices);
  auto flat = std::make_shared<std::vector<int>>(static_cast<std::size_t>(batch.T) * batch.size);
  for (int t = 0; t < batch.T; ++t)
    for (int b = 0; b < batch.size; ++b) (*flat)[t * batch.size + b] = labels[indices[b]][t];
  batch.labels = std::move(flat);
  return batch;
}

Batch make_batch(std::span<const Matrix> features, std::span<const std::size_t> indices) {
  if (indices.empty()) throw ConfigError("make_batch: empty batch");
  Batch batch;
  batch.size = static_cast<int>(indices.size());
  batch.T = static_cast<int>(features[indices[0]].rows());
  const Eigen::Index d = features[indices[0]].cols();
  batch.inputs.resize(static_cast<Eigen::Index>(batch.T) * batch.size, d);
  for (int b = 0; b < batch.size; ++b) {
    const Matrix& x = features[indices[b]];
    if (x.rows() != batch.T || x.cols() != d) throw ConfigError("make_batch: sequences differ in shape");
    for (int t = 0; t < batch.T; ++t) batch.inputs.row(t * batch.size + b) = x.row(t);
  }
  return batch;
}

GruClassifier::GruClassifier(int input_dim, int hidden_dim, int classes, Rng& rng)
    : input_dim_(input_dim), hidden_dim_(hidden_dim), classes_(classes) {
  if (input_dim <= 0 || hidden_dim <= 0 || classes < 2) throw ConfigError("GruClassifier: invalid dimensions");
  const int g = 3 * hidden_dim;
  w_input_ = Parameter("gru.w_input", uniform_init(input_dim, g, input_dim, rng));
  b_input_ = Parameter("gru.b_input", uniform_init(1, g, hidden_dim, rng));
  w_hidden_ = Parameter("gru.w_hidden", uniform_init(hidden_dim, g, hidden_dim, rng));
  b_hidden_ = Parameter("gru.b_hidden", uniform_init(1, g, hidden_dim, rng));
  w_out_ = Parameter("gru.w_out", uniform_init(hidden_dim, classes, hidden_dim, rng));
  b_out_ = Parameter("gru.b_out", uniform_init(1, classes, hidden_dim, rng));
}

template <class Self, class Bind>
Var GruClassifier::forward_impl(Self& self, Tape& tape, const Batch& batch, Bind bind) {
  if (batch.inputs.cols() != self.input_dim_)
    throw ConfigError("GruClassifier: input has " + std::to_string(batch.inputs.cols()) + " features, expected " +
                      std::to_string(self.input_dim_));
  Var w_in = bind(self.w_input_), b_in = bind(self.b_input_);
  Var w_h = bind(self.w_hidden_), b_h = bind(self.b_hidden_);
  Var w_o = bind(self.w_out_), b_o = bind(self.b_out_);

  Var gx_all = add_row(matmul(tape.constant(batch.inputs), w_in), b_in);
  Var states = diff::gru_sequence(gx_all, w_h, b_h, batch.size);
  Var logits = add_row(matmul(states, w_o), b_o);
  return diff::row_softmax(logits);
}

Var GruClassifier::forward(Tape& tape, const Batch& batch) {
  return forward_impl(*this, tape, batch, [&](Parameter& p) { return tape.parameter(p); });
}

Var GruClassifier::forward_constant(Tape& tape, const Batch& batch) const {
  return forward_impl(*this, tape, batch, [&](const Parameter& p) { return tape.constant(p.value); });
}

Matrix GruClassifier::forward_sequence(const Matrix& x) const {
  const std::vector<Matrix> one{x};
  return forward_many(one).front();
}

std::vector<Matrix> GruClassifier::forward_many(std::span<const Matrix> features, int chunk) const {
  std::vector<Matrix> out;
  out.reserve(features.size());
  for (std::size_t start = 0; start < features.size(); start += chunk) {
    const std::size_t end = std::min(features.size(), start + static_cast<std::size_t>(chunk));
    std::vector<std::size_t> idx(end - start);
    for (std::size_t k = 0; k < idx.size(); ++k) idx[k] = start + k;
    Batch batch = make_batch(features, idx);
    Tape tape;
    const Matrix& probs = forward_constant(tape, batch).value();
    const int B = batch.size;
    for (int b = 0; b < B; ++b) {
      Matrix p(batch.T, classes_);
      for (int t = 0; t < batch.T; ++t) p.row(t) = probs.row(t * B + b);
      out.push_back(std::move(p));
    }
  }
  return out;
}

std::vector<int> argmax_rows(const Matrix& probs) {
  std::vector<int> out(probs.rows());
  for (Eigen::Index t = 0; t < probs.rows(); ++t) {
    int best = 0;
    for (Eigen::Index c = 1; c < probs.cols(); ++c)
      if (probs(t, c) > probs(t, best)) best = static_cast<int>(c);
    out[t] = best;
  }
  return out;
}

std::vector<int> GruClassifier::predict_labels(const Matrix& x) const { return argmax_rows(forward_sequence(x)); }

void GruClassifier::zero_output_projection() {
  w_out_.value.setZero();
  b_out_.value.setZero();
}

void GruClassifier::load_parameters(const std::map<std::string, Matrix>& values) {
  for (const auto& [name, value] : values) {
    Parameter* target = nullptr;
    for (Parameter* p : parameters())
      if (p->name == name) target = p;
    if (!target) throw ConfigError("GruClassifier: unknown parameter '" + name + "'");
    if (target->value.rows() != value.rows() || target->value.cols() != value.cols())
      throw ConfigError("GruClassifier: shape mismatch for '" + name + "'");
    target->value = value;
  }
}

diff::ParameterList GruClassifier::parameters() {
  return {&w_input_, &b_input_, &w_hidden_, &b_hidden_, &w_out_, &b_out_};
}

std::vector<const Parameter*> GruClassifier::parameters() const {
  return {&w_input_, &b_input_, &w_hidden_, &b_hidden_, &w_out_, &b_out_};
}

Var build_noise_matrices(Var raw, int classes) {
  const Eigen::Index T = raw.rows();
  Tape& tape = *raw.tape;
  Var blocks = diff::row_softmax(diff::reshape(raw, T * classes, classes));
  Var shifted = diff::add(blocks, tape.constant(stacked_identity(static_cast<int>(T), classes)));
  return diff::reshape(diff::normalize_rows(shifted), T, static_cast<Eigen::Index>(classes) * classes);
}

Matrix build_noise_matrices(const Matrix& raw, int classes) {
  Tape tape;
  return build_noise_matrices(tape.constant(raw), classes).value();
}

ContinuousNoiseNet::ContinuousNoiseNet(int classes, int hidden_layers, int width, Rng& rng)
    : classes_(classes), width_(width) {
  if (classes < 2 || hidden_layers < 1 || width < 1) throw ConfigError("ContinuousNoiseNet: invalid dimensions");
  int fan_in = 1;
  for (int l = 0; l <= hidden_layers; ++l) {
    const int fan_out = l == hidden_layers ? classes * classes : width;
    weights_.emplace_back("noise_net.w" + std::to_string(l), uniform_init(fan_in, fan_out, fan_in, rng));
    biases_.emplace_back("noise_net.b" + std::to_string(l), uniform_init(1, fan_out, fan_in, rng));
    fan_in = fan_out;
  }
}

template <class Self, class Bind>
Var ContinuousNoiseNet::forward_impl(Self& self, Tape& tape, int T, Bind bind) {
  Matrix times(T, 1);
  for (int t = 1; t <= T; ++t) times(t - 1, 0) = static_cast<double>(t) / T;
  Var x = tape.constant(std::move(times));
  const std::size_t layers = self.weights_.size();
  for (std::size_t l = 0; l < layers; ++l) {
    x = add_row(matmul(x, bind(self.weights_[l])), bind(self.biases_[l]));
    if (l + 1 < layers) x = diff::tanh(x);
  }
  return build_noise_matrices(x, self.classes_);
}

Var ContinuousNoiseNet::forward(Tape& tape, int T) {
  return forward_impl(*this, tape, T, [&](Parameter& p) { return tape.parameter(p); });
}

Matrix ContinuousNoiseNet::trajectory(int T) const {
  Tape tape;
  return forward_impl(*this, tape, T, [&](const Parameter& p) { return tape.constant(p.value); }).value();
}

diff::ParameterList ContinuousNoiseNet::parameters() {
  diff::ParameterList out;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    out.push_back(&weights_[l]);
    out.push_back(&biases_[l]);
  }
  return out;
}

std::vector<const Parameter*> ContinuousNoiseNet::parameters() const {
  std::vector<const Parameter*> out;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    out.push_back(&weights_[l]);
    out.push_back(&biases_[l]);
  }
  return out;
}

Matrix noise_net_eval(const ContinuousNoiseNet& net, int t, int T) {
  if (t < 1 || t > T) throw ConfigError("noise_net_eval: t outside [1, T]");
  const Matrix traj = net.trajectory(T);
  return Eigen::Map<const Matrix>(traj.row(t - 1).data(), net.classes(), net.classes());
}

NoiseBlocks::NoiseBlocks(int c, int steps, std::string name)
    : classes(c), raw(std::move(name), Matrix::Zero(steps, static_cast<Eigen::Index>(c) * c)) {
  if (c < 2 || steps < 1) throw ConfigError("NoiseBlocks: invalid dimensions");
}

Var NoiseBlocks::forward(Tape& tape, int T) {
  Var q = build_noise_matrices(tape.parameter(raw), classes);
  if (steps() == T) return q;
  if (steps() == 1) return diff::tile_rows(q, T);
  throw ConfigError("NoiseBlocks: have " + std::to_string(steps()) + " blocks, asked for T = " + std::to_string(T));
}

Matrix NoiseBlocks::trajectory(int T) const {
  Matrix q = build_noise_matrices(raw.value, classes);
  if (steps() == T) return q;
  if (steps() == 1) return q.replicate(T, 1);
  throw ConfigError("NoiseBlocks: block count does not match T");
}

Matrix discontinuous_eval(const NoiseBlocks& blocks, int t) {
  if (t < 1 || t > blocks.steps()) throw ConfigError("discontinuous_eval: t outside [1, T]");
  Matrix q = build_noise_matrices(Matrix(blocks.raw.value.row(t - 1)), blocks.classes);
  return Eigen::Map<const Matrix>(q.data(), blocks.classes, blocks.classes);
}

void save_checkpoint(const std::filesystem::path& path, const CheckpointHeader& header,
                     const std::vector<const Parameter*>& params) {
  json doc = {{"format", "tempnoise-checkpoint"},
              {"version", 1},
              {"estimator", header.estimator},
              {"architecture",
               {{"input_dim", header.input_dim},
                {"hidden_dim", header.hidden_dim},
                {"classes", header.classes},
                {"T", header.T}}},
              {"seed", header.seed},
              {"extra", header.extra}};
  json arr = json::array();
  for (const Parameter* p : params) {
    std::vector<double> flat(p->value.data(), p->value.data() + p->value.size());
    arr.push_back({{"name", p->name}, {"rows", p->value.rows()}, {"cols", p->value.cols()}, {"values", flat}});
  }
  doc["parameters"] = std::move(arr);
  std::ofstream os(path);
  if (!os) throw RuntimeFailure("cannot open '" + path.string() + "' for writing");
  os << doc.dump() << '\n';
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open checkpoint '" + path.string() + "'");
  json doc;
  try {
    doc = json::parse(is);
  } catch (const json::parse_error& e) {
    throw ConfigError("checkpoint '" + path.string() + "': " + e.what());
  }
  if (doc.value("format", std::string{}) != "tempnoise-checkpoint")
    throw ConfigError("checkpoint '" + path.string() + "': unexpected format");
  LoadedCheckpoint out;
  try {
    out.header.estimator = doc.at("estimator").get<std::string>();
    const json& arch = doc.at("architecture");
    out.header.input_dim = arch.at("input_dim").get<int>();
    out.header.hidden_dim = arch.at("hidden_dim").get<int>();
    out.header.classes = arch.at("classes").get<int>();
    out.header.T = arch.at("T").get<int>();
    out.header.seed = doc.at("seed").get<std::uint64_t>();
    out.header.extra = doc.value("extra", std::map<std::string, double>{});
    for (const json& p : doc.at("parameters")) {
      const auto rows = p.at("rows").get<Eigen::Index>();
      const auto cols = p.at("cols").get<Eigen::Index>();
      const auto values = p.at("values").get<std::vector<double>>();
      if (static_cast<Eigen::Index>(values.size()) != rows * cols)
        throw ConfigError("checkpoint parameter '" + p.at("name").get<std::string>() + "' has wrong length");
      out.params[p.at("name").get<std::string>()] = Eigen::Map<const Matrix>(values.data(), rows, cols);
    }
  } catch (const json::exception& e) {
    throw ConfigError("checkpoint '" + path.string() + "': " + e.what());
  }
  return out;
}

}  // namespace tempnoise::model
