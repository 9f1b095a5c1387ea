#pragma once

#include "tempnoise/data.hpp"
#include "tempnoise/diffcore.hpp"
#include "tempnoise/rng.hpp"

#include <filesystem>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace tempnoise::model {

/// Sequences stacked time-major: row t * size + b holds x_t of sequence b.
struct Batch {
  int T = 0;
  int size = 0;
  Matrix inputs;                                  // T*size x d
  std::shared_ptr<const std::vector<int>> labels;  // T*size, may be null
};

Batch make_batch(std::span<const Matrix> features, std::span<const std::vector<int>> labels,
                 std::span<const std::size_t> indices);
Batch make_batch(std::span<const Matrix> features, std::span<const std::size_t> indices);

/// Single-layer GRU followed by a linear map to C logits and a row softmax.
/// Gate columns are ordered [reset | update | candidate].
class GruClassifier {
 public:
  GruClassifier(int input_dim, int hidden_dim, int classes, Rng& rng);

  int input_dim() const { return input_dim_; }
  int hidden_dim() const { return hidden_dim_; }
  int classes() const { return classes_; }

  /// Class probabilities for every (t, b), time-major, shape T*size x C.
  diff::Var forward(diff::Tape& tape, const Batch& batch);
  /// Same computation with the parameters held constant.
  diff::Var forward_constant(diff::Tape& tape, const Batch& batch) const;

  /// T x C probabilities for one T x d sequence.
  Matrix forward_sequence(const Matrix& x) const;
  /// Probabilities for many sequences, one T x C matrix each.
  std::vector<Matrix> forward_many(std::span<const Matrix> features, int chunk = 256) const;
  /// Per-step argmax, ties toward the lowest class index (0-based).
  std::vector<int> predict_labels(const Matrix& x) const;

  void zero_output_projection();
  /// Overwrites parameters by name; throws ConfigError on unknown names or shapes.
  void load_parameters(const std::map<std::string, Matrix>& values);
  diff::ParameterList parameters();
  std::vector<const diff::Parameter*> parameters() const;

 private:
  template <class Self, class Bind>
  static diff::Var forward_impl(Self& self, diff::Tape& tape, const Batch& batch, Bind bind);

  int input_dim_;
  int hidden_dim_;
  int classes_;
  diff::Parameter w_input_, b_input_, w_hidden_, b_hidden_, w_out_, b_out_;
};

/// Row-wise argmax with ties broken toward the lowest index.
std::vector<int> argmax_rows(const Matrix& probs);

/// Raw scores (T x C*C) -> flat noise matrices: each C x C block goes through
/// a row softmax, gains the identity and is divided by its row sums.
diff::Var build_noise_matrices(diff::Var raw, int classes);
Matrix build_noise_matrices(const Matrix& raw, int classes);

/// Fully connected tanh network from normalized time t/T to C*C raw scores.
class ContinuousNoiseNet {
 public:
  ContinuousNoiseNet(int classes, int hidden_layers, int width, Rng& rng);

  int classes() const { return classes_; }
  int hidden_layers() const { return static_cast<int>(weights_.size()) - 1; }
  int width() const { return width_; }

  /// Flat trajectory T x C*C for t = 1..T.
  diff::Var forward(diff::Tape& tape, int T);
  Matrix trajectory(int T) const;
  diff::ParameterList parameters();
  std::vector<const diff::Parameter*> parameters() const;

 private:
  template <class Self, class Bind>
  static diff::Var forward_impl(Self& self, diff::Tape& tape, int T, Bind bind);

  int classes_;
  int width_;
  std::vector<diff::Parameter> weights_;
  std::vector<diff::Parameter> biases_;
};

Matrix noise_net_eval(const ContinuousNoiseNet& net, int t, int T);

/// Independent raw C x C blocks, one per time step (or a single shared
/// block when `steps` is 1). Zero-initialized.
struct NoiseBlocks {
  int classes = 0;
  diff::Parameter raw;  // steps x C*C

  NoiseBlocks(int classes, int steps, std::string name = "noise_blocks");
  int steps() const { return static_cast<int>(raw.value.rows()); }
  /// Flat trajectory with T rows; a single block is repeated.
  diff::Var forward(diff::Tape& tape, int T);
  Matrix trajectory(int T) const;
};

/// Q for 1 <= t <= T from block t.
Matrix discontinuous_eval(const NoiseBlocks& blocks, int t);

struct CheckpointHeader {
  std::string estimator;
  int input_dim = 0;
  int hidden_dim = 0;
  int classes = 0;
  int T = 0;
  std::uint64_t seed = 0;
  std::map<std::string, double> extra;
};

/// Single self-describing JSON document: header plus named flat arrays.
void save_checkpoint(const std::filesystem::path& path, const CheckpointHeader& header,
                     const std::vector<const diff::Parameter*>& params);
struct LoadedCheckpoint {
  CheckpointHeader header;
  std::map<std::string, Matrix> params;
};
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace tempnoise::model
