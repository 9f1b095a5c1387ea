#pragma once

// Dense reverse-mode differentiation on Eigen matrices.
//
// Every value on a Tape is a 2-D row-major double matrix; scalars are 1x1.
// Operations append a node that remembers its inputs, and Tape::backward
// walks the nodes in reverse creation order, which is a topological order
// by construction.

#include <Eigen/Dense>

#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace tempnoise {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

namespace diff {

/// Lower bound applied to log and division inputs.
inline constexpr double kProbFloor = 1e-12;

/// A trainable tensor with its gradient buffer.
struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;

  Parameter() = default;
  Parameter(std::string n, Matrix v)
      : name(std::move(n)), value(std::move(v)), grad(Matrix::Zero(value.rows(), value.cols())) {}

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

using ParameterList = std::vector<Parameter*>;

enum class OpKind {
  Leaf,
  MatMul,
  Add,
  AddRow,  // matrix + broadcast row vector
  Sub,
  Mul,     // elementwise
  Scale,   // by a constant
  AddConstant,
  Sigmoid,
  Tanh,
  Exp,
  Log,     // clamped at kProbFloor
  RowSoftmax,
  NormalizeRows,
  Sum,
  Mean,
  RowSum,
  RowMean,
  RowNorm,
  FrobeniusNorm,
  Slice,
  ConcatRows,
  ConcatCols,
  Reshape,
  Clamp,
  Pick,      // out[r] = x[r, labels[r]]
  TileRows,  // vertical repetition
  TimeMix,   // out[r,:] = p[r,:] * Q_{r / block}
  GruSequence,
};

const char* op_name(OpKind kind);

class Tape;

/// Extra per-node data for ops that need it (offsets, bounds, labels).
struct OpAttr {
  Eigen::Index i0 = 0, i1 = 0, i2 = 0, i3 = 0;
  double d0 = 0.0, d1 = 0.0;
  std::shared_ptr<const std::vector<int>> labels;
  std::shared_ptr<const Matrix> saved;
};

/// Handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  /// Value of a 1x1 node.
  double scalar() const;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  Var constant_scalar(double value);
  /// Leaf node whose gradient is accumulated into `p.grad` by backward().
  Var parameter(Parameter& p);

  const Matrix& value(Var v) const { return nodes_[v.id].value; }
  /// Gradient buffer of a node after backward(); empty if the node was not reached.
  const Matrix& grad(Var v) const { return nodes_[v.id].grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Seeds d(root)/d(root) = 1 and accumulates gradients into every
  /// reachable parameter. Throws if root is not 1x1.
  void backward(Var root);

  // Used by the free-function operations below.
  Var record(OpKind kind, std::vector<int> inputs, Matrix value, OpAttr attr = OpAttr());

 private:
  struct Node {
    OpKind kind = OpKind::Leaf;
    std::vector<int> inputs;
    Matrix value;
    Matrix grad;
    OpAttr attr;
    Parameter* param = nullptr;
    bool needs_grad = false;
  };

  void backward_node(Node& node);
  Matrix& grad_buffer(int id);

  std::deque<Node> nodes_;
};

// Shape mismatches throw ConfigError naming the offending shapes.
Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var add_row(Var a, Var row);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_constant(Var a, double c);
Var sigmoid(Var a);
Var tanh(Var a);
Var exp(Var a);
Var log(Var a);
Var row_softmax(Var a);
Var normalize_rows(Var a);
Var sum(Var a);
Var mean(Var a);
Var row_sum(Var a);
Var row_mean(Var a);
Var row_norm(Var a);
Var frobenius_norm(Var a);
Var slice(Var a, Eigen::Index row, Eigen::Index rows, Eigen::Index col, Eigen::Index cols);
Var slice_rows(Var a, Eigen::Index row, Eigen::Index rows);
Var slice_cols(Var a, Eigen::Index col, Eigen::Index cols);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
Var reshape(Var a, Eigen::Index rows, Eigen::Index cols);
Var clamp(Var a, double lo, double hi);
Var pick(Var a, std::shared_ptr<const std::vector<int>> labels);
Var tile_rows(Var a, Eigen::Index times);
/// Row r of `probs` (block*T x C) multiplied by the C x C matrix stored
/// flat in row r / block of `flat_mats` (T x C*C).
Var time_mix(Var probs, Var flat_mats, Eigen::Index block);

/// Whole-sequence GRU recurrence from a zero initial state. `gates_x` holds
/// the input projections x_t W_x + b_x for all steps, time-major with `batch`
/// rows per step, columns [reset | update | candidate]. Returns the hidden
/// states, T*batch x H:
///   r = sigmoid(gx_r + gh_r), z = sigmoid(gx_z + gh_z)
///   n = tanh(gx_n + r * gh_n), h = n + z * (h_prev - n)
/// with gh = h_prev W_h + b_h.
Var gru_sequence(Var gates_x, Var w_hidden, Var b_hidden, Eigen::Index batch);

/// Numerically stable row-wise softmax on plain matrices.
Matrix row_softmax(const Matrix& logits);

struct AdamState {
  double learning_rate = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::int64_t step = 0;
  std::vector<Matrix> first_moment;
  std::vector<Matrix> second_moment;

  explicit AdamState(const ParameterList& params, double lr = 0.01);
  void reset();
};

/// One bias-corrected Adam update of every parameter from its `grad`.
/// Throws RuntimeFailure naming the parameter if a gradient is not finite;
/// no parameter is modified in that case.
void adam_step(AdamState& state, const ParameterList& params);

void zero_grads(const ParameterList& params);

/// Builds a scalar objective on a fresh tape from the current parameter values.
using Objective = std::function<Var(Tape&)>;

/// Evaluates the objective without touching gradients.
double evaluate(const Objective& objective);

/// Runs forward + backward and leaves gradients in each parameter's `grad`
/// (previous contents are overwritten). Returns the objective value.
double value_and_grad(const Objective& objective, const ParameterList& params);

/// Max over all coordinates of |analytic - central difference| /
/// max(1e-12, |analytic| + |numeric|).
double finite_difference_check(const Objective& objective, const ParameterList& params,
                               double step = 1e-5);

}  // namespace diff
}  // namespace tempnoise
