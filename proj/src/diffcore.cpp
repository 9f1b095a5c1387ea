#include "tempnoise/diffcore.hpp"

#include "tempnoise/error.hpp"

#include <cmath>
#include <sstream>

#ifdef __GLIBC__
#include <malloc.h>
#endif

namespace tempnoise::diff {

namespace {

#ifdef __GLIBC__
// Tapes allocate and free many multi-megabyte buffers per batch; by default
// glibc maps and unmaps them each time and the page faults dominate.
const bool kAllocatorTuned = [] {
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
  return true;
}();
#endif

std::string shape_of(const Matrix& m) {
  std::ostringstream os;
  os << m.rows() << "x" << m.cols();
  return os.str();
}

[[noreturn]] void shape_error(OpKind kind, const Matrix& a, const Matrix* b = nullptr,
                              const std::string& detail = {}) {
  std::ostringstream os;
  os << "shape mismatch in " << op_name(kind) << ": " << shape_of(a);
  if (b) os << " vs " << shape_of(*b);
  if (!detail.empty()) os << " (" << detail << ")";
  throw ConfigError(os.str());
}

Tape& same_tape(Var a, Var b) {
  if (a.tape != b.tape || a.tape == nullptr) throw ConfigError("operands live on different tapes");
  return *a.tape;
}

template <class Derived>
Matrix sigmoid_of(const Eigen::ArrayBase<Derived>& x) {
  return (1.0 + (-x).exp()).inverse().matrix();
}

// tanh through the vectorized exponential.
template <class Derived>
Matrix tanh_of(const Eigen::ArrayBase<Derived>& x) {
  return (1.0 - 2.0 / (1.0 + (2.0 * x).exp())).matrix();
}

// Saved per-step activations of gru_sequence, T*B x 4H: [r | z | n | gh_n].
void gru_backward(const Matrix& g, const Matrix& states, const Matrix& saved, const Matrix& w_h, Eigen::Index B,
                  Matrix* d_gates, Matrix* d_wh, Matrix* d_bh) {
  const Eigen::Index H = w_h.rows();
  const Eigen::Index T = states.rows() / B;
  Matrix carry = Matrix::Zero(B, H);
  Matrix d_gh(B, 3 * H);
  Matrix zeros = Matrix::Zero(B, H);
  for (Eigen::Index t = T - 1; t >= 0; --t) {
    const auto r = saved.block(t * B, 0, B, H).array();
    const auto z = saved.block(t * B, H, B, H).array();
    const auto n = saved.block(t * B, 2 * H, B, H).array();
    const auto ghn = saved.block(t * B, 3 * H, B, H).array();
    const Eigen::Ref<const Matrix> h_prev_m =
        t > 0 ? Eigen::Ref<const Matrix>(states.middleRows((t - 1) * B, B)) : Eigen::Ref<const Matrix>(zeros);
    const auto h_prev = h_prev_m.array();
    const Eigen::ArrayXXd dh = g.middleRows(t * B, B).array() + carry.array();
    const Eigen::ArrayXXd da_n = dh * (1.0 - z) * (1.0 - n.square());
    d_gh.middleCols(0, H) = (da_n * ghn * r * (1.0 - r)).matrix();
    d_gh.middleCols(H, H) = (dh * (h_prev - n) * z * (1.0 - z)).matrix();
    d_gh.middleCols(2 * H, H) = (da_n * r).matrix();
    if (d_gates) {
      d_gates->block(t * B, 0, B, 2 * H) += d_gh.leftCols(2 * H);
      d_gates->block(t * B, 2 * H, B, H) += da_n.matrix();
    }
    if (d_wh && t > 0) d_wh->noalias() += states.middleRows((t - 1) * B, B).transpose() * d_gh;
    if (d_bh) *d_bh += d_gh.colwise().sum();
    carry = (dh * z).matrix();
    carry.noalias() += d_gh * w_h.transpose();
  }
}

}  // namespace

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Leaf: return "leaf";
    case OpKind::MatMul: return "matmul";
    case OpKind::Add: return "add";
    case OpKind::AddRow: return "add_row";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Scale: return "scale";
    case OpKind::AddConstant: return "add_constant";
    case OpKind::Sigmoid: return "sigmoid";
    case OpKind::Tanh: return "tanh";
    case OpKind::Exp: return "exp";
    case OpKind::Log: return "log";
    case OpKind::RowSoftmax: return "row_softmax";
    case OpKind::NormalizeRows: return "normalize_rows";
    case OpKind::Sum: return "sum";
    case OpKind::Mean: return "mean";
    case OpKind::RowSum: return "row_sum";
    case OpKind::RowMean: return "row_mean";
    case OpKind::RowNorm: return "row_norm";
    case OpKind::FrobeniusNorm: return "frobenius_norm";
    case OpKind::Slice: return "slice";
    case OpKind::ConcatRows: return "concat_rows";
    case OpKind::ConcatCols: return "concat_cols";
    case OpKind::Reshape: return "reshape";
    case OpKind::Clamp: return "clamp";
    case OpKind::Pick: return "pick";
    case OpKind::TileRows: return "tile_rows";
    case OpKind::TimeMix: return "time_mix";
    case OpKind::GruSequence: return "gru_sequence";
  }
  return "?";
}

const Matrix& Var::value() const { return tape->value(*this); }

double Var::scalar() const {
  const Matrix& v = value();
  if (v.rows() != 1 || v.cols() != 1) throw ConfigError("expected a 1x1 value, got " + shape_of(v));
  return v(0, 0);
}

Var Tape::record(OpKind kind, std::vector<int> inputs, Matrix value, OpAttr attr) {
  Node node;
  node.kind = kind;
  node.needs_grad = false;
  for (int in : inputs) node.needs_grad = node.needs_grad || nodes_[in].needs_grad;
  node.inputs = std::move(inputs);
  node.value = std::move(value);
  node.attr = std::move(attr);
  nodes_.push_back(std::move(node));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::constant(Matrix value) { return record(OpKind::Leaf, {}, std::move(value)); }

Var Tape::constant_scalar(double value) {
  Matrix m(1, 1);
  m(0, 0) = value;
  return constant(std::move(m));
}

Var Tape::parameter(Parameter& p) {
  Var v = record(OpKind::Leaf, {}, p.value);
  nodes_.back().param = &p;
  nodes_.back().needs_grad = true;
  return v;
}

Matrix& Tape::grad_buffer(int id) {
  Node& n = nodes_[id];
  if (n.grad.size() == 0) n.grad.setZero(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::backward(Var root) {
  if (root.tape != this) throw ConfigError("backward root belongs to another tape");
  const Matrix& rv = nodes_[root.id].value;
  if (rv.rows() != 1 || rv.cols() != 1)
    throw ConfigError("backward root must be a scalar, got " + shape_of(rv));
  for (auto& n : nodes_) n.grad.resize(0, 0);
  grad_buffer(root.id).setOnes();
  for (int id = root.id; id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.needs_grad || n.grad.size() == 0) continue;
    backward_node(n);
  }
}

void Tape::backward_node(Node& node) {
  const Matrix& g = node.grad;
  const Matrix& y = node.value;
  auto wants = [&](std::size_t k) { return nodes_[node.inputs[k]].needs_grad; };
  auto in = [&](std::size_t k) -> const Matrix& { return nodes_[node.inputs[k]].value; };
  auto gin = [&](std::size_t k) -> Matrix& { return grad_buffer(node.inputs[k]); };

  switch (node.kind) {
    case OpKind::Leaf:
      if (node.param) node.param->grad += g;
      break;
    case OpKind::MatMul:
      if (wants(0)) gin(0).noalias() += g * in(1).transpose();
      if (wants(1)) gin(1).noalias() += in(0).transpose() * g;
      break;
    case OpKind::Add:
      if (wants(0)) gin(0) += g;
      if (wants(1)) gin(1) += g;
      break;
    case OpKind::AddRow:
      if (wants(0)) gin(0) += g;
      if (wants(1)) gin(1) += g.colwise().sum();
      break;
    case OpKind::Sub:
      if (wants(0)) gin(0) += g;
      if (wants(1)) gin(1) -= g;
      break;
    case OpKind::Mul:
      if (wants(0)) gin(0).array() += g.array() * in(1).array();
      if (wants(1)) gin(1).array() += g.array() * in(0).array();
      break;
    case OpKind::Scale:
      gin(0) += node.attr.d0 * g;
      break;
    case OpKind::AddConstant:
      gin(0) += g;
      break;
    case OpKind::Sigmoid:
      gin(0).array() += g.array() * y.array() * (1.0 - y.array());
      break;
    case OpKind::Tanh:
      gin(0).array() += g.array() * (1.0 - y.array().square());
      break;
    case OpKind::Exp:
      gin(0).array() += g.array() * y.array();
      break;
    case OpKind::Log: {
      const Matrix& x = in(0);
      Matrix& dx = gin(0);
      for (Eigen::Index i = 0; i < x.size(); ++i)
        if (x.data()[i] > kProbFloor) dx.data()[i] += g.data()[i] / x.data()[i];
      break;
    }
    case OpKind::RowSoftmax: {
      Vector dot = (g.array() * y.array()).rowwise().sum();
      gin(0).array() += y.array() * (g.colwise() - dot).array();
      break;
    }
    case OpKind::NormalizeRows: {
      Vector s = in(0).rowwise().sum();
      Vector dot = (g.array() * y.array()).rowwise().sum();
      gin(0).array() += (g.colwise() - dot).array().colwise() / s.array();
      break;
    }
    case OpKind::Sum:
      gin(0).array() += g(0, 0);
      break;
    case OpKind::Mean:
      gin(0).array() += g(0, 0) / static_cast<double>(in(0).size());
      break;
    case OpKind::RowSum:
      gin(0).colwise() += g.col(0);
      break;
    case OpKind::RowMean:
      gin(0).colwise() += g.col(0) / static_cast<double>(in(0).cols());
      break;
    case OpKind::RowNorm: {
      const Matrix& x = in(0);
      Matrix& dx = gin(0);
      for (Eigen::Index r = 0; r < x.rows(); ++r)
        if (y(r, 0) > 0.0) dx.row(r) += (g(r, 0) / y(r, 0)) * x.row(r);
      break;
    }
    case OpKind::FrobeniusNorm:
      if (y(0, 0) > 0.0) gin(0) += (g(0, 0) / y(0, 0)) * in(0);
      break;
    case OpKind::Slice:
      gin(0).block(node.attr.i0, node.attr.i2, node.attr.i1, node.attr.i3) += g;
      break;
    case OpKind::ConcatRows: {
      Eigen::Index offset = 0;
      for (std::size_t k = 0; k < node.inputs.size(); ++k) {
        const Eigen::Index r = in(k).rows();
        if (wants(k)) gin(k) += g.middleRows(offset, r);
        offset += r;
      }
      break;
    }
    case OpKind::ConcatCols: {
      Eigen::Index offset = 0;
      for (std::size_t k = 0; k < node.inputs.size(); ++k) {
        const Eigen::Index c = in(k).cols();
        if (wants(k)) gin(k) += g.middleCols(offset, c);
        offset += c;
      }
      break;
    }
    case OpKind::Reshape: {
      Matrix& dx = gin(0);
      Eigen::Map<Matrix>(dx.data(), dx.rows(), dx.cols()) +=
          Eigen::Map<const Matrix>(g.data(), dx.rows(), dx.cols());
      break;
    }
    case OpKind::Clamp: {
      const Matrix& x = in(0);
      Matrix& dx = gin(0);
      for (Eigen::Index i = 0; i < x.size(); ++i) {
        const double v = x.data()[i];
        if (v >= node.attr.d0 && v <= node.attr.d1) dx.data()[i] += g.data()[i];
      }
      break;
    }
    case OpKind::Pick: {
      Matrix& dx = gin(0);
      const auto& labels = *node.attr.labels;
      for (Eigen::Index r = 0; r < dx.rows(); ++r) dx(r, labels[r]) += g(r, 0);
      break;
    }
    case OpKind::TileRows: {
      Matrix& dx = gin(0);
      const Eigen::Index r = dx.rows();
      for (Eigen::Index k = 0; k < node.attr.i0; ++k) dx += g.middleRows(k * r, r);
      break;
    }
    case OpKind::GruSequence:
      gru_backward(g, y, *node.attr.saved, in(1), node.attr.i0, wants(0) ? &gin(0) : nullptr,
                   wants(1) ? &gin(1) : nullptr, wants(2) ? &gin(2) : nullptr);
      break;
    case OpKind::TimeMix: {
      const Matrix& p = in(0);
      const Matrix& q = in(1);
      const Eigen::Index block = node.attr.i0;
      const Eigen::Index c = p.cols();
      for (Eigen::Index t = 0; t < q.rows(); ++t) {
        Eigen::Map<const Matrix> qt(q.row(t).data(), c, c);
        if (wants(0)) gin(0).middleRows(t * block, block).noalias() += g.middleRows(t * block, block) * qt.transpose();
        if (wants(1)) {
          Matrix dq = p.middleRows(t * block, block).transpose() * g.middleRows(t * block, block);
          gin(1).row(t) += Eigen::Map<const RowVector>(dq.data(), c * c);
        }
      }
      break;
    }
  }
}

Var matmul(Var a, Var b) {
  Tape& t = same_tape(a, b);
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.cols() != bv.rows()) shape_error(OpKind::MatMul, av, &bv);
  Matrix out = av * bv;
  return t.record(OpKind::MatMul, {a.id, b.id}, std::move(out));
}

Var add(Var a, Var b) {
  Tape& t = same_tape(a, b);
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.rows() != bv.rows() || av.cols() != bv.cols()) shape_error(OpKind::Add, av, &bv);
  return t.record(OpKind::Add, {a.id, b.id}, av + bv);
}

Var add_row(Var a, Var row) {
  Tape& t = same_tape(a, row);
  const Matrix& av = a.value();
  const Matrix& rv = row.value();
  if (rv.rows() != 1 || rv.cols() != av.cols()) shape_error(OpKind::AddRow, av, &rv);
  Matrix out = av.rowwise() + rv.row(0);
  return t.record(OpKind::AddRow, {a.id, row.id}, std::move(out));
}

Var sub(Var a, Var b) {
  Tape& t = same_tape(a, b);
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.rows() != bv.rows() || av.cols() != bv.cols()) shape_error(OpKind::Sub, av, &bv);
  return t.record(OpKind::Sub, {a.id, b.id}, av - bv);
}

Var mul(Var a, Var b) {
  Tape& t = same_tape(a, b);
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.rows() != bv.rows() || av.cols() != bv.cols()) shape_error(OpKind::Mul, av, &bv);
  Matrix out = av.cwiseProduct(bv);
  return t.record(OpKind::Mul, {a.id, b.id}, std::move(out));
}

Var scale(Var a, double s) {
  OpAttr attr;
  attr.d0 = s;
  return a.tape->record(OpKind::Scale, {a.id}, s * a.value(), attr);
}

Var add_constant(Var a, double c) {
  Matrix out = a.value().array() + c;
  return a.tape->record(OpKind::AddConstant, {a.id}, std::move(out));
}

Var sigmoid(Var a) {
  Matrix out = sigmoid_of(a.value().array());
  return a.tape->record(OpKind::Sigmoid, {a.id}, std::move(out));
}

Var tanh(Var a) {
  Matrix out = a.value().array().tanh();
  return a.tape->record(OpKind::Tanh, {a.id}, std::move(out));
}

Var exp(Var a) {
  Matrix out = a.value().array().exp();
  return a.tape->record(OpKind::Exp, {a.id}, std::move(out));
}

Var log(Var a) {
  Matrix out = a.value().array().max(kProbFloor).log();
  return a.tape->record(OpKind::Log, {a.id}, std::move(out));
}

Var gru_sequence(Var gates_x, Var w_hidden, Var b_hidden, Eigen::Index batch) {
  Tape& tape = same_tape(gates_x, w_hidden);
  same_tape(gates_x, b_hidden);
  const Matrix& gx = gates_x.value();
  const Matrix& wh = w_hidden.value();
  const Matrix& bh = b_hidden.value();
  const Eigen::Index H = wh.rows();
  if (wh.cols() != 3 * H || gx.cols() != 3 * H) shape_error(OpKind::GruSequence, gx, &wh);
  if (bh.rows() != 1 || bh.cols() != 3 * H) shape_error(OpKind::GruSequence, bh, &wh, "hidden bias");
  if (batch <= 0 || gx.rows() % batch != 0)
    shape_error(OpKind::GruSequence, gx, nullptr, "batch " + std::to_string(batch));
  const Eigen::Index B = batch;
  const Eigen::Index T = gx.rows() / B;
  Matrix states(T * B, H);
  auto saved = std::make_shared<Matrix>(T * B, 4 * H);
  Matrix h = Matrix::Zero(B, H);
  Matrix gh(B, 3 * H);
  for (Eigen::Index t = 0; t < T; ++t) {
    gh.noalias() = h * wh;
    gh.rowwise() += bh.row(0);
    const auto gxt = gx.middleRows(t * B, B);
    Matrix rz = sigmoid_of(gxt.leftCols(2 * H).array() + gh.leftCols(2 * H).array());
    const auto r = rz.leftCols(H).array();
    const auto z = rz.rightCols(H).array();
    Matrix n = tanh_of(gxt.rightCols(H).array() + r * gh.rightCols(H).array());
    h = (n.array() + z * (h.array() - n.array())).matrix();
    states.middleRows(t * B, B) = h;
    saved->block(t * B, 0, B, 2 * H) = rz;
    saved->block(t * B, 2 * H, B, H) = n;
    saved->block(t * B, 3 * H, B, H) = gh.rightCols(H);
  }
  OpAttr attr;
  attr.i0 = B;
  attr.saved = std::move(saved);
  return tape.record(OpKind::GruSequence, {gates_x.id, w_hidden.id, b_hidden.id}, std::move(states), attr);
}

Matrix row_softmax(const Matrix& logits) {
  Matrix out = logits.colwise() - logits.rowwise().maxCoeff();
  out = out.array().exp();
  out.array().colwise() /= out.rowwise().sum().array();
  return out;
}

Var row_softmax(Var a) {
  return a.tape->record(OpKind::RowSoftmax, {a.id}, row_softmax(a.value()));
}

Var normalize_rows(Var a) {
  const Matrix& av = a.value();
  Matrix out = av;
  out.array().colwise() /= av.rowwise().sum().array();
  return a.tape->record(OpKind::NormalizeRows, {a.id}, std::move(out));
}

Var sum(Var a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return a.tape->record(OpKind::Sum, {a.id}, std::move(out));
}

Var mean(Var a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum() / static_cast<double>(a.value().size());
  return a.tape->record(OpKind::Mean, {a.id}, std::move(out));
}

Var row_sum(Var a) {
  Matrix out = a.value().rowwise().sum();
  return a.tape->record(OpKind::RowSum, {a.id}, std::move(out));
}

Var row_mean(Var a) {
  Matrix out = a.value().rowwise().sum() / static_cast<double>(a.value().cols());
  return a.tape->record(OpKind::RowMean, {a.id}, std::move(out));
}

Var row_norm(Var a) {
  Matrix out = a.value().rowwise().norm();
  return a.tape->record(OpKind::RowNorm, {a.id}, std::move(out));
}

Var frobenius_norm(Var a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().norm();
  return a.tape->record(OpKind::FrobeniusNorm, {a.id}, std::move(out));
}

Var slice(Var a, Eigen::Index row, Eigen::Index rows, Eigen::Index col, Eigen::Index cols) {
  const Matrix& av = a.value();
  if (row < 0 || col < 0 || rows < 0 || cols < 0 || row + rows > av.rows() || col + cols > av.cols()) {
    std::ostringstream os;
    os << "block " << row << "+" << rows << ", " << col << "+" << cols;
    shape_error(OpKind::Slice, av, nullptr, os.str());
  }
  OpAttr attr;
  attr.i0 = row;
  attr.i1 = rows;
  attr.i2 = col;
  attr.i3 = cols;
  Matrix out = av.block(row, col, rows, cols);
  return a.tape->record(OpKind::Slice, {a.id}, std::move(out), attr);
}

Var slice_rows(Var a, Eigen::Index row, Eigen::Index rows) { return slice(a, row, rows, 0, a.cols()); }

Var slice_cols(Var a, Eigen::Index col, Eigen::Index cols) { return slice(a, 0, a.rows(), col, cols); }

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ConfigError("concat_rows of zero parts");
  Tape& t = *parts.front().tape;
  const Eigen::Index cols = parts.front().cols();
  Eigen::Index rows = 0;
  std::vector<int> ids;
  ids.reserve(parts.size());
  for (const Var& p : parts) {
    if (p.cols() != cols) shape_error(OpKind::ConcatRows, parts.front().value(), &p.value());
    rows += p.rows();
    ids.push_back(p.id);
  }
  Matrix out(rows, cols);
  Eigen::Index offset = 0;
  for (const Var& p : parts) {
    out.middleRows(offset, p.rows()) = p.value();
    offset += p.rows();
  }
  return t.record(OpKind::ConcatRows, std::move(ids), std::move(out));
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ConfigError("concat_cols of zero parts");
  Tape& t = *parts.front().tape;
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  std::vector<int> ids;
  ids.reserve(parts.size());
  for (const Var& p : parts) {
    if (p.rows() != rows) shape_error(OpKind::ConcatCols, parts.front().value(), &p.value());
    cols += p.cols();
    ids.push_back(p.id);
  }
  Matrix out(rows, cols);
  Eigen::Index offset = 0;
  for (const Var& p : parts) {
    out.middleCols(offset, p.cols()) = p.value();
    offset += p.cols();
  }
  return t.record(OpKind::ConcatCols, std::move(ids), std::move(out));
}

Var reshape(Var a, Eigen::Index rows, Eigen::Index cols) {
  const Matrix& av = a.value();
  if (rows * cols != av.size()) {
    std::ostringstream os;
    os << "to " << rows << "x" << cols;
    shape_error(OpKind::Reshape, av, nullptr, os.str());
  }
  Matrix out = Eigen::Map<const Matrix>(av.data(), rows, cols);
  return a.tape->record(OpKind::Reshape, {a.id}, std::move(out));
}

Var clamp(Var a, double lo, double hi) {
  OpAttr attr;
  attr.d0 = lo;
  attr.d1 = hi;
  Matrix out = a.value().array().max(lo).min(hi);
  return a.tape->record(OpKind::Clamp, {a.id}, std::move(out), attr);
}

Var pick(Var a, std::shared_ptr<const std::vector<int>> labels) {
  const Matrix& av = a.value();
  if (!labels || static_cast<Eigen::Index>(labels->size()) != av.rows())
    shape_error(OpKind::Pick, av, nullptr, "label count " + std::to_string(labels ? labels->size() : 0));
  Matrix out(av.rows(), 1);
  for (Eigen::Index r = 0; r < av.rows(); ++r) {
    const int k = (*labels)[r];
    if (k < 0 || k >= av.cols()) shape_error(OpKind::Pick, av, nullptr, "label " + std::to_string(k));
    out(r, 0) = av(r, k);
  }
  OpAttr attr;
  attr.labels = std::move(labels);
  return a.tape->record(OpKind::Pick, {a.id}, std::move(out), attr);
}

Var tile_rows(Var a, Eigen::Index times) {
  const Matrix& av = a.value();
  Matrix out = av.replicate(times, 1);
  OpAttr attr;
  attr.i0 = times;
  return a.tape->record(OpKind::TileRows, {a.id}, std::move(out), attr);
}

Var time_mix(Var probs, Var flat_mats, Eigen::Index block) {
  Tape& t = same_tape(probs, flat_mats);
  const Matrix& p = probs.value();
  const Matrix& q = flat_mats.value();
  const Eigen::Index c = p.cols();
  if (q.cols() != c * c || p.rows() != q.rows() * block)
    shape_error(OpKind::TimeMix, p, &q, "block " + std::to_string(block));
  Matrix out(p.rows(), c);
  for (Eigen::Index s = 0; s < q.rows(); ++s) {
    Eigen::Map<const Matrix> qs(q.row(s).data(), c, c);
    out.middleRows(s * block, block).noalias() = p.middleRows(s * block, block) * qs;
  }
  OpAttr attr;
  attr.i0 = block;
  return t.record(OpKind::TimeMix, {probs.id, flat_mats.id}, std::move(out), attr);
}

AdamState::AdamState(const ParameterList& params, double lr) : learning_rate(lr) {
  first_moment.reserve(params.size());
  second_moment.reserve(params.size());
  for (const Parameter* p : params) {
    first_moment.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    second_moment.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
  }
}

void AdamState::reset() {
  step = 0;
  for (auto& m : first_moment) m.setZero();
  for (auto& v : second_moment) v.setZero();
}

void adam_step(AdamState& state, const ParameterList& params) {
  if (params.size() != state.first_moment.size())
    throw ConfigError("adam_step: parameter count does not match optimizer state");
  for (const Parameter* p : params) {
    if (!p->grad.allFinite()) throw RuntimeFailure("non-finite gradient for parameter '" + p->name + "'");
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter& p = *params[k];
    Matrix& m = state.first_moment[k];
    Matrix& v = state.second_moment[k];
    m = state.beta1 * m + (1.0 - state.beta1) * p.grad;
    v = state.beta2 * v + (1.0 - state.beta2) * p.grad.cwiseAbs2();
    p.value.array() -= state.learning_rate * (m.array() / bc1) / ((v.array() / bc2).sqrt() + state.epsilon);
  }
}

void zero_grads(const ParameterList& params) {
  for (Parameter* p : params) p->zero_grad();
}

double evaluate(const Objective& objective) {
  Tape tape;
  return objective(tape).scalar();
}

double value_and_grad(const Objective& objective, const ParameterList& params) {
  zero_grads(params);
  Tape tape;
  Var root = objective(tape);
  tape.backward(root);
  return root.scalar();
}

double finite_difference_check(const Objective& objective, const ParameterList& params, double step) {
  value_and_grad(objective, params);
  std::vector<Matrix> analytic;
  analytic.reserve(params.size());
  for (const Parameter* p : params) analytic.push_back(p->grad);

  double worst = 0.0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter& p = *params[k];
    for (Eigen::Index i = 0; i < p.value.size(); ++i) {
      double& x = p.value.data()[i];
      const double saved = x;
      x = saved + step;
      const double up = evaluate(objective);
      x = saved - step;
      const double down = evaluate(objective);
      x = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic[k].data()[i];
      const double rel = std::abs(a - numeric) / std::max(1e-12, std::abs(a) + std::abs(numeric));
      worst = std::max(worst, rel);
    }
  }
  for (std::size_t k = 0; k < params.size(); ++k) params[k]->grad = analytic[k];
  return worst;
}

}  // namespace tempnoise::diff
