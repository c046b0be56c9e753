#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "rl4rec/error.hpp"
#include "rl4rec/nn/tensor.hpp"

namespace rl4rec::nn {

/// Primitive kinds recorded on the tape. Backward is a switch over these,
/// replayed in reverse creation order.
enum class Op : std::uint8_t {
  Leaf,
  MatMul,
  Add,
  Sub,
  Mul,
  Minimum,
  Affine,
  Tanh,
  Sigmoid,
  Relu,
  Log,
  Exp,
  Huber,
  Clip,
  Softmax,
  LogSoftmax,
  LogSumExp,
  GatherRows,
  PickCols,
  ConcatCols,
  ConcatRows,
  Sum,
  Mean,
  SumCols,
  MeanRows,
  SliceRows,
  SliceCols,
  Transpose,
  MaxRows,
  ShiftRows,
  Unfold,
};

inline const char* op_name(Op op) {
  static constexpr const char* kNames[] = {
      "leaf",     "matmul",      "add",        "sub",         "mul",
      "minimum",  "affine",      "tanh",       "sigmoid",     "relu",
      "log",      "exp",         "huber",      "clip",        "softmax",
      "log_softmax", "logsumexp", "gather_rows", "pick_cols",  "concat_cols",
      "concat_rows", "sum",       "mean",       "sum_cols",    "mean_rows",
      "slice_rows", "slice_cols", "transpose",  "max_rows",    "shift_rows",
      "unfold"};
  return kNames[static_cast<int>(op)];
}

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Tensor& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  double item() const { return value().item(); }
};

/// Row-major 0/1 mask; empty means every entry is allowed. A mask with
/// `cols` entries is broadcast across rows.
using Mask = std::vector<std::uint8_t>;

/// Records primitive operations in creation order (which is a topological
/// order) and replays them backward. Parameters are referenced, not copied.
class Tape {
 public:
  /// With `enable_grad == false` parameter leaves do not require gradients
  /// and backward() is rejected; used for inference and target networks.
  explicit Tape(bool enable_grad = true) : enable_grad_(enable_grad) {
    nodes_.reserve(64);
  }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return enable_grad_; }
  std::size_t size() const { return nodes_.size(); }

  Var leaf(Tensor value, bool requires_grad) {
    Node n;
    n.op = Op::Leaf;
    n.value = std::move(value);
    n.requires_grad = requires_grad && enable_grad_;
    check_finite(n);
    return push(std::move(n));
  }

  Var constant(Tensor value) { return leaf(std::move(value), false); }

  /// Leaf bound to a Parameter. Gradients accumulate into `p.grad`.
  Var param(Parameter& p) {
    Node n;
    n.op = Op::Leaf;
    n.external = &p.value;
    if (enable_grad_) {
      n.param = &p;
      n.requires_grad = true;
    }
    return push(std::move(n));
  }

  /// Leaf bound to a parameter that must not receive gradients.
  Var frozen(const Parameter& p) {
    Node n;
    n.op = Op::Leaf;
    n.external = &p.value;
    return push(std::move(n));
  }

  const Tensor& value(Var v) const { return node(v).result(); }

  /// Gradient of the last backward() with respect to a leaf created by
  /// leaf(..., true). Zero when the leaf did not influence the loss.
  const Tensor& grad(Var v) const {
    const Node& n = node(v);
    RL4REC_EXPECT(n.op == Op::Leaf && n.requires_grad && n.param == nullptr,
                  "Tape::grad: not a plain leaf requiring grad");
    RL4REC_EXPECT(static_cast<std::size_t>(v.id) < grads_.size(),
                  "Tape::grad: backward() has not been run");
    return grads_[v.id];
  }

  bool requires_grad(Var v) const { return node(v).requires_grad; }

  void backward(Var loss);

  // Primitive construction; the free functions below are the public API.
  Var matmul(Var a, Var b);
  Var binary(Op op, Var a, Var b);
  Var unary(Op op, Var a, double p0 = 0.0, double p1 = 0.0);
  Var softmax_like(Op op, Var a, std::span<const std::uint8_t> mask);
  Var gather_rows(Var table, std::span<const std::size_t> index);
  Var pick_cols(Var a, std::span<const std::size_t> index);
  Var concat(Op op, std::span<const Var> parts);
  Var reduce(Op op, Var a);
  Var slice(Op op, Var a, std::size_t begin, std::size_t end);
  Var transpose(Var a);
  Var max_rows(Var a);
  Var shift_rows(Var a, std::size_t k);
  Var unfold(Var a, std::size_t h);

 private:
  struct Node {
    Op op = Op::Leaf;
    std::vector<int> inputs;
    Tensor value;
    const Tensor* external = nullptr;
    Parameter* param = nullptr;
    bool requires_grad = false;
    double p0 = 0.0, p1 = 0.0;
    std::size_t s0 = 0, s1 = 0;
    std::vector<std::size_t> index;
    Mask mask;

    const Tensor& result() const { return external ? *external : value; }
  };

  const Node& node(Var v) const {
    RL4REC_EXPECT(v.tape == this && v.id >= 0 &&
                      static_cast<std::size_t>(v.id) < nodes_.size(),
                  "Var does not belong to this tape");
    return nodes_[v.id];
  }

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size()) - 1};
  }

  Var push_op(Node n) {
    n.requires_grad = false;
    for (int i : n.inputs) n.requires_grad |= nodes_[i].requires_grad;
    check_finite(n);
    return push(std::move(n));
  }

  static void check_finite(const Node& n) {
    if (!n.result().all_finite()) {
      throw NumericError(std::string("non-finite output from ") + op_name(n.op));
    }
  }

  static bool mask_allows(const Mask& m, std::size_t cols, std::size_t r,
                          std::size_t c) {
    if (m.empty()) return true;
    if (m.size() == cols) return m[c] != 0;
    return m[r * cols + c] != 0;
  }

  void backward_node(const Node& n, const Tensor& g);
  Tensor& grad_slot(int id) {
    Tensor& t = grads_[id];
    if (t.size() == 0) {
      const Tensor& v = nodes_[id].result();
      t = Tensor(v.rows(), v.cols());
    }
    return t;
  }

  bool enable_grad_;
  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
};

inline const Tensor& Var::value() const {
  RL4REC_EXPECT(tape != nullptr, "Var: null tape");
  return tape->value(*this);
}

// ---------------------------------------------------------------------------
// Forward construction

namespace detail {

inline std::size_t bdim(std::size_t a, std::size_t b, const char* what) {
  if (a == b) return a;
  if (a == 1) return b;
  if (b == 1) return a;
  throw ContractViolation(std::string(what) + ": shapes not broadcastable");
}

inline double huber(double x, double d) {
  const double ax = std::abs(x);
  return ax <= d ? 0.5 * x * x : d * (ax - 0.5 * d);
}

}  // namespace detail

inline Var Tape::matmul(Var a, Var b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  if (A.cols() != B.rows()) {
    throw ContractViolation("matmul: inner dimensions differ " +
                            A.shape_string() + " * " + B.shape_string());
  }
  Node n;
  n.op = Op::MatMul;
  n.inputs = {a.id, b.id};
  n.value = Tensor(A.rows(), B.cols());
  const std::size_t m = A.rows(), k = A.cols(), p = B.cols();
  for (std::size_t i = 0; i < m; ++i) {
    double* out = &n.value(i, 0);
    for (std::size_t t = 0; t < k; ++t) {
      const double av = A(i, t);
      if (av == 0.0) continue;
      const double* brow = &B(t, 0);
      for (std::size_t j = 0; j < p; ++j) out[j] += av * brow[j];
    }
  }
  return push_op(std::move(n));
}

inline Var Tape::binary(Op op, Var a, Var b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  const std::size_t r = detail::bdim(A.rows(), B.rows(), op_name(op));
  const std::size_t c = detail::bdim(A.cols(), B.cols(), op_name(op));
  Node n;
  n.op = op;
  n.inputs = {a.id, b.id};
  n.value = Tensor(r, c);
  const bool ar = A.rows() == 1, ac = A.cols() == 1;
  const bool br = B.rows() == 1, bc = B.cols() == 1;
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      const double x = A(ar ? 0 : i, ac ? 0 : j);
      const double y = B(br ? 0 : i, bc ? 0 : j);
      double z = 0.0;
      switch (op) {
        case Op::Add: z = x + y; break;
        case Op::Sub: z = x - y; break;
        case Op::Mul: z = x * y; break;
        case Op::Minimum: z = x <= y ? x : y; break;
        default: throw ContractViolation("binary: unsupported op");
      }
      n.value(i, j) = z;
    }
  }
  return push_op(std::move(n));
}

inline Var Tape::unary(Op op, Var a, double p0, double p1) {
  const Tensor& A = value(a);
  Node n;
  n.op = op;
  n.inputs = {a.id};
  n.p0 = p0;
  n.p1 = p1;
  n.value = Tensor(A.rows(), A.cols());
  for (std::size_t i = 0; i < A.size(); ++i) {
    const double x = A[i];
    double z = 0.0;
    switch (op) {
      case Op::Affine: z = p0 * x + p1; break;
      case Op::Tanh: z = std::tanh(x); break;
      case Op::Sigmoid: z = 1.0 / (1.0 + std::exp(-x)); break;
      case Op::Relu: z = x > 0.0 ? x : 0.0; break;
      case Op::Log: z = std::log(x); break;
      case Op::Exp: z = std::exp(x); break;
      case Op::Huber: z = detail::huber(x, p0); break;
      case Op::Clip: z = std::clamp(x, p0, p1); break;
      default: throw ContractViolation("unary: unsupported op");
    }
    n.value[i] = z;
  }
  return push_op(std::move(n));
}

inline Var Tape::softmax_like(Op op, Var a, std::span<const std::uint8_t> mask) {
  const Tensor& A = value(a);
  const std::size_t R = A.rows(), C = A.cols();
  if (!mask.empty() && mask.size() != C && mask.size() != R * C) {
    throw ContractViolation("softmax: mask size does not match logits");
  }
  Node n;
  n.op = op;
  n.inputs = {a.id};
  n.mask.assign(mask.begin(), mask.end());
  n.value = op == Op::LogSumExp ? Tensor(R, 1) : Tensor(R, C);
  for (std::size_t i = 0; i < R; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < C; ++j)
      if (mask_allows(n.mask, C, i, j)) mx = std::max(mx, A(i, j));
    if (!std::isfinite(mx)) {
      throw ContractViolation(std::string(op_name(op)) + ": row fully masked");
    }
    double total = 0.0;
    for (std::size_t j = 0; j < C; ++j)
      if (mask_allows(n.mask, C, i, j)) total += std::exp(A(i, j) - mx);
    const double lse = mx + std::log(total);
    if (op == Op::LogSumExp) {
      n.value(i, 0) = lse;
      continue;
    }
    for (std::size_t j = 0; j < C; ++j) {
      if (!mask_allows(n.mask, C, i, j)) continue;  // stays 0
      n.value(i, j) = op == Op::Softmax ? std::exp(A(i, j) - lse) : A(i, j) - lse;
    }
  }
  return push_op(std::move(n));
}

inline Var Tape::gather_rows(Var table, std::span<const std::size_t> index) {
  const Tensor& T = value(table);
  Node n;
  n.op = Op::GatherRows;
  n.inputs = {table.id};
  n.index.assign(index.begin(), index.end());
  n.value = Tensor(index.size(), T.cols());
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= T.rows()) {
      throw ContractViolation("gather_rows: index " + std::to_string(index[r]) +
                              " out of range for " + T.shape_string());
    }
    std::copy_n(&T(index[r], 0), T.cols(), &n.value(r, 0));
  }
  return push_op(std::move(n));
}

inline Var Tape::pick_cols(Var a, std::span<const std::size_t> index) {
  const Tensor& A = value(a);
  RL4REC_EXPECT(index.size() == A.rows(), "pick_cols: one index per row required");
  Node n;
  n.op = Op::PickCols;
  n.inputs = {a.id};
  n.index.assign(index.begin(), index.end());
  n.value = Tensor(A.rows(), 1);
  for (std::size_t r = 0; r < A.rows(); ++r) {
    RL4REC_EXPECT(index[r] < A.cols(), "pick_cols: index out of range");
    n.value(r, 0) = A(r, index[r]);
  }
  return push_op(std::move(n));
}

inline Var Tape::concat(Op op, std::span<const Var> parts) {
  RL4REC_EXPECT(!parts.empty(), "concat: no inputs");
  Node n;
  n.op = op;
  std::size_t rows = 0, cols = 0;
  for (Var v : parts) {
    const Tensor& t = value(v);
    n.inputs.push_back(v.id);
    if (op == Op::ConcatCols) {
      if (rows == 0 && cols == 0) rows = t.rows();
      RL4REC_EXPECT(t.rows() == rows, "concat_cols: row counts differ");
      cols += t.cols();
    } else {
      if (rows == 0 && cols == 0) cols = t.cols();
      RL4REC_EXPECT(t.cols() == cols, "concat_rows: column counts differ");
      rows += t.rows();
    }
  }
  n.value = Tensor(rows, cols);
  std::size_t offset = 0;
  for (Var v : parts) {
    const Tensor& t = value(v);
    for (std::size_t i = 0; i < t.rows(); ++i)
      for (std::size_t j = 0; j < t.cols(); ++j) {
        if (op == Op::ConcatCols) n.value(i, offset + j) = t(i, j);
        else n.value(offset + i, j) = t(i, j);
      }
    offset += op == Op::ConcatCols ? t.cols() : t.rows();
  }
  return push_op(std::move(n));
}

inline Var Tape::reduce(Op op, Var a) {
  const Tensor& A = value(a);
  Node n;
  n.op = op;
  n.inputs = {a.id};
  switch (op) {
    case Op::Sum:
    case Op::Mean: {
      RL4REC_EXPECT(A.size() > 0, "sum/mean of empty tensor");
      double s = 0.0;
      for (double x : A.values()) s += x;
      n.value = Tensor::scalar(op == Op::Mean ? s / A.size() : s);
      break;
    }
    case Op::SumCols:
      n.value = Tensor(A.rows(), 1);
      for (std::size_t i = 0; i < A.rows(); ++i)
        for (std::size_t j = 0; j < A.cols(); ++j) n.value(i, 0) += A(i, j);
      break;
    case Op::MeanRows:
      RL4REC_EXPECT(A.rows() > 0, "mean_rows of empty tensor");
      n.value = Tensor(1, A.cols());
      for (std::size_t i = 0; i < A.rows(); ++i)
        for (std::size_t j = 0; j < A.cols(); ++j) n.value(0, j) += A(i, j);
      for (std::size_t j = 0; j < A.cols(); ++j) n.value(0, j) /= A.rows();
      break;
    default:
      throw ContractViolation("reduce: unsupported op");
  }
  return push_op(std::move(n));
}

inline Var Tape::slice(Op op, Var a, std::size_t begin, std::size_t end) {
  const Tensor& A = value(a);
  const std::size_t extent = op == Op::SliceRows ? A.rows() : A.cols();
  RL4REC_EXPECT(begin < end && end <= extent, "slice: bad range");
  Node n;
  n.op = op;
  n.inputs = {a.id};
  n.s0 = begin;
  n.s1 = end;
  if (op == Op::SliceRows) {
    n.value = Tensor(end - begin, A.cols());
    for (std::size_t i = begin; i < end; ++i)
      std::copy_n(&A(i, 0), A.cols(), &n.value(i - begin, 0));
  } else {
    n.value = Tensor(A.rows(), end - begin);
    for (std::size_t i = 0; i < A.rows(); ++i)
      for (std::size_t j = begin; j < end; ++j) n.value(i, j - begin) = A(i, j);
  }
  return push_op(std::move(n));
}

inline Var Tape::transpose(Var a) {
  const Tensor& A = value(a);
  Node n;
  n.op = Op::Transpose;
  n.inputs = {a.id};
  n.value = Tensor(A.cols(), A.rows());
  for (std::size_t i = 0; i < A.rows(); ++i)
    for (std::size_t j = 0; j < A.cols(); ++j) n.value(j, i) = A(i, j);
  return push_op(std::move(n));
}

inline Var Tape::max_rows(Var a) {
  const Tensor& A = value(a);
  RL4REC_EXPECT(A.rows() > 0, "max_rows of empty tensor");
  Node n;
  n.op = Op::MaxRows;
  n.inputs = {a.id};
  n.value = Tensor(1, A.cols());
  n.index.assign(A.cols(), 0);
  for (std::size_t j = 0; j < A.cols(); ++j) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < A.rows(); ++i)
      if (A(i, j) > A(best, j)) best = i;
    n.index[j] = best;
    n.value(0, j) = A(best, j);
  }
  return push_op(std::move(n));
}

inline Var Tape::shift_rows(Var a, std::size_t k) {
  const Tensor& A = value(a);
  Node n;
  n.op = Op::ShiftRows;
  n.inputs = {a.id};
  n.s0 = k;
  n.value = Tensor(A.rows(), A.cols());
  for (std::size_t i = k; i < A.rows(); ++i)
    std::copy_n(&A(i - k, 0), A.cols(), &n.value(i, 0));
  return push_op(std::move(n));
}

inline Var Tape::unfold(Var a, std::size_t h) {
  const Tensor& A = value(a);
  RL4REC_EXPECT(h >= 1 && h <= A.rows(), "unfold: window larger than input");
  Node n;
  n.op = Op::Unfold;
  n.inputs = {a.id};
  n.s0 = h;
  const std::size_t windows = A.rows() - h + 1, d = A.cols();
  n.value = Tensor(windows, h * d);
  for (std::size_t t = 0; t < windows; ++t)
    for (std::size_t k = 0; k < h; ++k)
      std::copy_n(&A(t + k, 0), d, &n.value(t, k * d));
  return push_op(std::move(n));
}

// ---------------------------------------------------------------------------
// Backward

inline void Tape::backward(Var loss) {
  RL4REC_EXPECT(enable_grad_, "backward on a tape without gradients");
  const Node& ln = node(loss);
  if (ln.result().size() != 1) {
    throw ContractViolation("backward: loss must be a scalar, got " +
                            ln.result().shape_string());
  }
  grads_.assign(nodes_.size(), Tensor());
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (nodes_[i].op == Op::Leaf && nodes_[i].requires_grad) grad_slot(static_cast<int>(i));
  }
  if (!ln.requires_grad) return;
  grad_slot(loss.id)[0] = 1.0;
  for (int id = loss.id; id >= 0; --id) {
    const Node& n = nodes_[id];
    if (!n.requires_grad || grads_[id].size() == 0) continue;
    if (n.op == Op::Leaf) {
      if (n.param != nullptr) {
        Tensor& pg = n.param->grad;
        if (!pg.same_shape(n.param->value)) pg = Tensor(n.param->value.rows(), n.param->value.cols());
        for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += grads_[id][i];
      }
      continue;
    }
    backward_node(n, grads_[id]);
  }
}

inline void Tape::backward_node(const Node& n, const Tensor& g) {
  auto want = [&](std::size_t k) { return nodes_[n.inputs[k]].requires_grad; };
  auto in = [&](std::size_t k) -> const Tensor& { return nodes_[n.inputs[k]].result(); };
  const Tensor& out = n.value;

  switch (n.op) {
    case Op::MatMul: {
      const Tensor& A = in(0);
      const Tensor& B = in(1);
      if (want(0)) {
        Tensor& ga = grad_slot(n.inputs[0]);
        for (std::size_t i = 0; i < A.rows(); ++i)
          for (std::size_t t = 0; t < A.cols(); ++t) {
            double s = 0.0;
            for (std::size_t j = 0; j < B.cols(); ++j) s += g(i, j) * B(t, j);
            ga(i, t) += s;
          }
      }
      if (want(1)) {
        Tensor& gb = grad_slot(n.inputs[1]);
        for (std::size_t i = 0; i < A.rows(); ++i)
          for (std::size_t t = 0; t < A.cols(); ++t) {
            const double av = A(i, t);
            if (av == 0.0) continue;
            for (std::size_t j = 0; j < B.cols(); ++j) gb(t, j) += av * g(i, j);
          }
      }
      break;
    }
    case Op::Add:
    case Op::Sub:
    case Op::Mul:
    case Op::Minimum: {
      const Tensor& A = in(0);
      const Tensor& B = in(1);
      const bool ar = A.rows() == 1, ac = A.cols() == 1;
      const bool br = B.rows() == 1, bc = B.cols() == 1;
      Tensor* ga = want(0) ? &grad_slot(n.inputs[0]) : nullptr;
      Tensor* gb = want(1) ? &grad_slot(n.inputs[1]) : nullptr;
      for (std::size_t i = 0; i < out.rows(); ++i)
        for (std::size_t j = 0; j < out.cols(); ++j) {
          const std::size_t ai = ar ? 0 : i, aj = ac ? 0 : j;
          const std::size_t bi = br ? 0 : i, bj = bc ? 0 : j;
          const double gv = g(i, j);
          double da = 0.0, db = 0.0;
          switch (n.op) {
            case Op::Add: da = gv; db = gv; break;
            case Op::Sub: da = gv; db = -gv; break;
            case Op::Mul: da = gv * B(bi, bj); db = gv * A(ai, aj); break;
            default:
              if (A(ai, aj) <= B(bi, bj)) da = gv;
              else db = gv;
          }
          if (ga) (*ga)(ai, aj) += da;
          if (gb) (*gb)(bi, bj) += db;
        }
      break;
    }
    case Op::Affine:
    case Op::Tanh:
    case Op::Sigmoid:
    case Op::Relu:
    case Op::Log:
    case Op::Exp:
    case Op::Huber:
    case Op::Clip: {
      const Tensor& A = in(0);
      Tensor& ga = grad_slot(n.inputs[0]);
      for (std::size_t i = 0; i < A.size(); ++i) {
        const double x = A[i], y = out[i];
        double d = 0.0;
        switch (n.op) {
          case Op::Affine: d = n.p0; break;
          case Op::Tanh: d = 1.0 - y * y; break;
          case Op::Sigmoid: d = y * (1.0 - y); break;
          case Op::Relu: d = x > 0.0 ? 1.0 : 0.0; break;
          case Op::Log: d = 1.0 / x; break;
          case Op::Exp: d = y; break;
          case Op::Huber: d = std::abs(x) <= n.p0 ? x : (x > 0 ? n.p0 : -n.p0); break;
          default: d = (x >= n.p0 && x <= n.p1) ? 1.0 : 0.0;
        }
        ga[i] += g[i] * d;
      }
      break;
    }
    case Op::Softmax:
    case Op::LogSoftmax:
    case Op::LogSumExp: {
      const Tensor& A = in(0);
      Tensor& ga = grad_slot(n.inputs[0]);
      const std::size_t C = A.cols();
      for (std::size_t i = 0; i < A.rows(); ++i) {
        if (n.op == Op::Softmax) {
          double dot = 0.0;
          for (std::size_t j = 0; j < C; ++j)
            if (mask_allows(n.mask, C, i, j)) dot += g(i, j) * out(i, j);
          for (std::size_t j = 0; j < C; ++j)
            if (mask_allows(n.mask, C, i, j)) ga(i, j) += out(i, j) * (g(i, j) - dot);
        } else if (n.op == Op::LogSoftmax) {
          double gsum = 0.0;
          for (std::size_t j = 0; j < C; ++j)
            if (mask_allows(n.mask, C, i, j)) gsum += g(i, j);
          for (std::size_t j = 0; j < C; ++j)
            if (mask_allows(n.mask, C, i, j))
              ga(i, j) += g(i, j) - std::exp(out(i, j)) * gsum;
        } else {
          const double lse = out(i, 0);
          for (std::size_t j = 0; j < C; ++j)
            if (mask_allows(n.mask, C, i, j)) ga(i, j) += g(i, 0) * std::exp(A(i, j) - lse);
        }
      }
      break;
    }
    case Op::GatherRows: {
      Tensor& ga = grad_slot(n.inputs[0]);
      const std::size_t d = ga.cols();
      for (std::size_t r = 0; r < n.index.size(); ++r)
        for (std::size_t j = 0; j < d; ++j) ga(n.index[r], j) += g(r, j);
      break;
    }
    case Op::PickCols: {
      Tensor& ga = grad_slot(n.inputs[0]);
      for (std::size_t r = 0; r < n.index.size(); ++r) ga(r, n.index[r]) += g(r, 0);
      break;
    }
    case Op::ConcatCols:
    case Op::ConcatRows: {
      std::size_t offset = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const Tensor& t = in(k);
        if (want(k)) {
          Tensor& gk = grad_slot(n.inputs[k]);
          for (std::size_t i = 0; i < t.rows(); ++i)
            for (std::size_t j = 0; j < t.cols(); ++j)
              gk(i, j) += n.op == Op::ConcatCols ? g(i, offset + j) : g(offset + i, j);
        }
        offset += n.op == Op::ConcatCols ? t.cols() : t.rows();
      }
      break;
    }
    case Op::Sum:
    case Op::Mean: {
      Tensor& ga = grad_slot(n.inputs[0]);
      const double s = n.op == Op::Mean ? g[0] / ga.size() : g[0];
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += s;
      break;
    }
    case Op::SumCols: {
      Tensor& ga = grad_slot(n.inputs[0]);
      for (std::size_t i = 0; i < ga.rows(); ++i)
        for (std::size_t j = 0; j < ga.cols(); ++j) ga(i, j) += g(i, 0);
      break;
    }
    case Op::MeanRows: {
      Tensor& ga = grad_slot(n.inputs[0]);
      const double inv = 1.0 / ga.rows();
      for (std::size_t i = 0; i < ga.rows(); ++i)
        for (std::size_t j = 0; j < ga.cols(); ++j) ga(i, j) += g(0, j) * inv;
      break;
    }
    case Op::SliceRows:
    case Op::SliceCols: {
      Tensor& ga = grad_slot(n.inputs[0]);
      for (std::size_t i = 0; i < out.rows(); ++i)
        for (std::size_t j = 0; j < out.cols(); ++j) {
          if (n.op == Op::SliceRows) ga(n.s0 + i, j) += g(i, j);
          else ga(i, n.s0 + j) += g(i, j);
        }
      break;
    }
    case Op::Transpose: {
      Tensor& ga = grad_slot(n.inputs[0]);
      for (std::size_t i = 0; i < ga.rows(); ++i)
        for (std::size_t j = 0; j < ga.cols(); ++j) ga(i, j) += g(j, i);
      break;
    }
    case Op::MaxRows: {
      Tensor& ga = grad_slot(n.inputs[0]);
      for (std::size_t j = 0; j < ga.cols(); ++j) ga(n.index[j], j) += g(0, j);
      break;
    }
    case Op::ShiftRows: {
      Tensor& ga = grad_slot(n.inputs[0]);
      for (std::size_t i = n.s0; i < out.rows(); ++i)
        for (std::size_t j = 0; j < out.cols(); ++j) ga(i - n.s0, j) += g(i, j);
      break;
    }
    case Op::Unfold: {
      Tensor& ga = grad_slot(n.inputs[0]);
      const std::size_t d = ga.cols();
      for (std::size_t t = 0; t < out.rows(); ++t)
        for (std::size_t k = 0; k < n.s0; ++k)
          for (std::size_t j = 0; j < d; ++j) ga(t + k, j) += g(t, k * d + j);
      break;
    }
    case Op::Leaf:
      break;
  }
}

// ---------------------------------------------------------------------------
// Public primitive API

inline Var matmul(Var a, Var b) { return a.tape->matmul(a, b); }
inline Var add(Var a, Var b) { return a.tape->binary(Op::Add, a, b); }
inline Var sub(Var a, Var b) { return a.tape->binary(Op::Sub, a, b); }
inline Var mul(Var a, Var b) { return a.tape->binary(Op::Mul, a, b); }
inline Var minimum(Var a, Var b) { return a.tape->binary(Op::Minimum, a, b); }
inline Var affine(Var a, double scale, double shift) {
  return a.tape->unary(Op::Affine, a, scale, shift);
}
inline Var scale(Var a, double s) { return affine(a, s, 0.0); }
inline Var neg(Var a) { return affine(a, -1.0, 0.0); }
inline Var tanh(Var a) { return a.tape->unary(Op::Tanh, a); }
inline Var sigmoid(Var a) { return a.tape->unary(Op::Sigmoid, a); }
inline Var relu(Var a) { return a.tape->unary(Op::Relu, a); }
inline Var log(Var a) { return a.tape->unary(Op::Log, a); }
inline Var exp(Var a) { return a.tape->unary(Op::Exp, a); }
inline Var huber(Var a, double delta = 1.0) { return a.tape->unary(Op::Huber, a, delta); }
/// Gradient passes only where lo <= x <= hi.
inline Var clip(Var a, double lo, double hi) { return a.tape->unary(Op::Clip, a, lo, hi); }
inline Var square(Var a) { return mul(a, a); }

/// Row-wise softmax. Masked entries get probability 0 and no gradient,
/// equivalent to logits of -inf.
inline Var softmax(Var a, std::span<const std::uint8_t> mask = {}) {
  return a.tape->softmax_like(Op::Softmax, a, mask);
}
/// Row-wise log-softmax; masked entries are reported as 0 and must not be
/// consumed.
inline Var log_softmax(Var a, std::span<const std::uint8_t> mask = {}) {
  return a.tape->softmax_like(Op::LogSoftmax, a, mask);
}
/// Row-wise log-sum-exp over allowed entries, rows x 1.
inline Var logsumexp(Var a, std::span<const std::uint8_t> mask = {}) {
  return a.tape->softmax_like(Op::LogSumExp, a, mask);
}

/// Embedding lookup.
inline Var gather_rows(Var table, std::span<const std::size_t> index) {
  return table.tape->gather_rows(table, index);
}
/// out[r] = a[r, index[r]], rows x 1.
inline Var pick(Var a, std::span<const std::size_t> index) {
  return a.tape->pick_cols(a, index);
}
inline Var concat_cols(std::span<const Var> parts) {
  return parts.front().tape->concat(Op::ConcatCols, parts);
}
inline Var concat_cols(std::initializer_list<Var> parts) {
  return concat_cols(std::span<const Var>(parts.begin(), parts.size()));
}
inline Var concat_rows(std::span<const Var> parts) {
  return parts.front().tape->concat(Op::ConcatRows, parts);
}
inline Var sum(Var a) { return a.tape->reduce(Op::Sum, a); }
inline Var mean(Var a) { return a.tape->reduce(Op::Mean, a); }
/// Sum across columns: rows x 1.
inline Var sum_cols(Var a) { return a.tape->reduce(Op::SumCols, a); }
/// Average over rows: 1 x cols.
inline Var mean_rows(Var a) { return a.tape->reduce(Op::MeanRows, a); }
inline Var slice_rows(Var a, std::size_t begin, std::size_t end) {
  return a.tape->slice(Op::SliceRows, a, begin, end);
}
inline Var slice_cols(Var a, std::size_t begin, std::size_t end) {
  return a.tape->slice(Op::SliceCols, a, begin, end);
}
inline Var transpose(Var a) { return a.tape->transpose(a); }
/// Column-wise max over rows: 1 x cols. Ties resolve to the lowest row.
inline Var max_rows(Var a) { return a.tape->max_rows(a); }
/// Shift rows down by k, zero-filling the top (causal delay).
inline Var shift_rows(Var a, std::size_t k) { return a.tape->shift_rows(a, k); }
/// Sliding windows of h consecutive rows, flattened: (L-h+1) x (h*cols).
inline Var unfold(Var a, std::size_t h) { return a.tape->unfold(a, h); }
/// Copy of the value with no gradient path.
inline Var detach(Var a) { return a.tape->constant(a.value()); }

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }

}  // namespace rl4rec::nn
