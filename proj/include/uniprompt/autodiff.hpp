#pragma once

// Define-by-run reverse-mode differentiation over dense matrices.
//
// A Tape records every operation applied to its Vars. Nodes are appended in
// evaluation order, so reverse insertion order is a valid reverse topological
// order. Tapes are single-use: build one per training step, call backward()
// once, read the gradients of the Parameters that took part.

#include "uniprompt/common.hpp"
#include "uniprompt/rng.hpp"
#include "uniprompt/sparse.hpp"

#include <deque>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace uniprompt::ad {

/// A named trainable tensor owned outside the tape.
struct Parameter {
  std::string name;
  Matrix value;
};

class Tape;

/// Handle to a node on a tape. Cheap to copy.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const;
  bool requires_grad() const;
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Sparse matrix whose values live on the tape (nnz x 1).
struct SpVar {
  PatternPtr pattern;
  Var values;
};

/// Gradient of a scalar root with respect to each Parameter bound on the tape.
class Gradients {
 public:
  /// Zero matrix shaped like the parameter when it did not influence the root.
  const Matrix& of(const Parameter& p) const;
  bool contains(const Parameter& p) const { return grads_.count(&p) != 0; }
  void accumulate(const Parameter& p, const Matrix& g);
  std::size_t size() const { return grads_.size(); }

 private:
  std::unordered_map<const Parameter*, Matrix> grads_;
  mutable std::unordered_map<const Parameter*, Matrix> zeros_;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  /// Leaf that receives a gradient; the tape keeps a pointer to p.
  Var parameter(const Parameter& p);
  /// Binds p as a parameter when trainable, otherwise as a constant copy.
  Var bind(const Parameter& p, bool trainable) { return trainable ? parameter(p) : constant(p.value); }

  /// Appends an op result. The backward rule runs only if some parent needs a gradient.
  Var record(Matrix value, std::initializer_list<Var> parents, Backward backward);

  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  bool has_grad(std::size_t id) const { return nodes_[id].has_grad; }
  /// Upstream gradient of a node during backward.
  const Matrix& grad(std::size_t id) const { return nodes_[id].grad; }

  template <class Expr>
  void accumulate(std::size_t id, const Expr& g) {
    Node& node = nodes_[id];
    if (!node.requires_grad) return;
    if (!node.has_grad) {
      node.grad = g;
      node.has_grad = true;
    } else {
      node.grad += g;
    }
  }
  /// Mutable gradient buffer, zero-initialized on first access (for scatter-style rules).
  Matrix& grad_buffer(std::size_t id);

  /// Reverse sweep from a 1x1 root. Callable once per tape.
  Gradients backward(Var root);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    bool has_grad = false;
    const Parameter* param = nullptr;
    Backward backward;
  };
  std::deque<Node> nodes_;
  bool consumed_ = false;
};

// ---- operations ------------------------------------------------------------

inline constexpr double kEps = 1e-12;

Var matmul(Var a, Var b);
Var spmm(const SpVar& a, Var x);
Var add(Var a, Var b);
Var sub(Var a, Var b);
/// x (n x c) + row (1 x c) broadcast over rows.
Var add_row(Var x, Var row);
Var add_scalar(Var x, double c);
Var hadamard(Var a, Var b);
Var scale(Var x, double c);
Var transpose(Var x);
/// Mean over rows: n x c -> 1 x c.
Var row_mean(Var x);
/// Sum across columns: n x c -> n x 1.
Var row_sum(Var x);
Var sum(Var x);
Var mean(Var x);
Var concat_rows(Var a, Var b);
Var elu(Var x);
/// Parametric ReLU with a single learnable slope (1 x 1).
Var prelu(Var x, Var slope);
Var relu(Var x);
Var sigmoid(Var x);
Var tanh(Var x);
Var exp(Var x);
/// log(x + 1e-12).
Var log(Var x);
/// max(x, 0)^gamma.
Var pow(Var x, double gamma);
Var softmax_rows(Var x);
/// x_i / (|x_i| + 1e-12) per row.
Var l2_normalize_rows(Var x);
Var gather_rows(Var x, std::span<const std::size_t> ids);
/// out (n x c), out[ids[k]] += x[k].
Var scatter_rows(Var x, std::span<const std::size_t> ids, std::size_t n);
/// x * mask elementwise with a constant mask; see dropout_mask.
Var dropout(Var x, const Matrix& mask);
/// Inverted-dropout keep mask: 0 with probability p, 1/(1-p) otherwise.
Matrix dropout_mask(Eigen::Index rows, Eigen::Index cols, double p, Rng& rng);
/// Differentiable D^-1/2 (A [+I]) D^-1/2 over the plan's input pattern.
SpVar sym_normalize(const NormalizePlanPtr& plan, Var values);

/// Mean over rows of -log softmax(logits)[target], computed via log-sum-exp.
Var cross_entropy(Var logits, std::span<const int> targets);
/// Mean binary cross-entropy of sigmoid(logits) against targets in [0, 1].
Var bce_with_logits(Var logits, const Matrix& targets);

}  // namespace uniprompt::ad
