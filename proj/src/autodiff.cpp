#include "uniprompt/autodiff.hpp"

#include <algorithm>
#include <cmath>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace uniprompt::ad {

namespace {

#if defined(__GLIBC__)
// Tapes allocate and free many N x d buffers per epoch; keep them off mmap.
const bool kAllocatorTuned = [] {
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 256 << 20);
  return true;
}();
#endif

void same_tape(Var a, Var b) {
  if (&a.tape() != &b.tape()) throw ValidationError("autodiff: operands recorded on different tapes");
}

void same_shape(Var a, Var b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ValidationError(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                          std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                          std::to_string(b.cols()) + ")");
}

template <class F>
Var unary(Var x, Matrix value, F&& dfdx_times_g) {
  const std::size_t xi = x.id();
  return x.tape().record(std::move(value), {x}, [xi, f = std::forward<F>(dfdx_times_g)](Tape& t, std::size_t self) {
    t.accumulate(xi, f(t.value(xi), t.value(self), t.grad(self)));
  });
}

}  // namespace

const Matrix& Var::value() const { return tape_->value(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

double Var::scalar() const {
  const Matrix& v = value();
  if (v.rows() != 1 || v.cols() != 1) throw ValidationError("autodiff: value is not scalar");
  return v(0, 0);
}

const Matrix& Gradients::of(const Parameter& p) const {
  if (auto it = grads_.find(&p); it != grads_.end()) return it->second;
  auto& z = zeros_[&p];
  if (z.rows() != p.value.rows() || z.cols() != p.value.cols()) z = Matrix::Zero(p.value.rows(), p.value.cols());
  return z;
}

void Gradients::accumulate(const Parameter& p, const Matrix& g) {
  auto [it, inserted] = grads_.try_emplace(&p, g);
  if (!inserted) it->second += g;
}

Var Tape::constant(Matrix value) {
  nodes_.push_back(Node{std::move(value), {}, false, false, nullptr, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::parameter(const Parameter& p) {
  nodes_.push_back(Node{p.value, {}, true, false, &p, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Matrix value, std::initializer_list<Var> parents, Backward backward) {
  bool needs = false;
  for (Var p : parents) {
    if (&p.tape() != this) throw ValidationError("autodiff: operand recorded on a different tape");
    needs = needs || p.requires_grad();
  }
  nodes_.push_back(Node{std::move(value), {}, needs, false, nullptr, needs ? std::move(backward) : Backward{}});
  return Var(this, nodes_.size() - 1);
}

Matrix& Tape::grad_buffer(std::size_t id) {
  Node& node = nodes_[id];
  if (!node.has_grad) {
    node.grad = Matrix::Zero(node.value.rows(), node.value.cols());
    node.has_grad = true;
  }
  return node.grad;
}

Gradients Tape::backward(Var root) {
  if (&root.tape() != this) throw ValidationError("backward: root belongs to another tape");
  if (root.rows() != 1 || root.cols() != 1) throw ValidationError("backward: non-scalar root");
  if (consumed_) throw ValidationError("backward: tape already consumed");
  consumed_ = true;
  Gradients out;
  if (nodes_[root.id()].requires_grad) {
    accumulate(root.id(), Matrix::Ones(1, 1));
    for (std::size_t id = root.id() + 1; id-- > 0;) {
      Node& node = nodes_[id];
      if (node.has_grad && node.backward) node.backward(*this, id);
    }
  }
  for (const Node& node : nodes_) {
    if (!node.param) continue;
    if (node.has_grad)
      out.accumulate(*node.param, node.grad);
    else
      out.accumulate(*node.param, Matrix::Zero(node.value.rows(), node.value.cols()));
  }
  return out;
}

// ---- operations ------------------------------------------------------------

Var matmul(Var a, Var b) {
  same_tape(a, b);
  if (a.cols() != b.rows())
    throw ValidationError("matmul: shape mismatch (" + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                          " * " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()) + ")");
  Matrix v = a.value() * b.value();
  const auto ai = a.id(), bi = b.id();
  return a.tape().record(std::move(v), {a, b}, [ai, bi](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    if (t.requires_grad(ai)) t.accumulate(ai, g * t.value(bi).transpose());
    if (t.requires_grad(bi)) t.accumulate(bi, t.value(ai).transpose() * g);
  });
}

Var spmm(const SpVar& a, Var x) {
  same_tape(a.values, x);
  const Pattern& p = *a.pattern;
  if (static_cast<std::size_t>(a.values.rows()) != p.nnz() || a.values.cols() != 1)
    throw ValidationError("spmm: value vector does not match pattern");
  if (static_cast<std::size_t>(x.rows()) != p.n) throw ValidationError("spmm: shape mismatch");
  Matrix y;
  spmm(p, std::span<const double>(a.values.value().data(), p.nnz()), x.value(), y);
  const auto vi = a.values.id(), xi = x.id();
  return x.tape().record(std::move(y), {a.values, x}, [pat = a.pattern, vi, xi](Tape& t, std::size_t self) {
    const Pattern& p = *pat;
    const Matrix& g = t.grad(self);
    const Matrix& vals = t.value(vi);
    const Matrix& xv = t.value(xi);
    const auto f = static_cast<std::size_t>(g.cols());
    if (t.requires_grad(xi)) {
      double* gx = t.grad_buffer(xi).data();
      for (std::size_t i = 0; i < p.n; ++i) {
        const double* __restrict gi = g.data() + i * f;
        for (std::size_t e = p.offsets[i]; e < p.offsets[i + 1]; ++e) {
          const double v = vals(static_cast<Eigen::Index>(e), 0);
          double* __restrict dst = gx + p.cols[e] * f;
          for (std::size_t c = 0; c < f; ++c) dst[c] += v * gi[c];
        }
      }
    }
    if (t.requires_grad(vi)) {
      double* gv = t.grad_buffer(vi).data();
      for (std::size_t i = 0; i < p.n; ++i) {
        const double* __restrict gi = g.data() + i * f;
        for (std::size_t e = p.offsets[i]; e < p.offsets[i + 1]; ++e) {
          const double* xj = xv.data() + p.cols[e] * f;
          double acc = 0.0;
          for (std::size_t c = 0; c < f; ++c) acc += gi[c] * xj[c];
          gv[e] += acc;
        }
      }
    }
  });
}

Var add(Var a, Var b) {
  same_tape(a, b);
  same_shape(a, b, "add");
  const auto ai = a.id(), bi = b.id();
  return a.tape().record(a.value() + b.value(), {a, b}, [ai, bi](Tape& t, std::size_t self) {
    t.accumulate(ai, t.grad(self));
    t.accumulate(bi, t.grad(self));
  });
}

Var sub(Var a, Var b) {
  same_tape(a, b);
  same_shape(a, b, "sub");
  const auto ai = a.id(), bi = b.id();
  return a.tape().record(a.value() - b.value(), {a, b}, [ai, bi](Tape& t, std::size_t self) {
    t.accumulate(ai, t.grad(self));
    t.accumulate(bi, -t.grad(self));
  });
}

Var add_row(Var x, Var row) {
  same_tape(x, row);
  if (row.rows() != 1 || row.cols() != x.cols()) throw ValidationError("add_row: shape mismatch");
  Matrix v = x.value().rowwise() + row.value().row(0);
  const auto xi = x.id(), ri = row.id();
  return x.tape().record(std::move(v), {x, row}, [xi, ri](Tape& t, std::size_t self) {
    t.accumulate(xi, t.grad(self));
    t.accumulate(ri, t.grad(self).colwise().sum());
  });
}

Var add_scalar(Var x, double c) {
  return unary(x, (x.value().array() + c).matrix(),
               [](const Matrix&, const Matrix&, const Matrix& g) -> Matrix { return g; });
}

Var hadamard(Var a, Var b) {
  same_tape(a, b);
  same_shape(a, b, "hadamard");
  const auto ai = a.id(), bi = b.id();
  return a.tape().record(a.value().cwiseProduct(b.value()), {a, b}, [ai, bi](Tape& t, std::size_t self) {
    if (t.requires_grad(ai)) t.accumulate(ai, t.grad(self).cwiseProduct(t.value(bi)));
    if (t.requires_grad(bi)) t.accumulate(bi, t.grad(self).cwiseProduct(t.value(ai)));
  });
}

Var scale(Var x, double c) {
  return unary(x, x.value() * c, [c](const Matrix&, const Matrix&, const Matrix& g) -> Matrix { return g * c; });
}

Var transpose(Var x) {
  return unary(x, x.value().transpose(),
               [](const Matrix&, const Matrix&, const Matrix& g) -> Matrix { return g.transpose(); });
}

Var row_mean(Var x) {
  if (x.rows() == 0) throw ValidationError("row_mean: empty input");
  const double n = static_cast<double>(x.rows());
  return unary(x, x.value().colwise().mean(), [n](const Matrix& xv, const Matrix&, const Matrix& g) -> Matrix {
    return (g / n).replicate(xv.rows(), 1);
  });
}

Var row_sum(Var x) {
  return unary(x, x.value().rowwise().sum(), [](const Matrix& xv, const Matrix&, const Matrix& g) -> Matrix {
    return g.replicate(1, xv.cols());
  });
}

Var sum(Var x) {
  Matrix v(1, 1);
  v(0, 0) = x.value().sum();
  return unary(x, std::move(v), [](const Matrix& xv, const Matrix&, const Matrix& g) -> Matrix {
    return Matrix::Constant(xv.rows(), xv.cols(), g(0, 0));
  });
}

Var mean(Var x) {
  if (x.value().size() == 0) throw ValidationError("mean: empty input");
  const double n = static_cast<double>(x.value().size());
  Matrix v(1, 1);
  v(0, 0) = x.value().sum() / n;
  return unary(x, std::move(v), [n](const Matrix& xv, const Matrix&, const Matrix& g) -> Matrix {
    return Matrix::Constant(xv.rows(), xv.cols(), g(0, 0) / n);
  });
}

Var concat_rows(Var a, Var b) {
  same_tape(a, b);
  if (a.cols() != b.cols()) throw ValidationError("concat_rows: column mismatch");
  Matrix v(a.rows() + b.rows(), a.cols());
  v.topRows(a.rows()) = a.value();
  v.bottomRows(b.rows()) = b.value();
  const auto ai = a.id(), bi = b.id();
  const auto ar = a.rows(), br = b.rows();
  return a.tape().record(std::move(v), {a, b}, [ai, bi, ar, br](Tape& t, std::size_t self) {
    t.accumulate(ai, t.grad(self).topRows(ar));
    t.accumulate(bi, t.grad(self).bottomRows(br));
  });
}

Var elu(Var x) {
  Matrix v = x.value().unaryExpr([](double a) { return a > 0.0 ? a : std::expm1(a); });
  return unary(x, std::move(v), [](const Matrix& xv, const Matrix&, const Matrix& g) -> Matrix {
    return g.cwiseProduct(xv.unaryExpr([](double a) { return a > 0.0 ? 1.0 : std::exp(a); }));
  });
}

Var prelu(Var x, Var slope) {
  same_tape(x, slope);
  if (slope.rows() != 1 || slope.cols() != 1) throw ValidationError("prelu: slope must be 1x1");
  const double a = slope.value()(0, 0);
  Matrix v = x.value().unaryExpr([a](double z) { return z > 0.0 ? z : a * z; });
  const auto xi = x.id(), si = slope.id();
  return x.tape().record(std::move(v), {x, slope}, [xi, si](Tape& t, std::size_t self) {
    const Matrix& xv = t.value(xi);
    const Matrix& g = t.grad(self);
    const double a = t.value(si)(0, 0);
    if (t.requires_grad(xi)) t.accumulate(xi, g.cwiseProduct(xv.unaryExpr([a](double z) { return z > 0.0 ? 1.0 : a; })));
    if (t.requires_grad(si)) {
      Matrix gs(1, 1);
      gs(0, 0) = g.cwiseProduct(xv.unaryExpr([](double z) { return z > 0.0 ? 0.0 : z; })).sum();
      t.accumulate(si, gs);
    }
  });
}

Var relu(Var x) {
  return unary(x, x.value().cwiseMax(0.0), [](const Matrix& xv, const Matrix&, const Matrix& g) -> Matrix {
    return g.cwiseProduct(xv.unaryExpr([](double a) { return a > 0.0 ? 1.0 : 0.0; }));
  });
}

namespace {
double stable_sigmoid(double a) {
  if (a >= 0.0) return 1.0 / (1.0 + std::exp(-a));
  const double e = std::exp(a);
  return e / (1.0 + e);
}
}  // namespace

Var sigmoid(Var x) {
  return unary(x, x.value().unaryExpr(&stable_sigmoid), [](const Matrix&, const Matrix& y, const Matrix& g) -> Matrix {
    return g.cwiseProduct(y.unaryExpr([](double s) { return s * (1.0 - s); }));
  });
}

Var tanh(Var x) {
  return unary(x, x.value().array().tanh().matrix(), [](const Matrix&, const Matrix& y, const Matrix& g) -> Matrix {
    return g.cwiseProduct(y.unaryExpr([](double s) { return 1.0 - s * s; }));
  });
}

Var exp(Var x) {
  return unary(x, x.value().array().exp().matrix(),
               [](const Matrix&, const Matrix& y, const Matrix& g) -> Matrix { return g.cwiseProduct(y); });
}

Var log(Var x) {
  return unary(x, (x.value().array() + kEps).log().matrix(),
               [](const Matrix& xv, const Matrix&, const Matrix& g) -> Matrix {
                 return g.cwiseQuotient((xv.array() + kEps).matrix());
               });
}

Var pow(Var x, double gamma) {
  Matrix v = x.value().unaryExpr([gamma](double a) { return std::pow(std::max(a, 0.0), gamma); });
  return unary(x, std::move(v), [gamma](const Matrix& xv, const Matrix&, const Matrix& g) -> Matrix {
    return g.cwiseProduct(xv.unaryExpr([gamma](double a) {
      return a > 0.0 ? gamma * std::pow(a, gamma - 1.0) : (gamma == 1.0 ? 1.0 : 0.0);
    }));
  });
}

Var softmax_rows(Var x) {
  Matrix v = x.value();
  for (Eigen::Index i = 0; i < v.rows(); ++i) {
    auto r = v.row(i);
    r.array() -= r.maxCoeff();
    r = r.array().exp().matrix();
    r /= r.sum();
  }
  return unary(x, std::move(v), [](const Matrix&, const Matrix& s, const Matrix& g) -> Matrix {
    Matrix gs = g.cwiseProduct(s);
    Eigen::VectorXd dots = gs.rowwise().sum();
    return gs - (s.array().colwise() * dots.array()).matrix();
  });
}

Var l2_normalize_rows(Var x) {
  const Matrix& xv = x.value();
  Eigen::VectorXd norms = xv.rowwise().norm();
  Matrix v = (xv.array().colwise() / (norms.array() + kEps)).matrix();
  return unary(x, std::move(v), [norms](const Matrix& xv, const Matrix&, const Matrix& g) -> Matrix {
    Matrix out(xv.rows(), xv.cols());
    for (Eigen::Index i = 0; i < xv.rows(); ++i) {
      const double n = norms(i);
      const double m = n + kEps;
      out.row(i) = g.row(i) / m;
      if (n > 0.0) out.row(i) -= (g.row(i).dot(xv.row(i)) / (m * m * n)) * xv.row(i);
    }
    return out;
  });
}

Var gather_rows(Var x, std::span<const std::size_t> ids) {
  Matrix v(static_cast<Eigen::Index>(ids.size()), x.cols());
  for (std::size_t k = 0; k < ids.size(); ++k) {
    if (ids[k] >= static_cast<std::size_t>(x.rows())) throw ValidationError("gather_rows: index out of range");
    v.row(static_cast<Eigen::Index>(k)) = x.value().row(static_cast<Eigen::Index>(ids[k]));
  }
  const auto xi = x.id();
  std::vector<std::size_t> idx(ids.begin(), ids.end());
  return x.tape().record(std::move(v), {x}, [xi, idx = std::move(idx)](Tape& t, std::size_t self) {
    Matrix& gx = t.grad_buffer(xi);
    const Matrix& g = t.grad(self);
    for (std::size_t k = 0; k < idx.size(); ++k)
      gx.row(static_cast<Eigen::Index>(idx[k])) += g.row(static_cast<Eigen::Index>(k));
  });
}

Var scatter_rows(Var x, std::span<const std::size_t> ids, std::size_t n) {
  if (ids.size() != static_cast<std::size_t>(x.rows())) throw ValidationError("scatter_rows: index count mismatch");
  Matrix v = Matrix::Zero(static_cast<Eigen::Index>(n), x.cols());
  for (std::size_t k = 0; k < ids.size(); ++k) {
    if (ids[k] >= n) throw ValidationError("scatter_rows: index out of range");
    v.row(static_cast<Eigen::Index>(ids[k])) += x.value().row(static_cast<Eigen::Index>(k));
  }
  const auto xi = x.id();
  std::vector<std::size_t> idx(ids.begin(), ids.end());
  return x.tape().record(std::move(v), {x}, [xi, idx = std::move(idx)](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    Matrix gx(static_cast<Eigen::Index>(idx.size()), g.cols());
    for (std::size_t k = 0; k < idx.size(); ++k)
      gx.row(static_cast<Eigen::Index>(k)) = g.row(static_cast<Eigen::Index>(idx[k]));
    t.accumulate(xi, gx);
  });
}

Var dropout(Var x, const Matrix& mask) {
  if (mask.rows() != x.rows() || mask.cols() != x.cols()) throw ValidationError("dropout: mask shape mismatch");
  return unary(x, x.value().cwiseProduct(mask), [mask](const Matrix&, const Matrix&, const Matrix& g) -> Matrix {
    return g.cwiseProduct(mask);
  });
}

Matrix dropout_mask(Eigen::Index rows, Eigen::Index cols, double p, Rng& rng) {
  if (!(p >= 0.0 && p < 1.0)) throw ValidationError("dropout_mask: p must be in [0, 1)");
  Matrix m(rows, cols);
  const double keep = 1.0 / (1.0 - p);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = rng.uniform() < p ? 0.0 : keep;
  return m;
}

SpVar sym_normalize(const NormalizePlanPtr& plan, Var values) {
  const Pattern& in = *plan->input;
  if (static_cast<std::size_t>(values.rows()) != in.nnz() || values.cols() != 1)
    throw ValidationError("sym_normalize: value vector does not match pattern");
  const std::size_t n = in.n;
  Matrix out(static_cast<Eigen::Index>(plan->output->nnz()), 1);
  std::vector<double> r(n);
  normalize_values(*plan, std::span<const double>(values.value().data(), in.nnz()),
                   std::span<double>(out.data(), plan->output->nnz()), r);
  for (std::size_t i = 0; i < in.nnz(); ++i)
    if (!std::isfinite(values.value()(static_cast<Eigen::Index>(i), 0)))
      throw RuntimeAbort("sym_normalize: non-finite adjacency value");
  const auto vi = values.id();
  Var result = values.tape().record(std::move(out), {values}, [plan, vi, r = std::move(r)](Tape& t, std::size_t self) {
    const Pattern& in = *plan->input;
    const Matrix& g = t.grad(self);
    const Matrix& a = t.value(vi);
    const std::size_t n = in.n;
    std::vector<double> d_r(n, 0.0);
    Matrix ga(static_cast<Eigen::Index>(in.nnz()), 1);
    for (std::size_t e = 0; e < in.nnz(); ++e) {
      const std::size_t i = plan->input_rows[e], j = in.cols[e];
      const double ge = g(static_cast<Eigen::Index>(plan->input_to_output[e]), 0);
      const double ae = a(static_cast<Eigen::Index>(e), 0);
      ga(static_cast<Eigen::Index>(e), 0) = ge * r[i] * r[j];
      d_r[i] += ge * ae * r[j];
      d_r[j] += ge * ae * r[i];
    }
    if (plan->self_loops)
      for (std::size_t i = 0; i < n; ++i) d_r[i] += 2.0 * g(static_cast<Eigen::Index>(plan->diagonal[i]), 0) * r[i];
    // r = d^-1/2, dr/dd = -r^3 / 2, dd_i/da_e = 1 for entries in row i.
    for (std::size_t e = 0; e < in.nnz(); ++e) {
      const std::size_t i = plan->input_rows[e];
      ga(static_cast<Eigen::Index>(e), 0) += d_r[i] * (-0.5 * r[i] * r[i] * r[i]);
    }
    t.accumulate(vi, ga);
  });
  return SpVar{plan->output, result};
}

Var cross_entropy(Var logits, std::span<const int> targets) {
  const Matrix& z = logits.value();
  if (z.rows() == 0) throw ValidationError("cross_entropy: empty batch");
  if (static_cast<std::size_t>(z.rows()) != targets.size()) throw ValidationError("cross_entropy: target count mismatch");
  for (int y : targets)
    if (y < 0 || y >= z.cols()) throw ValidationError("cross_entropy: target out of range");
  Matrix probs(z.rows(), z.cols());
  double total = 0.0;
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const double m = z.row(i).maxCoeff();
    const double lse = m + std::log((z.row(i).array() - m).exp().sum());
    total += lse - z(i, targets[static_cast<std::size_t>(i)]);
    probs.row(i) = (z.row(i).array() - lse).exp().matrix();
  }
  const double n = static_cast<double>(z.rows());
  Matrix v(1, 1);
  v(0, 0) = total / n;
  std::vector<int> ys(targets.begin(), targets.end());
  const auto li = logits.id();
  return logits.tape().record(std::move(v), {logits}, [li, n, probs = std::move(probs), ys = std::move(ys)](Tape& t, std::size_t self) {
    Matrix g = probs;
    for (std::size_t i = 0; i < ys.size(); ++i) g(static_cast<Eigen::Index>(i), ys[i]) -= 1.0;
    t.accumulate(li, g * (t.grad(self)(0, 0) / n));
  });
}

Var bce_with_logits(Var logits, const Matrix& targets) {
  const Matrix& z = logits.value();
  if (z.size() == 0) throw ValidationError("bce_with_logits: empty batch");
  if (targets.rows() != z.rows() || targets.cols() != z.cols()) throw ValidationError("bce_with_logits: shape mismatch");
  double total = 0.0;
  for (Eigen::Index i = 0; i < z.rows(); ++i)
    for (Eigen::Index j = 0; j < z.cols(); ++j) {
      const double a = z(i, j);
      total += std::max(a, 0.0) - a * targets(i, j) + std::log1p(std::exp(-std::abs(a)));
    }
  const double n = static_cast<double>(z.size());
  Matrix v(1, 1);
  v(0, 0) = total / n;
  const auto li = logits.id();
  return logits.tape().record(std::move(v), {logits}, [li, n, targets](Tape& t, std::size_t self) {
    const Matrix& zv = t.value(li);
    Matrix g = zv.unaryExpr(&stable_sigmoid) - targets;
    t.accumulate(li, g * (t.grad(self)(0, 0) / n));
  });
}

}  // namespace uniprompt::ad
