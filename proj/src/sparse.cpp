#include "uniprompt/sparse.hpp"

#include <algorithm>
#include <cmath>

namespace uniprompt {

std::size_t Pattern::find(std::size_t i, std::size_t j) const {
  if (i >= n) return npos;
  auto first = cols.begin() + static_cast<std::ptrdiff_t>(offsets[i]);
  auto last = cols.begin() + static_cast<std::ptrdiff_t>(offsets[i + 1]);
  auto it = std::lower_bound(first, last, j);
  if (it == last || *it != j) return npos;
  return static_cast<std::size_t>(it - cols.begin());
}

std::vector<std::size_t> Pattern::row_of_entries() const {
  std::vector<std::size_t> rows(nnz());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t e = offsets[i]; e < offsets[i + 1]; ++e) rows[e] = i;
  return rows;
}

void Pattern::validate() const {
  require(offsets.size() == n + 1, "pattern: offsets must have n+1 entries");
  require(offsets.front() == 0 && offsets.back() == cols.size(), "pattern: offsets do not cover columns");
  for (std::size_t i = 0; i < n; ++i) {
    require(offsets[i] <= offsets[i + 1], "pattern: offsets not monotone");
    for (std::size_t e = offsets[i]; e < offsets[i + 1]; ++e) {
      require(cols[e] < n, "pattern: column index out of range");
      if (e > offsets[i]) require(cols[e - 1] < cols[e], "pattern: columns not strictly sorted within row");
    }
  }
}

SparseAdj::SparseAdj() : SparseAdj(0) {}

SparseAdj::SparseAdj(std::size_t n) {
  auto p = std::make_shared<Pattern>();
  p->n = n;
  p->offsets.assign(n + 1, 0);
  pattern_ = std::move(p);
}

SparseAdj::SparseAdj(PatternPtr pattern, std::vector<double> values)
    : pattern_(std::move(pattern)), values_(std::move(values)) {
  require(pattern_ != nullptr, "sparse: null pattern");
  require(values_.size() == pattern_->nnz(), "sparse: value count does not match pattern");
  for (double v : values_) require(std::isfinite(v), "sparse: non-finite value");
}

SparseAdj SparseAdj::from_entries(std::size_t n, std::vector<Edge> entries, Merge merge) {
  for (const auto& e : entries) {
    require(e.src < n && e.dst < n, "sparse: index out of range");
    require(std::isfinite(e.weight), "sparse: non-finite weight");
  }
  std::stable_sort(entries.begin(), entries.end(), [](const Edge& a, const Edge& b) {
    return a.src != b.src ? a.src < b.src : a.dst < b.dst;
  });
  auto p = std::make_shared<Pattern>();
  p->n = n;
  p->offsets.assign(n + 1, 0);
  std::vector<double> values;
  for (std::size_t k = 0; k < entries.size(); ++k) {
    const auto& e = entries[k];
    if (!p->cols.empty() && k > 0 && entries[k - 1].src == e.src && entries[k - 1].dst == e.dst) {
      double& v = values.back();
      switch (merge) {
        case Merge::max: v = std::max(v, e.weight); break;
        case Merge::sum: v += e.weight; break;
        case Merge::first: break;
      }
      continue;
    }
    p->cols.push_back(e.dst);
    values.push_back(e.weight);
    ++p->offsets[e.src + 1];
  }
  for (std::size_t i = 0; i < n; ++i) p->offsets[i + 1] += p->offsets[i];
  return SparseAdj(std::move(p), std::move(values));
}

SparseAdj SparseAdj::identity(std::size_t n) {
  std::vector<Edge> entries;
  entries.reserve(n);
  for (std::size_t i = 0; i < n; ++i) entries.push_back({i, i, 1.0});
  return from_entries(n, std::move(entries));
}

double SparseAdj::at(std::size_t i, std::size_t j) const {
  auto e = pattern_->find(i, j);
  return e == npos ? 0.0 : values_[e];
}

std::vector<Edge> SparseAdj::entries() const {
  std::vector<Edge> out;
  out.reserve(nnz());
  const auto& p = *pattern_;
  for (std::size_t i = 0; i < p.n; ++i)
    for (std::size_t e = p.offsets[i]; e < p.offsets[i + 1]; ++e) out.push_back({i, p.cols[e], values_[e]});
  return out;
}

Matrix SparseAdj::to_dense() const {
  Matrix d = Matrix::Zero(static_cast<Eigen::Index>(dim()), static_cast<Eigen::Index>(dim()));
  for (const auto& e : entries()) d(static_cast<Eigen::Index>(e.src), static_cast<Eigen::Index>(e.dst)) = e.weight;
  return d;
}

bool SparseAdj::is_symmetric(double tol) const {
  const auto& p = *pattern_;
  for (std::size_t i = 0; i < p.n; ++i) {
    for (std::size_t e = p.offsets[i]; e < p.offsets[i + 1]; ++e) {
      auto t = p.find(p.cols[e], i);
      if (t == npos || std::abs(values_[t] - values_[e]) > tol) return false;
    }
  }
  return true;
}

SparseAdj SparseAdj::with_values(std::vector<double> values) const { return SparseAdj(pattern_, std::move(values)); }

PatternUnion union_patterns(const Pattern& a, const Pattern& b) {
  require(a.n == b.n, "union: dimension mismatch");
  PatternUnion u;
  auto p = std::make_shared<Pattern>();
  p->n = a.n;
  p->offsets.assign(a.n + 1, 0);
  u.from_first.resize(a.nnz());
  u.from_second.resize(b.nnz());
  for (std::size_t i = 0; i < a.n; ++i) {
    std::size_t ea = a.offsets[i], eb = b.offsets[i];
    const std::size_t la = a.offsets[i + 1], lb = b.offsets[i + 1];
    while (ea < la || eb < lb) {
      const std::size_t pos = p->cols.size();
      if (eb == lb || (ea < la && a.cols[ea] < b.cols[eb])) {
        p->cols.push_back(a.cols[ea]);
        u.from_first[ea++] = pos;
      } else if (ea == la || b.cols[eb] < a.cols[ea]) {
        p->cols.push_back(b.cols[eb]);
        u.from_second[eb++] = pos;
      } else {
        p->cols.push_back(a.cols[ea]);
        u.from_first[ea++] = pos;
        u.from_second[eb++] = pos;
      }
    }
    p->offsets[i + 1] = p->cols.size();
  }
  u.pattern = std::move(p);
  return u;
}

NormalizePlanPtr make_normalize_plan(PatternPtr input, bool add_self_loops) {
  auto plan = std::make_shared<NormalizePlan>();
  plan->self_loops = add_self_loops;
  plan->input_rows = input->row_of_entries();
  if (add_self_loops) {
    Pattern diag;
    diag.n = input->n;
    diag.offsets.resize(input->n + 1);
    diag.cols.resize(input->n);
    for (std::size_t i = 0; i < input->n; ++i) {
      diag.offsets[i] = i;
      diag.cols[i] = i;
    }
    diag.offsets[input->n] = input->n;
    auto u = union_patterns(*input, diag);
    plan->output = u.pattern;
    plan->input_to_output = std::move(u.from_first);
    plan->diagonal = std::move(u.from_second);
  } else {
    plan->output = input;
    plan->input_to_output.resize(input->nnz());
    for (std::size_t e = 0; e < input->nnz(); ++e) plan->input_to_output[e] = e;
  }
  plan->input = std::move(input);
  return plan;
}

void normalize_values(const NormalizePlan& plan, std::span<const double> in, std::span<double> out,
                      std::span<double> inv_sqrt_degree) {
  const Pattern& p = *plan.input;
  const std::size_t n = p.n;
  for (std::size_t i = 0; i < n; ++i) {
    double d = plan.self_loops ? 1.0 : 0.0;
    for (std::size_t e = p.offsets[i]; e < p.offsets[i + 1]; ++e) d += in[e];
    inv_sqrt_degree[i] = d > 0.0 ? 1.0 / std::sqrt(d) : 0.0;
  }
  std::fill(out.begin(), out.end(), 0.0);
  for (std::size_t e = 0; e < p.nnz(); ++e) {
    const double ri = inv_sqrt_degree[plan.input_rows[e]];
    const double rj = inv_sqrt_degree[p.cols[e]];
    out[plan.input_to_output[e]] += ri * in[e] * rj;
  }
  if (plan.self_loops)
    for (std::size_t i = 0; i < n; ++i) out[plan.diagonal[i]] += inv_sqrt_degree[i] * inv_sqrt_degree[i];
}

SparseAdj symmetric_normalize(const SparseAdj& adj, bool add_self_loops) {
  for (double v : adj.values()) require(v >= 0.0, "symmetric_normalize: negative weight");
  auto plan = make_normalize_plan(adj.pattern_ptr(), add_self_loops);
  std::vector<double> out(plan->output->nnz());
  std::vector<double> r(adj.dim());
  normalize_values(*plan, adj.values(), out, r);
  return SparseAdj(plan->output, std::move(out));
}

void spmm(const Pattern& pattern, std::span<const double> values, const Matrix& x, Matrix& y) {
  require(static_cast<std::size_t>(x.rows()) == pattern.n, "spmm: shape mismatch");
  y.setZero(x.rows(), x.cols());
  const auto f = static_cast<std::size_t>(x.cols());
  const double* xs = x.data();
  for (std::size_t i = 0; i < pattern.n; ++i) {
    double* __restrict yi = y.data() + i * f;
    for (std::size_t e = pattern.offsets[i]; e < pattern.offsets[i + 1]; ++e) {
      const double v = values[e];
      const double* __restrict xj = xs + pattern.cols[e] * f;
      for (std::size_t c = 0; c < f; ++c) yi[c] += v * xj[c];
    }
  }
}

}  // namespace uniprompt
