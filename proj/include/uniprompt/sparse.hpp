#pragma once

#include "uniprompt/common.hpp"

#include <memory>
#include <span>
#include <vector>

namespace uniprompt {

/// One stored entry of an adjacency matrix.
struct Edge {
  std::size_t src = 0;
  std::size_t dst = 0;
  double weight = 1.0;
  friend bool operator==(const Edge&, const Edge&) = default;
};

/// CSR sparsity structure shared between adjacency matrices with the same support.
struct Pattern {
  std::size_t n = 0;
  std::vector<std::size_t> offsets{0};
  std::vector<std::size_t> cols;

  std::size_t nnz() const { return cols.size(); }
  /// Position of (i, j) in the value array, or npos.
  std::size_t find(std::size_t i, std::size_t j) const;
  /// Row index of every stored entry.
  std::vector<std::size_t> row_of_entries() const;
  void validate() const;
};

using PatternPtr = std::shared_ptr<const Pattern>;

/// How to merge duplicate (src, dst) entries when building from a list.
enum class Merge { max, sum, first };

/// Immutable CSR matrix: a shared pattern plus one value per entry.
class SparseAdj {
 public:
  SparseAdj();
  explicit SparseAdj(std::size_t n);
  SparseAdj(PatternPtr pattern, std::vector<double> values);

  static SparseAdj from_entries(std::size_t n, std::vector<Edge> entries, Merge merge = Merge::max);
  static SparseAdj identity(std::size_t n);

  std::size_t dim() const { return pattern_->n; }
  std::size_t nnz() const { return pattern_->nnz(); }
  const Pattern& pattern() const { return *pattern_; }
  const PatternPtr& pattern_ptr() const { return pattern_; }
  std::span<const double> values() const { return values_; }

  double at(std::size_t i, std::size_t j) const;
  std::vector<Edge> entries() const;
  Matrix to_dense() const;
  bool is_symmetric(double tol = 0.0) const;
  SparseAdj with_values(std::vector<double> values) const;

 private:
  PatternPtr pattern_;
  std::vector<double> values_;
};

/// Union of two patterns with maps from each input's entries into the union.
struct PatternUnion {
  PatternPtr pattern;
  std::vector<std::size_t> from_first;
  std::vector<std::size_t> from_second;
};

PatternUnion union_patterns(const Pattern& a, const Pattern& b);

/// Precomputed layout for D^-1/2 (A [+ I]) D^-1/2 over a fixed input pattern.
struct NormalizePlan {
  PatternPtr input;
  PatternPtr output;
  std::vector<std::size_t> input_to_output;
  std::vector<std::size_t> input_rows;
  std::vector<std::size_t> diagonal;  // output position of (i, i) per row when self loops are added
  bool self_loops = true;
};

using NormalizePlanPtr = std::shared_ptr<const NormalizePlan>;

NormalizePlanPtr make_normalize_plan(PatternPtr input, bool add_self_loops);

/// Forward normalization on raw value arrays. inv_sqrt_degree receives D^-1/2
/// (zero for zero-degree rows). Shared by the sparse and the differentiable paths
/// so both produce identical bits.
void normalize_values(const NormalizePlan& plan, std::span<const double> in, std::span<double> out,
                      std::span<double> inv_sqrt_degree);

/// D^-1/2 (A + I) D^-1/2 when add_self_loops, else D^-1/2 A D^-1/2.
SparseAdj symmetric_normalize(const SparseAdj& adj, bool add_self_loops);

/// y = A x for a pattern with explicit values.
void spmm(const Pattern& pattern, std::span<const double> values, const Matrix& x, Matrix& y);

inline Matrix spmm(const SparseAdj& a, const Matrix& x) {
  Matrix y;
  spmm(a.pattern(), a.values(), x, y);
  return y;
}

}  // namespace uniprompt
