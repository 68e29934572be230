#pragma once

#include "uniprompt/common.hpp"
#include "uniprompt/sparse.hpp"

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace uniprompt {

/// Undirected node-attributed graph. Immutable after construction.
class Graph {
 public:
  Graph() = default;
  /// Validates every invariant: symmetric nonnegative adjacency without self
  /// loops, finite features with one row per node, labels in [0, num_classes).
  Graph(SparseAdj adjacency, Matrix features, std::optional<std::vector<int>> labels, std::size_t num_classes,
        std::string name = {});

  /// Builds from directed (src, dst) pairs: drops self loops, symmetrizes by union.
  static Graph from_edges(std::size_t num_nodes, std::span<const Edge> edges, Matrix features,
                          std::optional<std::vector<int>> labels, std::size_t num_classes, std::string name = {});

  std::size_t num_nodes() const { return adjacency_.dim(); }
  std::size_t num_features() const { return static_cast<std::size_t>(features_.cols()); }
  std::size_t num_classes() const { return num_classes_; }
  /// Each {i, j} pair counted once.
  std::size_t num_undirected_edges() const;
  const SparseAdj& adjacency() const { return adjacency_; }
  const Matrix& features() const { return features_; }
  bool has_labels() const { return labels_.has_value(); }
  const std::vector<int>& labels() const;
  const std::string& name() const { return name_; }

  Graph with_features(Matrix features) const;

 private:
  SparseAdj adjacency_;
  Matrix features_;
  std::optional<std::vector<int>> labels_;
  std::size_t num_classes_ = 0;
  std::string name_;
};

/// Reads meta.json, edges.csv, features.csv and labels.csv from a directory.
Graph load_graph_bundle(const std::filesystem::path& dir);
/// Writes the same four files. Edges are written once per stored direction.
void save_graph_bundle(const Graph& graph, const std::filesystem::path& dir);

/// x.y / (|x| |y|), or 0 when either vector has zero norm.
double cosine_similarity(std::span<const double> x, std::span<const double> y);

enum class KnnSymmetrize { union_max, intersection, mean };

struct SampledKnn {
  std::size_t candidates = 1000;
  std::uint64_t seed = 0;
};

struct KnnOptions {
  std::size_t k = 10;
  std::optional<SampledKnn> sampled;
  KnnSymmetrize symmetrize = KnnSymmetrize::union_max;
};

/// Row-wise top-k cosine neighbours before symmetrization: exactly
/// min(k, candidates) entries per row, valued by similarity.
SparseAdj knn_directed(const Matrix& features, const KnnOptions& options);

/// Initial prompt topology: top-k cosine neighbours per node (self excluded,
/// ties to the smaller index), symmetrized according to options.symmetrize.
SparseAdj knn_prompt_init(const Matrix& features, const KnnOptions& options);

/// Fraction of undirected edges joining same-label endpoints; nullopt for an edgeless graph.
std::optional<double> edge_homophily(const Graph& graph);
/// Same measure for an arbitrary adjacency against a label vector.
std::optional<double> edge_homophily(const SparseAdj& adjacency, std::span<const int> labels);

/// X + eps, eps ~ N(0, sigma^2) i.i.d., deterministic in seed.
Matrix add_gaussian_noise(const Matrix& features, double sigma, std::uint64_t seed);

}  // namespace uniprompt
