#include "uniprompt/graph.hpp"

#include "uniprompt/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace uniprompt {

namespace fs = std::filesystem;

Graph::Graph(SparseAdj adjacency, Matrix features, std::optional<std::vector<int>> labels, std::size_t num_classes,
             std::string name)
    : adjacency_(std::move(adjacency)),
      features_(std::move(features)),
      labels_(std::move(labels)),
      num_classes_(num_classes),
      name_(std::move(name)) {
  const std::size_t n = adjacency_.dim();
  require(static_cast<std::size_t>(features_.rows()) == n, "graph: feature row count mismatch");
  require(features_.allFinite(), "graph: features contain NaN or Inf");
  for (const auto& e : adjacency_.entries()) {
    require(e.src != e.dst, "graph: self loops are not stored");
    require(e.weight >= 0.0, "graph: negative edge weight");
  }
  require(adjacency_.is_symmetric(), "graph: adjacency must be symmetric");
  if (labels_) {
    require(labels_->size() == n, "graph: label count mismatch");
    for (int y : *labels_) require(y >= 0 && static_cast<std::size_t>(y) < num_classes_, "graph: label out of range");
  }
}

Graph Graph::from_edges(std::size_t num_nodes, std::span<const Edge> edges, Matrix features,
                        std::optional<std::vector<int>> labels, std::size_t num_classes, std::string name) {
  std::vector<Edge> entries;
  entries.reserve(edges.size() * 2);
  for (const auto& e : edges) {
    require(e.src < num_nodes && e.dst < num_nodes, "graph: edge index out of range");
    if (e.src == e.dst) continue;
    entries.push_back({e.src, e.dst, e.weight});
    entries.push_back({e.dst, e.src, e.weight});
  }
  return Graph(SparseAdj::from_entries(num_nodes, std::move(entries), Merge::max), std::move(features),
               std::move(labels), num_classes, std::move(name));
}

std::size_t Graph::num_undirected_edges() const {
  std::size_t count = 0;
  for (const auto& e : adjacency_.entries())
    if (e.src < e.dst) ++count;
  return count;
}

const std::vector<int>& Graph::labels() const {
  if (!labels_) throw ValidationError("graph: labels missing");
  return *labels_;
}

Graph Graph::with_features(Matrix features) const {
  return Graph(adjacency_, std::move(features), labels_, num_classes_, name_);
}

namespace {

std::ifstream open_input(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("missing file: " + path.string());
  return in;
}

double parse_double(const std::string& cell, const fs::path& file, std::size_t line) {
  const char* begin = cell.c_str();
  while (*begin == ' ' || *begin == '\t') ++begin;
  char* end = nullptr;
  double v = std::strtod(begin, &end);
  while (end && (*end == ' ' || *end == '\t' || *end == '\r')) ++end;
  if (end == begin || (end && *end != '\0'))
    throw ValidationError("non-numeric cell '" + cell + "' in " + file.filename().string() + " line " +
                          std::to_string(line));
  return v;
}

long long parse_integer(const std::string& cell, const fs::path& file, std::size_t line) {
  const char* begin = cell.c_str();
  while (*begin == ' ' || *begin == '\t') ++begin;
  char* end = nullptr;
  long long v = std::strtoll(begin, &end, 10);
  while (end && (*end == ' ' || *end == '\t' || *end == '\r')) ++end;
  if (end == begin || (end && *end != '\0'))
    throw ValidationError("non-numeric cell '" + cell + "' in " + file.filename().string() + " line " +
                          std::to_string(line));
  return v;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

bool blank(const std::string& line) {
  return line.find_first_not_of(" \t\r") == std::string::npos;
}

}  // namespace

Graph load_graph_bundle(const fs::path& dir) {
  nlohmann::json meta;
  {
    auto in = open_input(dir / "meta.json");
    try {
      in >> meta;
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(std::string("meta.json: ") + e.what());
    }
  }
  std::size_t n = 0, f = 0, c = 0;
  std::string name;
  try {
    n = meta.at("num_nodes").get<std::size_t>();
    f = meta.at("num_features").get<std::size_t>();
    c = meta.at("num_classes").get<std::size_t>();
    name = meta.value("name", dir.filename().string());
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("meta.json: ") + e.what());
  }

  std::vector<Edge> edges;
  {
    const auto path = dir / "edges.csv";
    auto in = open_input(path);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (blank(line)) continue;
      if (lineno == 1 && line.rfind("src", 0) == 0) continue;
      auto cells = split_csv(line);
      if (cells.size() < 2) throw ValidationError("edges.csv line " + std::to_string(lineno) + ": expected src,dst");
      auto s = parse_integer(cells[0], path, lineno);
      auto d = parse_integer(cells[1], path, lineno);
      if (s < 0 || d < 0 || static_cast<std::size_t>(s) >= n || static_cast<std::size_t>(d) >= n)
        throw ValidationError("edges.csv line " + std::to_string(lineno) + ": index out of range");
      edges.push_back({static_cast<std::size_t>(s), static_cast<std::size_t>(d), 1.0});
    }
  }

  Matrix features;
  {
    const auto path = dir / "features.csv";
    auto in = open_input(path);
    std::vector<std::vector<double>> rows;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (blank(line)) continue;
      auto cells = split_csv(line);
      if (cells.size() != f)
        throw ValidationError("features.csv line " + std::to_string(lineno) + ": expected " + std::to_string(f) +
                              " columns, found " + std::to_string(cells.size()));
      std::vector<double> row(f);
      for (std::size_t j = 0; j < f; ++j) row[j] = parse_double(cells[j], path, lineno);
      rows.push_back(std::move(row));
    }
    if (rows.size() != n)
      throw ValidationError("features.csv: row count mismatch (" + std::to_string(rows.size()) + " rows, meta says " +
                            std::to_string(n) + ")");
    features.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(f));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < f; ++j) features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  }

  std::optional<std::vector<int>> labels;
  {
    const auto path = dir / "labels.csv";
    auto in = open_input(path);
    std::vector<int> ys;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (blank(line)) continue;
      auto y = parse_integer(line, path, lineno);
      if (y < 0 || static_cast<std::size_t>(y) >= c)
        throw ValidationError("labels.csv line " + std::to_string(lineno) + ": label out of range");
      ys.push_back(static_cast<int>(y));
    }
    if (ys.size() != n)
      throw ValidationError("labels.csv: row count mismatch (" + std::to_string(ys.size()) + " rows, meta says " +
                            std::to_string(n) + ")");
    labels = std::move(ys);
  }
  return Graph::from_edges(n, edges, std::move(features), std::move(labels), c, name);
}

void save_graph_bundle(const Graph& graph, const fs::path& dir) {
  fs::create_directories(dir);
  nlohmann::ordered_json meta;
  meta["num_nodes"] = graph.num_nodes();
  meta["num_features"] = graph.num_features();
  meta["num_classes"] = graph.num_classes();
  meta["name"] = graph.name();
  std::ofstream(dir / "meta.json") << meta.dump(2) << '\n';

  {
    std::ofstream out(dir / "edges.csv");
    out << "src,dst\n";
    for (const auto& e : graph.adjacency().entries()) out << e.src << ',' << e.dst << '\n';
  }
  {
    std::ofstream out(dir / "features.csv");
    char buf[64];
    const auto& x = graph.features();
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      for (Eigen::Index j = 0; j < x.cols(); ++j) {
        std::snprintf(buf, sizeof buf, "%.17g", x(i, j));
        if (j) out << ',';
        out << buf;
      }
      out << '\n';
    }
  }
  {
    std::ofstream out(dir / "labels.csv");
    if (graph.has_labels())
      for (int y : graph.labels()) out << y << '\n';
  }
}

double cosine_similarity(std::span<const double> x, std::span<const double> y) {
  require(x.size() == y.size(), "cosine_similarity: length mismatch");
  double dot = 0.0, nx = 0.0, ny = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    dot += x[i] * y[i];
    nx += x[i] * x[i];
    ny += y[i] * y[i];
  }
  if (nx == 0.0 || ny == 0.0) return 0.0;
  return dot / (std::sqrt(nx) * std::sqrt(ny));
}

SparseAdj knn_directed(const Matrix& features, const KnnOptions& options) {
  const std::size_t n = static_cast<std::size_t>(features.rows());
  require(n > 0 && features.cols() > 0, "knn: empty feature matrix");
  const std::size_t k = options.k;

  std::vector<std::size_t> candidates;
  if (options.sampled) {
    require(options.sampled->candidates >= 1, "knn: sample size must be positive");
    require(k >= 1 && k <= options.sampled->candidates, "knn: k out of range");
    Rng rng(options.sampled->seed, "knn-sample");
    candidates = rng.sample_without_replacement(n, options.sampled->candidates);
    std::sort(candidates.begin(), candidates.end());
  } else {
    require(k >= 1 && k + 1 <= n, "knn: k out of range");
    candidates.resize(n);
    for (std::size_t j = 0; j < n; ++j) candidates[j] = j;
  }

  Matrix unit = features;
  for (Eigen::Index i = 0; i < unit.rows(); ++i) {
    const double norm = unit.row(i).norm();
    if (norm > 0.0)
      unit.row(i) /= norm;
    else
      unit.row(i).setZero();
  }
  Matrix cand(static_cast<Eigen::Index>(candidates.size()), unit.cols());
  for (std::size_t c = 0; c < candidates.size(); ++c)
    cand.row(static_cast<Eigen::Index>(c)) = unit.row(static_cast<Eigen::Index>(candidates[c]));

  std::vector<Edge> entries;
  entries.reserve(n * k);
  constexpr Eigen::Index kBlock = 128;
  std::vector<std::pair<double, std::size_t>> scored;
  for (Eigen::Index r0 = 0; r0 < unit.rows(); r0 += kBlock) {
    const Eigen::Index rows = std::min(kBlock, unit.rows() - r0);
    Matrix sims = unit.middleRows(r0, rows) * cand.transpose();
    for (Eigen::Index r = 0; r < rows; ++r) {
      const std::size_t i = static_cast<std::size_t>(r0 + r);
      scored.clear();
      for (std::size_t c = 0; c < candidates.size(); ++c)
        if (candidates[c] != i) scored.emplace_back(sims(r, static_cast<Eigen::Index>(c)), candidates[c]);
      const std::size_t take = std::min(k, scored.size());
      std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(take), scored.end(),
                        [](const auto& a, const auto& b) { return a.first != b.first ? a.first > b.first : a.second < b.second; });
      for (std::size_t t = 0; t < take; ++t) entries.push_back({i, scored[t].second, scored[t].first});
    }
  }
  return SparseAdj::from_entries(n, std::move(entries), Merge::first);
}

SparseAdj knn_prompt_init(const Matrix& features, const KnnOptions& options) {
  const SparseAdj directed = knn_directed(features, options);
  const std::size_t n = directed.dim();
  std::vector<Edge> entries;
  entries.reserve(directed.nnz() * 2);
  for (const auto& e : directed.entries()) {
    const auto back = directed.pattern().find(e.dst, e.src);
    const bool mutual = back != npos;
    const double other = mutual ? directed.values()[back] : 0.0;
    switch (options.symmetrize) {
      case KnnSymmetrize::union_max:
        entries.push_back({e.src, e.dst, e.weight});
        entries.push_back({e.dst, e.src, e.weight});
        break;
      case KnnSymmetrize::intersection:
        if (mutual) {
          const double v = std::max(e.weight, other);
          entries.push_back({e.src, e.dst, v});
          entries.push_back({e.dst, e.src, v});
        }
        break;
      case KnnSymmetrize::mean: {
        const double v = 0.5 * (e.weight + other);
        entries.push_back({e.src, e.dst, v});
        entries.push_back({e.dst, e.src, v});
        break;
      }
    }
  }
  return SparseAdj::from_entries(n, std::move(entries),
                                 options.symmetrize == KnnSymmetrize::mean ? Merge::first : Merge::max);
}

std::optional<double> edge_homophily(const SparseAdj& adjacency, std::span<const int> labels) {
  require(labels.size() == adjacency.dim(), "edge_homophily: label count mismatch");
  std::size_t total = 0, same = 0;
  for (const auto& e : adjacency.entries()) {
    if (e.src >= e.dst) continue;
    ++total;
    if (labels[e.src] == labels[e.dst]) ++same;
  }
  if (total == 0) return std::nullopt;
  return static_cast<double>(same) / static_cast<double>(total);
}

std::optional<double> edge_homophily(const Graph& graph) {
  if (!graph.has_labels()) throw ValidationError("edge_homophily: missing labels");
  return edge_homophily(graph.adjacency(), graph.labels());
}

Matrix add_gaussian_noise(const Matrix& features, double sigma, std::uint64_t seed) {
  require(sigma >= 0.0, "add_gaussian_noise: negative sigma");
  Matrix out = features;
  if (sigma == 0.0) return out;
  Rng rng(seed, "noise");
  for (Eigen::Index i = 0; i < out.rows(); ++i)
    for (Eigen::Index j = 0; j < out.cols(); ++j) out(i, j) += sigma * rng.normal();
  return out;
}

}  // namespace uniprompt
