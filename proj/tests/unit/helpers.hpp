#pragma once

#include "uniprompt/graph.hpp"
#include "uniprompt/rng.hpp"

#include <filesystem>
#include <fstream>
#include <string>

namespace test {

using uniprompt::Matrix;

inline Matrix random_matrix(uniprompt::Rng& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

/// Random symmetric 0/1 adjacency without self loops.
inline uniprompt::SparseAdj random_graph(uniprompt::Rng& rng, std::size_t n, double p) {
  std::vector<uniprompt::Edge> edges;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (rng.bernoulli(p)) {
        edges.push_back({i, j, 1.0});
        edges.push_back({j, i, 1.0});
      }
  return uniprompt::SparseAdj::from_entries(n, edges);
}

/// Dense D^-1/2 (A + I) D^-1/2 written out longhand.
inline Matrix dense_normalize(const Matrix& a, bool self_loops) {
  const Eigen::Index n = a.rows();
  Matrix m = a;
  if (self_loops) m += Matrix::Identity(n, n);
  Matrix out = Matrix::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) {
      const double di = m.row(i).sum(), dj = m.row(j).sum();
      if (m(i, j) != 0.0) out(i, j) = m(i, j) / std::sqrt(di * dj);
    }
  return out;
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() /
           ("uniprompt_" + tag + "_" + std::to_string(reinterpret_cast<std::uintptr_t>(this)));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

inline void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream(p) << text;
}

}  // namespace test
