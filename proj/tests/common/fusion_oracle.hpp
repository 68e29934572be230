#pragma once
// Dense closed form of repeated bootstrap fusion with a constant prompt graph:
//   A_hat(t) = tau^t A + (1 - tau^t) A_tilde.

#include "uniprompt/prompt.hpp"

#include <cmath>

namespace fusion_oracle {

using uniprompt::Matrix;

struct Report {
  std::size_t graphs = 0;
  std::size_t steps = 0;
  double worst = 0.0;
};

inline uniprompt::SparseAdj random_symmetric(uniprompt::Rng& rng, std::size_t n, double p, bool weighted) {
  std::vector<uniprompt::Edge> edges;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (rng.bernoulli(p)) {
        const double w = weighted ? rng.uniform(0.1, 1.0) : 1.0;
        edges.push_back({i, j, w});
        edges.push_back({j, i, w});
      }
  return uniprompt::SparseAdj::from_entries(n, edges);
}

/// Runs PromptState fusion for `steps` epochs without changing the gates and
/// compares every intermediate A_hat(t) with the closed form.
inline Report check(std::size_t graphs, std::size_t steps, std::span<const double> taus, std::uint64_t seed) {
  Report r;
  uniprompt::Rng rng(seed);
  for (std::size_t g = 0; g < graphs; ++g) {
    const std::size_t n = 2 + rng.below(29);
    const auto a = random_symmetric(rng, n, 0.2, false);
    const auto prompt = random_symmetric(rng, n, 0.3, true);
    for (double tau : taus) {
      uniprompt::PromptState state(a, prompt, 10.0, tau);
      // random gates, held fixed
      for (Eigen::Index e = 0; e < state.weights.value.rows(); ++e) state.weights.value(e, 0) = rng.uniform(0.5, 1.2);
      const Matrix a_dense = a.to_dense();
      const Matrix p_dense = state.build_prompt_adj().to_dense();
      for (std::size_t t = 1; t <= steps; ++t) {
        uniprompt::ad::Tape tape;
        state.commit(state.fuse(tape).value());
        const double tt = std::pow(tau, static_cast<double>(t));
        const Matrix oracle = tt * a_dense + (1.0 - tt) * p_dense;
        r.worst = std::max(r.worst, (state.current().to_dense() - oracle).cwiseAbs().maxCoeff());
        ++r.steps;
      }
    }
    ++r.graphs;
  }
  return r;
}

}  // namespace fusion_oracle
