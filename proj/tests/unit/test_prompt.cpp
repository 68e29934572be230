#include "../common/fusion_oracle.hpp"
#include "helpers.hpp"

#include "uniprompt/harness.hpp"
#include "uniprompt/pretrain.hpp"
#include "uniprompt/prompt.hpp"

#include <doctest.h>

#include <cmath>
#include <map>

using namespace uniprompt;

namespace {

Graph sbm(double p_in, double p_out, double sep, std::size_t n = 160, std::uint64_t seed = 7) {
  SbmConfig c;
  c.n = n;
  c.classes = 4;
  c.p_in = p_in;
  c.p_out = p_out;
  c.feature_dim = 16;
  c.feature_sep = sep;
  c.seed = seed;
  return generate_sbm(c);
}

Encoder dgi(const Graph& g, std::size_t epochs = 50) {
  PretrainConfig cfg;
  cfg.epochs = epochs;
  cfg.hidden_dim = cfg.output_dim = 32;
  cfg.seed = 1;
  return pretrain(g, cfg).encoder;
}

TuneConfig quick(std::size_t epochs = 150) {
  TuneConfig cfg;
  cfg.max_epochs = epochs;
  cfg.k = 10;
  cfg.seed = 3;
  return cfg;
}

}  // namespace

TEST_CASE("gate values") {
  CHECK(gate(1.0, 10.0) == 1.0);
  CHECK(gate(1.0, 0.3) == 1.0);
  CHECK(gate(1.1, 10.0) == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(gate(-10.0, 10.0) == doctest::Approx(std::exp(-110.0)).epsilon(1e-6));
  CHECK(gate(-10.0, 10.0) >= 0.0);
  ad::Tape t;
  const Matrix v = gate(t.constant(Matrix::Constant(1, 1, 1.1)), 10.0).value();
  CHECK(v(0, 0) == gate(1.1, 10.0));
}

TEST_CASE("prompt graph from gates") {
  Rng rng(4);
  const auto a = fusion_oracle::random_symmetric(rng, 12, 0.3, false);
  const auto init = knn_prompt_init(test::random_matrix(rng, 12, 3), {.k = 3});
  PromptState s(a, init, 10.0, 0.9);
  const auto p = s.build_prompt_adj();
  CHECK(p.nnz() == init.nnz());
  for (double v : p.values()) CHECK(v == 1.0);
  CHECK(s.num_prompt_edges() * 2 == init.nnz());

  s.weights.value(0, 0) = -5.0;
  const auto pruned = s.build_prompt_adj();
  CHECK(pruned.is_symmetric());
  std::size_t small = 0;
  for (double v : pruned.values()) small += v < 1e-19;
  CHECK(small == 2);
}

TEST_CASE("bootstrap fusion step") {
  const auto a = SparseAdj::from_entries(2, {{0, 1, 1.0}, {1, 0, 1.0}});
  const auto p = SparseAdj::from_entries(2, {{0, 0, 0.0}});
  CHECK(bootstrap_fuse(a, p, 1.0).at(0, 1) == 1.0);
  const auto q = SparseAdj::from_entries(2, {{0, 1, 0.3}, {1, 0, 0.3}});
  CHECK(bootstrap_fuse(a, q, 0.0).at(0, 1) == 0.3);
  // A entry 1 where the prompt entry is 0 decays geometrically
  const auto z = SparseAdj::from_entries(2, {{0, 1, 0.0}, {1, 0, 0.0}});
  const auto one = bootstrap_fuse(a, z, 0.5);
  CHECK(one.at(0, 1) == 0.5);
  CHECK(bootstrap_fuse(one, z, 0.5).at(0, 1) == 0.25);
  CHECK_THROWS_AS(bootstrap_fuse(a, q, 1.5), ValidationError);
}

TEST_CASE("fusion matches the closed form") {
  const std::vector<double> taus{0.0, 0.5, 0.9, 1.0};
  const auto r = fusion_oracle::check(10, 50, taus, 99);
  CHECK(r.steps == 10 * 4 * 50);
  CHECK(r.worst <= 1e-10);
}

TEST_CASE("tau = 1 reproduces the linear probe bit for bit") {
  const Graph g = sbm(0.03, 0.05, 4.0);
  const Encoder enc = dgi(g, 20);
  for (std::size_t run = 0; run < 3; ++run) {
    const auto task = sample_k_shot(g, 1, 42, run);
    TuneConfig cfg = quick(200);
    cfg.tau = 1.0;
    cfg.seed = run_seed(42, run);
    const auto up = uniprompt_tune(g, enc, task.labeled(g), cfg);
    const auto lp = linear_probe_tune(g, enc, task.labeled(g), cfg);
    CHECK(up.predictions == lp.predictions);
    CHECK(up.loss_history == lp.loss_history);
    CHECK(up.logits == lp.logits);
    CHECK(up.prompt->weights.value == Matrix::Ones(up.prompt->weights.value.rows(), 1));
  }
}

TEST_CASE("frozen encoder is untouched by every prompt method") {
  const Graph g = sbm(0.03, 0.05, 4.0, 80);
  const Encoder enc = dgi(g, 5);
  const auto hash = enc.hash();
  const auto task = sample_k_shot(g, 2, 1, 0);
  for (const char* m : {"uniprompt", "linear-probe", "gpf", "ablate:random_topo", "ablate:simple_add",
                        "ablate:discard_topo", "fine-tune"}) {
    run_method(Method::parse(m), g, enc, task.labeled(g), quick(30));
    CHECK(enc.hash() == hash);
  }
  Encoder thawed = enc;
  thawed.thaw();
  CHECK_THROWS_AS(uniprompt_tune(g, thawed, task.labeled(g), quick(5)), ValidationError);
}

TEST_CASE("fine-tune") {
  const Graph g = sbm(0.1, 0.006, 1.0, 160);
  const Encoder enc = dgi(g, 30);
  const auto task = sample_k_shot(g, 5, 42, 0);
  TuneConfig none = quick(0);
  CHECK(fine_tune(g, enc, task.labeled(g), none).encoder->hash() == enc.hash());
  TuneConfig one = quick(1);
  CHECK(fine_tune(g, enc, task.labeled(g), one).encoder->hash() != enc.hash());

  // majority-class oracle on the test split
  std::map<int, std::size_t> counts;
  for (std::size_t i : task.test) ++counts[g.labels()[i]];
  std::size_t top = 0;
  for (auto [_, c] : counts) top = std::max(top, c);
  const double majority = static_cast<double>(top) / static_cast<double>(task.test.size());
  const auto r = fine_tune(g, enc, task.labeled(g), quick(300));
  CHECK(evaluate(r.predictions, task, g.labels()) >= majority + 0.20);
}

TEST_CASE("feature prompt starts at the linear probe") {
  const Graph g = sbm(0.1, 0.006, 2.0, 80);
  const Encoder enc = dgi(g, 5);
  const auto task = sample_k_shot(g, 1, 42, 0);
  const auto gpf = feature_prompt_tune(g, enc, task.labeled(g), quick(3));
  const auto lp = linear_probe_tune(g, enc, task.labeled(g), quick(3));
  CHECK(gpf.loss_history.front() == lp.loss_history.front());
  CHECK(gpf.feature_prompt.rows() == 1);
  CHECK(static_cast<std::size_t>(gpf.feature_prompt.cols()) == g.num_features());
}

TEST_CASE("feature prompt stays near the linear probe on a homophilic graph") {
  const Graph g = sbm(0.1, 0.006, 2.0, 160);
  const Encoder enc = dgi(g, 50);
  double gpf = 0.0, lp = 0.0;
  for (std::size_t run = 0; run < 20; ++run) {
    const auto task = sample_k_shot(g, 1, 42, run);
    TuneConfig cfg = quick(300);
    cfg.seed = run_seed(42, run);
    gpf += evaluate(feature_prompt_tune(g, enc, task.labeled(g), cfg).predictions, task, g.labels());
    lp += evaluate(linear_probe_tune(g, enc, task.labeled(g), cfg).predictions, task, g.labels());
  }
  CHECK(std::abs(gpf - lp) / 20.0 <= 0.05);
}

TEST_CASE("ablations") {
  Rng rng(2);
  const auto ref = knn_prompt_init(test::random_matrix(rng, 30, 4), {.k = 4});
  const auto r1 = random_topology(ref, 5), r2 = random_topology(ref, 5);
  CHECK(r1.nnz() == ref.nnz());
  CHECK(r1.is_symmetric());
  CHECK(r1.entries() == r2.entries());
  CHECK(random_topology(ref, 6).entries() != r1.entries());

  // saturated gates with only the prompt graph left: normalization re-adds self loops, so A_hat -> I
  const auto a = fusion_oracle::random_symmetric(rng, 30, 0.2, false);
  PromptState s(a, ref, 10.0, 0.9, Fusion::prompt_only);
  s.weights.value.setConstant(-10.0);
  ad::Tape t;
  const Matrix normalized =
      SparseAdj(s.plan()->output, [&] {
        const Matrix v = ad::sym_normalize(s.plan(), s.fuse(t)).values.value();
        return std::vector<double>(v.data(), v.data() + v.size());
      }()).to_dense();
  CHECK((normalized - Matrix::Identity(30, 30)).cwiseAbs().maxCoeff() < 1e-40);

  CHECK(Method::parse("ablate:simple_add").name() == "ablate:simple_add");
  CHECK_THROWS_AS(Method::parse("ablate:nothing"), ValidationError);
  CHECK_THROWS_AS(Method::parse("prog"), ValidationError);
}

TEST_CASE("tune validation") {
  const Graph g = sbm(0.1, 0.006, 2.0, 40);
  const Encoder enc = dgi(g, 2);
  LabeledNodes bad{{0, 0}, {0, 1}};
  CHECK_THROWS_AS(linear_probe_tune(g, enc, bad, quick(2)), ValidationError);
  LabeledNodes empty;
  CHECK_THROWS_AS(linear_probe_tune(g, enc, empty, quick(2)), ValidationError);
  TuneConfig cfg = quick(2);
  cfg.tau = 1.5;
  CHECK_THROWS_AS(uniprompt_tune(g, enc, sample_k_shot(g, 1, 1, 0).labeled(g), cfg), ValidationError);
}

TEST_CASE("early stopping respects patience") {
  const Graph g = sbm(0.1, 0.006, 2.0, 40);
  const Encoder enc = dgi(g, 2);
  TuneConfig cfg = quick(2000);
  cfg.patience = 20;
  cfg.min_delta = 1e-3;
  const auto r = linear_probe_tune(g, enc, sample_k_shot(g, 1, 1, 0).labeled(g), cfg);
  CHECK(r.epochs < 2000);
  CHECK(r.loss_history.size() == r.epochs);
  // the last `patience` losses never beat the best before them by more than min_delta
  const double best = *std::min_element(r.loss_history.begin(), r.loss_history.end() - 20);
  for (std::size_t i = r.epochs - 20; i < r.epochs; ++i) CHECK(r.loss_history[i] >= best - 1e-3);
}
