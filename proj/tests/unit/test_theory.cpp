#include "helpers.hpp"

#include "uniprompt/harness.hpp"
#include "uniprompt/pretrain.hpp"
#include "uniprompt/theory.hpp"

#include <doctest.h>

using namespace uniprompt;

TEST_CASE("compose: identity and scaled prompts") {
  Rng rng(1);
  EquivalenceCase c{Matrix::Identity(4, 4), Matrix::Zero(4, 1), test::random_matrix(rng, 4, 3)};
  auto k = compose(c);
  CHECK(k.w == c.w_c);
  CHECK(k.b == Matrix::Zero(3, 1));
  c.w_t = 2.0 * Matrix::Identity(4, 4);
  k = compose(c);
  CHECK(k.w == 2.0 * c.w_c);
}

TEST_CASE("function equivalence on a d=8, d'=6, C=4 case") {
  Rng rng(2);
  const auto c = random_case(rng, 8, 6, 4);
  CHECK(c.d() == 8);
  CHECK(c.d_prime() == 6);
  const auto r = verify_function_equivalence(c, 100, rng);
  CHECK(r.trials == 100);
  CHECK(r.max_deviation <= 1e-12);
  CHECK(r.argmax_agreements == 100);
}

TEST_CASE("function equivalence at large input norm") {
  Rng rng(3);
  const auto c = random_case(rng, 8, 6, 4);
  CHECK(verify_function_equivalence(c, 100, rng, 1e6).max_deviation <= 1e-6);
}

TEST_CASE("a perturbed composition is detected") {
  Rng rng(4);
  const auto c = random_case(rng, 8, 6, 4);
  Composed wrong = compose(c);
  wrong.w.array() += 1e-3;
  // each logit moves by 1e-3 * sum(h); over unit vectors sum(h) is O(1)
  const auto r = verify_function_equivalence(c, wrong, 100, rng);
  CHECK(r.max_deviation >= 1e-4);
}

TEST_CASE("gradient paths") {
  Rng rng(5);
  const auto c = orthogonal_case(rng, 6, 3);
  Matrix h = test::random_matrix(rng, 6, 1);
  h /= h.norm();
  const auto zero = verify_gradient_equivalence(c, h, 1, 0.0);
  CHECK(zero.weight_deviation == 0.0);
  CHECK(zero.bias_deviation == 0.0);

  const auto r = verify_gradient_equivalence(c, h, 1, 1e-4);
  // the bias path agrees to rounding
  CHECK(r.bias_deviation <= 1e-15);
  // the first-order weight change is exactly twice the direct step, so the gap equals the step itself
  CHECK(r.weight_deviation == doctest::Approx(r.direct_step_norm).epsilon(1e-6));
  // against the doubled step only the second-order cross term remains
  CHECK(r.exact_weight_deviation_vs_double <= 50 * 1e-8);

  EquivalenceCase skew = c;
  skew.w_t(0, 0) += 0.1;
  CHECK_THROWS_AS(verify_gradient_equivalence(skew, h, 0, 1e-4), ValidationError);
}

TEST_CASE("theory report") {
  TheoryOptions o;
  o.trials = 50;
  const auto r = run_theory_checks(o);
  CHECK(r.function.trials == 50);
  CHECK(r.function_pass);
  CHECK(r.tolerance == doctest::Approx(5e-7));
  const std::string text = format_report(r);
  CHECK(text.find("function equivalence") != std::string::npos);
  CHECK(text.find("gradient paths") != std::string::npos);
  // halving eta halves the first-order gap and quarters the cross term
  CHECK(r.gradient_deviation / r.gradient_deviation_half == doctest::Approx(2.0).epsilon(1e-3));
  CHECK(r.exact_deviation / r.exact_deviation_half == doctest::Approx(4.0).epsilon(0.05));
}

TEST_CASE("motivation replication writes one series per encoder") {
  SbmConfig sc;
  sc.n = 40;
  const Graph g = generate_sbm(sc);
  std::vector<Encoder> encs;
  for (Objective o : {Objective::dgi, Objective::grace, Objective::graphmae}) {
    PretrainConfig pc;
    pc.objective = o;
    pc.epochs = 2;
    pc.hidden_dim = pc.output_dim = 8;
    encs.push_back(pretrain(g, pc).encoder);
  }
  TuneConfig tc;
  tc.max_epochs = 5;
  test::TempDir dir("motivation");
  const auto files = motivation_replication(g, encs, tc, 1, dir.path);
  REQUIRE(files.size() == 3);
  CHECK(files[0] != files[1]);
  CHECK(files[1] != files[2]);
  for (const auto& f : files) {
    std::ifstream in(f);
    std::string header, first;
    std::getline(in, header);
    std::getline(in, first);
    CHECK(header == "epoch,normalized_loss");
    CHECK(first == "0,1");
  }
}
