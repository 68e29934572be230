#include "../common/gradcheck.hpp"
#include "helpers.hpp"

#include "uniprompt/autodiff.hpp"
#include "uniprompt/checkpoint.hpp"
#include "uniprompt/optim.hpp"

#include <doctest.h>

#include <cmath>
#include <limits>

using namespace uniprompt;

TEST_CASE("finite differences agree for every op") {
  for (const auto& op : gradcheck::all_ops()) {
    const auto r = gradcheck::check(op, 20, 2024);
    INFO(op.name << " worst relative error " << r.worst);
    CHECK(r.instances == 20);
    CHECK(r.worst <= 1e-4);
  }
}

TEST_CASE("elu and softmax edge values") {
  ad::Tape t;
  Matrix x(1, 3);
  x << 0.0, -std::numeric_limits<double>::infinity(), 2.0;
  const Matrix e = ad::elu(t.constant(x)).value();
  CHECK(e(0, 0) == 0.0);
  CHECK(e(0, 1) == -1.0);
  CHECK(e(0, 2) == 2.0);
  const Matrix s = ad::softmax_rows(t.constant(Matrix::Zero(1, 3))).value();
  for (int j = 0; j < 3; ++j) CHECK(s(0, j) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("cross entropy") {
  ad::Tape t;
  const std::vector<int> y{1};
  CHECK(ad::cross_entropy(t.constant(Matrix::Zero(1, 3)), y).scalar() == doctest::Approx(std::log(3.0)).epsilon(1e-15));
  Matrix sat = Matrix::Zero(1, 3);
  sat(0, 1) = 1000.0;
  CHECK(ad::cross_entropy(t.constant(sat), y).scalar() == doctest::Approx(0.0));

  Rng rng(8);
  const Matrix logits = test::random_matrix(rng, 4, 3, 2.0);
  const std::vector<int> labels{2, 0, 1, 2};
  double oracle = 0.0;
  for (int i = 0; i < 4; ++i) {
    double z = 0.0;
    for (int c = 0; c < 3; ++c) z += std::exp(logits(i, c));
    oracle += -std::log(std::exp(logits(i, labels[i])) / z);
  }
  oracle /= 4.0;
  CHECK(std::abs(ad::cross_entropy(t.constant(logits), labels).scalar() - oracle) <= 1e-10);
}

TEST_CASE("backward: linear map and disconnected parameter") {
  Rng rng(4);
  ad::Parameter w{"w", test::random_matrix(rng, 3, 4)};
  ad::Parameter unused{"unused", Matrix::Ones(2, 2)};
  const Matrix h = test::random_matrix(rng, 4, 1);
  ad::Tape t;
  const ad::Var wv = t.parameter(w);
  t.parameter(unused);
  const auto g = t.backward(ad::sum(ad::matmul(wv, t.constant(h))));
  // d/dW sum(W h) = 1 h^T
  const Matrix expected = Matrix::Ones(3, 1) * h.transpose();
  CHECK((g.of(w) - expected).cwiseAbs().maxCoeff() < 1e-15);
  CHECK(g.of(unused) == Matrix::Zero(2, 2));
  CHECK_THROWS_AS(t.backward(ad::sum(wv)), ValidationError);
}

TEST_CASE("adam") {
  SUBCASE("zero gradient leaves parameters unchanged") {
    ad::Parameter p{"p", Matrix::Constant(2, 2, 0.5)};
    Adam opt({&p}, {});
    ad::Gradients g;
    g.accumulate(p, Matrix::Zero(2, 2));
    opt.step(g);
    CHECK(p.value == Matrix::Constant(2, 2, 0.5));
  }
  SUBCASE("degenerate betas give a signed step of size eta") {
    ad::Parameter p{"p", Matrix::Zero(1, 2)};
    Adam opt({&p}, {.learning_rate = 0.01, .beta1 = 0.0, .beta2 = 0.0, .epsilon = 1e-8});
    ad::Gradients g;
    Matrix grad(1, 2);
    grad << 3.0, -0.5;
    g.accumulate(p, grad);
    opt.step(g);
    CHECK(p.value(0, 0) == doctest::Approx(-0.01 * 3.0 / (3.0 + 1e-8)).epsilon(1e-12));
    CHECK(p.value(0, 1) == doctest::Approx(0.01 * 0.5 / (0.5 + 1e-8)).epsilon(1e-12));
  }
  SUBCASE("100 steps on (w - 3)^2") {
    ad::Parameter w{"w", Matrix::Zero(1, 1)};
    Adam opt({&w}, {.learning_rate = 0.1});
    for (int i = 0; i < 100; ++i) {
      ad::Tape t;
      const auto d = ad::add_scalar(t.parameter(w), -3.0);
      opt.step(t.backward(ad::sum(ad::hadamard(d, d))));
    }
    // independent scalar recurrence
    double x = 0.0, m = 0.0, v = 0.0;
    for (int i = 1; i <= 100; ++i) {
      const double g = 2.0 * (x - 3.0);
      m = 0.9 * m + 0.1 * g;
      v = 0.999 * v + 0.001 * g * g;
      x -= 0.1 * (m / (1 - std::pow(0.9, i))) / (std::sqrt(v / (1 - std::pow(0.999, i))) + 1e-8);
    }
    CHECK(w.value(0, 0) == doctest::Approx(x).epsilon(1e-12));
    CHECK(std::abs(w.value(0, 0) - 3.0) < 0.1);
  }
  SUBCASE("NaN gradient aborts naming the parameter") {
    ad::Parameter p{"layer0.weight", Matrix::Zero(1, 1)};
    Adam opt({&p}, {});
    ad::Gradients g;
    g.accumulate(p, Matrix::Constant(1, 1, std::nan("")));
    CHECK_THROWS_WITH_AS(opt.step(g), doctest::Contains("layer0.weight"), RuntimeAbort);
  }
}

TEST_CASE("checkpoint round trip and hash") {
  Rng rng(1);
  std::vector<NamedTensor> ts{{"a", test::random_matrix(rng, 3, 2)}, {"b", test::random_matrix(rng, 1, 5)}};
  const auto parsed = parse_checkpoint(serialize_checkpoint(ts));
  REQUIRE(parsed.size() == 2);
  CHECK(parsed[0].name == "a");
  CHECK(parsed[0].value == ts[0].value);
  CHECK(parsed[1].value == ts[1].value);
  const auto h = checkpoint_hash(ts);
  ts[1].value(0, 3) = std::nextafter(ts[1].value(0, 3), 1e9);
  CHECK(checkpoint_hash(ts) != h);
  CHECK_THROWS_AS(parse_checkpoint("garbage"), ValidationError);
}
