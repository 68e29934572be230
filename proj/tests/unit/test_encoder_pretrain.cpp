#include "helpers.hpp"

#include "uniprompt/encoder.hpp"
#include "uniprompt/harness.hpp"
#include "uniprompt/pretrain.hpp"

#include <doctest.h>

#include <cmath>

using namespace uniprompt;

namespace {

Encoder small_encoder(std::size_t f, std::size_t h, std::size_t o, Activation act, std::uint64_t seed = 1) {
  Rng rng(seed);
  return Encoder({f, h, o, act}, rng);
}

Matrix dense_act(const Matrix& x, Activation a, double slope) {
  if (a == Activation::identity) return x;
  return x.unaryExpr([&](double v) { return v > 0 ? v : (a == Activation::prelu ? slope * v : 0.0); });
}

Graph two_block(std::uint64_t seed = 5) {
  SbmConfig c;
  c.n = 80;
  c.classes = 2;
  c.p_in = 0.15;
  c.p_out = 0.02;
  c.feature_dim = 8;
  c.feature_sep = 2.0;
  c.seed = seed;
  return generate_sbm(c);
}

double class_mean_separation(const Matrix& h, const std::vector<int>& y) {
  Matrix m0 = Matrix::Zero(1, h.cols()), m1 = Matrix::Zero(1, h.cols());
  for (Eigen::Index i = 0; i < h.rows(); ++i) (y[static_cast<std::size_t>(i)] == 0 ? m0 : m1) += h.row(i);
  const double cos = m0.cwiseProduct(m1).sum() / (m0.norm() * m1.norm());
  return 1.0 - cos;
}

}  // namespace

TEST_CASE("encode: identity graph and weights reproduce the input") {
  Encoder enc = small_encoder(3, 3, 3, Activation::identity);
  enc.layer(0).weight.value = Matrix::Identity(3, 3);
  enc.layer(1).weight.value = Matrix::Identity(3, 3);
  Rng rng(2);
  const Matrix x = test::random_matrix(rng, 5, 3);
  CHECK(encode(enc, SparseAdj::identity(5), x) == x);
}

TEST_CASE("encode: zero adjacency gives constant rows act(b2)") {
  Encoder enc = small_encoder(3, 4, 2, Activation::prelu);
  enc.layer(1).bias.value << 0.7, -2.0;
  Rng rng(2);
  const Matrix h = encode(enc, SparseAdj(6), test::random_matrix(rng, 6, 3));
  for (Eigen::Index i = 0; i < 6; ++i) {
    CHECK(h(i, 0) == doctest::Approx(0.7));
    CHECK(h(i, 1) == doctest::Approx(-0.5));  // prelu slope 0.25
  }
}

TEST_CASE("encode: random 6-node graph against a dense oracle") {
  for (Activation act : {Activation::prelu, Activation::relu, Activation::identity}) {
    Encoder enc = small_encoder(4, 5, 3, act, 9);
    Rng rng(3);
    enc.layer(0).bias.value = test::random_matrix(rng, 1, 5);
    enc.layer(1).bias.value = test::random_matrix(rng, 1, 3);
    const auto a = symmetric_normalize(test::random_graph(rng, 6, 0.5), true);
    const Matrix x = test::random_matrix(rng, 6, 4);
    const Matrix ad = a.to_dense();
    const Matrix b0 = Matrix::Ones(6, 1) * enc.layer(0).bias.value;
    const Matrix b1 = Matrix::Ones(6, 1) * enc.layer(1).bias.value;
    const Matrix h1 = dense_act(ad * x * enc.layer(0).weight.value + b0, act, 0.25);
    const Matrix h2 = dense_act(ad * h1 * enc.layer(1).weight.value + b1, act, 0.25);
    CHECK((encode(enc, a, x) - h2).cwiseAbs().maxCoeff() <= 1e-10);
  }
}

TEST_CASE("classify: zero weights tie to class 0, one hidden unit by hand") {
  Rng rng(1);
  Classifier zero({3, 4, 5}, rng);
  for (auto* p : zero.parameters()) p->value.setZero();
  const auto pred = argmax_rows(classify(zero, test::random_matrix(rng, 7, 3)));
  for (int p : pred) CHECK(p == 0);

  Classifier c({2, 1, 2}, rng);
  c.w1.value << 0.5, -1.0;
  c.b1.value << 0.25;
  c.w2.value << 2.0, -3.0;
  c.b2.value << 0.1, 0.2;
  Matrix h(2, 2);
  h << 1.0, 0.1, -1.0, 0.5;
  const Matrix logits = classify(c, h);
  // row 0: relu(0.5 - 0.1 + 0.25) = 0.65; row 1: relu(-0.5 - 0.5 + 0.25) = 0
  CHECK(logits(0, 0) == doctest::Approx(2.0 * 0.65 + 0.1));
  CHECK(logits(0, 1) == doctest::Approx(-3.0 * 0.65 + 0.2));
  CHECK(logits(1, 0) == doctest::Approx(0.1));
  CHECK(logits(1, 1) == doctest::Approx(0.2));
}

TEST_CASE("freeze hides parameters; save and load round trip") {
  Encoder enc = small_encoder(3, 4, 2, Activation::prelu);
  CHECK(enc.trainable_parameters().size() == 6);
  enc.freeze();
  CHECK(enc.trainable_parameters().empty());
  enc.thaw();
  CHECK_FALSE(enc.frozen());

  test::TempDir dir("enc");
  enc.info.objective = "dgi";
  save_encoder(dir.path / "e.ckpt", enc);
  CHECK(std::filesystem::exists(dir.path / "e.ckpt.json"));
  const Encoder back = load_encoder(dir.path / "e.ckpt");
  CHECK(back.frozen());
  CHECK(back.hash() == enc.hash());
  CHECK(back.info.objective == "dgi");
}

TEST_CASE("dgi loss: coinciding samples give no discriminator gradient at W = 0") {
  Rng rng(6);
  ad::Tape t;
  ad::Parameter w{"w", Matrix::Zero(4, 4)};
  const ad::Var h = t.constant(test::random_matrix(rng, 10, 4));
  const auto g = t.backward(dgi_loss(h, h, t.parameter(w)));
  CHECK(g.of(w).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("infonce") {
  SUBCASE("one node, identical views") {
    ad::Tape t;
    const Matrix z = Matrix::Constant(1, 3, 0.4);
    CHECK(infonce_loss(t.constant(z), t.constant(z), 0.5).scalar() == doctest::Approx(0.0).epsilon(1e-12));
  }
  SUBCASE("infinite temperature flattens to ln(2N-1)") {
    Rng rng(3);
    ad::Tape t;
    const auto z1 = t.constant(test::random_matrix(rng, 5, 3));
    const auto z2 = t.constant(test::random_matrix(rng, 5, 3));
    CHECK(infonce_loss(z1, z2, 1e9).scalar() == doctest::Approx(std::log(9.0)).epsilon(1e-6));
  }
  SUBCASE("N = 4 against a scalar recomputation") {
    Rng rng(12);
    const Matrix a = test::random_matrix(rng, 4, 3), b = test::random_matrix(rng, 4, 3);
    const double tau = 0.5;
    auto cosine = [](const Matrix& x, Eigen::Index i, const Matrix& y, Eigen::Index j) {
      return x.row(i).dot(y.row(j)) / (x.row(i).norm() * y.row(j).norm());
    };
    auto half = [&](const Matrix& u, const Matrix& v) {
      double total = 0.0;
      for (Eigen::Index i = 0; i < 4; ++i) {
        double denom = 0.0;
        for (Eigen::Index j = 0; j < 4; ++j) {
          denom += std::exp(cosine(u, i, v, j) / tau);
          if (j != i) denom += std::exp(cosine(u, i, u, j) / tau);
        }
        total += -std::log(std::exp(cosine(u, i, v, i) / tau) / denom);
      }
      return total / 4.0;
    };
    const double oracle = 0.5 * (half(a, b) + half(b, a));
    ad::Tape t;
    CHECK(std::abs(infonce_loss(t.constant(a), t.constant(b), tau).scalar() - oracle) <= 1e-9);
  }
}

TEST_CASE("scaled cosine error") {
  ad::Tape t;
  Matrix x(2, 2), same(2, 2), ortho(2, 2), half(1, 2), x1(1, 2);
  x << 1, 0, 0, 2;
  ortho << 0, 1, 3, 0;
  CHECK(sce_loss(t.constant(x), t.constant(x), 2.0).scalar() == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(sce_loss(t.constant(x), t.constant(ortho), 1.0).scalar() == doctest::Approx(1.0));
  x1 << 1, 0;
  half << 0.5, std::sqrt(3.0) / 2.0;  // cos = 0.5
  CHECK(sce_loss(t.constant(x1), t.constant(half), 2.0).scalar() == doctest::Approx(0.25));
}

TEST_CASE("pretrain: every objective lowers its loss within ten epochs") {
  const Graph g = two_block();
  for (Objective o : {Objective::dgi, Objective::grace, Objective::graphmae}) {
    PretrainConfig cfg;
    cfg.objective = o;
    cfg.epochs = 10;
    cfg.hidden_dim = 32;
    cfg.output_dim = 32;
    cfg.seed = 3;
    const auto r = pretrain(g, cfg);
    INFO(to_string(o));
    REQUIRE(r.loss_history.size() == 10);
    CHECK(r.loss_history[9] < r.loss_history[0]);
    CHECK(r.encoder.frozen());
    CHECK(r.encoder.info.objective == to_string(o));
  }
}

TEST_CASE("pretrain: DGI separates class means on a two-block graph") {
  const Graph g = two_block();
  PretrainConfig cfg;
  cfg.epochs = 30;
  cfg.hidden_dim = 32;
  cfg.output_dim = 32;
  cfg.seed = 4;
  Rng rng(cfg.seed, "encoder-init");
  const Encoder before({g.num_features(), 32, 32, Activation::prelu}, rng);
  const Encoder after = pretrain(g, cfg).encoder;
  const auto a = symmetric_normalize(g.adjacency(), true);
  const double s0 = class_mean_separation(encode(before, a, g.features()), g.labels());
  const double s1 = class_mean_separation(encode(after, a, g.features()), g.labels());
  CHECK(s1 > s0);
}

TEST_CASE("pretrain: invalid configurations") {
  const Graph g = two_block();
  PretrainConfig cfg;
  cfg.objective = Objective::graphmae;
  cfg.graphmae.mask_rate = 0.0;
  CHECK_THROWS_AS(pretrain(g, cfg), ValidationError);

  const Graph single = Graph::from_edges(3, std::vector<Edge>{{0, 1, 1.0}}, Matrix::Ones(3, 2), std::nullopt, 0);
  PretrainConfig gc;
  gc.objective = Objective::grace;
  gc.grace.edge_drop = 0.99;
  gc.epochs = 20;
  gc.hidden_dim = gc.output_dim = 4;
  CHECK_THROWS_AS(pretrain(single, gc), ValidationError);
  CHECK_THROWS_AS(parse_objective("simclr"), ValidationError);

  Matrix huge = Matrix::Constant(3, 2, 1e300);
  const Graph blowup = Graph::from_edges(3, std::vector<Edge>{{0, 1, 1.0}}, huge, std::nullopt, 0);
  PretrainConfig dc;
  dc.epochs = 2;
  dc.hidden_dim = dc.output_dim = 4;
  CHECK_THROWS_WITH_AS(pretrain(blowup, dc), doctest::Contains("non-finite loss at epoch"), RuntimeAbort);
}
