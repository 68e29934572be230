#include "helpers.hpp"

#include "uniprompt/cli.hpp"
#include "uniprompt/harness.hpp"
#include "uniprompt/pretrain.hpp"

#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <sstream>

using namespace uniprompt;

namespace {

Graph seven_class(std::size_t n = 140) {
  SbmConfig c;
  c.n = n;
  c.classes = 7;
  c.feature_dim = 8;
  c.p_in = 0.1;
  c.p_out = 0.01;
  return generate_sbm(c);
}

int run_cli(const std::vector<std::string>& args, std::string* out = nullptr, std::string* err = nullptr) {
  std::ostringstream o, e;
  const int code = dispatch(args, o, e);
  if (out) *out = o.str();
  if (err) *err = e.str();
  return code;
}

}  // namespace

TEST_CASE("k-shot sampling") {
  const Graph g = seven_class();
  const auto t = sample_k_shot(g, 1, 42, 0);
  CHECK(t.train.size() == 7);
  CHECK(t.test.size() == 140 - 7);
  for (std::size_t c = 0; c < 7; ++c) CHECK(g.labels()[t.train[c]] == static_cast<int>(c));
  const auto again = sample_k_shot(g, 1, 42, 0);
  CHECK(again.train == t.train);
  CHECK(again.test == t.test);
  CHECK(sample_k_shot(g, 1, 42, 1).train != t.train);
  CHECK(sample_k_shot(g, 5, 42, 0).test.size() == 140 - 35);
  CHECK_THROWS_AS(sample_k_shot(g, 21, 42, 0), ValidationError);
}

TEST_CASE("evaluate") {
  const Graph g = seven_class();
  const auto t = sample_k_shot(g, 1, 1, 0);
  CHECK(evaluate(g.labels(), t, g.labels()) == 1.0);
  // a uniformly random predictor averages 1/C
  Rng rng(9);
  double total = 0.0;
  for (int r = 0; r < 400; ++r) {
    std::vector<int> p(g.num_nodes());
    for (auto& v : p) v = static_cast<int>(rng.below(7));
    total += evaluate(p, t, g.labels());
  }
  CHECK(total / 400.0 == doctest::Approx(1.0 / 7.0).epsilon(0.05));
}

TEST_CASE("sbm generator") {
  SbmConfig c;
  c.p_out = 0.0;
  c.p_in = 0.1;
  CHECK(*edge_homophily(generate_sbm(c)) == 1.0);

  c.p_in = c.p_out = 0.05;
  double h = 0.0, edges = 0.0;
  for (std::uint64_t s = 0; s < 10; ++s) {
    c.seed = s;
    const Graph g = generate_sbm(c);
    h += *edge_homophily(g);
    edges += static_cast<double>(g.num_undirected_edges());
    if (s == 0) CHECK(std::abs(static_cast<double>(g.num_undirected_edges()) - 3990.0) <= 3.0 * std::sqrt(3990.0));
  }
  // same-class pairs are 99/399 of all pairs
  CHECK(h / 10.0 == doctest::Approx(99.0 / 399.0).epsilon(0.05));
  CHECK(edges / 10.0 == doctest::Approx(3990.0).epsilon(0.02));
  c.classes = 1;
  CHECK_THROWS_AS(generate_sbm(c), ValidationError);

  // feature_std only rescales the within-class spread
  SbmConfig w;
  w.n = 4000;
  w.feature_sep = 0.0;
  w.feature_std = 0.1;
  const Matrix x = generate_sbm(w).features();
  const double var = (x.array() - x.mean()).square().mean();
  CHECK(std::sqrt(var) == doctest::Approx(0.1).epsilon(0.01));
  w.feature_std = 0.0;
  CHECK_THROWS_AS(generate_sbm(w), ValidationError);
}

TEST_CASE("aggregation and tables") {
  ResultTable t;
  for (std::uint64_t s : kDefaultSeeds)
    for (std::size_t r = 0; r < kDefaultRuns; ++r)
      t.add({"", "d", "dgi", "uniprompt", 1, s, r, (r % 2) ? 0.5 : 0.7, 10, 0.1});
  const auto a = t.find("uniprompt", 1);
  REQUIRE(a.has_value());
  CHECK(a->count == 100);
  CHECK(a->mean == doctest::Approx(0.6));
  CHECK(a->std_population == doctest::Approx(0.1));
  std::ostringstream csv, md;
  t.write_csv(csv);
  t.write_markdown(md);
  CHECK(csv.str().rfind("dataset,pretrain,method,shot,seed,run,accuracy\n", 0) == 0);
  CHECK(md.str().find("**60.00±10.00**") != std::string::npos);

  const std::vector<double> v{1.0, 2.0, 3.0, 4.0};
  const auto [m, sd] = mean_std(v);
  CHECK(m == 2.5);
  CHECK(sd == doctest::Approx(std::sqrt(1.25)));
}

TEST_CASE("experiment spec parsing") {
  const auto j = nlohmann::json::parse(R"({
    "dataset": "sbm", "pretrain": "e.ckpt", "shots": [1, 3], "runs": 2,
    "tune": {"tau": 0.99, "k": 7},
    "methods": ["linear-probe", {"name": "uniprompt", "tune": {"alpha": 5}}]
  })");
  const auto s = parse_experiment_spec(j);
  CHECK(s.methods.size() == 2);
  CHECK(s.methods[1].tune.tau == 0.99);
  CHECK(s.methods[1].tune.alpha == 5.0);
  CHECK(s.methods[0].tune.k == 7);
  CHECK(s.seeds.size() == 5);
  CHECK(s.seeds[0] == 42);
  CHECK(s.methods[0].tune.max_epochs == 2000);
  CHECK(s.methods[0].tune.patience == 20);
  CHECK_THROWS_AS(parse_experiment_spec(nlohmann::json::parse(R"({"bogus": 1})")), ValidationError);
  CHECK_THROWS_AS(parse_tune_config(nlohmann::json::parse(R"({"lr": 1})")), ValidationError);
  const auto round = parse_tune_config(tune_config_json(s.methods[1].tune));
  CHECK(round.alpha == 5.0);
  CHECK(round.k == 7);
}

TEST_CASE("experiments: cell counts, determinism, tau = 1 reduction") {
  const Graph g = seven_class(70);
  PretrainConfig pc;
  pc.epochs = 5;
  pc.hidden_dim = pc.output_dim = 8;
  const Encoder enc = pretrain(g, pc).encoder;
  ExperimentSpec spec;
  spec.seeds = {42, 12345};
  spec.runs = 3;
  TuneConfig tc;
  tc.max_epochs = 20;
  tc.k = 5;
  tc.tau = 1.0;
  spec.methods = {{Method::parse("linear-probe"), tc}, {Method::parse("uniprompt"), tc}};
  spec.jobs = 2;
  const auto t1 = run_experiment(g, enc, spec);
  spec.jobs = 1;
  const auto t2 = run_experiment(g, enc, spec);
  std::ostringstream c1, c2;
  t1.write_csv(c1);
  t2.write_csv(c2);
  CHECK(c1.str() == c2.str());
  CHECK(t1.find("linear-probe", 1)->count == 6);
  for (std::size_t i = 0; i < 6; ++i) CHECK(t1.records()[i].accuracy == t1.records()[i + 6].accuracy);

  const std::vector<double> taus{0.99, 0.999, 0.9999, 0.99999, 1.0};
  spec.methods = {{Method::parse("uniprompt"), tc}};
  spec.seeds = {42};
  spec.runs = 1;
  const auto sw = sweep(SweepParam::tau, taus, g, enc, spec);
  CHECK(sw.aggregates().size() == 5);
  CHECK(sw.param_name() == "tau");
  CHECK(sw.aggregates()[2].param == "0.9999");

  const std::vector<double> levels{0.01, 0.05, 0.2};
  const auto nr = noise_robustness(levels, g, enc, spec);
  CHECK(nr.aggregates().size() == 3);
  std::ostringstream md;
  nr.write_markdown(md);
  std::size_t sections = 0;
  for (std::size_t p = md.str().find("### "); p != std::string::npos; p = md.str().find("### ", p + 1)) ++sections;
  CHECK(sections == 3);
}

TEST_CASE("parallel_for reports the first failing index") {
  std::vector<int> hit(10, 0);
  parallel_for(10, 3, [&](std::size_t i) { hit[i] = 1; });
  CHECK(std::count(hit.begin(), hit.end(), 1) == 10);
  CHECK_THROWS_WITH(parallel_for(10, 1, [](std::size_t i) {
                      if (i >= 4) throw ValidationError("bad " + std::to_string(i));
                    }),
                    "bad 4");
}

TEST_CASE("cli: make-sbm, inspect and error codes") {
  test::TempDir dir("cli");
  const auto g = (dir.path / "g").string();
  std::string out, err;
  CHECK(run_cli({"make-sbm", "--n", "400", "--classes", "4", "--p-in", "0.02", "--p-out", "0.2", "--sep", "3",
                 "--seed", "7", "--out", g}, &out) == 0);
  const Graph back = load_graph_bundle(g);
  CHECK(*edge_homophily(back) < 0.3);
  CHECK(run_cli({"inspect", "--dataset", g}, &out) == 0);
  CHECK(out.rfind("400 ", 0) == 0);

  SbmConfig pure;
  pure.p_out = 0.0;
  pure.p_in = 0.1;
  save_graph_bundle(generate_sbm(pure), dir.path / "pure");
  CHECK(run_cli({"inspect", "--dataset", (dir.path / "pure").string()}, &out) == 0);
  CHECK(out.find(" 1.00\n") != std::string::npos);

  CHECK(run_cli({"tune", "--method", "uniprompt", "--encoder", "e.ckpt"}, &out, &err) == 1);
  CHECK(err.find("--dataset") != std::string::npos);
  CHECK(run_cli({"frobnicate"}, &out, &err) == 1);
  CHECK(run_cli({"inspect", "--dataset", (dir.path / "missing").string()}, &out, &err) == 1);
  CHECK(run_cli({"make-sbm", "--out", (dir.path / "x").string(), "--classes", "1"}, &out, &err) == 1);

  test::write_file(dir.path / "cfg.json", R"({"n": 40, "classes": 2, "p_in": 0.1, "seed": 3})");
  CHECK(run_cli({"make-sbm", "--config", (dir.path / "cfg.json").string(), "--n", "50", "--out",
                 (dir.path / "c").string()}) == 0);
  CHECK(load_graph_bundle(dir.path / "c").num_nodes() == 50);
  CHECK(load_graph_bundle(dir.path / "c").num_classes() == 2);
  test::write_file(dir.path / "bad.json", R"({"nodes": 40})");
  CHECK(run_cli({"make-sbm", "--config", (dir.path / "bad.json").string(), "--out", (dir.path / "d").string()}) == 1);
}

TEST_CASE("cli: pretrain, tune and eval end to end") {
  test::TempDir dir("cli_e2e");
  const auto g = (dir.path / "g").string(), e = (dir.path / "e.ckpt").string();
  REQUIRE(run_cli({"make-sbm", "--n", "60", "--classes", "3", "--dim", "6", "--p-in", "0.1", "--p-out", "0.02",
                   "--out", g}) == 0);
  REQUIRE(run_cli({"pretrain", "--dataset", g, "--epochs", "5", "--hidden", "8", "--output-dim", "8", "--out", e}) ==
          0);
  std::string out;
  REQUIRE(run_cli({"tune", "--method", "uniprompt", "--encoder", e, "--dataset", g, "--k", "5", "--max-epochs", "10"},
                  &out) == 0);
  const auto rec = nlohmann::json::parse(out);
  for (const char* key : {"method", "dataset", "seed", "run", "shot", "accuracy", "epochs", "final_loss"})
    CHECK(rec.contains(key));
  CHECK(rec["epochs"] == 10);

  test::write_file(dir.path / "exp.json", R"({"runs": 2, "seeds": [1], "tune": {"max_epochs": 5, "k": 5}})");
  const auto res = (dir.path / "res").string();
  REQUIRE(run_cli({"eval", "--config", (dir.path / "exp.json").string(), "--dataset", g, "--encoder", e, "--out", res},
                  &out) == 0);
  CHECK(std::filesystem::exists(dir.path / "res" / "results.csv"));
  CHECK(std::filesystem::exists(dir.path / "res" / "summary.csv"));
  CHECK(out.find("uniprompt") != std::string::npos);
  // tune flags override the config for every method
  REQUIRE(run_cli({"eval", "--config", (dir.path / "exp.json").string(), "--dataset", g, "--encoder", e, "--max-epochs",
                   "3", "--out", res}) == 0);
  std::ifstream summary(dir.path / "res" / "results.csv");
  std::string line;
  std::getline(summary, line);
  CHECK(line == "dataset,pretrain,method,shot,seed,run,accuracy");
  CHECK(run_cli({"sweep", "--dataset", g, "--encoder", e, "--grid", "0.9,1", "--max-epochs", "3", "--runs", "1",
                 "--seed", "1"}, &out) == 0);
  CHECK(out.find("tau") != std::string::npos);
  // an out-of-range --k reaches the kNN builder, so the flag is not ignored
  CHECK(run_cli({"eval", "--config", (dir.path / "exp.json").string(), "--dataset", g, "--encoder", e, "--k", "1000"},
                &out) == 1);
  CHECK(run_cli({"verify-theory", "--trials", "20"}, &out) == 0);
  CHECK(out.find("function equivalence") != std::string::npos);
}

TEST_CASE("real datasets when available") {
  const char* root = std::getenv("UNIPROMPT_DATA_DIR");
  if (!root || !std::filesystem::exists(std::filesystem::path(root) / "cora")) {
    MESSAGE("UNIPROMPT_DATA_DIR/cora not present; real-dataset checks skipped");
    return;
  }
  const Graph cora = load_graph_bundle(std::filesystem::path(root) / "cora");
  CHECK(cora.num_nodes() == 2708);
  CHECK(cora.num_undirected_edges() == 5278);
  CHECK(cora.num_features() == 1433);
  CHECK(cora.num_classes() == 7);
  CHECK(std::abs(*edge_homophily(cora) - 0.81) <= 0.01);
  CHECK(sample_k_shot(cora, 5, 42, 0).test.size() == 2708 - 35);
}
