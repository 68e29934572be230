#include "uniprompt/cli.hpp"
#include "uniprompt/harness.hpp"
#include "uniprompt/pretrain.hpp"
#include "uniprompt/prompt.hpp"
#include "uniprompt/theory.hpp"

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

namespace py = pybind11;
using namespace uniprompt;

namespace {

Graph graph_from_edges(std::size_t n, const std::vector<std::pair<std::size_t, std::size_t>>& pairs,
                       const Matrix& features, std::optional<std::vector<int>> labels, std::size_t num_classes,
                       const std::string& name) {
  std::vector<Edge> edges;
  edges.reserve(pairs.size());
  for (auto [s, d] : pairs) edges.push_back({s, d, 1.0});
  return Graph::from_edges(n, edges, features, std::move(labels), num_classes, name);
}

py::tuple coo(const SparseAdj& a) {
  std::vector<std::size_t> rows, cols;
  std::vector<double> vals;
  for (const auto& e : a.entries()) {
    rows.push_back(e.src);
    cols.push_back(e.dst);
    vals.push_back(e.weight);
  }
  return py::make_tuple(rows, cols, vals);
}

}  // namespace

PYBIND11_MODULE(_uniprompt, m) {
  m.doc() = "Graph prompt learning on frozen GCN encoders";

  py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
  py::register_exception<RuntimeAbort>(m, "RuntimeAbort", PyExc_RuntimeError);

  py::class_<Graph>(m, "Graph")
      .def(py::init(&graph_from_edges), py::arg("num_nodes"), py::arg("edges"), py::arg("features"),
           py::arg("labels") = py::none(), py::arg("num_classes") = 0, py::arg("name") = "")
      .def_property_readonly("num_nodes", &Graph::num_nodes)
      .def_property_readonly("num_features", &Graph::num_features)
      .def_property_readonly("num_classes", &Graph::num_classes)
      .def_property_readonly("num_edges", &Graph::num_undirected_edges)
      .def_property_readonly("name", &Graph::name)
      .def_property_readonly("features", &Graph::features)
      .def_property_readonly("labels", [](const Graph& g) -> std::optional<std::vector<int>> {
        if (!g.has_labels()) return std::nullopt;
        return g.labels();
      })
      .def("adjacency", [](const Graph& g) { return coo(g.adjacency()); }, "(rows, cols, weights) of stored entries")
      .def("homophily", [](const Graph& g) { return edge_homophily(g); });

  m.def("load_graph", &load_graph_bundle, py::arg("path"));
  m.def("save_graph", &save_graph_bundle, py::arg("graph"), py::arg("path"));

  m.def("cosine_similarity", [](const std::vector<double>& x, const std::vector<double>& y) {
    return cosine_similarity(x, y);
  });
  m.def(
      "knn_prompt_init",
      [](const Matrix& features, std::size_t k) {
        KnnOptions o;
        o.k = k;
        return coo(knn_prompt_init(features, o));
      },
      py::arg("features"), py::arg("k"));
  m.def("gate", py::overload_cast<double, double>(&gate), py::arg("w"), py::arg("alpha"));
  m.def(
      "symmetric_normalize",
      [](const Matrix& dense, bool self_loops) {
        std::vector<Edge> edges;
        for (Eigen::Index i = 0; i < dense.rows(); ++i)
          for (Eigen::Index j = 0; j < dense.cols(); ++j)
            if (dense(i, j) != 0.0)
              edges.push_back({static_cast<std::size_t>(i), static_cast<std::size_t>(j), dense(i, j)});
        return symmetric_normalize(SparseAdj::from_entries(static_cast<std::size_t>(dense.rows()), edges), self_loops)
            .to_dense();
      },
      py::arg("adjacency"), py::arg("self_loops") = true);

  py::class_<SbmConfig>(m, "SbmConfig")
      .def(py::init([](std::size_t n, std::size_t classes, double p_in, double p_out, std::size_t feature_dim,
                       double feature_sep, std::uint64_t seed, double feature_std) {
             return SbmConfig{n, classes, p_in, p_out, feature_dim, feature_sep, seed, feature_std};
           }),
           py::arg("n") = 400, py::arg("classes") = 4, py::arg("p_in") = 0.05, py::arg("p_out") = 0.05,
           py::arg("feature_dim") = 16, py::arg("feature_sep") = 3.0, py::arg("seed") = 0, py::arg("feature_std") = 1.0)
      .def_readwrite("n", &SbmConfig::n)
      .def_readwrite("classes", &SbmConfig::classes)
      .def_readwrite("p_in", &SbmConfig::p_in)
      .def_readwrite("p_out", &SbmConfig::p_out)
      .def_readwrite("feature_dim", &SbmConfig::feature_dim)
      .def_readwrite("feature_sep", &SbmConfig::feature_sep)
      .def_readwrite("seed", &SbmConfig::seed)
      .def_readwrite("feature_std", &SbmConfig::feature_std);
  m.def("generate_sbm", &generate_sbm);

  py::class_<Encoder>(m, "Encoder")
      .def_property_readonly("frozen", &Encoder::frozen)
      .def_property_readonly("objective", [](const Encoder& e) { return e.info.objective; })
      .def("hash", &Encoder::hash)
      .def("embed", [](const Encoder& e, const Graph& g) {
        return encode(e, symmetric_normalize(g.adjacency(), true), g.features());
      });
  m.def("load_encoder", &load_encoder, py::arg("path"));
  m.def("save_encoder", &save_encoder, py::arg("path"), py::arg("encoder"));

  m.def(
      "pretrain",
      [](const Graph& g, const std::string& objective, std::size_t epochs, double lr, std::uint64_t seed,
         std::size_t hidden, std::size_t output) {
        PretrainConfig cfg;
        cfg.objective = parse_objective(objective);
        cfg.epochs = epochs;
        cfg.learning_rate = lr;
        cfg.seed = seed;
        cfg.hidden_dim = hidden;
        cfg.output_dim = output;
        PretrainResult r = pretrain(g, cfg);
        return py::make_tuple(std::move(r.encoder), r.loss_history);
      },
      py::arg("graph"), py::arg("objective") = "dgi", py::arg("epochs") = 300, py::arg("lr") = 1e-3,
      py::arg("seed") = 0, py::arg("hidden_dim") = 256, py::arg("output_dim") = 256);

  py::class_<TuneConfig>(m, "TuneConfig")
      .def(py::init<>())
      .def_readwrite("up_lr", &TuneConfig::up_lr)
      .def_readwrite("down_lr", &TuneConfig::down_lr)
      .def_readwrite("k", &TuneConfig::k)
      .def_readwrite("tau", &TuneConfig::tau)
      .def_readwrite("alpha", &TuneConfig::alpha)
      .def_readwrite("max_epochs", &TuneConfig::max_epochs)
      .def_readwrite("patience", &TuneConfig::patience)
      .def_readwrite("min_delta", &TuneConfig::min_delta)
      .def_readwrite("seed", &TuneConfig::seed)
      .def_readwrite("classifier_hidden", &TuneConfig::classifier_hidden)
      .def_readwrite("knn_candidates", &TuneConfig::knn_candidates);

  m.def(
      "tune",
      [](const Graph& g, const Encoder& e, const std::string& method, std::size_t shot, std::uint64_t seed,
         std::size_t run, TuneConfig cfg) {
        const FewShotTask task = sample_k_shot(g, shot, seed, run);
        cfg.seed = run_seed(seed, run);
        const TuneResult r = run_method(Method::parse(method), g, e, task.labeled(g), cfg);
        py::dict out;
        out["accuracy"] = evaluate(r.predictions, task, g.labels());
        out["epochs"] = r.epochs;
        out["final_loss"] = r.final_loss;
        out["loss_history"] = r.loss_history;
        out["predictions"] = r.predictions;
        out["train"] = task.train;
        return out;
      },
      py::arg("graph"), py::arg("encoder"), py::arg("method") = "uniprompt", py::arg("shot") = 1,
      py::arg("seed") = 42, py::arg("run") = 0, py::arg("config") = TuneConfig{});

  m.def(
      "verify_theory",
      [](std::size_t trials, double eta, std::uint64_t seed) {
        TheoryOptions o;
        o.trials = trials;
        o.eta = eta;
        o.seed = seed;
        const TheoryReport r = run_theory_checks(o);
        py::dict out;
        out["function_deviation"] = r.function.max_deviation;
        out["argmax_agreements"] = r.function.argmax_agreements;
        out["trials"] = r.function.trials;
        out["gradient_deviation"] = r.gradient_deviation;
        out["gradient_deviation_half"] = r.gradient_deviation_half;
        out["tolerance"] = r.tolerance;
        out["function_pass"] = r.function_pass;
        out["gradient_pass"] = r.gradient_pass;
        out["report"] = format_report(r);
        return out;
      },
      py::arg("trials") = 1000, py::arg("eta") = 1e-4, py::arg("seed") = 42);

  m.def(
      "main",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        const int code = dispatch(args, out, err);
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs a CLI command; returns (exit_code, stdout, stderr).");
}
