#include "uniprompt/harness.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <map>
#include <mutex>
#include <ostream>
#include <thread>

namespace uniprompt {

// ---- tasks ----------------------------------------------------------------------

LabeledNodes FewShotTask::labeled(const Graph& graph) const {
  LabeledNodes l;
  l.ids = train;
  for (auto i : train) l.labels.push_back(graph.labels()[i]);
  return l;
}

FewShotTask sample_k_shot(const Graph& graph, std::size_t k, std::uint64_t seed, std::size_t run) {
  require(k >= 1, "sample_k_shot: shot must be >= 1");
  const auto& labels = graph.labels();
  std::vector<std::vector<std::size_t>> by_class(graph.num_classes());
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[static_cast<std::size_t>(labels[i])].push_back(i);
  FewShotTask task;
  task.shot = k;
  task.seed = seed;
  task.run = run;
  Rng rng(seed, "sampling", run);
  std::vector<bool> in_train(labels.size(), false);
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    if (by_class[c].size() < k)
      throw ValidationError("sample_k_shot: class " + std::to_string(c) + " has " + std::to_string(by_class[c].size()) +
                            " nodes, fewer than k=" + std::to_string(k));
    for (auto pick : rng.sample_without_replacement(by_class[c].size(), k)) {
      task.train.push_back(by_class[c][pick]);
      in_train[by_class[c][pick]] = true;
    }
  }
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (!in_train[i]) task.test.push_back(i);
  return task;
}

double evaluate(std::span<const int> predictions, const FewShotTask& task, std::span<const int> labels) {
  require(!task.test.empty(), "evaluate: empty test set");
  std::size_t correct = 0;
  for (auto i : task.test) {
    if (i >= predictions.size()) throw ValidationError("evaluate: missing prediction for node " + std::to_string(i));
    correct += predictions[i] == labels[i] ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(task.test.size());
}

std::uint64_t run_seed(std::uint64_t seed, std::size_t run) { return derive_seed(seed, "run", run); }

// ---- configuration -------------------------------------------------------------------

void ExperimentSpec::validate() const {
  require(!methods.empty(), "experiment: no methods");
  require(!shots.empty(), "experiment: no shots");
  require(!seeds.empty(), "experiment: no seeds");
  require(runs >= 1, "experiment: runs must be >= 1");
  for (const auto& m : methods) m.tune.validate();
}

namespace {

KnnSymmetrize parse_symmetrize(const std::string& s) {
  if (s == "union_max") return KnnSymmetrize::union_max;
  if (s == "intersection") return KnnSymmetrize::intersection;
  if (s == "mean") return KnnSymmetrize::mean;
  throw ValidationError("unknown symmetrization '" + s + "'");
}

std::string symmetrize_name(KnnSymmetrize s) {
  switch (s) {
    case KnnSymmetrize::union_max: return "union_max";
    case KnnSymmetrize::intersection: return "intersection";
    case KnnSymmetrize::mean: return "mean";
  }
  return "?";
}

template <class T>
T get(const nlohmann::json& j, const char* key) {
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("config key '") + key + "': " + e.what());
  }
}

}  // namespace

TuneConfig parse_tune_config(const nlohmann::json& j, TuneConfig c) {
  require(j.is_object(), "tune config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (key == "up_lr") c.up_lr = get<double>(j, "up_lr");
    else if (key == "down_lr") c.down_lr = get<double>(j, "down_lr");
    else if (key == "k") c.k = get<std::size_t>(j, "k");
    else if (key == "tau") c.tau = get<double>(j, "tau");
    else if (key == "alpha") c.alpha = get<double>(j, "alpha");
    else if (key == "max_epochs") c.max_epochs = get<std::size_t>(j, "max_epochs");
    else if (key == "patience") c.patience = get<std::size_t>(j, "patience");
    else if (key == "min_delta") c.min_delta = get<double>(j, "min_delta");
    else if (key == "seed") c.seed = get<std::uint64_t>(j, "seed");
    else if (key == "classifier_hidden") c.classifier_hidden = get<std::size_t>(j, "classifier_hidden");
    else if (key == "knn_candidates") c.knn_candidates = get<std::size_t>(j, "knn_candidates");
    else if (key == "symmetrize") c.symmetrize = parse_symmetrize(get<std::string>(j, "symmetrize"));
    else throw ValidationError("unknown tune config key '" + key + "'");
  }
  return c;
}

nlohmann::json tune_config_json(const TuneConfig& c) {
  nlohmann::ordered_json j;
  j["up_lr"] = c.up_lr;
  j["down_lr"] = c.down_lr;
  j["k"] = c.k;
  j["tau"] = c.tau;
  j["alpha"] = c.alpha;
  j["max_epochs"] = c.max_epochs;
  j["patience"] = c.patience;
  j["min_delta"] = c.min_delta;
  j["classifier_hidden"] = c.classifier_hidden;
  j["knn_candidates"] = c.knn_candidates;
  j["symmetrize"] = symmetrize_name(c.symmetrize);
  return j;
}

ExperimentSpec parse_experiment_spec(const nlohmann::json& j) {
  require(j.is_object(), "experiment config must be a JSON object");
  static const std::vector<std::string> known{"dataset", "pretrain", "methods", "shots", "seeds", "runs", "jobs", "tune"};
  for (const auto& [key, value] : j.items())
    require(std::find(known.begin(), known.end(), key) != known.end(), "unknown experiment config key '" + key + "'");
  ExperimentSpec s;
  if (j.contains("dataset")) s.dataset = get<std::string>(j, "dataset");
  if (j.contains("pretrain")) s.pretrain = get<std::string>(j, "pretrain");
  if (j.contains("shots")) s.shots = get<std::vector<std::size_t>>(j, "shots");
  if (j.contains("seeds")) s.seeds = get<std::vector<std::uint64_t>>(j, "seeds");
  if (j.contains("runs")) s.runs = get<std::size_t>(j, "runs");
  if (j.contains("jobs")) s.jobs = get<std::size_t>(j, "jobs");
  const TuneConfig shared = j.contains("tune") ? parse_tune_config(j.at("tune")) : TuneConfig{};
  if (j.contains("methods")) {
    require(j.at("methods").is_array(), "experiment: methods must be an array");
    for (const auto& m : j.at("methods")) {
      if (m.is_string()) {
        s.methods.push_back({Method::parse(m.get<std::string>()), shared});
      } else {
        require(m.is_object() && m.contains("name"), "experiment: method entries need a name");
        TuneConfig t = m.contains("tune") ? parse_tune_config(m.at("tune"), shared) : shared;
        s.methods.push_back({Method::parse(get<std::string>(m, "name")), t});
      }
    }
  }
  return s;
}

ExperimentSpec load_experiment_spec(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("missing file " + path.string());
  try {
    return parse_experiment_spec(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError("experiment config " + path.string() + ": " + e.what());
  }
}

// ---- results ---------------------------------------------------------------------------

std::pair<double, double> mean_std(std::span<const double> values) {
  if (values.empty()) return {0.0, 0.0};
  double sum = 0.0;
  for (double v : values) sum += v;
  const double mean = sum / static_cast<double>(values.size());
  double sq = 0.0;
  for (double v : values) sq += (v - mean) * (v - mean);
  return {mean, std::sqrt(sq / static_cast<double>(values.size()))};
}

void ResultTable::append(const ResultTable& other) {
  records_.insert(records_.end(), other.records_.begin(), other.records_.end());
}

std::vector<Aggregate> ResultTable::aggregates() const {
  std::vector<Aggregate> out;
  std::vector<std::vector<double>> values;
  for (const auto& r : records_) {
    std::size_t slot = out.size();
    for (std::size_t a = 0; a < out.size(); ++a) {
      const auto& g = out[a];
      if (g.param == r.param && g.dataset == r.dataset && g.pretrain == r.pretrain && g.method == r.method &&
          g.shot == r.shot) {
        slot = a;
        break;
      }
    }
    if (slot == out.size()) {
      out.push_back({r.param, r.dataset, r.pretrain, r.method, r.shot, 0, 0.0, 0.0});
      values.emplace_back();
    }
    values[slot].push_back(r.accuracy);
  }
  for (std::size_t a = 0; a < out.size(); ++a) {
    out[a].count = values[a].size();
    std::tie(out[a].mean, out[a].std_population) = mean_std(values[a]);
  }
  return out;
}

std::optional<Aggregate> ResultTable::find(const std::string& method, std::size_t shot, const std::string& param) const {
  for (const auto& a : aggregates())
    if (a.method == method && a.shot == shot && a.param == param) return a;
  return std::nullopt;
}

namespace {

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

}  // namespace

void ResultTable::write_csv(std::ostream& out) const {
  if (!param_name_.empty()) out << param_name_ << ',';
  out << "dataset,pretrain,method,shot,seed,run,accuracy\n";
  for (const auto& r : records_) {
    if (!param_name_.empty()) out << r.param << ',';
    out << r.dataset << ',' << r.pretrain << ',' << r.method << ',' << r.shot << ',' << r.seed << ',' << r.run << ','
        << fmt("%.17g", r.accuracy) << '\n';
  }
}

void ResultTable::write_summary_csv(std::ostream& out) const {
  if (!param_name_.empty()) out << param_name_ << ',';
  out << "dataset,pretrain,method,shot,count,mean,std_population\n";
  for (const auto& a : aggregates()) {
    if (!param_name_.empty()) out << a.param << ',';
    out << a.dataset << ',' << a.pretrain << ',' << a.method << ',' << a.shot << ',' << a.count << ','
        << fmt("%.17g", a.mean) << ',' << fmt("%.17g", a.std_population) << '\n';
  }
}

void ResultTable::write_markdown(std::ostream& out) const {
  const auto aggs = aggregates();
  // Sections keyed by (param, dataset, pretrain) in first-appearance order.
  std::vector<std::array<std::string, 3>> sections;
  for (const auto& a : aggs) {
    std::array<std::string, 3> key{a.param, a.dataset, a.pretrain};
    if (std::find(sections.begin(), sections.end(), key) == sections.end()) sections.push_back(key);
  }
  for (const auto& key : sections) {
    std::vector<std::string> methods;
    std::vector<std::size_t> shots;
    for (const auto& a : aggs) {
      if (a.param != key[0] || a.dataset != key[1] || a.pretrain != key[2]) continue;
      if (std::find(methods.begin(), methods.end(), a.method) == methods.end()) methods.push_back(a.method);
      if (std::find(shots.begin(), shots.end(), a.shot) == shots.end()) shots.push_back(a.shot);
    }
    out << "### " << key[1] << " / " << key[2];
    if (!param_name_.empty()) out << " (" << param_name_ << " = " << key[0] << ")";
    out << "\n\n| method |";
    for (auto s : shots) out << ' ' << s << "-shot |";
    out << "\n|---|";
    for (std::size_t s = 0; s < shots.size(); ++s) out << "---|";
    out << '\n';
    auto lookup = [&](const std::string& m, std::size_t s) -> const Aggregate* {
      for (const auto& a : aggs)
        if (a.param == key[0] && a.dataset == key[1] && a.pretrain == key[2] && a.method == m && a.shot == s) return &a;
      return nullptr;
    };
    std::vector<double> best(shots.size(), -1.0);
    for (std::size_t s = 0; s < shots.size(); ++s)
      for (const auto& m : methods)
        if (const auto* a = lookup(m, shots[s])) best[s] = std::max(best[s], a->mean);
    for (const auto& m : methods) {
      out << "| " << m << " |";
      for (std::size_t s = 0; s < shots.size(); ++s) {
        const auto* a = lookup(m, shots[s]);
        if (!a) {
          out << " - |";
          continue;
        }
        const std::string cell = fmt("%.2f", 100.0 * a->mean) + "±" + fmt("%.2f", 100.0 * a->std_population);
        out << ' ' << (a->mean == best[s] ? "**" + cell + "**" : cell) << " |";
      }
      out << '\n';
    }
    out << '\n';
  }
}

void ResultTable::write_all(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  std::ofstream csv(dir / "results.csv");
  write_csv(csv);
  std::ofstream summary(dir / "summary.csv");
  write_summary_csv(summary);
  std::ofstream md(dir / "results.md");
  write_markdown(md);
  if (!csv || !summary || !md) throw ValidationError("cannot write results under " + dir.string());
}

// ---- execution -------------------------------------------------------------------------

void parallel_for(std::size_t count, std::size_t jobs, const std::function<void(std::size_t)>& f) {
  if (jobs == 0) jobs = std::max(1u, std::thread::hardware_concurrency());
  jobs = std::min(jobs, count);
  std::vector<std::exception_ptr> errors(count);
  if (jobs <= 1) {
    for (std::size_t i = 0; i < count; ++i) {
      try {
        f(i);
      } catch (...) {
        errors[i] = std::current_exception();
        break;
      }
    }
  } else {
    std::atomic<std::size_t> next{0};
    std::atomic<bool> failed{false};
    std::vector<std::thread> workers;
    for (std::size_t w = 0; w < jobs; ++w) {
      workers.emplace_back([&] {
        for (std::size_t i; !failed && (i = next++) < count;) {
          try {
            f(i);
          } catch (...) {
            errors[i] = std::current_exception();
            failed = true;
          }
        }
      });
    }
    for (auto& t : workers) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

namespace {

template <class E>
[[noreturn]] void rethrow_with(const std::string& context, const std::exception& e) {
  throw E(context + ": " + e.what());
}

}  // namespace

ResultTable run_experiment(const Graph& graph, const Encoder& encoder, const ExperimentSpec& spec,
                           const std::string& param_name, const std::string& param_value) {
  spec.validate();
  require(graph.has_labels(), "experiment: dataset has no labels");
  const std::string dataset = graph.name().empty() ? spec.dataset : graph.name();
  const std::string pretrain = encoder.info.objective.empty() ? spec.pretrain : encoder.info.objective;

  // Exact kNN prompt graphs depend only on the features and (k, symmetrization); build each once.
  std::map<std::pair<std::size_t, int>, SparseAdj> prompt_graphs;
  for (const auto& m : spec.methods) {
    if (!m.method.uses_prompt_graph() || m.tune.knn_candidates > 0) continue;
    const auto key = std::make_pair(m.tune.k, static_cast<int>(m.tune.symmetrize));
    if (!prompt_graphs.count(key)) prompt_graphs.emplace(key, knn_prompt_init(graph.features(), m.tune.knn_options()));
  }

  struct Job {
    std::size_t method, shot, seed, run;
  };
  std::vector<Job> jobs;
  for (std::size_t m = 0; m < spec.methods.size(); ++m)
    for (std::size_t s = 0; s < spec.shots.size(); ++s)
      for (std::size_t d = 0; d < spec.seeds.size(); ++d)
        for (std::size_t r = 0; r < spec.runs; ++r) jobs.push_back({m, s, d, r});

  std::vector<ResultRecord> records(jobs.size());
  parallel_for(jobs.size(), spec.jobs, [&](std::size_t j) {
    const Job& job = jobs[j];
    const MethodSpec& ms = spec.methods[job.method];
    const std::uint64_t seed = spec.seeds[job.seed];
    const std::string context = ms.method.name() + " " + std::to_string(spec.shots[job.shot]) + "-shot (seed " +
                                std::to_string(seed) + ", run " + std::to_string(job.run) + ")";
    try {
      const FewShotTask task = sample_k_shot(graph, spec.shots[job.shot], seed, job.run);
      TuneConfig cfg = ms.tune;
      cfg.seed = run_seed(seed, job.run);
      const SparseAdj* init = nullptr;
      if (ms.method.uses_prompt_graph() && cfg.knn_candidates == 0)
        init = &prompt_graphs.at({cfg.k, static_cast<int>(cfg.symmetrize)});
      const TuneResult tr = run_method(ms.method, graph, encoder, task.labeled(graph), cfg, init);
      ResultRecord& rec = records[j];
      rec.param = param_value;
      rec.dataset = dataset;
      rec.pretrain = pretrain;
      rec.method = ms.method.name();
      rec.shot = spec.shots[job.shot];
      rec.seed = seed;
      rec.run = job.run;
      rec.accuracy = evaluate(tr.predictions, task, graph.labels());
      rec.epochs = tr.epochs;
      rec.final_loss = tr.final_loss;
    } catch (const ValidationError& e) {
      rethrow_with<ValidationError>(context, e);
    } catch (const std::exception& e) {
      rethrow_with<RuntimeAbort>(context, e);
    }
  });

  ResultTable table(param_name);
  for (auto& r : records) table.add(std::move(r));
  return table;
}

SweepParam parse_sweep_param(const std::string& s) {
  if (s == "tau") return SweepParam::tau;
  if (s == "k") return SweepParam::k;
  if (s == "alpha") return SweepParam::alpha;
  throw ValidationError("unknown sweep parameter '" + s + "' (expected tau, k or alpha)");
}

std::string to_string(SweepParam p) {
  switch (p) {
    case SweepParam::tau: return "tau";
    case SweepParam::k: return "k";
    case SweepParam::alpha: return "alpha";
  }
  return "?";
}

ResultTable sweep(SweepParam param, std::span<const double> grid, const Graph& graph, const Encoder& encoder,
                  const ExperimentSpec& base) {
  require(!grid.empty(), "sweep: empty grid");
  ResultTable table(to_string(param));
  for (double v : grid) {
    ExperimentSpec spec = base;
    for (auto& m : spec.methods) {
      switch (param) {
        case SweepParam::tau: m.tune.tau = v; break;
        case SweepParam::k:
          require(v >= 1.0 && v == std::floor(v), "sweep: k values must be positive integers");
          m.tune.k = static_cast<std::size_t>(v);
          break;
        case SweepParam::alpha: m.tune.alpha = v; break;
      }
    }
    table.append(run_experiment(graph, encoder, spec, table.param_name(), fmt("%.10g", v)));
  }
  return table;
}

ResultTable noise_robustness(std::span<const double> levels, const Graph& graph, const Encoder& encoder,
                             const ExperimentSpec& base, std::uint64_t noise_seed) {
  require(!levels.empty(), "noise: no levels");
  ResultTable table("noise");
  for (double level : levels) {
    require(level >= 0.0, "noise: levels must be >= 0");
    const Graph noisy = graph.with_features(add_gaussian_noise(graph.features(), level, noise_seed));
    table.append(run_experiment(noisy, encoder, base, table.param_name(), fmt("%.10g", level)));
  }
  return table;
}

Graph generate_sbm(const SbmConfig& c) {
  auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
  require(prob(c.p_in) && prob(c.p_out), "sbm: probabilities must lie in [0, 1]");
  require(c.classes >= 2, "sbm: need at least two classes");
  require(c.n >= c.classes, "sbm: fewer nodes than classes");
  require(c.feature_dim >= c.classes, "sbm: feature_dim must be >= classes");
  require(c.feature_sep >= 0.0, "sbm: feature_sep must be >= 0");
  require(c.feature_std > 0.0, "sbm: feature_std must be positive");
  std::vector<int> labels(c.n);
  for (std::size_t i = 0; i < c.n; ++i) labels[i] = static_cast<int>(i % c.classes);

  Rng edge_rng(c.seed, "sbm-edges");
  std::vector<Edge> edges;
  for (std::size_t i = 0; i < c.n; ++i)
    for (std::size_t j = i + 1; j < c.n; ++j)
      if (edge_rng.bernoulli(labels[i] == labels[j] ? c.p_in : c.p_out)) edges.push_back({i, j, 1.0});

  // Scaled basis vectors are pairwise feature_sep apart.
  Rng feat_rng(c.seed, "sbm-features");
  Matrix x(static_cast<Eigen::Index>(c.n), static_cast<Eigen::Index>(c.feature_dim));
  const double mu = c.feature_sep / std::sqrt(2.0);
  for (std::size_t i = 0; i < c.n; ++i)
    for (std::size_t f = 0; f < c.feature_dim; ++f)
      x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(f)) =
          c.feature_std * feat_rng.normal() + (f == static_cast<std::size_t>(labels[i]) ? mu : 0.0);
  return Graph::from_edges(c.n, edges, std::move(x), std::move(labels), c.classes, "sbm");
}

}  // namespace uniprompt
