#include "uniprompt/cli.hpp"

#include "uniprompt/harness.hpp"
#include "uniprompt/pretrain.hpp"
#include "uniprompt/prompt.hpp"
#include "uniprompt/theory.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

namespace uniprompt {

std::filesystem::path resolve_dataset(const std::string& name) {
  require(!name.empty(), "missing --dataset");
  const std::filesystem::path direct(name);
  if (std::filesystem::is_directory(direct)) return direct;
  if (const char* root = std::getenv("UNIPROMPT_DATA_DIR")) {
    const auto candidate = std::filesystem::path(root) / name;
    if (std::filesystem::is_directory(candidate)) return candidate;
  }
  throw ValidationError("dataset '" + name + "' not found (pass a bundle directory or set UNIPROMPT_DATA_DIR)");
}

namespace {

/// Config-file values fill in whatever was not given on the command line.
class Settings {
 public:
  Settings(const CLI::App& app, const std::string& config_path) : app_(app) {
    if (config_path.empty()) return;
    std::ifstream in(config_path);
    if (!in) throw ValidationError("missing file " + config_path);
    try {
      json_ = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
      throw ValidationError("config " + config_path + ": " + e.what());
    }
    require(json_.is_object(), "config " + config_path + " must be a JSON object");
  }

  template <class T>
  void fill(const std::string& flag, T& target) {
    const std::string key = key_of(flag);
    used_.insert(key);
    if (app_.count(flag) > 0 || !json_.contains(key)) return;
    try {
      target = json_.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("config key '" + key + "': " + e.what());
    }
  }

  /// Claims a key handled elsewhere (e.g. an embedded experiment spec).
  void claim(const std::string& key) { used_.insert(key); }
  const nlohmann::json& json() const { return json_; }

  /// Config object without the keys claimed so far.
  nlohmann::json remainder() const {
    nlohmann::json rest = nlohmann::json::object();
    if (json_.is_object())
      for (const auto& [k, v] : json_.items())
        if (!used_.count(k)) rest[k] = v;
    return rest;
  }

  void reject_unknown() const {
    const auto rest = remainder();
    if (!rest.empty()) throw ValidationError("unknown config key '" + rest.begin().key() + "'");
  }

 private:
  static std::string key_of(const std::string& flag) {
    std::string k = flag.substr(flag.find_first_not_of('-'));
    std::replace(k.begin(), k.end(), '-', '_');
    return k;
  }

  const CLI::App& app_;
  nlohmann::json json_ = nlohmann::json::object();
  std::set<std::string> used_;
};

struct Common {
  std::uint64_t seed = 42;
  std::string out;
  std::string config;
  std::size_t jobs = 0;
};

void add_common(CLI::App* cmd, Common& c, bool with_jobs) {
  cmd->add_option("--seed", c.seed, "Random seed");
  cmd->add_option("--out", c.out, "Output path");
  cmd->add_option("--config", c.config, "JSON config file; flags win on conflict");
  if (with_jobs) cmd->add_option("--jobs", c.jobs, "Worker threads (default: available parallelism)");
}

std::vector<double> parse_list(const std::string& s, const char* what) {
  std::vector<double> values;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      values.push_back(std::stod(item, &used));
      require(used == item.size(), "");
    } catch (const std::exception&) {
      throw ValidationError(std::string("bad ") + what + " value '" + item + "'");
    }
  }
  require(!values.empty(), std::string("empty ") + what + " list");
  return values;
}

void write_text(const std::string& path, const std::string& text) {
  if (path.empty()) return;
  const std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream f(p);
  if (!f) throw ValidationError("cannot write " + path);
  f << text;
}

// ---- verbs -------------------------------------------------------------------------

struct PretrainArgs {
  Common common;
  std::string dataset;
  std::string objective = "dgi";
  PretrainConfig cfg;
  std::string activation = "prelu";
};

int run_pretrain(CLI::App& cmd, PretrainArgs& a, std::ostream& out) {
  Settings s(cmd, a.common.config);
  s.fill("--dataset", a.dataset);
  s.fill("--objective", a.objective);
  s.fill("--seed", a.common.seed);
  s.fill("--out", a.common.out);
  s.fill("--epochs", a.cfg.epochs);
  s.fill("--lr", a.cfg.learning_rate);
  s.fill("--hidden", a.cfg.hidden_dim);
  s.fill("--output-dim", a.cfg.output_dim);
  s.fill("--activation", a.activation);
  s.fill("--edge-drop", a.cfg.grace.edge_drop);
  s.fill("--feature-mask", a.cfg.grace.feature_mask);
  s.fill("--temperature", a.cfg.grace.temperature);
  s.fill("--mask-rate", a.cfg.graphmae.mask_rate);
  s.fill("--gamma", a.cfg.graphmae.gamma);
  s.reject_unknown();
  require(!a.common.out.empty(), "pretrain: missing --out");
  a.cfg.objective = parse_objective(a.objective);
  a.cfg.activation = parse_activation(a.activation);
  a.cfg.seed = a.common.seed;
  const Graph graph = load_graph_bundle(resolve_dataset(a.dataset));
  const PretrainResult r = pretrain(graph, a.cfg);
  save_encoder(a.common.out, r.encoder);
  char line[256];
  std::snprintf(line, sizeof line, "%s on %s: %zu epochs, loss %.6f -> %.6f, wrote %s\n", a.objective.c_str(),
                graph.name().c_str(), r.loss_history.size(), r.loss_history.front(), r.loss_history.back(),
                a.common.out.c_str());
  out << line;
  return 0;
}

struct TuneArgs {
  Common common;
  std::string method;
  std::string encoder;
  std::string dataset;
  std::size_t shot = 1;
  std::size_t run = 0;
  TuneConfig cfg;
};

void add_tune_flags(CLI::App* cmd, TuneConfig& cfg) {
  cmd->add_option("--up-lr", cfg.up_lr, "Prompt learning rate");
  cmd->add_option("--down-lr", cfg.down_lr, "Classifier learning rate");
  cmd->add_option("--k", cfg.k, "kNN neighbours per node");
  cmd->add_option("--tau", cfg.tau, "Bootstrap fusion rate");
  cmd->add_option("--alpha", cfg.alpha, "Gate sharpness");
  cmd->add_option("--max-epochs", cfg.max_epochs, "Epoch limit");
  cmd->add_option("--patience", cfg.patience, "Early-stopping patience");
  cmd->add_option("--min-delta", cfg.min_delta, "Minimum loss improvement");
  cmd->add_option("--classifier-hidden", cfg.classifier_hidden, "Classifier hidden width");
  cmd->add_option("--knn-candidates", cfg.knn_candidates, "Sampled kNN candidate count (0: exact)");
}

void fill_tune(Settings& s, TuneConfig& cfg) {
  s.fill("--up-lr", cfg.up_lr);
  s.fill("--down-lr", cfg.down_lr);
  s.fill("--k", cfg.k);
  s.fill("--tau", cfg.tau);
  s.fill("--alpha", cfg.alpha);
  s.fill("--max-epochs", cfg.max_epochs);
  s.fill("--patience", cfg.patience);
  s.fill("--min-delta", cfg.min_delta);
  s.fill("--classifier-hidden", cfg.classifier_hidden);
  s.fill("--knn-candidates", cfg.knn_candidates);
}

int run_tune(CLI::App& cmd, TuneArgs& a, std::ostream& out, std::ostream& err) {
  Settings s(cmd, a.common.config);
  s.fill("--method", a.method);
  s.fill("--encoder", a.encoder);
  s.fill("--dataset", a.dataset);
  s.fill("--shot", a.shot);
  s.fill("--run", a.run);
  s.fill("--seed", a.common.seed);
  s.fill("--out", a.common.out);
  fill_tune(s, a.cfg);
  s.reject_unknown();
  for (const auto* missing : {a.dataset.empty() ? "--dataset" : nullptr, a.encoder.empty() ? "--encoder" : nullptr,
                              a.method.empty() ? "--method" : nullptr}) {
    if (!missing) continue;
    err << "tune: missing " << missing << "\n\n" << cmd.help();
    return 1;
  }
  const Method method = Method::parse(a.method);
  const Graph graph = load_graph_bundle(resolve_dataset(a.dataset));
  const Encoder encoder = load_encoder(a.encoder);
  const FewShotTask task = sample_k_shot(graph, a.shot, a.common.seed, a.run);
  a.cfg.seed = run_seed(a.common.seed, a.run);
  const TuneResult r = run_method(method, graph, encoder, task.labeled(graph), a.cfg);
  nlohmann::ordered_json rec;
  rec["method"] = method.name();
  rec["dataset"] = graph.name();
  rec["seed"] = a.common.seed;
  rec["run"] = a.run;
  rec["shot"] = a.shot;
  rec["accuracy"] = evaluate(r.predictions, task, graph.labels());
  rec["epochs"] = r.epochs;
  rec["final_loss"] = r.final_loss;
  const std::string text = rec.dump() + "\n";
  out << text;
  write_text(a.common.out, text);
  return 0;
}

struct ExperimentArgs {
  Common common;
  std::string dataset;
  std::string encoder;
  std::size_t runs = 0;
  std::string shots;
  std::string methods;
  // verb-specific
  std::string param = "tau";
  std::string grid;
  std::string levels = "0.01,0.05,0.2";
  std::uint64_t noise_seed = 0;
  std::string variants = "random_topo,simple_add,discard_topo";
  TuneConfig tune;  // flag values only; applied on top of every method
};

void add_experiment_flags(CLI::App* cmd, ExperimentArgs& a) {
  add_common(cmd, a.common, true);
  cmd->add_option("--dataset", a.dataset, "Dataset bundle or name");
  cmd->add_option("--encoder", a.encoder, "Encoder checkpoint");
  cmd->add_option("--runs", a.runs, "Runs per seed");
  cmd->add_option("--shots", a.shots, "Comma-separated shot counts");
  cmd->add_option("--methods", a.methods, "Comma-separated methods");
  add_tune_flags(cmd, a.tune);
}

void override_tune(const CLI::App& cmd, const TuneConfig& flags, TuneConfig& cfg) {
  auto set = [&](const char* flag, auto member) {
    if (cmd.count(flag)) cfg.*member = flags.*member;
  };
  set("--up-lr", &TuneConfig::up_lr);
  set("--down-lr", &TuneConfig::down_lr);
  set("--k", &TuneConfig::k);
  set("--tau", &TuneConfig::tau);
  set("--alpha", &TuneConfig::alpha);
  set("--max-epochs", &TuneConfig::max_epochs);
  set("--patience", &TuneConfig::patience);
  set("--min-delta", &TuneConfig::min_delta);
  set("--classifier-hidden", &TuneConfig::classifier_hidden);
  set("--knn-candidates", &TuneConfig::knn_candidates);
}

std::vector<std::string> split(const std::string& s) {
  std::vector<std::string> parts;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) parts.push_back(item);
  return parts;
}

/// Builds the experiment spec from config + flags; verb-specific keys must be claimed beforehand.
ExperimentSpec experiment_spec(CLI::App& cmd, ExperimentArgs& a, Settings& s, std::vector<std::string> default_methods) {
  s.claim("config");
  nlohmann::json spec_json = s.remainder();
  ExperimentSpec spec = parse_experiment_spec(spec_json);
  if (cmd.count("--dataset")) spec.dataset = a.dataset;
  if (cmd.count("--encoder")) spec.pretrain = a.encoder;
  if (cmd.count("--runs")) spec.runs = a.runs;
  if (cmd.count("--jobs")) spec.jobs = a.common.jobs;
  if (cmd.count("--seed")) spec.seeds = {a.common.seed};
  if (cmd.count("--shots")) {
    spec.shots.clear();
    for (double v : parse_list(a.shots, "shot")) spec.shots.push_back(static_cast<std::size_t>(v));
  }
  const TuneConfig shared = spec_json.contains("tune") ? parse_tune_config(spec_json.at("tune")) : TuneConfig{};
  if (cmd.count("--methods")) {
    spec.methods.clear();
    for (const auto& m : split(a.methods)) spec.methods.push_back({Method::parse(m), shared});
  }
  if (spec.methods.empty())
    for (const auto& m : default_methods) spec.methods.push_back({Method::parse(m), shared});
  for (auto& m : spec.methods) override_tune(cmd, a.tune, m.tune);
  if (spec.pretrain.empty()) throw ValidationError(cmd.get_name() + ": missing --encoder");
  return spec;
}

void emit(const ResultTable& table, const std::string& out_dir, std::ostream& out) {
  table.write_markdown(out);
  if (!out_dir.empty()) table.write_all(out_dir);
}

int run_eval(CLI::App& cmd, ExperimentArgs& a, std::ostream& out) {
  Settings s(cmd, a.common.config);
  s.claim("out");
  if (!cmd.count("--out") && s.json().contains("out")) a.common.out = s.json().at("out").get<std::string>();
  const ExperimentSpec spec = experiment_spec(cmd, a, s, {"linear-probe", "uniprompt"});
  const Graph graph = load_graph_bundle(resolve_dataset(spec.dataset));
  const Encoder encoder = load_encoder(spec.pretrain);
  emit(run_experiment(graph, encoder, spec), a.common.out, out);
  return 0;
}

int run_sweep(CLI::App& cmd, ExperimentArgs& a, std::ostream& out) {
  Settings s(cmd, a.common.config);
  s.fill("--param", a.param);
  s.fill("--grid", a.grid);
  s.fill("--out", a.common.out);
  const ExperimentSpec spec = experiment_spec(cmd, a, s, {"uniprompt"});
  if (a.grid.empty()) a.grid = a.param == "tau" ? "0.99,0.999,0.9999,0.99999,1" : a.param == "k" ? "1,5,10,20,50" : "1,5,10,20";
  const SweepParam param = parse_sweep_param(a.param);
  const auto grid = parse_list(a.grid, "grid");
  const Graph graph = load_graph_bundle(resolve_dataset(spec.dataset));
  const Encoder encoder = load_encoder(spec.pretrain);
  emit(sweep(param, grid, graph, encoder, spec), a.common.out, out);
  return 0;
}

int run_noise(CLI::App& cmd, ExperimentArgs& a, std::ostream& out) {
  Settings s(cmd, a.common.config);
  s.fill("--levels", a.levels);
  s.fill("--noise-seed", a.noise_seed);
  s.fill("--out", a.common.out);
  const ExperimentSpec spec = experiment_spec(cmd, a, s, {"uniprompt"});
  const auto levels = parse_list(a.levels, "noise level");
  const Graph graph = load_graph_bundle(resolve_dataset(spec.dataset));
  const Encoder encoder = load_encoder(spec.pretrain);
  emit(noise_robustness(levels, graph, encoder, spec, a.noise_seed), a.common.out, out);
  return 0;
}

int run_ablate(CLI::App& cmd, ExperimentArgs& a, std::ostream& out) {
  Settings s(cmd, a.common.config);
  s.fill("--variants", a.variants);
  s.fill("--out", a.common.out);
  std::vector<std::string> methods{"uniprompt"};
  for (const auto& v : split(a.variants)) methods.push_back("ablate:" + v);
  ExperimentSpec spec = experiment_spec(cmd, a, s, methods);
  const Graph graph = load_graph_bundle(resolve_dataset(spec.dataset));
  const Encoder encoder = load_encoder(spec.pretrain);
  emit(run_experiment(graph, encoder, spec), a.common.out, out);
  return 0;
}

struct TheoryArgs {
  Common common;
  TheoryOptions options;
};

int run_verify(CLI::App& cmd, TheoryArgs& a, std::ostream& out) {
  Settings s(cmd, a.common.config);
  s.fill("--trials", a.options.trials);
  s.fill("--eta", a.options.eta);
  s.fill("--seed", a.common.seed);
  s.fill("--out", a.common.out);
  s.reject_unknown();
  a.options.seed = a.common.seed;
  const TheoryReport r = run_theory_checks(a.options);
  const std::string text = format_report(r) + ((r.function_pass && r.gradient_pass) ? "PASS\n" : "FAIL\n");
  out << text;
  write_text(a.common.out, text);
  return 0;
}

struct SbmArgs {
  Common common;
  SbmConfig cfg;
};

int run_make_sbm(CLI::App& cmd, SbmArgs& a, std::ostream& out) {
  Settings s(cmd, a.common.config);
  s.fill("--n", a.cfg.n);
  s.fill("--classes", a.cfg.classes);
  s.fill("--p-in", a.cfg.p_in);
  s.fill("--p-out", a.cfg.p_out);
  s.fill("--dim", a.cfg.feature_dim);
  s.fill("--sep", a.cfg.feature_sep);
  s.fill("--std", a.cfg.feature_std);
  s.fill("--seed", a.common.seed);
  s.fill("--out", a.common.out);
  s.reject_unknown();
  require(!a.common.out.empty(), "make-sbm: missing --out");
  a.cfg.seed = a.common.seed;
  const Graph g = generate_sbm(a.cfg);
  save_graph_bundle(g, a.common.out);
  const auto h = edge_homophily(g);
  char line[256];
  std::snprintf(line, sizeof line, "wrote %s: %zu nodes, %zu edges, homophily %s\n", a.common.out.c_str(),
                g.num_nodes(), g.num_undirected_edges(), h ? std::to_string(*h).c_str() : "n/a");
  out << line;
  return 0;
}

struct InspectArgs {
  Common common;
  std::string dataset;
};

int run_inspect(CLI::App& cmd, InspectArgs& a, std::ostream& out) {
  Settings s(cmd, a.common.config);
  s.fill("--dataset", a.dataset);
  s.fill("--seed", a.common.seed);
  s.fill("--out", a.common.out);
  s.reject_unknown();
  const Graph g = load_graph_bundle(resolve_dataset(a.dataset));
  const auto h = g.has_labels() ? edge_homophily(g) : std::nullopt;
  char hom[32] = "n/a";
  if (h) std::snprintf(hom, sizeof hom, "%.2f", *h);
  std::ostringstream line;
  line << g.num_nodes() << ' ' << g.num_undirected_edges() << ' ' << g.num_features() << ' ' << g.num_classes() << ' '
       << hom << '\n';
  out << line.str();
  write_text(a.common.out, line.str());
  return 0;
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Graph prompt-learning lab: pretraining, prompt tuning, evaluation", "uniprompt"};
  app.require_subcommand(1);

  PretrainArgs pa;
  auto* pre = app.add_subcommand("pretrain", "Pretrain a GCN encoder with a self-supervised objective");
  add_common(pre, pa.common, false);
  pre->add_option("--dataset", pa.dataset, "Dataset bundle or name");
  pre->add_option("--objective", pa.objective, "dgi | grace | graphmae");
  pre->add_option("--epochs", pa.cfg.epochs, "Training epochs");
  pre->add_option("--lr", pa.cfg.learning_rate, "Learning rate");
  pre->add_option("--hidden", pa.cfg.hidden_dim, "Hidden width");
  pre->add_option("--output-dim", pa.cfg.output_dim, "Embedding width");
  pre->add_option("--activation", pa.activation, "prelu | relu | identity");
  pre->add_option("--edge-drop", pa.cfg.grace.edge_drop, "GRACE edge drop rate");
  pre->add_option("--feature-mask", pa.cfg.grace.feature_mask, "GRACE feature mask rate");
  pre->add_option("--temperature", pa.cfg.grace.temperature, "GRACE temperature");
  pre->add_option("--mask-rate", pa.cfg.graphmae.mask_rate, "GraphMAE mask rate");
  pre->add_option("--gamma", pa.cfg.graphmae.gamma, "GraphMAE scaled-cosine exponent");

  TuneArgs ta;
  auto* tune = app.add_subcommand("tune", "Tune one few-shot task and print a JSON record");
  add_common(tune, ta.common, false);
  tune->add_option("--method", ta.method, "uniprompt | linear-probe | fine-tune | gpf | ablate:<variant>");
  tune->add_option("--encoder", ta.encoder, "Encoder checkpoint");
  tune->add_option("--dataset", ta.dataset, "Dataset bundle or name");
  tune->add_option("--shot", ta.shot, "Labeled nodes per class");
  tune->add_option("--run", ta.run, "Run index within the seed");
  add_tune_flags(tune, ta.cfg);

  ExperimentArgs ea;
  auto* eval = app.add_subcommand("eval", "Run an experiment over seeds x runs and write result tables");
  add_experiment_flags(eval, ea);
  auto* sw = app.add_subcommand("sweep", "Sweep tau, k or alpha");
  add_experiment_flags(sw, ea);
  sw->add_option("--param", ea.param, "tau | k | alpha");
  sw->add_option("--grid", ea.grid, "Comma-separated values");
  auto* noise = app.add_subcommand("noise", "Gaussian feature-noise robustness");
  add_experiment_flags(noise, ea);
  noise->add_option("--levels", ea.levels, "Comma-separated noise standard deviations");
  noise->add_option("--noise-seed", ea.noise_seed, "Seed of the feature noise");
  auto* ablate = app.add_subcommand("ablate", "Compare UniPrompt with its component replacements");
  add_experiment_flags(ablate, ea);
  ablate->add_option("--variants", ea.variants, "Comma-separated: random_topo, simple_add, discard_topo");

  TheoryArgs th;
  auto* verify = app.add_subcommand("verify-theory", "Check prompt/classifier equivalence numerically");
  add_common(verify, th.common, false);
  verify->add_option("--trials", th.options.trials, "Random cases");
  verify->add_option("--eta", th.options.eta, "Learning rate of the gradient-path check");

  SbmArgs sb;
  auto* sbm = app.add_subcommand("make-sbm", "Write a synthetic stochastic-block-model bundle");
  add_common(sbm, sb.common, false);
  sbm->add_option("--n", sb.cfg.n, "Nodes");
  sbm->add_option("--classes", sb.cfg.classes, "Classes");
  sbm->add_option("--p-in", sb.cfg.p_in, "Within-class edge probability");
  sbm->add_option("--p-out", sb.cfg.p_out, "Cross-class edge probability");
  sbm->add_option("--dim", sb.cfg.feature_dim, "Feature dimension");
  sbm->add_option("--sep", sb.cfg.feature_sep, "Distance between class means");
  sbm->add_option("--std", sb.cfg.feature_std, "Within-class feature standard deviation");

  InspectArgs ia;
  auto* inspect = app.add_subcommand("inspect", "Print N |E| F C homophily");
  add_common(inspect, ia.common, false);
  inspect->add_option("--dataset", ia.dataset, "Dataset bundle or name");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    const auto subs = app.get_subcommands();
    err << (subs.empty() ? app.help() : subs.front()->help());
    return 1;
  }

  try {
    if (*pre) return run_pretrain(*pre, pa, out);
    if (*tune) return run_tune(*tune, ta, out, err);
    if (*eval) return run_eval(*eval, ea, out);
    if (*sw) return run_sweep(*sw, ea, out);
    if (*noise) return run_noise(*noise, ea, out);
    if (*ablate) return run_ablate(*ablate, ea, out);
    if (*verify) return run_verify(*verify, th, out);
    if (*sbm) return run_make_sbm(*sbm, sb, out);
    if (*inspect) return run_inspect(*inspect, ia, out);
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const RuntimeAbort& e) {
    err << "aborted: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "aborted: " << e.what() << '\n';
    return 2;
  }
  return 1;
}

int dispatch(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return dispatch(args, std::cout, std::cerr);
}

}  // namespace uniprompt
