#pragma once

#include "uniprompt/graph.hpp"
#include "uniprompt/prompt.hpp"

#include <array>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace uniprompt {

inline constexpr std::array<std::uint64_t, 5> kDefaultSeeds{42, 12345, 23344, 38108, 39788};
inline constexpr std::size_t kDefaultRuns = 20;

struct FewShotTask {
  std::size_t shot = 0;
  std::vector<std::size_t> train;  // grouped by class, k per class
  std::vector<std::size_t> test;   // every other labeled node, ascending
  std::uint64_t seed = 0;
  std::size_t run = 0;

  LabeledNodes labeled(const Graph& graph) const;
};

/// k nodes per class drawn without replacement from a stream keyed by (seed, run).
FewShotTask sample_k_shot(const Graph& graph, std::size_t k, std::uint64_t seed, std::size_t run);

/// Fraction of test nodes whose prediction matches the label.
double evaluate(std::span<const int> predictions, const FewShotTask& task, std::span<const int> labels);

/// Seed handed to a tuner for one (seed, run) cell.
std::uint64_t run_seed(std::uint64_t seed, std::size_t run);

// ---- experiment configuration ---------------------------------------------------

struct MethodSpec {
  Method method;
  TuneConfig tune;
};

struct ExperimentSpec {
  std::string dataset;   // bundle directory or name under the data root
  std::string pretrain;  // encoder checkpoint path
  std::vector<MethodSpec> methods;
  std::vector<std::size_t> shots{1};
  std::vector<std::uint64_t> seeds{kDefaultSeeds.begin(), kDefaultSeeds.end()};
  std::size_t runs = kDefaultRuns;
  std::size_t jobs = 0;  // 0: available parallelism

  void validate() const;
};

/// Reads tune settings from a JSON object on top of base. Unknown keys are rejected.
TuneConfig parse_tune_config(const nlohmann::json& j, TuneConfig base = {});
nlohmann::json tune_config_json(const TuneConfig& cfg);
/// {dataset, pretrain, methods[], shots[], seeds[], runs, jobs, tune}; methods are names or
/// {"name": ..., "tune": {...}} objects, method tune settings override the shared "tune" block.
ExperimentSpec parse_experiment_spec(const nlohmann::json& j);
ExperimentSpec load_experiment_spec(const std::filesystem::path& path);

// ---- results --------------------------------------------------------------------

struct ResultRecord {
  std::string param;  // sweep / noise value, empty otherwise
  std::string dataset;
  std::string pretrain;
  std::string method;
  std::size_t shot = 0;
  std::uint64_t seed = 0;
  std::size_t run = 0;
  double accuracy = 0.0;
  std::size_t epochs = 0;
  double final_loss = 0.0;
};

struct Aggregate {
  std::string param, dataset, pretrain, method;
  std::size_t shot = 0;
  std::size_t count = 0;
  double mean = 0.0;
  double std_population = 0.0;
};

class ResultTable {
 public:
  ResultTable() = default;
  /// param_name non-empty adds a leading column with that header.
  explicit ResultTable(std::string param_name) : param_name_(std::move(param_name)) {}

  void add(ResultRecord r) { records_.push_back(std::move(r)); }
  void append(const ResultTable& other);
  const std::vector<ResultRecord>& records() const { return records_; }
  const std::string& param_name() const { return param_name_; }

  /// One entry per (param, dataset, pretrain, method, shot), in first-appearance order.
  std::vector<Aggregate> aggregates() const;
  std::optional<Aggregate> find(const std::string& method, std::size_t shot, const std::string& param = {}) const;

  void write_csv(std::ostream& out) const;
  void write_summary_csv(std::ostream& out) const;
  /// Methods as rows, shots as columns, best mean per column in bold.
  void write_markdown(std::ostream& out) const;
  /// results.csv, summary.csv and results.md under dir.
  void write_all(const std::filesystem::path& dir) const;

 private:
  std::string param_name_;
  std::vector<ResultRecord> records_;
};

/// Population mean and standard deviation.
std::pair<double, double> mean_std(std::span<const double> values);

// ---- runs -------------------------------------------------------------------------

/// Every method x shot x seed x run; runs execute on up to spec.jobs workers.
ResultTable run_experiment(const Graph& graph, const Encoder& encoder, const ExperimentSpec& spec,
                           const std::string& param_name = {}, const std::string& param_value = {});

enum class SweepParam { tau, k, alpha };
SweepParam parse_sweep_param(const std::string& s);
std::string to_string(SweepParam p);

ResultTable sweep(SweepParam param, std::span<const double> grid, const Graph& graph, const Encoder& encoder,
                  const ExperimentSpec& base);

/// Features perturbed with N(0, level^2) noise before kNN construction and tuning.
ResultTable noise_robustness(std::span<const double> levels, const Graph& graph, const Encoder& encoder,
                             const ExperimentSpec& base, std::uint64_t noise_seed = 0);

struct SbmConfig {
  std::size_t n = 400;
  std::size_t classes = 4;
  double p_in = 0.05;
  double p_out = 0.05;
  std::size_t feature_dim = 16;
  double feature_sep = 3.0;
  std::uint64_t seed = 0;
  double feature_std = 1.0;
};

/// Balanced stochastic block model; x ~ N(mu_class, feature_std^2 I) with |mu_a - mu_b| = feature_sep.
Graph generate_sbm(const SbmConfig& cfg);

/// Runs f(0..count-1) on up to jobs threads; the first failure (lowest index) is rethrown.
void parallel_for(std::size_t count, std::size_t jobs, const std::function<void(std::size_t)>& f);

}  // namespace uniprompt
