#pragma once

#include "uniprompt/encoder.hpp"
#include "uniprompt/graph.hpp"

#include <optional>
#include <string>
#include <vector>

namespace uniprompt {

/// ELU(w * alpha - alpha) + 1.
double gate(double w, double alpha);
ad::Var gate(ad::Var w, double alpha);

struct TuneConfig {
  double up_lr = 1e-4;    // prompt parameters
  double down_lr = 5e-3;  // classifier (and encoder, when fine-tuning)
  std::size_t k = 50;
  double tau = 0.9999;
  double alpha = 10.0;
  std::size_t max_epochs = 2000;
  std::size_t patience = 20;
  /// A training loss counts as an improvement when it beats the best so far by more than this.
  double min_delta = 0.0;
  std::uint64_t seed = 0;
  std::size_t classifier_hidden = 64;
  KnnSymmetrize symmetrize = KnnSymmetrize::union_max;
  /// 0 means exact kNN; otherwise candidates are restricted to this many sampled nodes.
  std::size_t knn_candidates = 0;

  void validate() const;
  KnnOptions knn_options() const;
};

struct LabeledNodes {
  std::vector<std::size_t> ids;
  std::vector<int> labels;
};

/// How the prompt graph is combined with the input graph each epoch.
enum class Fusion {
  bootstrap,    // A_hat(t) = tau A_hat(t-1) + (1 - tau) A_tilde
  sum,          // A_hat = A + A_tilde
  prompt_only,  // A_hat = A_tilde
};

/// Learnable prompt topology over a fixed kNN support, plus the fused adjacency history.
class PromptState {
 public:
  PromptState(const SparseAdj& original, const SparseAdj& prompt_init, double alpha, double tau,
              Fusion fusion = Fusion::bootstrap);

  std::size_t num_prompt_edges() const { return weights.value.rows(); }
  const SparseAdj& prompt_init() const { return init_; }
  /// Support of the fused adjacency: union of A and the prompt for bootstrap and sum fusion.
  const PatternPtr& support() const { return support_; }
  const NormalizePlanPtr& plan() const { return plan_; }
  double alpha() const { return alpha_; }
  double tau() const { return tau_; }
  std::size_t epoch() const { return epoch_; }

  /// A_tilde values on the prompt support (one per stored entry), differentiable in w.
  ad::Var prompt_values(ad::Tape& tape) const;
  /// A_tilde with the current gates.
  SparseAdj build_prompt_adj() const;
  /// Fused values on support(); only the prompt term carries gradient.
  ad::Var fuse(ad::Tape& tape) const;
  /// Stores the fused values as A_hat(t) and advances t.
  void commit(const Matrix& fused);
  /// A_hat(t) (A_hat(0) = A for bootstrap fusion).
  SparseAdj current() const;

  /// One weight per undirected prompt edge, so A_tilde stays symmetric.
  ad::Parameter weights;

 private:
  SparseAdj init_;
  std::vector<std::size_t> entry_weight_;
  PatternPtr support_;
  std::vector<std::size_t> prompt_to_support_;
  NormalizePlanPtr plan_;
  Matrix original_on_support_;
  Matrix previous_;
  double alpha_;
  double tau_;
  Fusion fusion_;
  std::size_t epoch_ = 0;
};

/// One bootstrap step tau * prev + (1 - tau) * prompt on the union support.
SparseAdj bootstrap_fuse(const SparseAdj& previous, const SparseAdj& prompt, double tau);

struct TuneResult {
  Classifier classifier;
  std::optional<PromptState> prompt;
  Matrix feature_prompt;  // GPF only
  std::optional<Encoder> encoder;  // fine-tune only
  std::vector<double> loss_history;
  std::size_t epochs = 0;
  double final_loss = 0.0;
  Matrix logits;  // all nodes
  std::vector<int> predictions;
  std::size_t encoder_forwards = 0;
};

TuneResult uniprompt_tune(const Graph& graph, const Encoder& encoder, const LabeledNodes& labeled,
                          const TuneConfig& cfg);
/// Same, with a precomputed prompt initialization.
TuneResult uniprompt_tune(const Graph& graph, const Encoder& encoder, const LabeledNodes& labeled,
                          const TuneConfig& cfg, const SparseAdj& prompt_init);
TuneResult linear_probe_tune(const Graph& graph, const Encoder& encoder, const LabeledNodes& labeled,
                             const TuneConfig& cfg);
/// Trains a thawed copy of the encoder jointly with the classifier; the input encoder is untouched.
TuneResult fine_tune(const Graph& graph, const Encoder& encoder, const LabeledNodes& labeled, const TuneConfig& cfg);
/// GPF baseline: one learnable vector added to every feature row.
TuneResult feature_prompt_tune(const Graph& graph, const Encoder& encoder, const LabeledNodes& labeled,
                               const TuneConfig& cfg);

enum class Ablation { random_topo, simple_add, discard_topo };

std::string to_string(Ablation a);
Ablation parse_ablation(const std::string& s);

/// Undirected random edge set with exactly as many stored entries as like.
SparseAdj random_topology(const SparseAdj& like, std::uint64_t seed);

TuneResult ablation_tune(Ablation variant, const Graph& graph, const Encoder& encoder, const LabeledNodes& labeled,
                         const TuneConfig& cfg);
TuneResult ablation_tune(Ablation variant, const Graph& graph, const Encoder& encoder, const LabeledNodes& labeled,
                         const TuneConfig& cfg, const SparseAdj& prompt_init);

/// Tuning method named on the command line: uniprompt, linear-probe, fine-tune, gpf, ablate:<variant>.
struct Method {
  enum class Kind { uniprompt, linear_probe, fine_tune, gpf, ablation } kind = Kind::uniprompt;
  Ablation ablation = Ablation::random_topo;

  std::string name() const;
  static Method parse(const std::string& s);
  /// Whether the method consumes a kNN prompt initialization.
  bool uses_prompt_graph() const;
};

TuneResult run_method(const Method& method, const Graph& graph, const Encoder& encoder, const LabeledNodes& labeled,
                      const TuneConfig& cfg, const SparseAdj* prompt_init = nullptr);

}  // namespace uniprompt
