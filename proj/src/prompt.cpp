#include "uniprompt/prompt.hpp"

#include "uniprompt/optim.hpp"

#include <cmath>
#include <set>
#include <unordered_set>

namespace uniprompt {

double gate(double w, double alpha) {
  const double z = w * alpha - alpha;
  return (z > 0.0 ? z : std::expm1(z)) + 1.0;
}

ad::Var gate(ad::Var w, double alpha) {
  return ad::add_scalar(ad::elu(ad::add_scalar(ad::scale(w, alpha), -alpha)), 1.0);
}

void TuneConfig::validate() const {
  require(up_lr > 0.0 && down_lr > 0.0, "tune: learning rates must be positive");
  require(patience >= 1, "tune: patience must be >= 1");
  require(tau >= 0.0 && tau <= 1.0, "tune: tau must lie in [0, 1]");
  require(alpha > 0.0, "tune: alpha must be positive");
  require(k >= 1, "tune: k out of range");
  require(min_delta >= 0.0, "tune: min_delta must be >= 0");
  require(classifier_hidden >= 1, "tune: classifier width must be positive");
}

KnnOptions TuneConfig::knn_options() const {
  KnnOptions o;
  o.k = k;
  o.symmetrize = symmetrize;
  if (knn_candidates > 0) o.sampled = SampledKnn{knn_candidates, derive_seed(seed, "knn-sample")};
  return o;
}

// ---- PromptState ------------------------------------------------------------

PromptState::PromptState(const SparseAdj& original, const SparseAdj& prompt_init, double alpha, double tau,
                         Fusion fusion)
    : init_(prompt_init), alpha_(alpha), tau_(tau), fusion_(fusion) {
  require(original.dim() == prompt_init.dim(), "prompt: dimension mismatch between graph and prompt");
  require(alpha > 0.0, "prompt: alpha must be positive");
  require(tau >= 0.0 && tau <= 1.0, "prompt: tau must lie in [0, 1]");
  require(prompt_init.is_symmetric(), "prompt: initial prompt graph must be symmetric");
  const Pattern& p = prompt_init.pattern();
  const auto rows = p.row_of_entries();
  entry_weight_.assign(p.nnz(), npos);
  std::size_t m = 0;
  for (std::size_t e = 0; e < p.nnz(); ++e) {
    const std::size_t i = rows[e], j = p.cols[e];
    require(i != j, "prompt: self loops are not allowed in the prompt graph");
    if (i < j) entry_weight_[e] = m++;
  }
  for (std::size_t e = 0; e < p.nnz(); ++e)
    if (entry_weight_[e] == npos) entry_weight_[e] = entry_weight_[p.find(p.cols[e], rows[e])];
  weights = {"prompt.w", Matrix::Ones(static_cast<Eigen::Index>(m), 1)};

  if (fusion_ == Fusion::prompt_only) {
    support_ = prompt_init.pattern_ptr();
    prompt_to_support_.resize(p.nnz());
    for (std::size_t e = 0; e < p.nnz(); ++e) prompt_to_support_[e] = e;
    original_on_support_ = Matrix::Zero(static_cast<Eigen::Index>(p.nnz()), 1);
  } else {
    auto u = union_patterns(original.pattern(), p);
    support_ = u.pattern;
    prompt_to_support_ = std::move(u.from_second);
    original_on_support_ = Matrix::Zero(static_cast<Eigen::Index>(support_->nnz()), 1);
    for (std::size_t e = 0; e < original.nnz(); ++e)
      original_on_support_(static_cast<Eigen::Index>(u.from_first[e]), 0) = original.values()[e];
  }
  plan_ = make_normalize_plan(support_, true);
  if (fusion_ == Fusion::bootstrap) {
    previous_ = original_on_support_;
  } else {
    ad::Tape tape;
    previous_ = fuse(tape).value();
  }
}

ad::Var PromptState::prompt_values(ad::Tape& tape) const {
  return gate(ad::gather_rows(tape.parameter(weights), entry_weight_), alpha_);
}

SparseAdj PromptState::build_prompt_adj() const {
  ad::Tape tape;
  const Matrix v = prompt_values(tape).value();
  return init_.with_values(std::vector<double>(v.data(), v.data() + v.size()));
}

ad::Var PromptState::fuse(ad::Tape& tape) const {
  ad::Var prompt = ad::scatter_rows(prompt_values(tape), prompt_to_support_, support_->nnz());
  switch (fusion_) {
    case Fusion::bootstrap:
      return ad::add(tape.constant(tau_ * previous_), ad::scale(prompt, 1.0 - tau_));
    case Fusion::sum:
      return ad::add(tape.constant(original_on_support_), prompt);
    case Fusion::prompt_only:
      return prompt;
  }
  return prompt;
}

void PromptState::commit(const Matrix& fused) {
  require(fused.rows() == previous_.rows() && fused.cols() == 1, "prompt: fused values do not match the support");
  previous_ = fused;
  ++epoch_;
}

SparseAdj PromptState::current() const {
  return SparseAdj(support_, std::vector<double>(previous_.data(), previous_.data() + previous_.size()));
}

SparseAdj bootstrap_fuse(const SparseAdj& previous, const SparseAdj& prompt, double tau) {
  require(tau >= 0.0 && tau <= 1.0, "fuse: tau must lie in [0, 1]");
  require(previous.dim() == prompt.dim(), "fuse: dimension mismatch");
  auto u = union_patterns(previous.pattern(), prompt.pattern());
  std::vector<double> out(u.pattern->nnz(), 0.0);
  for (std::size_t e = 0; e < previous.nnz(); ++e) out[u.from_first[e]] += tau * previous.values()[e];
  for (std::size_t e = 0; e < prompt.nnz(); ++e) out[u.from_second[e]] += (1.0 - tau) * prompt.values()[e];
  return SparseAdj(u.pattern, std::move(out));
}

// ---- tuning -----------------------------------------------------------------

namespace {

void validate_labeled(const Graph& graph, const LabeledNodes& labeled) {
  if (labeled.ids.empty()) throw ValidationError("tune: no labeled nodes");
  require(labeled.ids.size() == labeled.labels.size(), "tune: ids and labels differ in length");
  std::unordered_set<std::size_t> seen;
  for (std::size_t k = 0; k < labeled.ids.size(); ++k) {
    require(labeled.ids[k] < graph.num_nodes(), "tune: labeled id out of range");
    require(seen.insert(labeled.ids[k]).second, "tune: duplicate labeled id " + std::to_string(labeled.ids[k]));
    require(labeled.labels[k] >= 0 && static_cast<std::size_t>(labeled.labels[k]) < graph.num_classes(),
            "tune: label out of range");
  }
}

Classifier make_classifier(const Encoder& enc, const Graph& graph, const TuneConfig& cfg) {
  Rng rng(cfg.seed, "classifier-init");
  return Classifier({enc.config().output_dim, cfg.classifier_hidden, graph.num_classes()}, rng);
}

/// X W1 for a frozen encoder, computed once per run.
Matrix input_projection(const Encoder& enc, const Matrix& x) {
  ad::Tape tape;
  return project_input(tape, enc, tape.constant(x)).value();
}

Matrix encode_from_projection(const Encoder& enc, const SparseAdj& adj_norm, const Matrix& xw) {
  ad::Tape tape;
  return encode_projected(tape, enc, constant_adjacency(tape, adj_norm), tape.constant(xw)).value();
}

/// Runs epochs until max_epochs or patience epochs without a training-loss improvement.
/// step(epoch) returns that epoch's loss.
template <class Step>
void train(const TuneConfig& cfg, TuneResult& result, Step&& step) {
  double best = std::numeric_limits<double>::infinity();
  std::size_t stale = 0;
  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    const double loss = step(epoch);
    if (!std::isfinite(loss)) throw RuntimeAbort("tune: non-finite loss at epoch " + std::to_string(epoch));
    result.loss_history.push_back(loss);
    result.final_loss = loss;
    ++result.epochs;
    if (loss < best - cfg.min_delta) {
      best = loss;
      stale = 0;
    } else if (++stale >= cfg.patience) {
      break;
    }
  }
}

void finish(TuneResult& r, Matrix logits) {
  r.predictions = argmax_rows(logits);
  r.logits = std::move(logits);
}

void check_frozen(const Encoder& enc, const char* method) {
  require(enc.frozen(), std::string(method) + ": encoder must be frozen");
}

void check_unchanged(const Encoder& enc, std::uint64_t before, const char* method) {
  if (enc.hash() != before) throw RuntimeAbort(std::string(method) + ": frozen encoder parameters changed");
}

TuneResult structure_tune(const Graph& graph, const Encoder& enc, const LabeledNodes& labeled, const TuneConfig& cfg,
                          const SparseAdj& prompt_init, Fusion fusion, const char* method) {
  cfg.validate();
  validate_labeled(graph, labeled);
  check_frozen(enc, method);
  const std::uint64_t before = enc.hash();
  const Matrix xw = input_projection(enc, graph.features());
  TuneResult r;
  r.classifier = make_classifier(enc, graph, cfg);
  PromptState state(graph.adjacency(), prompt_init, cfg.alpha, cfg.tau, fusion);
  Adam up({&state.weights}, {cfg.up_lr});
  Adam down(r.classifier.parameters(), {cfg.down_lr});
  train(cfg, r, [&](std::size_t) {
    ad::Tape tape;
    ad::Var fused = state.fuse(tape);
    ad::Var h = encode_projected(tape, enc, ad::sym_normalize(state.plan(), fused), tape.constant(xw));
    ++r.encoder_forwards;
    ad::Var logits = classify(tape, r.classifier, ad::gather_rows(h, labeled.ids));
    ad::Var loss = ad::cross_entropy(logits, labeled.labels);
    const double value = loss.scalar();
    if (!std::isfinite(value)) return value;
    const ad::Gradients grads = tape.backward(loss);
    up.step(grads);
    down.step(grads);
    state.commit(fused.value());
    return value;
  });
  const Matrix h = encode_from_projection(enc, symmetric_normalize(state.current(), true), xw);
  ++r.encoder_forwards;
  finish(r, classify(r.classifier, h));
  r.prompt = std::move(state);
  check_unchanged(enc, before, method);
  return r;
}

}  // namespace

TuneResult uniprompt_tune(const Graph& graph, const Encoder& encoder, const LabeledNodes& labeled,
                          const TuneConfig& cfg, const SparseAdj& prompt_init) {
  return structure_tune(graph, encoder, labeled, cfg, prompt_init, Fusion::bootstrap, "uniprompt");
}

TuneResult uniprompt_tune(const Graph& graph, const Encoder& encoder, const LabeledNodes& labeled,
                          const TuneConfig& cfg) {
  cfg.validate();
  return uniprompt_tune(graph, encoder, labeled, cfg, knn_prompt_init(graph.features(), cfg.knn_options()));
}

TuneResult linear_probe_tune(const Graph& graph, const Encoder& encoder, const LabeledNodes& labeled,
                             const TuneConfig& cfg) {
  cfg.validate();
  validate_labeled(graph, labeled);
  check_frozen(encoder, "linear-probe");
  const std::uint64_t before = encoder.hash();
  TuneResult r;
  r.classifier = make_classifier(encoder, graph, cfg);
  const Matrix h = encode_from_projection(encoder, symmetric_normalize(graph.adjacency(), true),
                                          input_projection(encoder, graph.features()));
  r.encoder_forwards = 1;
  Adam down(r.classifier.parameters(), {cfg.down_lr});
  train(cfg, r, [&](std::size_t) {
    ad::Tape tape;
    ad::Var logits = classify(tape, r.classifier, ad::gather_rows(tape.constant(h), labeled.ids));
    ad::Var loss = ad::cross_entropy(logits, labeled.labels);
    const double value = loss.scalar();
    if (std::isfinite(value)) down.step(tape.backward(loss));
    return value;
  });
  finish(r, classify(r.classifier, h));
  check_unchanged(encoder, before, "linear-probe");
  return r;
}

TuneResult fine_tune(const Graph& graph, const Encoder& encoder, const LabeledNodes& labeled, const TuneConfig& cfg) {
  cfg.validate();
  validate_labeled(graph, labeled);
  Encoder enc = encoder;
  enc.thaw();
  TuneResult r;
  r.classifier = make_classifier(enc, graph, cfg);
  auto params = enc.trainable_parameters();
  for (auto* p : r.classifier.parameters()) params.push_back(p);
  Adam adam(params, {cfg.down_lr});
  const SparseAdj adj = symmetric_normalize(graph.adjacency(), true);
  train(cfg, r, [&](std::size_t) {
    ad::Tape tape;
    ad::Var h = encode(tape, enc, constant_adjacency(tape, adj), tape.constant(graph.features()));
    ++r.encoder_forwards;
    ad::Var loss = ad::cross_entropy(classify(tape, r.classifier, ad::gather_rows(h, labeled.ids)), labeled.labels);
    const double value = loss.scalar();
    if (std::isfinite(value)) adam.step(tape.backward(loss));
    return value;
  });
  enc.freeze();
  finish(r, classify(r.classifier, encode(enc, adj, graph.features())));
  ++r.encoder_forwards;
  r.encoder = std::move(enc);
  return r;
}

TuneResult feature_prompt_tune(const Graph& graph, const Encoder& encoder, const LabeledNodes& labeled,
                               const TuneConfig& cfg) {
  cfg.validate();
  validate_labeled(graph, labeled);
  check_frozen(encoder, "gpf");
  const std::uint64_t before = encoder.hash();
  TuneResult r;
  r.classifier = make_classifier(encoder, graph, cfg);
  ad::Parameter p{"prompt.feature", Matrix::Zero(1, static_cast<Eigen::Index>(graph.num_features()))};
  const Matrix xw = input_projection(encoder, graph.features());
  const Matrix& w1 = encoder.layer(0).weight.value;
  const SparseAdj adj = symmetric_normalize(graph.adjacency(), true);
  Adam up({&p}, {cfg.up_lr});
  Adam down(r.classifier.parameters(), {cfg.down_lr});
  train(cfg, r, [&](std::size_t) {
    ad::Tape tape;
    ad::Var shifted = ad::add_row(tape.constant(xw), ad::matmul(tape.parameter(p), tape.constant(w1)));
    ad::Var h = encode_projected(tape, encoder, constant_adjacency(tape, adj), shifted);
    ++r.encoder_forwards;
    ad::Var loss = ad::cross_entropy(classify(tape, r.classifier, ad::gather_rows(h, labeled.ids)), labeled.labels);
    const double value = loss.scalar();
    if (!std::isfinite(value)) return value;
    const ad::Gradients grads = tape.backward(loss);
    up.step(grads);
    down.step(grads);
    return value;
  });
  Matrix shifted = xw;
  shifted.rowwise() += (p.value * w1).row(0);
  finish(r, classify(r.classifier, encode_from_projection(encoder, adj, shifted)));
  ++r.encoder_forwards;
  r.feature_prompt = p.value;
  check_unchanged(encoder, before, "gpf");
  return r;
}

// ---- ablations ----------------------------------------------------------------

std::string to_string(Ablation a) {
  switch (a) {
    case Ablation::random_topo: return "random_topo";
    case Ablation::simple_add: return "simple_add";
    case Ablation::discard_topo: return "discard_topo";
  }
  return "?";
}

Ablation parse_ablation(const std::string& s) {
  if (s == "random_topo") return Ablation::random_topo;
  if (s == "simple_add") return Ablation::simple_add;
  if (s == "discard_topo") return Ablation::discard_topo;
  throw ValidationError("unknown ablation '" + s + "' (expected random_topo, simple_add or discard_topo)");
}

SparseAdj random_topology(const SparseAdj& like, std::uint64_t seed) {
  const std::size_t n = like.dim();
  std::size_t pairs = 0;
  for (const Edge& e : like.entries()) {
    require(e.src != e.dst, "random_topology: self loops are not supported");
    if (e.src < e.dst) ++pairs;
  }
  require(2 * pairs == like.nnz(), "random_topology: reference graph must be symmetric");
  require(n < 2 || pairs <= n * (n - 1) / 2, "random_topology: too many edges");
  Rng rng(seed, "prompt-init");
  std::set<std::pair<std::size_t, std::size_t>> chosen;
  while (chosen.size() < pairs) {
    std::size_t i = rng.below(n), j = rng.below(n);
    if (i == j) continue;
    if (i > j) std::swap(i, j);
    chosen.emplace(i, j);
  }
  std::vector<Edge> edges;
  edges.reserve(2 * pairs);
  for (auto [i, j] : chosen) {
    edges.push_back({i, j, 1.0});
    edges.push_back({j, i, 1.0});
  }
  return SparseAdj::from_entries(n, std::move(edges));
}

TuneResult ablation_tune(Ablation variant, const Graph& graph, const Encoder& encoder, const LabeledNodes& labeled,
                         const TuneConfig& cfg, const SparseAdj& prompt_init) {
  switch (variant) {
    case Ablation::random_topo:
      return structure_tune(graph, encoder, labeled, cfg, random_topology(prompt_init, cfg.seed), Fusion::bootstrap,
                            "ablate:random_topo");
    case Ablation::simple_add:
      return structure_tune(graph, encoder, labeled, cfg, prompt_init, Fusion::sum, "ablate:simple_add");
    case Ablation::discard_topo:
      return structure_tune(graph, encoder, labeled, cfg, prompt_init, Fusion::prompt_only, "ablate:discard_topo");
  }
  throw ValidationError("ablation: unknown variant");
}

TuneResult ablation_tune(Ablation variant, const Graph& graph, const Encoder& encoder, const LabeledNodes& labeled,
                         const TuneConfig& cfg) {
  cfg.validate();
  return ablation_tune(variant, graph, encoder, labeled, cfg, knn_prompt_init(graph.features(), cfg.knn_options()));
}

// ---- method dispatch ------------------------------------------------------------

std::string Method::name() const {
  switch (kind) {
    case Kind::uniprompt: return "uniprompt";
    case Kind::linear_probe: return "linear-probe";
    case Kind::fine_tune: return "fine-tune";
    case Kind::gpf: return "gpf";
    case Kind::ablation: return "ablate:" + to_string(ablation);
  }
  return "?";
}

Method Method::parse(const std::string& s) {
  Method m;
  if (s == "uniprompt") m.kind = Kind::uniprompt;
  else if (s == "linear-probe") m.kind = Kind::linear_probe;
  else if (s == "fine-tune") m.kind = Kind::fine_tune;
  else if (s == "gpf") m.kind = Kind::gpf;
  else if (s.rfind("ablate:", 0) == 0) {
    m.kind = Kind::ablation;
    m.ablation = parse_ablation(s.substr(7));
  } else {
    throw ValidationError("unknown method '" + s + "' (expected uniprompt, linear-probe, fine-tune, gpf or ablate:<variant>)");
  }
  return m;
}

bool Method::uses_prompt_graph() const { return kind == Kind::uniprompt || kind == Kind::ablation; }

TuneResult run_method(const Method& method, const Graph& graph, const Encoder& encoder, const LabeledNodes& labeled,
                      const TuneConfig& cfg, const SparseAdj* prompt_init) {
  switch (method.kind) {
    case Method::Kind::uniprompt:
      return prompt_init ? uniprompt_tune(graph, encoder, labeled, cfg, *prompt_init)
                         : uniprompt_tune(graph, encoder, labeled, cfg);
    case Method::Kind::linear_probe: return linear_probe_tune(graph, encoder, labeled, cfg);
    case Method::Kind::fine_tune: return fine_tune(graph, encoder, labeled, cfg);
    case Method::Kind::gpf: return feature_prompt_tune(graph, encoder, labeled, cfg);
    case Method::Kind::ablation:
      return prompt_init ? ablation_tune(method.ablation, graph, encoder, labeled, cfg, *prompt_init)
                         : ablation_tune(method.ablation, graph, encoder, labeled, cfg);
  }
  throw ValidationError("unknown method");
}

}  // namespace uniprompt
