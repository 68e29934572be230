#include "uniprompt/pretrain.hpp"

#include "uniprompt/optim.hpp"

#include <cmath>

namespace uniprompt {

std::string to_string(Objective o) {
  switch (o) {
    case Objective::dgi: return "dgi";
    case Objective::grace: return "grace";
    case Objective::graphmae: return "graphmae";
  }
  return "?";
}

Objective parse_objective(const std::string& s) {
  if (s == "dgi") return Objective::dgi;
  if (s == "grace") return Objective::grace;
  if (s == "graphmae") return Objective::graphmae;
  throw ValidationError("unknown pretraining objective '" + s + "' (expected dgi, grace or graphmae)");
}

void PretrainConfig::validate() const {
  require(epochs >= 1, "pretrain: epochs must be >= 1");
  require(learning_rate > 0.0, "pretrain: learning rate must be positive");
  require(hidden_dim > 0 && output_dim > 0, "pretrain: widths must be positive");
  auto rate = [](double r) { return r >= 0.0 && r < 1.0; };
  require(rate(grace.edge_drop) && rate(grace.feature_mask), "pretrain: grace rates must lie in [0, 1)");
  require(grace.temperature > 0.0, "pretrain: temperature must be positive");
  require(rate(graphmae.mask_rate), "pretrain: mask rate must lie in [0, 1)");
  require(graphmae.gamma >= 1.0, "pretrain: gamma must be >= 1");
  if (objective == Objective::graphmae)
    require(graphmae.mask_rate > 0.0, "pretrain: mask rate 0 leaves nothing to reconstruct");
}

ad::Var dgi_loss(ad::Var h_pos, ad::Var h_neg, ad::Var w_disc) {
  ad::Var s = ad::sigmoid(ad::row_mean(h_pos));
  ad::Var ws = ad::matmul(w_disc, ad::transpose(s));
  ad::Var logits = ad::concat_rows(ad::matmul(h_pos, ws), ad::matmul(h_neg, ws));
  Matrix targets = Matrix::Zero(logits.rows(), 1);
  targets.topRows(h_pos.rows()).setOnes();
  return ad::bce_with_logits(logits, targets);
}

namespace {

ad::Var infonce_half(ad::Var u1, ad::Var u2, double temperature) {
  ad::Tape& tape = u1.tape();
  const Eigen::Index n = u1.rows();
  const Matrix eye = Matrix::Identity(n, n);
  const Matrix off = Matrix::Ones(n, n) - eye;
  ad::Var between = ad::scale(ad::matmul(u1, ad::transpose(u2)), 1.0 / temperature);
  ad::Var refl = ad::scale(ad::matmul(u1, ad::transpose(u1)), 1.0 / temperature);
  ad::Var denom = ad::add(ad::row_sum(ad::exp(between)),
                          ad::row_sum(ad::hadamard(ad::exp(refl), tape.constant(off))));
  ad::Var pos = ad::row_sum(ad::hadamard(between, tape.constant(eye)));
  return ad::mean(ad::sub(ad::log(denom), pos));
}

}  // namespace

ad::Var infonce_loss(ad::Var z1, ad::Var z2, double temperature) {
  require(z1.rows() == z2.rows() && z1.cols() == z2.cols(), "infonce: view shapes differ");
  require(temperature > 0.0, "infonce: temperature must be positive");
  ad::Var u1 = ad::l2_normalize_rows(z1);
  ad::Var u2 = ad::l2_normalize_rows(z2);
  return ad::scale(ad::add(infonce_half(u1, u2, temperature), infonce_half(u2, u1, temperature)), 0.5);
}

ad::Var sce_loss(ad::Var x, ad::Var x_hat, double gamma) {
  ad::Var cos = ad::row_sum(ad::hadamard(ad::l2_normalize_rows(x), ad::l2_normalize_rows(x_hat)));
  return ad::mean(ad::pow(ad::add_scalar(ad::scale(cos, -1.0), 1.0), gamma));
}

namespace {

Encoder make_encoder(const Graph& graph, const PretrainConfig& cfg) {
  EncoderConfig ec{graph.num_features(), cfg.hidden_dim, cfg.output_dim, cfg.activation};
  Rng rng(cfg.seed, "encoder-init");
  Encoder enc(ec, rng);
  enc.info.objective = to_string(cfg.objective);
  enc.info.dataset = graph.name();
  enc.info.seed = cfg.seed;
  return enc;
}

void check_loss(double loss, std::size_t epoch) {
  if (!std::isfinite(loss))
    throw RuntimeAbort("pretrain: non-finite loss at epoch " + std::to_string(epoch));
}

PretrainResult finish(Encoder enc, std::vector<double> history) {
  enc.freeze();
  return {std::move(enc), std::move(history)};
}

/// Rows of x in the order given by ids.
Matrix take_rows(const Matrix& x, const std::vector<std::size_t>& perm) {
  Matrix out(static_cast<Eigen::Index>(perm.size()), x.cols());
  for (std::size_t i = 0; i < perm.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(perm[i]));
  return out;
}

/// Drops each undirected edge independently with probability p.
SparseAdj drop_edges(const SparseAdj& adj, double p, Rng& rng) {
  std::vector<Edge> kept;
  for (const Edge& e : adj.entries()) {
    if (e.src >= e.dst) continue;
    if (rng.bernoulli(p)) continue;
    kept.push_back(e);
    kept.push_back({e.dst, e.src, e.weight});
  }
  return SparseAdj::from_entries(adj.dim(), std::move(kept));
}

Matrix mask_columns(const Matrix& x, double p, Rng& rng) {
  Matrix out = x;
  for (Eigen::Index j = 0; j < x.cols(); ++j)
    if (rng.bernoulli(p)) out.col(j).setZero();
  return out;
}

}  // namespace

PretrainResult dgi_pretrain(const Graph& graph, const PretrainConfig& cfg) {
  cfg.validate();
  require(cfg.objective == Objective::dgi, "dgi_pretrain: objective must be dgi");
  Encoder enc = make_encoder(graph, cfg);
  Rng init(cfg.seed, "discriminator-init");
  ad::Parameter w{"discriminator.w", glorot(cfg.output_dim, cfg.output_dim, init)};
  auto params = enc.trainable_parameters();
  params.push_back(&w);
  Adam adam(params, {cfg.learning_rate});
  const SparseAdj adj = symmetric_normalize(graph.adjacency(), true);
  const Matrix& x = graph.features();
  std::vector<double> history;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng corrupt(cfg.seed, "corruption", epoch);
    const Matrix x_neg = take_rows(x, corrupt.permutation(graph.num_nodes()));
    ad::Tape tape;
    ad::SpVar a = constant_adjacency(tape, adj);
    ad::Var h_pos = encode(tape, enc, a, tape.constant(x));
    ad::Var h_neg = encode(tape, enc, a, tape.constant(x_neg));
    ad::Var loss = dgi_loss(h_pos, h_neg, tape.parameter(w));
    check_loss(loss.scalar(), epoch);
    history.push_back(loss.scalar());
    adam.step(tape.backward(loss));
  }
  return finish(std::move(enc), std::move(history));
}

PretrainResult grace_pretrain(const Graph& graph, const PretrainConfig& cfg) {
  cfg.validate();
  require(cfg.objective == Objective::grace, "grace_pretrain: objective must be grace");
  require(graph.num_undirected_edges() > 0, "grace: graph has no edges to augment");
  Encoder enc = make_encoder(graph, cfg);
  Rng init(cfg.seed, "projection-init");
  const std::size_t d = cfg.output_dim;
  ad::Parameter p1{"projection.w1", glorot(d, d, init)};
  ad::Parameter q1{"projection.b1", Matrix::Zero(1, static_cast<Eigen::Index>(d))};
  ad::Parameter p2{"projection.w2", glorot(d, d, init)};
  ad::Parameter q2{"projection.b2", Matrix::Zero(1, static_cast<Eigen::Index>(d))};
  auto params = enc.trainable_parameters();
  for (auto* p : {&p1, &q1, &p2, &q2}) params.push_back(p);
  Adam adam(params, {cfg.learning_rate});
  std::vector<double> history;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    ad::Tape tape;
    ad::Var w1 = tape.parameter(p1), b1 = tape.parameter(q1), w2 = tape.parameter(p2), b2 = tape.parameter(q2);
    ad::Var z[2];
    for (std::uint64_t v = 0; v < 2; ++v) {
      Rng edges(cfg.seed, "augment", 2 * epoch + v);
      Rng cols(cfg.seed, "mask", 2 * epoch + v);
      const SparseAdj view = drop_edges(graph.adjacency(), cfg.grace.edge_drop, edges);
      if (view.nnz() == 0)
        throw ValidationError("grace: edge drop rate " + std::to_string(cfg.grace.edge_drop) + " left zero edges");
      const Matrix xv = mask_columns(graph.features(), cfg.grace.feature_mask, cols);
      ad::Var h = encode(tape, enc, constant_adjacency(tape, symmetric_normalize(view, true)), tape.constant(xv));
      ad::Var hidden = ad::elu(ad::add_row(ad::matmul(h, w1), b1));
      z[v] = ad::add_row(ad::matmul(hidden, w2), b2);
    }
    ad::Var loss = infonce_loss(z[0], z[1], cfg.grace.temperature);
    check_loss(loss.scalar(), epoch);
    history.push_back(loss.scalar());
    adam.step(tape.backward(loss));
  }
  return finish(std::move(enc), std::move(history));
}

PretrainResult graphmae_pretrain(const Graph& graph, const PretrainConfig& cfg) {
  cfg.validate();
  require(cfg.objective == Objective::graphmae, "graphmae_pretrain: objective must be graphmae");
  Encoder enc = make_encoder(graph, cfg);
  const std::size_t n = graph.num_nodes(), f = graph.num_features();
  Rng init(cfg.seed, "decoder-init");
  ad::Parameter token{"mask_token", Matrix::Zero(1, static_cast<Eigen::Index>(f))};
  ad::Parameter wd{"decoder.weight", glorot(cfg.output_dim, f, init)};
  ad::Parameter bd{"decoder.bias", Matrix::Zero(1, static_cast<Eigen::Index>(f))};
  auto params = enc.trainable_parameters();
  for (auto* p : {&token, &wd, &bd}) params.push_back(p);
  Adam adam(params, {cfg.learning_rate});
  const SparseAdj adj = symmetric_normalize(graph.adjacency(), true);
  const Matrix& x = graph.features();
  const auto masked_count = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(cfg.graphmae.mask_rate * static_cast<double>(n))));
  std::vector<double> history;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng pick(cfg.seed, "mask", epoch);
    const auto masked = pick.sample_without_replacement(n, masked_count);
    Matrix indicator = Matrix::Zero(static_cast<Eigen::Index>(n), 1);
    for (auto i : masked) indicator(static_cast<Eigen::Index>(i), 0) = 1.0;
    const Matrix keep = (1.0 - indicator.array()).matrix();
    const Matrix x_kept = x.array().colwise() * keep.col(0).array();

    ad::Tape tape;
    ad::SpVar a = constant_adjacency(tape, adj);
    ad::Var x_in = ad::add(tape.constant(x_kept), ad::matmul(tape.constant(indicator), tape.parameter(token)));
    ad::Var h = encode(tape, enc, a, x_in);
    const Matrix keep_h = keep * Matrix::Ones(1, h.cols());
    ad::Var remasked = ad::hadamard(h, tape.constant(keep_h));
    ad::Var x_hat = ad::add_row(ad::spmm(a, ad::matmul(remasked, tape.parameter(wd))), tape.parameter(bd));
    ad::Var loss = sce_loss(tape.constant(take_rows(x, masked)), ad::gather_rows(x_hat, masked), cfg.graphmae.gamma);
    check_loss(loss.scalar(), epoch);
    history.push_back(loss.scalar());
    adam.step(tape.backward(loss));
  }
  return finish(std::move(enc), std::move(history));
}

PretrainResult pretrain(const Graph& graph, const PretrainConfig& cfg) {
  switch (cfg.objective) {
    case Objective::dgi: return dgi_pretrain(graph, cfg);
    case Objective::grace: return grace_pretrain(graph, cfg);
    case Objective::graphmae: return graphmae_pretrain(graph, cfg);
  }
  throw ValidationError("pretrain: unknown objective");
}

}  // namespace uniprompt
