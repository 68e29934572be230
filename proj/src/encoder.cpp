#include "uniprompt/encoder.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>

namespace uniprompt {

std::string to_string(Activation a) {
  switch (a) {
    case Activation::prelu: return "prelu";
    case Activation::relu: return "relu";
    case Activation::identity: return "identity";
  }
  return "?";
}

Activation parse_activation(const std::string& s) {
  if (s == "prelu") return Activation::prelu;
  if (s == "relu") return Activation::relu;
  if (s == "identity") return Activation::identity;
  throw ValidationError("unknown activation '" + s + "'");
}

Matrix glorot(std::size_t rows, std::size_t cols, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
  Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-limit, limit);
  return m;
}

Encoder::Encoder(const EncoderConfig& config, Rng& rng) : config_(config) {
  require(config.input_dim > 0 && config.hidden_dim > 0 && config.output_dim > 0, "encoder: widths must be positive");
  const std::size_t dims[3] = {config.input_dim, config.hidden_dim, config.output_dim};
  for (std::size_t l = 0; l < 2; ++l) {
    GcnLayer layer;
    const std::string prefix = "layer" + std::to_string(l) + ".";
    layer.weight = {prefix + "weight", glorot(dims[l], dims[l + 1], rng)};
    layer.bias = {prefix + "bias", Matrix::Zero(1, static_cast<Eigen::Index>(dims[l + 1]))};
    layer.slope = {prefix + "slope", Matrix::Constant(1, 1, 0.25)};
    layer.activation = config.activation;
    layers_.push_back(std::move(layer));
  }
}

std::vector<ad::Parameter*> Encoder::trainable_parameters() {
  std::vector<ad::Parameter*> out;
  if (frozen_) return out;
  for (auto& l : layers_) {
    out.push_back(&l.weight);
    out.push_back(&l.bias);
    if (l.activation == Activation::prelu) out.push_back(&l.slope);
  }
  return out;
}

std::vector<NamedTensor> Encoder::state() const {
  std::vector<NamedTensor> out;
  for (const auto& l : layers_) {
    out.push_back({l.weight.name, l.weight.value});
    out.push_back({l.bias.name, l.bias.value});
    out.push_back({l.slope.name, l.slope.value});
  }
  return out;
}

void Encoder::load_state(const std::vector<NamedTensor>& tensors) {
  for (auto& l : layers_) {
    for (ad::Parameter* p : {&l.weight, &l.bias, &l.slope}) {
      bool found = false;
      for (const auto& t : tensors) {
        if (t.name != p->name) continue;
        require(t.value.rows() == p->value.rows() && t.value.cols() == p->value.cols(),
                "encoder: checkpoint shape mismatch for '" + p->name + "'");
        p->value = t.value;
        found = true;
      }
      require(found, "encoder: checkpoint lacks '" + p->name + "'");
    }
  }
}

namespace {

ad::Var activate(ad::Tape& tape, const GcnLayer& layer, ad::Var x, bool trainable) {
  switch (layer.activation) {
    case Activation::prelu: return ad::prelu(x, tape.bind(layer.slope, trainable));
    case Activation::relu: return ad::relu(x);
    case Activation::identity: return x;
  }
  return x;
}

}  // namespace

ad::Var project_input(ad::Tape& tape, const Encoder& encoder, ad::Var x) {
  require(static_cast<std::size_t>(x.cols()) == encoder.config().input_dim, "encode: feature width mismatch");
  return ad::matmul(x, tape.bind(encoder.layer(0).weight, !encoder.frozen()));
}

ad::Var encode_projected(ad::Tape& tape, const Encoder& encoder, const ad::SpVar& adj_norm, ad::Var xw) {
  const bool trainable = !encoder.frozen();
  require(static_cast<std::size_t>(xw.cols()) == encoder.config().hidden_dim, "encode: hidden width mismatch");
  const GcnLayer& l0 = encoder.layer(0);
  const GcnLayer& l1 = encoder.layer(1);
  ad::Var h = ad::spmm(adj_norm, xw);
  h = activate(tape, l0, ad::add_row(h, tape.bind(l0.bias, trainable)), trainable);
  h = ad::matmul(h, tape.bind(l1.weight, trainable));
  h = ad::spmm(adj_norm, h);
  return activate(tape, l1, ad::add_row(h, tape.bind(l1.bias, trainable)), trainable);
}

ad::Var encode(ad::Tape& tape, const Encoder& encoder, const ad::SpVar& adj_norm, ad::Var x) {
  return encode_projected(tape, encoder, adj_norm, project_input(tape, encoder, x));
}

ad::SpVar constant_adjacency(ad::Tape& tape, const SparseAdj& adj) {
  Matrix vals = Eigen::Map<const Matrix>(adj.values().data(), static_cast<Eigen::Index>(adj.nnz()), 1);
  return {adj.pattern_ptr(), tape.constant(std::move(vals))};
}

Matrix encode(const Encoder& encoder, const SparseAdj& adj_norm, const Matrix& x) {
  ad::Tape tape;
  ad::SpVar a = constant_adjacency(tape, adj_norm);
  Encoder frozen = encoder;
  frozen.freeze();
  return encode(tape, frozen, a, tape.constant(x)).value();
}

void save_encoder(const std::filesystem::path& path, const Encoder& encoder) {
  save_checkpoint(path, encoder.state());
  nlohmann::ordered_json side;
  side["backbone"] = encoder.info.backbone;
  side["widths"] = {encoder.config().input_dim, encoder.config().hidden_dim, encoder.config().output_dim};
  side["activation"] = to_string(encoder.config().activation);
  side["pretrain_objective"] = encoder.info.objective;
  side["dataset"] = encoder.info.dataset;
  side["seed"] = encoder.info.seed;
  std::ofstream(path.string() + ".json") << side.dump(2) << '\n';
}

Encoder load_encoder(const std::filesystem::path& path) {
  std::ifstream in(path.string() + ".json");
  if (!in) throw ValidationError("encoder: missing sidecar " + path.string() + ".json");
  nlohmann::json side;
  EncoderConfig cfg;
  EncoderInfo info;
  try {
    in >> side;
    const auto widths = side.at("widths").get<std::vector<std::size_t>>();
    require(widths.size() == 3, "encoder: sidecar widths must have three entries");
    cfg.input_dim = widths[0];
    cfg.hidden_dim = widths[1];
    cfg.output_dim = widths[2];
    cfg.activation = parse_activation(side.at("activation").get<std::string>());
    info.backbone = side.value("backbone", "gcn");
    info.objective = side.value("pretrain_objective", "");
    info.dataset = side.value("dataset", "");
    info.seed = side.value("seed", std::uint64_t{0});
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("encoder sidecar: ") + e.what());
  }
  require(info.backbone == "gcn", "encoder: unsupported backbone '" + info.backbone + "'");
  Rng rng(0);
  Encoder enc(cfg, rng);
  enc.load_state(load_checkpoint(path));
  enc.info = info;
  enc.freeze();
  return enc;
}

Classifier::Classifier(const ClassifierConfig& config, Rng& rng) : config_(config) {
  require(config.input_dim > 0 && config.hidden_dim > 0 && config.num_classes > 0, "classifier: widths must be positive");
  w1 = {"classifier.w1", glorot(config.input_dim, config.hidden_dim, rng)};
  b1 = {"classifier.b1", Matrix::Zero(1, static_cast<Eigen::Index>(config.hidden_dim))};
  w2 = {"classifier.w2", glorot(config.hidden_dim, config.num_classes, rng)};
  b2 = {"classifier.b2", Matrix::Zero(1, static_cast<Eigen::Index>(config.num_classes))};
}

ad::Var classify(ad::Tape& tape, const Classifier& c, ad::Var h) {
  require(static_cast<std::size_t>(h.cols()) == c.config().input_dim, "classify: width mismatch");
  ad::Var z = ad::relu(ad::add_row(ad::matmul(h, tape.parameter(c.w1)), tape.parameter(c.b1)));
  return ad::add_row(ad::matmul(z, tape.parameter(c.w2)), tape.parameter(c.b2));
}

Matrix classify(const Classifier& c, const Matrix& h) {
  ad::Tape tape;
  return classify(tape, c, tape.constant(h)).value();
}

std::vector<int> argmax_rows(const Matrix& logits) {
  std::vector<int> out(static_cast<std::size_t>(logits.rows()));
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index j = 1; j < logits.cols(); ++j)
      if (logits(i, j) > logits(i, best)) best = j;
    out[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  return out;
}

}  // namespace uniprompt
