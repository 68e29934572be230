#pragma once

#include "uniprompt/autodiff.hpp"
#include "uniprompt/checkpoint.hpp"
#include "uniprompt/rng.hpp"
#include "uniprompt/sparse.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace uniprompt {

enum class Activation { prelu, relu, identity };

std::string to_string(Activation a);
Activation parse_activation(const std::string& s);

struct EncoderConfig {
  std::size_t input_dim = 0;
  std::size_t hidden_dim = 256;
  std::size_t output_dim = 256;
  Activation activation = Activation::prelu;
};

/// Provenance written next to an encoder checkpoint.
struct EncoderInfo {
  std::string backbone = "gcn";
  std::string objective;
  std::string dataset;
  std::uint64_t seed = 0;
};

struct GcnLayer {
  ad::Parameter weight;
  ad::Parameter bias;
  ad::Parameter slope;  // used only by PReLU
  Activation activation = Activation::prelu;
};

/// Two-layer GCN: H = act(A act(A X W1 + b1) W2 + b2).
class Encoder {
 public:
  Encoder() = default;
  Encoder(const EncoderConfig& config, Rng& rng);

  const EncoderConfig& config() const { return config_; }
  const GcnLayer& layer(std::size_t i) const { return layers_.at(i); }
  GcnLayer& layer(std::size_t i) { return layers_.at(i); }

  void freeze() { frozen_ = true; }
  void thaw() { frozen_ = false; }
  bool frozen() const { return frozen_; }

  /// Empty when frozen, so a frozen encoder can never reach an optimizer.
  std::vector<ad::Parameter*> trainable_parameters();

  std::vector<NamedTensor> state() const;
  void load_state(const std::vector<NamedTensor>& tensors);
  std::uint64_t hash() const { return checkpoint_hash(state()); }

  EncoderInfo info;

 private:
  EncoderConfig config_;
  std::vector<GcnLayer> layers_;
  bool frozen_ = false;
};

/// X W1, the input projection of the first layer.
ad::Var project_input(ad::Tape& tape, const Encoder& encoder, ad::Var x);
/// Remainder of the forward pass given X W1.
ad::Var encode_projected(ad::Tape& tape, const Encoder& encoder, const ad::SpVar& adj_norm, ad::Var xw);
/// Full forward pass. Encoder weights take part in the tape only when not frozen.
ad::Var encode(ad::Tape& tape, const Encoder& encoder, const ad::SpVar& adj_norm, ad::Var x);
/// Convenience forward without gradients.
Matrix encode(const Encoder& encoder, const SparseAdj& adj_norm, const Matrix& x);

/// Non-differentiable view of a normalized adjacency on a tape.
ad::SpVar constant_adjacency(ad::Tape& tape, const SparseAdj& adj);

/// Writes path (tensors) and path + ".json" (architecture and provenance).
void save_encoder(const std::filesystem::path& path, const Encoder& encoder);
/// Loaded encoders come back frozen.
Encoder load_encoder(const std::filesystem::path& path);

struct ClassifierConfig {
  std::size_t input_dim = 0;
  std::size_t hidden_dim = 64;
  std::size_t num_classes = 0;
};

/// Two-layer perceptron head g_phi: d -> hidden (ReLU) -> C.
class Classifier {
 public:
  Classifier() = default;
  Classifier(const ClassifierConfig& config, Rng& rng);

  const ClassifierConfig& config() const { return config_; }
  std::vector<ad::Parameter*> parameters() { return {&w1, &b1, &w2, &b2}; }

  ad::Parameter w1, b1, w2, b2;

 private:
  ClassifierConfig config_;
};

ad::Var classify(ad::Tape& tape, const Classifier& classifier, ad::Var h);
Matrix classify(const Classifier& classifier, const Matrix& h);
/// Row-wise argmax; ties go to the lowest class index.
std::vector<int> argmax_rows(const Matrix& logits);

/// Glorot-uniform matrix.
Matrix glorot(std::size_t rows, std::size_t cols, Rng& rng);

}  // namespace uniprompt
