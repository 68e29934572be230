#pragma once

#include "uniprompt/encoder.hpp"
#include "uniprompt/graph.hpp"

#include <string>
#include <vector>

namespace uniprompt {

enum class Objective { dgi, grace, graphmae };

std::string to_string(Objective o);
Objective parse_objective(const std::string& s);

struct GraceOptions {
  double edge_drop = 0.2;
  double feature_mask = 0.2;
  double temperature = 0.5;
};

struct GraphMaeOptions {
  double mask_rate = 0.5;
  double gamma = 2.0;
};

struct PretrainConfig {
  Objective objective = Objective::dgi;
  std::size_t epochs = 300;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
  std::size_t hidden_dim = 256;
  std::size_t output_dim = 256;
  Activation activation = Activation::prelu;
  GraceOptions grace;
  GraphMaeOptions graphmae;

  void validate() const;
};

struct PretrainResult {
  Encoder encoder;  // frozen
  std::vector<double> loss_history;
};

PretrainResult pretrain(const Graph& graph, const PretrainConfig& cfg);

PretrainResult dgi_pretrain(const Graph& graph, const PretrainConfig& cfg);
PretrainResult grace_pretrain(const Graph& graph, const PretrainConfig& cfg);
PretrainResult graphmae_pretrain(const Graph& graph, const PretrainConfig& cfg);

// Losses, exposed for testing.

/// BCE of the bilinear discriminator sigmoid(h^T W s), s = sigmoid(mean_rows(h_pos)).
ad::Var dgi_loss(ad::Var h_pos, ad::Var h_neg, ad::Var w_disc);
/// Symmetric two-view InfoNCE over cosine similarities; 2N-1 terms per denominator.
ad::Var infonce_loss(ad::Var z1, ad::Var z2, double temperature);
/// Mean over rows of (1 - cos(x, x_hat))^gamma.
ad::Var sce_loss(ad::Var x, ad::Var x_hat, double gamma);

}  // namespace uniprompt
