#pragma once

#include "uniprompt/autodiff.hpp"

#include <vector>

namespace uniprompt {

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Bias-corrected Adam over a fixed parameter list. Parameters are updated in place.
class Adam {
 public:
  Adam(std::vector<ad::Parameter*> params, AdamOptions options);

  /// Parameters without an entry in grads are treated as having zero gradient.
  /// Throws RuntimeAbort naming the parameter when a gradient is not finite.
  void step(const ad::Gradients& grads);

  std::size_t step_count() const { return steps_; }
  const AdamOptions& options() const { return options_; }

 private:
  std::vector<ad::Parameter*> params_;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  AdamOptions options_;
  std::size_t steps_ = 0;
};

}  // namespace uniprompt
