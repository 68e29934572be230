#include "uniprompt/optim.hpp"

#include <cmath>

namespace uniprompt {

Adam::Adam(std::vector<ad::Parameter*> params, AdamOptions options)
    : params_(std::move(params)), options_(options) {
  require(options_.learning_rate > 0.0, "adam: learning rate must be positive");
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto* p : params_) {
    m_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    v_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
  }
}

void Adam::step(const ad::Gradients& grads) {
  for (const auto* p : params_) {
    const Matrix& g = grads.of(*p);
    if (g.rows() != p->value.rows() || g.cols() != p->value.cols())
      throw ValidationError("adam: gradient shape mismatch for parameter '" + p->name + "'");
    if (!g.allFinite()) throw RuntimeAbort("adam: non-finite gradient for parameter '" + p->name + "'");
  }
  ++steps_;
  const double b1 = options_.beta1, b2 = options_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    const Matrix& g = grads.of(*params_[k]);
    m_[k] = b1 * m_[k] + (1.0 - b1) * g;
    v_[k] = b2 * v_[k] + (1.0 - b2) * g.cwiseProduct(g);
    const double lr = options_.learning_rate;
    const double eps = options_.epsilon;
    params_[k]->value.array() -=
        lr * (m_[k].array() / c1) / ((v_[k].array() / c2).sqrt() + eps);
  }
}

}  // namespace uniprompt
