#include "uniprompt/theory.hpp"

#include "uniprompt/harness.hpp"
#include "uniprompt/prompt.hpp"

#include <Eigen/QR>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace uniprompt {

void EquivalenceCase::validate() const {
  require(w_t.rows() > 0 && w_t.cols() > 0 && w_c.cols() > 0, "theory: empty case");
  require(b_t.rows() == w_t.rows() && b_t.cols() == 1, "theory: b_T shape mismatch");
  require(w_c.rows() == w_t.rows(), "theory: W_C row count must equal d'");
}

Composed compose(const EquivalenceCase& c) {
  c.validate();
  return {c.w_t.transpose() * c.w_c, c.w_c.transpose() * c.b_t};
}

namespace {

Matrix gaussian(Rng& rng, std::size_t rows, std::size_t cols) {
  Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

Matrix unit_vector(Rng& rng, std::size_t d) {
  Matrix h = gaussian(rng, d, 1);
  const double n = h.norm();
  return n > 0.0 ? Matrix(h / n) : unit_vector(rng, d);
}

Eigen::Index argmax(const Matrix& v) {
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < v.size(); ++i)
    if (v.data()[i] > v.data()[best]) best = i;
  return best;
}

double max_abs(const Matrix& m) { return m.size() ? m.cwiseAbs().maxCoeff() : 0.0; }

Matrix softmax(const Matrix& z) {
  const Matrix e = (z.array() - z.maxCoeff()).exp().matrix();
  return e / e.sum();
}

}  // namespace

Matrix random_orthogonal(Rng& rng, std::size_t n) {
  const Matrix a = gaussian(rng, n, n);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  return Matrix(qr.householderQ() * Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n)));
}

EquivalenceCase random_case(Rng& rng, std::size_t d, std::size_t d_prime, std::size_t classes) {
  require(d > 0 && d_prime > 0 && classes > 0, "theory: dimensions must be positive");
  return {gaussian(rng, d_prime, d), gaussian(rng, d_prime, 1), gaussian(rng, d_prime, classes)};
}

EquivalenceCase orthogonal_case(Rng& rng, std::size_t d, std::size_t classes) {
  require(classes >= 1 && classes <= d, "theory: orthonormal columns need classes <= d");
  EquivalenceCase c;
  c.w_t = random_orthogonal(rng, d);
  c.w_c = random_orthogonal(rng, d).leftCols(static_cast<Eigen::Index>(classes));
  c.b_t = Matrix::Zero(static_cast<Eigen::Index>(d), 1);
  return c;
}

FunctionReport verify_function_equivalence(const EquivalenceCase& c, const Composed& composed, std::size_t trials,
                                           Rng& rng, double norm) {
  require(trials >= 1, "theory: trials must be >= 1");
  c.validate();
  FunctionReport r;
  for (std::size_t t = 0; t < trials; ++t) {
    const Matrix h = norm * unit_vector(rng, c.d());
    const Matrix prompted = c.w_c.transpose() * (c.w_t * h + c.b_t);
    const Matrix direct = composed.w.transpose() * h + composed.b;
    r.max_deviation = std::max(r.max_deviation, max_abs(prompted - direct));
    r.argmax_agreements += argmax(prompted) == argmax(direct) ? 1 : 0;
    ++r.trials;
  }
  return r;
}

FunctionReport verify_function_equivalence(const EquivalenceCase& c, std::size_t trials, Rng& rng, double norm) {
  return verify_function_equivalence(c, compose(c), trials, rng, norm);
}

GradientReport verify_gradient_equivalence(const EquivalenceCase& c, const Matrix& h, int label, double eta) {
  c.validate();
  const auto d = static_cast<Eigen::Index>(c.d());
  const auto k = static_cast<Eigen::Index>(c.classes());
  require(c.d() == c.d_prime(), "theory: gradient check needs d' = d");
  require(h.rows() == d && h.cols() == 1, "theory: h must be a d-vector");
  require(label >= 0 && label < k, "theory: label out of range");
  require(max_abs(c.w_t.transpose() * c.w_t - Matrix::Identity(d, d)) <= 1e-10, "theory: W_T is not orthogonal");
  require(max_abs(c.w_c.transpose() * c.w_c - Matrix::Identity(k, k)) <= 1e-10,
          "theory: W_C does not have orthonormal columns");
  require(max_abs(c.b_t) <= 1e-10, "theory: gradient check requires b_T = 0");

  const Matrix z = c.w_t * h + c.b_t;
  const Matrix logits = c.w_c.transpose() * z;
  Matrix g = softmax(logits);  // dL/dlogits for cross-entropy
  g(label, 0) -= 1.0;

  // Steps of gradient descent on the prompt + classifier pair.
  const Matrix dw_c = -eta * z * g.transpose();
  const Matrix dw_t = -eta * c.w_c * g * h.transpose();
  const Matrix db_t = -eta * c.w_c * g;

  // Direct step on the composed classifier.
  const Matrix direct_w = -eta * h * g.transpose();
  const Matrix direct_b = -eta * g;

  const Matrix induced_w = c.w_t.transpose() * dw_c + dw_t.transpose() * c.w_c;
  const Matrix induced_b = c.w_c.transpose() * db_t + dw_c.transpose() * c.b_t;
  const Matrix exact_w = (c.w_t + dw_t).transpose() * (c.w_c + dw_c) - c.w_t.transpose() * c.w_c;

  GradientReport r;
  r.weight_deviation = max_abs(induced_w - direct_w);
  r.bias_deviation = max_abs(induced_b - direct_b);
  r.exact_weight_deviation_vs_double = max_abs(exact_w - 2.0 * direct_w);
  r.direct_step_norm = max_abs(direct_w);
  return r;
}

TheoryReport run_theory_checks(const TheoryOptions& o) {
  require(o.trials >= 1, "verify-theory: trials must be >= 1");
  require(o.eta >= 0.0, "verify-theory: eta must be >= 0");
  require(o.max_dim >= 2 && o.max_classes >= 2, "verify-theory: dimensions too small");
  const auto start = std::chrono::steady_clock::now();
  TheoryReport rep;
  rep.tolerance = 50.0 * o.eta * o.eta;

  Rng rng(o.seed, "theory");
  for (std::size_t t = 0; t < o.trials; ++t) {
    const std::size_t d = 1 + rng.below(o.max_dim), dp = 1 + rng.below(o.max_dim), k = 2 + rng.below(o.max_classes - 1);
    const EquivalenceCase c = random_case(rng, d, dp, k);
    const FunctionReport f = verify_function_equivalence(c, 1, rng);
    rep.function.max_deviation = std::max(rep.function.max_deviation, f.max_deviation);
    rep.function.argmax_agreements += f.argmax_agreements;
    rep.function.trials += f.trials;
  }
  rep.function_pass = rep.function.max_deviation <= 1e-12 && rep.function.argmax_agreements == rep.function.trials;

  const std::size_t cases = std::min<std::size_t>(o.trials, 100);
  for (std::size_t t = 0; t < cases; ++t) {
    const std::size_t d = 2 + rng.below(o.max_dim - 1);
    const std::size_t k = 2 + rng.below(std::min(d, o.max_classes) - 1);
    const EquivalenceCase c = orthogonal_case(rng, d, k);
    const Matrix h = unit_vector(rng, d);
    const int y = static_cast<int>(rng.below(k));
    const GradientReport full = verify_gradient_equivalence(c, h, y, o.eta);
    const GradientReport half = verify_gradient_equivalence(c, h, y, o.eta / 2.0);
    rep.gradient_deviation = std::max({rep.gradient_deviation, full.weight_deviation, full.bias_deviation});
    rep.gradient_deviation_half = std::max({rep.gradient_deviation_half, half.weight_deviation, half.bias_deviation});
    rep.exact_deviation = std::max(rep.exact_deviation, full.exact_weight_deviation_vs_double);
    rep.exact_deviation_half = std::max(rep.exact_deviation_half, half.exact_weight_deviation_vs_double);
  }
  const double ratio = rep.gradient_deviation_half > 0.0 ? rep.gradient_deviation / rep.gradient_deviation_half : 0.0;
  rep.gradient_pass = rep.gradient_deviation <= rep.tolerance &&
                      (rep.gradient_deviation == 0.0 || (ratio >= 3.2 && ratio <= 4.8));
  rep.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return rep;
}

std::string format_report(const TheoryReport& r) {
  char buf[1024];
  const double ratio = r.gradient_deviation_half > 0.0 ? r.gradient_deviation / r.gradient_deviation_half : 0.0;
  const double exact_ratio = r.exact_deviation_half > 0.0 ? r.exact_deviation / r.exact_deviation_half : 0.0;
  std::snprintf(buf, sizeof buf,
                "function equivalence: max deviation %.3e over %zu cases, argmax agreement %zu/%zu  %s\n"
                "gradient paths: max deviation %.3e (tolerance %.3e), halving ratio %.3f  %s\n"
                "gradient paths vs doubled direct step: residual %.3e, halving ratio %.3f\n"
                "runtime %.3f s\n",
                r.function.max_deviation, r.function.trials, r.function.argmax_agreements, r.function.trials,
                r.function_pass ? "PASS" : "FAIL", r.gradient_deviation, r.tolerance, ratio,
                r.gradient_pass ? "PASS" : "FAIL", r.exact_deviation, exact_ratio, r.runtime_seconds);
  return buf;
}

std::vector<std::filesystem::path> motivation_replication(const Graph& graph, const std::vector<Encoder>& encoders,
                                                          const TuneConfig& cfg, std::size_t shot,
                                                          const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  const FewShotTask task = sample_k_shot(graph, shot, cfg.seed, 0);
  std::vector<std::filesystem::path> written;
  for (std::size_t e = 0; e < encoders.size(); ++e) {
    const TuneResult r = linear_probe_tune(graph, encoders[e], task.labeled(graph), cfg);
    const std::string tag = encoders[e].info.objective.empty() ? "encoder" : encoders[e].info.objective;
    const auto path = out_dir / ("loss_" + std::to_string(e) + "_" + tag + ".csv");
    std::ofstream out(path);
    out << "epoch,normalized_loss\n";
    const double first = r.loss_history.front();
    char line[64];
    for (std::size_t t = 0; t < r.loss_history.size(); ++t) {
      std::snprintf(line, sizeof line, "%zu,%.17g\n", t, first > 0.0 ? r.loss_history[t] / first : 1.0);
      out << line;
    }
    written.push_back(path);
  }
  return written;
}

}  // namespace uniprompt
