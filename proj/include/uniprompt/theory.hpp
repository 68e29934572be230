#pragma once

// Numerical checks of the prompt/classifier equivalence: a linear prompt
// T(h) = W_T h + b_T followed by a linear classifier C(z) = W_C^T z is the
// single classifier C'(h) = W_C'^T h + b_C' with W_C' = W_T^T W_C, b_C' = W_C^T b_T.

#include "uniprompt/common.hpp"
#include "uniprompt/rng.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace uniprompt {

class Graph;
class Encoder;
struct TuneConfig;

struct EquivalenceCase {
  Matrix w_t;  // d' x d
  Matrix b_t;  // d' x 1
  Matrix w_c;  // d' x C

  std::size_t d() const { return static_cast<std::size_t>(w_t.cols()); }
  std::size_t d_prime() const { return static_cast<std::size_t>(w_t.rows()); }
  std::size_t classes() const { return static_cast<std::size_t>(w_c.cols()); }
  void validate() const;
};

struct Composed {
  Matrix w;  // d x C
  Matrix b;  // C x 1
};

Composed compose(const EquivalenceCase& c);

/// Gaussian case with the given shape.
EquivalenceCase random_case(Rng& rng, std::size_t d, std::size_t d_prime, std::size_t classes);
/// d x d orthogonal W_T, W_C with orthonormal columns, b_T = 0 (QR of Gaussian matrices).
EquivalenceCase orthogonal_case(Rng& rng, std::size_t d, std::size_t classes);
/// Q factor of a seeded Gaussian n x n matrix.
Matrix random_orthogonal(Rng& rng, std::size_t n);

struct FunctionReport {
  double max_deviation = 0.0;
  std::size_t trials = 0;
  std::size_t argmax_agreements = 0;
};

/// Compares (C o T)(h) with C'(h) on random h of norm `norm`.
FunctionReport verify_function_equivalence(const EquivalenceCase& c, std::size_t trials, Rng& rng,
                                           double norm = 1.0);
/// Same, against an explicitly supplied (possibly perturbed) composition.
FunctionReport verify_function_equivalence(const EquivalenceCase& c, const Composed& composed, std::size_t trials,
                                           Rng& rng, double norm = 1.0);

struct GradientReport {
  /// First-order induced change W_T^T dW_C + dW_T^T W_C against the direct step on C'.
  double weight_deviation = 0.0;
  /// W_C^T db_T + dW_C^T b_T against the direct step on C'.
  double bias_deviation = 0.0;
  /// Exact change of W_T^T W_C after the step (cross term included) against twice the direct step.
  double exact_weight_deviation_vs_double = 0.0;
  /// Magnitude of the direct step, for scale.
  double direct_step_norm = 0.0;
};

/// One cross-entropy gradient step at rate eta on a single labeled sample h.
/// Requires orthogonal W_T, orthonormal-column W_C and b_T = 0 (to 1e-10).
GradientReport verify_gradient_equivalence(const EquivalenceCase& c, const Matrix& h, int label, double eta);

struct TheoryOptions {
  std::size_t trials = 1000;
  double eta = 1e-4;
  std::uint64_t seed = 42;
  std::size_t max_dim = 16;
  std::size_t max_classes = 8;
};

struct TheoryReport {
  FunctionReport function;
  double gradient_deviation = 0.0;           // worst weight/bias deviation at eta
  double gradient_deviation_half = 0.0;      // same cases at eta / 2
  double exact_deviation = 0.0;              // cross-term-only residual at eta
  double exact_deviation_half = 0.0;
  double tolerance = 0.0;                    // 50 eta^2
  bool function_pass = false;
  bool gradient_pass = false;
  double runtime_seconds = 0.0;
};

TheoryReport run_theory_checks(const TheoryOptions& options);
std::string format_report(const TheoryReport& report);

/// Per-epoch linear-probe training loss divided by its first value, one CSV per encoder.
/// Returns the written paths.
std::vector<std::filesystem::path> motivation_replication(const Graph& graph, const std::vector<Encoder>& encoders,
                                                          const TuneConfig& cfg, std::size_t shot,
                                                          const std::filesystem::path& out_dir);

}  // namespace uniprompt
