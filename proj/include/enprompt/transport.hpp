#pragma once

#include <cstddef>
#include <iosfwd>
#include <span>
#include <vector>

#include "enprompt/matrix.hpp"
#include "enprompt/tape.hpp"

namespace enprompt::ot {

// Probability vectors on the two supports: theta over the N text points,
// beta over the M visual points.
struct Marginals {
  std::vector<double> theta;
  std::vector<double> beta;

  static Marginals uniform(std::size_t n, std::size_t m);
  // Throws ParameterError unless both are strictly positive and sum to 1.
  void validate(std::size_t n, std::size_t m) const;
};

struct SinkhornConfig {
  // Entropic weight; the Gibbs kernel is exp(-C / lambda).
  double lambda = 0.1;
  std::size_t max_iterations = 100;
  double marginal_tolerance = 1e-6;
  bool log_domain = true;
  // Log-domain only: anneal lambda geometrically from the cost range down to
  // the target, warm-starting each stage. Needed for lambda << cost range.
  bool epsilon_scaling = false;

  void validate() const;
};

struct TransportPlan {
  Matrix plan;
  double transport_cost = 0.0;
  double entropy = 0.0;
  std::size_t iterations_used = 0;
  bool converged = false;
  double row_error = 0.0;     // ||T 1 - theta||_1
  double column_error = 0.0;  // ||T^T 1 - beta||_1
};

// C[n, m] = 1 - cos(text_n, visual_m). Rows need not be normalized.
Matrix build_cost_matrix(const Matrix& visual, const Matrix& text);

// Alternating diagonal scaling of exp(-C / lambda). Hitting max_iterations is
// not an error: the plan comes back with converged = false. In the plain
// (non-log) mode a kernel row or column that underflows to zero raises
// NumericError.
TransportPlan sinkhorn(const Matrix& cost, const Marginals& marginals,
                       const SinkhornConfig& config);

// -sum T log T with 0 log 0 = 0.
double plan_entropy(const Matrix& plan);

struct Assignment {
  double cost = 0.0;
  std::vector<std::size_t> permutation;
};

inline constexpr std::size_t kMaxExactSize = 8;

// Unregularized OT between uniform marginals on an n x n cost by enumerating
// all n! permutations (the vertices of the Birkhoff polytope).
Assignment exact_ot_uniform_square(const Matrix& cost);

enum class MarginalPolicy { uniform };

struct ClassDistances {
  std::vector<double> distances;
  std::vector<TransportPlan> plans;
};

// Per-class transport cost between the visual set and each class's text set.
// The plans are plain values: callers that differentiate use them as
// constants through transport_cost_on_tape.
ClassDistances ot_class_distances(const Matrix& visual,
                                  std::span<const Matrix> class_text_sets,
                                  const SinkhornConfig& config,
                                  MarginalPolicy policy = MarginalPolicy::uniform);

// softmax((1 - d_k) / tau).
std::vector<double> ot_prediction(std::span<const double> distances, double tau);

// <plan, 1 - cos(text, visual)> with the plan held fixed.
Var transport_cost_on_tape(Tape& tape, Var visual, Var text, const Matrix& plan);

// Keyed, row-major dump of one solve with 17 significant digits.
void write_solve_record(std::ostream& out, const Matrix& cost,
                        const Marginals& marginals, const TransportPlan& plan);

}  // namespace enprompt::ot
