#pragma once

#include <functional>
#include <string>

#include "enprompt/tape.hpp"

namespace enprompt {

// Builds a scalar loss on the tape from the current registry values.
using TapedLoss = std::function<Var(Tape&, const ParameterRegistry&)>;

struct GradientCheckResult {
  double max_relative_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t entries_checked = 0;
  GradientMap analytic;
};

// Compares reverse-mode gradients against central differences over every
// learnable entry. Relative error uses max(|g|, |fd|, 1e-8) as denominator.
// The registry is restored bit-exactly before returning.
GradientCheckResult gradient_check(const TapedLoss& loss_fn,
                                   ParameterRegistry& params, double step);

// Evaluates loss_fn once and returns its value; throws NumericError when
// the result is not finite.
double evaluate_loss(const TapedLoss& loss_fn, const ParameterRegistry& params);

}  // namespace enprompt
