#include "enprompt/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "enprompt/errors.hpp"

namespace enprompt {

double evaluate_loss(const TapedLoss& loss_fn, const ParameterRegistry& params) {
  Tape tape;
  const Var loss = loss_fn(tape, params);
  const Matrix& v = tape.value(loss);
  if (v.size() != 1) throw DimensionError("loss must be 1x1, got " + v.shape_string());
  if (!std::isfinite(v(0, 0))) throw NumericError("loss evaluated to a non-finite value");
  return v(0, 0);
}

GradientCheckResult gradient_check(const TapedLoss& loss_fn,
                                   ParameterRegistry& params, double step) {
  if (!(step > 0.0 && step <= 1e-2)) {
    throw ParameterError("finite-difference step must lie in (0, 1e-2]");
  }
  GradientCheckResult result;
  {
    Tape tape;
    const Var loss = loss_fn(tape, params);
    if (!std::isfinite(tape.value(loss)(0, 0))) {
      throw NumericError("loss evaluated to a non-finite value");
    }
    tape.backward(loss);
    result.analytic = tape.parameter_gradients(params);
  }

  for (auto& p : params.entries()) {
    if (p.frozen) continue;
    const Matrix& g = result.analytic.at(p.name);
    auto values = p.value.values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + step;
      const double up = evaluate_loss(loss_fn, params);
      values[i] = saved - step;
      const double down = evaluate_loss(loss_fn, params);
      values[i] = saved;

      const double numeric = (up - down) / (2.0 * step);
      const double analytic = g.values()[i];
      const double denom =
          std::max({std::abs(analytic), std::abs(numeric), 1e-8});
      const double rel = std::abs(analytic - numeric) / denom;
      ++result.entries_checked;
      if (result.worst_parameter.empty() || rel > result.max_relative_error) {
        result.max_relative_error = rel;
        result.worst_parameter = p.name;
        result.worst_index = i;
        result.worst_analytic = analytic;
        result.worst_numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace enprompt
