#include "enprompt/transport.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <ostream>

#include "enprompt/errors.hpp"

namespace enprompt::ot {

Marginals Marginals::uniform(std::size_t n, std::size_t m) {
  if (n == 0 || m == 0) throw ParameterError("marginals need nonempty supports");
  return Marginals{std::vector<double>(n, 1.0 / static_cast<double>(n)),
                   std::vector<double>(m, 1.0 / static_cast<double>(m))};
}

namespace {

void validate_simplex(const std::vector<double>& p, std::size_t expected,
                      const char* name) {
  if (p.size() != expected) {
    throw DimensionError(std::string(name) + " has length " +
                         std::to_string(p.size()) + ", expected " +
                         std::to_string(expected));
  }
  double total = 0.0;
  for (double v : p) {
    if (!(v > 0.0) || !std::isfinite(v)) {
      throw ParameterError(std::string(name) + " entries must be finite and > 0");
    }
    total += v;
  }
  if (std::abs(total - 1.0) > 1e-9) {
    throw ParameterError(std::string(name) + " must sum to 1");
  }
}

double log_sum_exp(std::span<const double> xs) {
  const double top = *std::max_element(xs.begin(), xs.end());
  if (top == -std::numeric_limits<double>::infinity()) return top;
  double s = 0.0;
  for (double x : xs) s += std::exp(x - top);
  return top + std::log(s);
}

struct MarginalErrors {
  double rows = 0.0;
  double cols = 0.0;
};

MarginalErrors marginal_errors(const Matrix& plan, const Marginals& marg) {
  MarginalErrors e;
  std::vector<double> col(plan.cols(), 0.0);
  for (std::size_t n = 0; n < plan.rows(); ++n) {
    double row = 0.0;
    for (std::size_t m = 0; m < plan.cols(); ++m) {
      row += plan(n, m);
      col[m] += plan(n, m);
    }
    e.rows += std::abs(row - marg.theta[n]);
  }
  for (std::size_t m = 0; m < plan.cols(); ++m) e.cols += std::abs(col[m] - marg.beta[m]);
  return e;
}

void finish(TransportPlan& out, const Matrix& cost) {
  double total = 0.0;
  for (std::size_t i = 0; i < cost.size(); ++i) {
    total += out.plan.values()[i] * cost.values()[i];
  }
  out.transport_cost = total;
  out.entropy = plan_entropy(out.plan);
}

// Potentials f, g are kept in cost units so they carry over between
// annealing stages: T_nm = exp((f_n + g_m - C_nm) / lambda).
TransportPlan solve_log_domain(const Matrix& cost, const Marginals& marg,
                               const SinkhornConfig& cfg) {
  const std::size_t n_rows = cost.rows();
  const std::size_t n_cols = cost.cols();
  std::vector<double> log_theta(n_rows), log_beta(n_cols);
  for (std::size_t n = 0; n < n_rows; ++n) log_theta[n] = std::log(marg.theta[n]);
  for (std::size_t m = 0; m < n_cols; ++m) log_beta[m] = std::log(marg.beta[m]);

  std::vector<double> f(n_rows, 0.0), g(n_cols, 0.0);
  std::vector<double> scratch(std::max(n_rows, n_cols));
  TransportPlan out;
  out.plan = Matrix(n_rows, n_cols, 0.0, Role::plan);

  std::vector<double> schedule;
  if (cfg.epsilon_scaling) {
    const auto [lo, hi] = std::minmax_element(cost.values().begin(), cost.values().end());
    for (double lam = std::max(1.0, *hi - *lo); lam > cfg.lambda; lam *= 0.5) {
      schedule.push_back(lam);
    }
  }
  schedule.push_back(cfg.lambda);

  for (std::size_t stage = 0; stage < schedule.size(); ++stage) {
    const double lam = schedule[stage];
    const bool last = stage + 1 == schedule.size();
    const double tol = last ? cfg.marginal_tolerance
                            : std::max(cfg.marginal_tolerance, 1e-3);
    for (std::size_t it = 1; it <= cfg.max_iterations; ++it) {
      for (std::size_t n = 0; n < n_rows; ++n) {
        for (std::size_t m = 0; m < n_cols; ++m) scratch[m] = (g[m] - cost(n, m)) / lam;
        f[n] = lam * (log_theta[n] - log_sum_exp({scratch.data(), n_cols}));
      }
      for (std::size_t m = 0; m < n_cols; ++m) {
        for (std::size_t n = 0; n < n_rows; ++n) scratch[n] = (f[n] - cost(n, m)) / lam;
        g[m] = lam * (log_beta[m] - log_sum_exp({scratch.data(), n_rows}));
      }
      for (std::size_t n = 0; n < n_rows; ++n)
        for (std::size_t m = 0; m < n_cols; ++m)
          out.plan(n, m) = std::exp((f[n] + g[m] - cost(n, m)) / lam);

      const MarginalErrors err = marginal_errors(out.plan, marg);
      ++out.iterations_used;
      out.row_error = err.rows;
      out.column_error = err.cols;
      if (err.rows <= tol && err.cols <= tol) {
        out.converged = last;
        break;
      }
    }
  }
  return out;
}

TransportPlan solve_scaling(const Matrix& cost, const Marginals& marg,
                            const SinkhornConfig& cfg) {
  const std::size_t n_rows = cost.rows();
  const std::size_t n_cols = cost.cols();
  Matrix kernel(n_rows, n_cols);
  for (std::size_t i = 0; i < cost.size(); ++i) {
    kernel.values()[i] = std::exp(-cost.values()[i] / cfg.lambda);
  }
  std::vector<double> u(n_rows, 1.0), v(n_cols, 1.0);
  TransportPlan out;
  out.plan = Matrix(n_rows, n_cols, 0.0, Role::plan);

  auto underflow = [](const char* side) {
    throw NumericError(std::string("Sinkhorn kernel underflow on a ") + side +
                       "; retry with log_domain enabled or a larger lambda");
  };

  for (std::size_t it = 1; it <= cfg.max_iterations; ++it) {
    for (std::size_t n = 0; n < n_rows; ++n) {
      double kv = 0.0;
      for (std::size_t m = 0; m < n_cols; ++m) kv += kernel(n, m) * v[m];
      if (!(kv > 0.0) || !std::isfinite(kv)) underflow("row");
      u[n] = marg.theta[n] / kv;
    }
    for (std::size_t m = 0; m < n_cols; ++m) {
      double ktu = 0.0;
      for (std::size_t n = 0; n < n_rows; ++n) ktu += kernel(n, m) * u[n];
      if (!(ktu > 0.0) || !std::isfinite(ktu)) underflow("column");
      v[m] = marg.beta[m] / ktu;
    }
    for (std::size_t n = 0; n < n_rows; ++n)
      for (std::size_t m = 0; m < n_cols; ++m)
        out.plan(n, m) = u[n] * kernel(n, m) * v[m];

    const MarginalErrors err = marginal_errors(out.plan, marg);
    out.iterations_used = it;
    out.row_error = err.rows;
    out.column_error = err.cols;
    if (!out.plan.all_finite()) underflow("plan entry");
    if (err.rows <= cfg.marginal_tolerance && err.cols <= cfg.marginal_tolerance) {
      out.converged = true;
      break;
    }
  }
  return out;
}

}  // namespace

void Marginals::validate(std::size_t n, std::size_t m) const {
  validate_simplex(theta, n, "theta");
  validate_simplex(beta, m, "beta");
}

void SinkhornConfig::validate() const {
  if (!(lambda > 0.0) || !std::isfinite(lambda)) {
    throw ParameterError("sinkhorn lambda must be > 0");
  }
  if (!(marginal_tolerance > 0.0)) {
    throw ParameterError("sinkhorn marginal tolerance must be > 0");
  }
  if (max_iterations < 1) throw ParameterError("sinkhorn needs at least one iteration");
}

Matrix build_cost_matrix(const Matrix& visual, const Matrix& text) {
  if (visual.cols() != text.cols()) {
    throw DimensionError("cost matrix between visual " + visual.shape_string() +
                         " and text " + text.shape_string());
  }
  Matrix cost = cosine_similarity_matrix(text, visual);
  for (double& v : cost.values()) v = 1.0 - v;
  cost.set_role(Role::cost);
  return cost;
}

TransportPlan sinkhorn(const Matrix& cost, const Marginals& marginals,
                       const SinkhornConfig& config) {
  config.validate();
  if (cost.empty()) throw DimensionError("empty cost matrix");
  require_finite(cost, "cost matrix");
  marginals.validate(cost.rows(), cost.cols());
  TransportPlan out = config.log_domain ? solve_log_domain(cost, marginals, config)
                                        : solve_scaling(cost, marginals, config);
  finish(out, cost);
  return out;
}

double plan_entropy(const Matrix& plan) {
  double h = 0.0;
  for (double t : plan.values()) {
    if (t > 0.0) h -= t * std::log(t);
  }
  return h;
}

Assignment exact_ot_uniform_square(const Matrix& cost) {
  if (cost.rows() != cost.cols() || cost.rows() == 0) {
    throw DimensionError("exact OT needs a nonempty square cost, got " +
                         cost.shape_string());
  }
  const std::size_t n = cost.rows();
  if (n > kMaxExactSize) {
    throw ParameterError("size error: exact OT enumerates n! permutations; n = " +
                         std::to_string(n) + " exceeds " +
                         std::to_string(kMaxExactSize));
  }
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Assignment best;
  best.cost = std::numeric_limits<double>::infinity();
  do {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) total += cost(i, perm[i]);
    total /= static_cast<double>(n);
    if (total < best.cost) {
      best.cost = total;
      best.permutation = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

ClassDistances ot_class_distances(const Matrix& visual,
                                  std::span<const Matrix> class_text_sets,
                                  const SinkhornConfig& config,
                                  MarginalPolicy policy) {
  if (class_text_sets.size() < 2) {
    throw ParameterError("OT classification needs at least two classes");
  }
  ClassDistances out;
  out.distances.reserve(class_text_sets.size());
  out.plans.reserve(class_text_sets.size());
  for (const Matrix& text : class_text_sets) {
    const Matrix cost = build_cost_matrix(visual, text);
    Marginals marg;
    switch (policy) {
      case MarginalPolicy::uniform:
        marg = Marginals::uniform(cost.rows(), cost.cols());
        break;
    }
    TransportPlan plan = sinkhorn(cost, marg, config);
    out.distances.push_back(plan.transport_cost);
    out.plans.push_back(std::move(plan));
  }
  return out;
}

std::vector<double> ot_prediction(std::span<const double> distances, double tau) {
  if (!(tau > 0.0)) throw ParameterError("temperature must be > 0");
  std::vector<double> logits(distances.size());
  for (std::size_t k = 0; k < distances.size(); ++k) logits[k] = 1.0 - distances[k];
  return softmax_with_temperature(logits, tau);
}

Var transport_cost_on_tape(Tape& tape, Var visual, Var text, const Matrix& plan) {
  const Var sim = tape.cosine_similarity(text, visual);
  const Matrix& s = tape.value(sim);
  if (s.rows() != plan.rows() || s.cols() != plan.cols()) {
    throw DimensionError("plan " + plan.shape_string() + " against cost " +
                         s.shape_string());
  }
  const Var cost = tape.affine(sim, -1.0, 1.0);
  return tape.sum(tape.hadamard(cost, tape.constant(plan)));
}

namespace {

void write_array(std::ostream& out, const char* key, const Matrix& m) {
  out << key << ' ' << m.rows() << ' ' << m.cols() << " =";
  for (double v : m.values()) out << ' ' << v;
  out << '\n';
}

void write_array(std::ostream& out, const char* key, const std::vector<double>& v) {
  out << key << ' ' << v.size() << " =";
  for (double x : v) out << ' ' << x;
  out << '\n';
}

}  // namespace

void write_solve_record(std::ostream& out, const Matrix& cost,
                        const Marginals& marginals, const TransportPlan& plan) {
  const auto flags = out.flags();
  const auto precision = out.precision();
  out << std::setprecision(17);
  write_array(out, "cost", cost);
  write_array(out, "theta", marginals.theta);
  write_array(out, "beta", marginals.beta);
  write_array(out, "plan", plan.plan);
  out << "iterations = " << plan.iterations_used << '\n';
  out << "converged = " << (plan.converged ? "true" : "false") << '\n';
  out << "transport_cost = " << plan.transport_cost << '\n';
  out << "entropy = " << plan.entropy << '\n';
  out.flags(flags);
  out.precision(precision);
}

}  // namespace enprompt::ot
