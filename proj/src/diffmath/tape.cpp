#include "enprompt/tape.hpp"

#include <algorithm>
#include <cmath>

#include "enprompt/errors.hpp"

namespace enprompt {

// ---------------------------------------------------------------------------
// ParameterRegistry

Parameter& ParameterRegistry::add(std::string name, Matrix value, bool frozen) {
  if (index_.contains(name)) {
    throw ConfigError("duplicate parameter '" + name + "'");
  }
  index_.emplace(name, entries_.size());
  entries_.push_back(Parameter{std::move(name), std::move(value), frozen});
  return entries_.back();
}

bool ParameterRegistry::contains(const std::string& name) const {
  return index_.contains(name);
}

Parameter& ParameterRegistry::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
  return entries_[it->second];
}

const Parameter& ParameterRegistry::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
  return entries_[it->second];
}

std::vector<std::string> ParameterRegistry::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& p : entries_) out.push_back(p.name);
  return out;
}

std::size_t ParameterRegistry::learnable_count() const noexcept {
  std::size_t n = 0;
  for (const auto& p : entries_) {
    if (!p.frozen) n += p.value.size();
  }
  return n;
}

void ParameterRegistry::freeze_all() noexcept {
  for (auto& p : entries_) p.frozen = true;
}

bool operator==(const ParameterRegistry& a,
                const ParameterRegistry& b) noexcept {
  if (a.entries_.size() != b.entries_.size()) return false;
  for (std::size_t i = 0; i < a.entries_.size(); ++i) {
    const auto& x = a.entries_[i];
    const auto& y = b.entries_[i];
    if (x.name != y.name || x.frozen != y.frozen || !(x.value == y.value)) {
      return false;
    }
  }
  return true;
}

// ---------------------------------------------------------------------------
// Tape plumbing

Tape::Node& Tape::node(Var v) {
  if (v.id >= nodes_.size()) throw ConfigError("invalid tape variable");
  return nodes_[v.id];
}

const Tape::Node& Tape::node(Var v) const {
  if (v.id >= nodes_.size()) throw ConfigError("invalid tape variable");
  return nodes_[v.id];
}

Var Tape::push(Matrix value, bool requires_grad,
               std::function<void(Tape&, const Matrix&)> backprop) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.backprop = std::move(backprop);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

void Tape::accumulate(Var v, const Matrix& g) {
  Node& n = nodes_[v.id];
  if (!n.requires_grad) return;
  if (n.grad.empty()) {
    n.grad = g;
    return;
  }
  auto dst = n.grad.values();
  auto src = g.values();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

Var Tape::constant(Matrix value) { return push(std::move(value), false); }

Var Tape::variable(Matrix value) { return push(std::move(value), true); }

Var Tape::parameter(const ParameterRegistry& registry, const std::string& name) {
  if (auto it = param_leaves_.find(name); it != param_leaves_.end()) {
    return it->second;
  }
  const Parameter& p = registry.at(name);
  Var v = push(p.value, !p.frozen);
  param_leaves_.emplace(name, v);
  return v;
}

const Matrix& Tape::value(Var v) const { return node(v).value; }
const Matrix& Tape::grad(Var v) const { return node(v).grad; }
bool Tape::requires_grad(Var v) const { return node(v).requires_grad; }

void Tape::backward(Var loss) {
  const Matrix& out = value(loss);
  if (out.rows() != 1 || out.cols() != 1) {
    throw DimensionError("backward needs a 1x1 loss, got " + out.shape_string());
  }
  for (auto& n : nodes_) n.grad = Matrix();
  if (!node(loss).requires_grad) return;
  node(loss).grad = Matrix(1, 1, 1.0);
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.empty() || !n.backprop) continue;
    n.backprop(*this, n.grad);
  }
}

GradientMap Tape::parameter_gradients(const ParameterRegistry& registry) const {
  GradientMap out;
  for (const auto& p : registry.entries()) {
    Matrix g(p.value.rows(), p.value.cols(), 0.0, Role::weight);
    if (!p.frozen) {
      if (auto it = param_leaves_.find(p.name); it != param_leaves_.end()) {
        const Matrix& tg = nodes_[it->second.id].grad;
        if (!tg.empty()) g = tg;
      }
    }
    out.emplace(p.name, std::move(g));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Operations

namespace {

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + " of " + a.shape_string() + " and " +
                         b.shape_string());
  }
}

}  // namespace

Var Tape::matmul(Var a, Var b) {
  const bool rg = requires_grad(a) || requires_grad(b);
  return push(enprompt::matmul(value(a), value(b)), rg,
              [a, b](Tape& t, const Matrix& g) {
                if (t.requires_grad(a)) {
                  t.accumulate(a, enprompt::matmul_transposed(g, t.value(b)));
                }
                if (t.requires_grad(b)) {
                  t.accumulate(b, enprompt::matmul(enprompt::transpose(t.value(a)), g));
                }
              });
}

Var Tape::matmul_transposed(Var a, Var b) {
  const bool rg = requires_grad(a) || requires_grad(b);
  return push(enprompt::matmul_transposed(value(a), value(b)), rg,
              [a, b](Tape& t, const Matrix& g) {
                if (t.requires_grad(a)) {
                  t.accumulate(a, enprompt::matmul(g, t.value(b)));
                }
                if (t.requires_grad(b)) {
                  t.accumulate(b, enprompt::matmul(enprompt::transpose(g), t.value(a)));
                }
              });
}

Var Tape::transpose(Var a) {
  return push(enprompt::transpose(value(a)), requires_grad(a),
              [a](Tape& t, const Matrix& g) {
                t.accumulate(a, enprompt::transpose(g));
              });
}

Var Tape::add(Var a, Var b) {
  require_same_shape(value(a), value(b), "add");
  Matrix out = value(a);
  auto dst = out.values();
  auto src = value(b).values();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  return push(std::move(out), requires_grad(a) || requires_grad(b),
              [a, b](Tape& t, const Matrix& g) {
                t.accumulate(a, g);
                t.accumulate(b, g);
              });
}

Var Tape::sub(Var a, Var b) {
  require_same_shape(value(a), value(b), "sub");
  Matrix out = value(a);
  auto dst = out.values();
  auto src = value(b).values();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] -= src[i];
  return push(std::move(out), requires_grad(a) || requires_grad(b),
              [a, b](Tape& t, const Matrix& g) {
                t.accumulate(a, g);
                if (t.requires_grad(b)) {
                  Matrix neg = g;
                  for (double& v : neg.values()) v = -v;
                  t.accumulate(b, neg);
                }
              });
}

Var Tape::add_row(Var a, Var row) {
  const Matrix& av = value(a);
  const Matrix& rv = value(row);
  if (rv.rows() != 1 || rv.cols() != av.cols()) {
    throw DimensionError("row broadcast of " + rv.shape_string() + " onto " +
                         av.shape_string());
  }
  Matrix out = av;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto r = out.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += rv(0, j);
  }
  return push(std::move(out), requires_grad(a) || requires_grad(row),
              [a, row](Tape& t, const Matrix& g) {
                t.accumulate(a, g);
                if (t.requires_grad(row)) {
                  Matrix s(1, g.cols());
                  for (std::size_t i = 0; i < g.rows(); ++i)
                    for (std::size_t j = 0; j < g.cols(); ++j) s(0, j) += g(i, j);
                  t.accumulate(row, s);
                }
              });
}

Var Tape::scale(Var a, double factor) { return affine(a, factor, 0.0); }

Var Tape::affine(Var a, double factor, double shift) {
  Matrix out = value(a);
  if (shift == 0.0) {
    for (double& v : out.values()) v *= factor;
  } else {
    for (double& v : out.values()) v = factor * v + shift;
  }
  return push(std::move(out), requires_grad(a),
              [a, factor](Tape& t, const Matrix& g) {
                Matrix d = g;
                for (double& v : d.values()) v *= factor;
                t.accumulate(a, d);
              });
}

Var Tape::hadamard(Var a, Var b) {
  require_same_shape(value(a), value(b), "hadamard");
  Matrix out = value(a);
  auto dst = out.values();
  auto src = value(b).values();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] *= src[i];
  return push(std::move(out), requires_grad(a) || requires_grad(b),
              [a, b](Tape& t, const Matrix& g) {
                for (auto [self, other] : {std::pair{a, b}, std::pair{b, a}}) {
                  if (!t.requires_grad(self)) continue;
                  Matrix d = g;
                  auto dv = d.values();
                  auto ov = t.value(other).values();
                  for (std::size_t i = 0; i < dv.size(); ++i) dv[i] *= ov[i];
                  t.accumulate(self, d);
                }
              });
}

Var Tape::tanh(Var a) {
  Matrix out = value(a);
  for (double& v : out.values()) v = std::tanh(v);
  Var result = push(std::move(out), requires_grad(a));
  if (requires_grad(a)) {
    node(result).backprop = [a, result](Tape& t, const Matrix& g) {
      Matrix d = g;
      auto dv = d.values();
      auto yv = t.value(result).values();
      for (std::size_t i = 0; i < dv.size(); ++i) dv[i] *= 1.0 - yv[i] * yv[i];
      t.accumulate(a, d);
    };
  }
  return result;
}

Var Tape::relu(Var a) {
  Matrix out = value(a);
  for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
  return push(std::move(out), requires_grad(a),
              [a](Tape& t, const Matrix& g) {
                Matrix d = g;
                auto dv = d.values();
                auto xv = t.value(a).values();
                for (std::size_t i = 0; i < dv.size(); ++i) {
                  if (!(xv[i] > 0.0)) dv[i] = 0.0;
                }
                t.accumulate(a, d);
              });
}

Var Tape::log(Var a) {
  Matrix out = value(a);
  for (double& v : out.values()) {
    if (!(v > 0.0)) throw NumericError("log of a non-positive value");
    v = std::log(v);
  }
  return push(std::move(out), requires_grad(a),
              [a](Tape& t, const Matrix& g) {
                Matrix d = g;
                auto dv = d.values();
                auto xv = t.value(a).values();
                for (std::size_t i = 0; i < dv.size(); ++i) dv[i] /= xv[i];
                t.accumulate(a, d);
              });
}

Var Tape::l2_normalize_rows(Var a, double eps) {
  const Matrix& x = value(a);
  Matrix out = x;
  std::vector<double> norms(x.rows());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto r = out.row(i);
    double sq = 0.0;
    for (double v : r) sq += v * v;
    norms[i] = std::sqrt(sq);
    if (norms[i] < eps) continue;
    for (double& v : r) v /= norms[i];
  }
  Var result = push(std::move(out), requires_grad(a));
  if (requires_grad(a)) {
    node(result).backprop = [a, result, eps, norms = std::move(norms)](
                                Tape& t, const Matrix& g) {
      const Matrix& y = t.value(result);
      Matrix d = g;
      for (std::size_t i = 0; i < y.rows(); ++i) {
        if (norms[i] < eps) continue;
        auto yr = y.row(i);
        auto dr = d.row(i);
        double dot = 0.0;
        for (std::size_t j = 0; j < yr.size(); ++j) dot += yr[j] * dr[j];
        for (std::size_t j = 0; j < yr.size(); ++j) {
          dr[j] = (dr[j] - yr[j] * dot) / norms[i];
        }
      }
      t.accumulate(a, d);
    };
  }
  return result;
}

Var Tape::cosine_similarity(Var a, Var b) {
  return matmul_transposed(l2_normalize_rows(a), l2_normalize_rows(b));
}

Var Tape::column_sums(Var a) {
  const Matrix& x = value(a);
  Matrix out(1, x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) out(0, j) += x(i, j);
  return push(std::move(out), requires_grad(a),
              [a](Tape& t, const Matrix& g) {
                const Matrix& x = t.value(a);
                Matrix d(x.rows(), x.cols());
                for (std::size_t i = 0; i < x.rows(); ++i)
                  for (std::size_t j = 0; j < x.cols(); ++j) d(i, j) = g(0, j);
                t.accumulate(a, d);
              });
}

Var Tape::mean_rows(Var a) {
  const std::size_t n = value(a).rows();
  if (n == 0) throw DimensionError("mean of an empty row set");
  return scale(column_sums(a), 1.0 / static_cast<double>(n));
}

Var Tape::row_sums(Var a) {
  const Matrix& x = value(a);
  Matrix out(x.rows(), 1);
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) out(i, 0) += x(i, j);
  return push(std::move(out), requires_grad(a),
              [a](Tape& t, const Matrix& g) {
                const Matrix& x = t.value(a);
                Matrix d(x.rows(), x.cols());
                for (std::size_t i = 0; i < x.rows(); ++i)
                  for (std::size_t j = 0; j < x.cols(); ++j) d(i, j) = g(i, 0);
                t.accumulate(a, d);
              });
}

Var Tape::sum(Var a) {
  double total = 0.0;
  for (double v : value(a).values()) total += v;
  return push(Matrix(1, 1, total), requires_grad(a),
              [a](Tape& t, const Matrix& g) {
                const Matrix& x = t.value(a);
                t.accumulate(a, Matrix(x.rows(), x.cols(), g(0, 0)));
              });
}

Var Tape::slice_rows(Var a, std::size_t begin, std::size_t count) {
  return push(enprompt::slice_rows(value(a), begin, count), requires_grad(a),
              [a, begin](Tape& t, const Matrix& g) {
                const Matrix& x = t.value(a);
                Matrix d(x.rows(), x.cols());
                std::copy(g.values().begin(), g.values().end(),
                          d.values().begin() + begin * x.cols());
                t.accumulate(a, d);
              });
}

Var Tape::gather_rows(Var a, std::vector<std::size_t> indices) {
  const Matrix& x = value(a);
  Matrix out(indices.size(), x.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= x.rows()) {
      throw DimensionError("gather of row " + std::to_string(indices[i]) + " from " +
                           x.shape_string());
    }
    auto src = x.row(indices[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return push(std::move(out), requires_grad(a),
              [a, indices = std::move(indices)](Tape& t, const Matrix& g) {
                const Matrix& x = t.value(a);
                Matrix d(x.rows(), x.cols());
                for (std::size_t i = 0; i < indices.size(); ++i) {
                  auto dst = d.row(indices[i]);
                  auto src = g.row(i);
                  for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += src[c];
                }
                t.accumulate(a, d);
              });
}

Var Tape::group_sum_rows(Var a, std::size_t group) {
  const Matrix& x = value(a);
  if (group == 0 || x.rows() % group != 0) {
    throw DimensionError("cannot sum " + x.shape_string() + " in groups of " +
                         std::to_string(group));
  }
  Matrix out(x.rows() / group, x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto dst = out.row(r / group);
    auto src = x.row(r);
    for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += src[c];
  }
  return push(std::move(out), requires_grad(a),
              [a, group](Tape& t, const Matrix& g) {
                const Matrix& x = t.value(a);
                Matrix d(x.rows(), x.cols());
                for (std::size_t r = 0; r < x.rows(); ++r) {
                  auto src = g.row(r / group);
                  std::copy(src.begin(), src.end(), d.row(r).begin());
                }
                t.accumulate(a, d);
              });
}

Var Tape::concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concatenation of zero parts");
  const std::size_t cols = value(parts.front()).cols();
  std::size_t rows = 0;
  bool rg = false;
  for (Var p : parts) {
    if (value(p).cols() != cols) {
      throw DimensionError("row concatenation of width " +
                           std::to_string(value(p).cols()) + " onto width " +
                           std::to_string(cols));
    }
    rows += value(p).rows();
    rg = rg || requires_grad(p);
  }
  std::vector<double> values;
  values.reserve(rows * cols);
  for (Var p : parts) {
    auto v = value(p).values();
    values.insert(values.end(), v.begin(), v.end());
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return push(Matrix(rows, cols, std::move(values)), rg,
              [inputs = std::move(inputs)](Tape& t, const Matrix& g) {
                std::size_t offset = 0;
                for (Var p : inputs) {
                  const std::size_t r = t.value(p).rows();
                  if (t.requires_grad(p) && r > 0) {
                    t.accumulate(p, enprompt::slice_rows(g, offset, r));
                  }
                  offset += r;
                }
              });
}

Var Tape::softmax_rows(Var a, double tau) {
  if (!(tau > 0.0)) throw ParameterError("temperature must be > 0");
  const Matrix& x = value(a);
  Matrix out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto p = softmax_with_temperature(x.row(i), tau);
    std::copy(p.begin(), p.end(), out.row(i).begin());
  }
  Var result = push(std::move(out), requires_grad(a));
  if (requires_grad(a)) {
    node(result).backprop = [a, result, tau](Tape& t, const Matrix& g) {
      const Matrix& y = t.value(result);
      Matrix d(y.rows(), y.cols());
      for (std::size_t i = 0; i < y.rows(); ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < y.cols(); ++j) dot += y(i, j) * g(i, j);
        for (std::size_t j = 0; j < y.cols(); ++j) {
          d(i, j) = y(i, j) * (g(i, j) - dot) / tau;
        }
      }
      t.accumulate(a, d);
    };
  }
  return result;
}

Var Tape::cross_entropy(Var logits, std::span<const std::size_t> labels) {
  const Matrix& x = value(logits);
  if (labels.size() != x.rows() || x.rows() == 0) {
    throw DimensionError("cross entropy of " + x.shape_string() + " logits with " +
                         std::to_string(labels.size()) + " labels");
  }
  Matrix probs(x.rows(), x.cols());
  double total = 0.0;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    if (labels[i] >= x.cols()) throw DimensionError("label out of range");
    auto r = x.row(i);
    const double top = *std::max_element(r.begin(), r.end());
    double z = 0.0;
    for (double v : r) z += std::exp(v - top);
    const double lse = top + std::log(z);
    total += lse - r[labels[i]];
    for (std::size_t j = 0; j < r.size(); ++j) probs(i, j) = std::exp(r[j] - lse);
  }
  const double n = static_cast<double>(x.rows());
  std::vector<std::size_t> y(labels.begin(), labels.end());
  return push(Matrix(1, 1, total / n), requires_grad(logits),
              [logits, n, probs = std::move(probs), y = std::move(y)](
                  Tape& t, const Matrix& g) {
                Matrix d = probs;
                for (std::size_t i = 0; i < d.rows(); ++i) d(i, y[i]) -= 1.0;
                for (double& v : d.values()) v *= g(0, 0) / n;
                t.accumulate(logits, d);
              });
}

}  // namespace enprompt
