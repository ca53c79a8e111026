#pragma once

#include <cstddef>
#include <functional>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "enprompt/matrix.hpp"

namespace enprompt {

struct Parameter {
  std::string name;
  Matrix value;
  bool frozen = false;
};

// Named, ordered set of matrix leaves. Frozen entries never receive a
// gradient and are skipped by optimizers.
class ParameterRegistry {
 public:
  Parameter& add(std::string name, Matrix value, bool frozen = false);
  bool contains(const std::string& name) const;
  Parameter& at(const std::string& name);
  const Parameter& at(const std::string& name) const;

  std::vector<Parameter>& entries() noexcept { return entries_; }
  const std::vector<Parameter>& entries() const noexcept { return entries_; }
  std::vector<std::string> names() const;

  // Number of scalars in non-frozen entries.
  std::size_t learnable_count() const noexcept;
  void freeze_all() noexcept;

  friend bool operator==(const ParameterRegistry& a,
                         const ParameterRegistry& b) noexcept;

 private:
  std::vector<Parameter> entries_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

using GradientMap = std::map<std::string, Matrix, std::less<>>;

// Handle into a Tape.
struct Var {
  static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();
  std::size_t id = npos;
  bool valid() const noexcept { return id != npos; }
};

// Reverse-mode differentiation over a fixed vocabulary of matrix ops.
// A tape records one forward evaluation; backward() runs once.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  Var variable(Matrix value);
  // Leaf bound to a registry entry; one leaf per name per tape. Frozen
  // entries are recorded as constants.
  Var parameter(const ParameterRegistry& registry, const std::string& name);

  const Matrix& value(Var v) const;
  // Gradient after backward(); an empty matrix when none flowed.
  const Matrix& grad(Var v) const;
  bool requires_grad(Var v) const;
  std::size_t size() const noexcept { return nodes_.size(); }

  Var matmul(Var a, Var b);
  Var matmul_transposed(Var a, Var b);
  Var transpose(Var a);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  // Adds a 1xC row to every row of a.
  Var add_row(Var a, Var row);
  Var scale(Var a, double factor);
  // factor * a + shift, elementwise.
  Var affine(Var a, double factor, double shift);
  Var hadamard(Var a, Var b);
  Var tanh(Var a);
  Var relu(Var a);
  Var log(Var a);
  Var l2_normalize_rows(Var a, double eps = kNormalizeEps);
  Var cosine_similarity(Var a, Var b);
  // 1xC vector of column sums.
  Var column_sums(Var a);
  Var mean_rows(Var a);
  // Rx1 vector of row sums.
  Var row_sums(Var a);
  Var sum(Var a);
  Var slice_rows(Var a, std::size_t begin, std::size_t count);
  Var concat_rows(std::span<const Var> parts);
  // Row i of the result is row indices[i] of a; indices may repeat.
  Var gather_rows(Var a, std::vector<std::size_t> indices);
  // Sums each run of `group` consecutive rows: (R/group) x C.
  Var group_sum_rows(Var a, std::size_t group);
  Var softmax_rows(Var a, double tau);
  // Mean over rows of -log softmax(logits)[label].
  Var cross_entropy(Var logits, std::span<const std::size_t> labels);

  void backward(Var loss);

  // Gradient for every registry entry; zeros for frozen or unused entries.
  GradientMap parameter_gradients(const ParameterRegistry& registry) const;

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    std::function<void(Tape&, const Matrix&)> backprop;
  };

  Var push(Matrix value, bool requires_grad,
           std::function<void(Tape&, const Matrix&)> backprop = {});
  void accumulate(Var v, const Matrix& g);
  Node& node(Var v);
  const Node& node(Var v) const;

  std::vector<Node> nodes_;
  std::map<std::string, Var, std::less<>> param_leaves_;
};

}  // namespace enprompt
