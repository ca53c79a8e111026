#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace enprompt {

// What a matrix stands for; carried along for diagnostics only.
enum class Role { embedding, feature, weight, cost, plan };

const char* to_string(Role role) noexcept;

// Dense row-major matrix of doubles. Rows are vectors in a shared space.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0,
         Role role = Role::feature);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
         Role role = Role::feature);
  Matrix(std::initializer_list<std::initializer_list<double>> rows,
         Role role = Role::feature);

  static Matrix identity(std::size_t n, Role role = Role::weight);
  static Matrix row_vector(std::span<const double> values,
                           Role role = Role::feature);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }
  Role role() const noexcept { return role_; }
  void set_role(Role role) noexcept { role_ = role; }

  double& operator()(std::size_t r, std::size_t c) noexcept {
    return values_[r * cols_ + c];
  }
  double operator()(std::size_t r, std::size_t c) const noexcept {
    return values_[r * cols_ + c];
  }

  std::span<double> row(std::size_t r) noexcept {
    return {values_.data() + r * cols_, cols_};
  }
  std::span<const double> row(std::size_t r) const noexcept {
    return {values_.data() + r * cols_, cols_};
  }

  std::span<double> values() noexcept { return values_; }
  std::span<const double> values() const noexcept { return values_; }

  std::string shape_string() const;
  bool all_finite() const noexcept;

  // Bitwise equality of shape and contents.
  friend bool operator==(const Matrix& a, const Matrix& b) noexcept;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> values_;
  Role role_ = Role::feature;
};

// Throws NumericError naming `what` if any entry is NaN or infinite.
void require_finite(const Matrix& m, const std::string& what);

Matrix matmul(const Matrix& a, const Matrix& b);
// a * b^T without materializing the transpose.
Matrix matmul_transposed(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);

inline constexpr double kNormalizeEps = 1e-12;

// Rows with norm below eps are returned unchanged.
Matrix l2_normalize_rows(const Matrix& a, double eps = kNormalizeEps);

Matrix cosine_similarity_matrix(const Matrix& a, const Matrix& b);

// Max-subtracted softmax of logits / tau.
std::vector<double> softmax_with_temperature(std::span<const double> logits,
                                             double tau);

std::size_t argmax(std::span<const double> values);
std::size_t argmin(std::span<const double> values);

Matrix slice_rows(const Matrix& a, std::size_t begin, std::size_t count);
Matrix concat_rows(const Matrix& top, const Matrix& bottom);
Matrix mean_rows(const Matrix& a);

}  // namespace enprompt
