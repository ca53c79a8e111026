#include "enprompt/matrix.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "enprompt/errors.hpp"

namespace enprompt {

const char* to_string(Role role) noexcept {
  switch (role) {
    case Role::embedding: return "embedding";
    case Role::feature: return "feature";
    case Role::weight: return "weight";
    case Role::cost: return "cost";
    case Role::plan: return "plan";
  }
  return "unknown";
}

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill, Role role)
    : rows_(rows), cols_(cols), values_(rows * cols, fill), role_(role) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
               Role role)
    : rows_(rows), cols_(cols), values_(std::move(values)), role_(role) {
  if (values_.size() != rows * cols) {
    throw DimensionError("value count " + std::to_string(values_.size()) +
                         " does not fill a " + std::to_string(rows) + "x" +
                         std::to_string(cols) + " matrix");
  }
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows,
               Role role)
    : rows_(rows.size()), cols_(rows.size() ? rows.begin()->size() : 0),
      role_(role) {
  values_.reserve(rows_ * cols_);
  for (const auto& r : rows) {
    if (r.size() != cols_) throw DimensionError("ragged matrix literal");
    values_.insert(values_.end(), r.begin(), r.end());
  }
}

Matrix Matrix::identity(std::size_t n, Role role) {
  Matrix m(n, n, 0.0, role);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::row_vector(std::span<const double> values, Role role) {
  return Matrix(1, values.size(),
                std::vector<double>(values.begin(), values.end()), role);
}

std::string Matrix::shape_string() const {
  return std::to_string(rows_) + "x" + std::to_string(cols_);
}

bool Matrix::all_finite() const noexcept {
  return std::all_of(values_.begin(), values_.end(),
                     [](double v) { return std::isfinite(v); });
}

bool operator==(const Matrix& a, const Matrix& b) noexcept {
  if (a.rows_ != b.rows_ || a.cols_ != b.cols_) return false;
  if (a.values_.empty()) return true;
  return std::memcmp(a.values_.data(), b.values_.data(),
                     a.values_.size() * sizeof(double)) == 0;
}

void require_finite(const Matrix& m, const std::string& what) {
  if (!m.all_finite()) throw NumericError(what + " contains non-finite values");
}

namespace {

// i-k-j order: each output row is accumulated in a fixed order that does not
// depend on how many rows are multiplied together, so batched and one-at-a-time
// evaluation agree bit for bit.
void multiply_into(const Matrix& a, const Matrix& b, Matrix& out) {
  const std::size_t n = a.cols();
  const std::size_t m = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double* out_row = out.row(i).data();
    const double* a_row = a.row(i).data();
    for (std::size_t k = 0; k < n; ++k) {
      const double aik = a_row[k];
      const double* b_row = b.row(k).data();
      for (std::size_t j = 0; j < m; ++j) out_row[j] += aik * b_row[j];
    }
  }
}

}  // namespace

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul of " + a.shape_string() + " by " +
                         b.shape_string());
  }
  Matrix out(a.rows(), b.cols());
  multiply_into(a, b, out);
  return out;
}

Matrix matmul_transposed(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw DimensionError("matmul_transposed of " + a.shape_string() + " by " +
                         b.shape_string() + "^T");
  }
  Matrix out(a.rows(), b.rows());
  multiply_into(a, transpose(b), out);
  return out;
}

Matrix transpose(const Matrix& a) {
  Matrix out(a.cols(), a.rows(), 0.0, a.role());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

Matrix l2_normalize_rows(const Matrix& a, double eps) {
  if (!(eps > 0.0)) throw ParameterError("normalization eps must be > 0");
  Matrix out = a;
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto r = out.row(i);
    double sq = 0.0;
    for (double v : r) sq += v * v;
    const double norm = std::sqrt(sq);
    if (norm < eps) continue;
    for (double& v : r) v /= norm;
  }
  return out;
}

Matrix cosine_similarity_matrix(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw DimensionError("cosine similarity of " + a.shape_string() + " and " +
                         b.shape_string());
  }
  Matrix sim = matmul_transposed(l2_normalize_rows(a), l2_normalize_rows(b));
  for (double& v : sim.values()) v = std::clamp(v, -1.0, 1.0);
  return sim;
}

std::vector<double> softmax_with_temperature(std::span<const double> logits,
                                             double tau) {
  if (!(tau > 0.0)) throw ParameterError("temperature must be > 0");
  if (logits.empty()) return {};
  for (double v : logits) {
    if (!std::isfinite(v)) throw ParameterError("logits must be finite");
  }
  const double top = *std::max_element(logits.begin(), logits.end());
  std::vector<double> out(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp((logits[i] - top) / tau);
    total += out[i];
  }
  for (double& v : out) v /= total;
  return out;
}

std::size_t argmax(std::span<const double> values) {
  return static_cast<std::size_t>(
      std::max_element(values.begin(), values.end()) - values.begin());
}

std::size_t argmin(std::span<const double> values) {
  return static_cast<std::size_t>(
      std::min_element(values.begin(), values.end()) - values.begin());
}

Matrix slice_rows(const Matrix& a, std::size_t begin, std::size_t count) {
  if (begin + count > a.rows()) {
    throw DimensionError("row slice [" + std::to_string(begin) + ", " +
                         std::to_string(begin + count) + ") of " +
                         a.shape_string());
  }
  std::vector<double> values(a.values().begin() + begin * a.cols(),
                             a.values().begin() + (begin + count) * a.cols());
  return Matrix(count, a.cols(), std::move(values), a.role());
}

Matrix concat_rows(const Matrix& top, const Matrix& bottom) {
  if (top.empty()) return bottom;
  if (bottom.empty()) return top;
  if (top.cols() != bottom.cols()) {
    throw DimensionError("row concatenation of " + top.shape_string() +
                         " and " + bottom.shape_string());
  }
  std::vector<double> values(top.values().begin(), top.values().end());
  values.insert(values.end(), bottom.values().begin(), bottom.values().end());
  return Matrix(top.rows() + bottom.rows(), top.cols(), std::move(values),
                top.role());
}

Matrix mean_rows(const Matrix& a) {
  if (a.rows() == 0) throw DimensionError("mean of an empty row set");
  Matrix out(1, a.cols(), 0.0, a.role());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(0, j) += a(i, j);
  for (double& v : out.values()) v /= static_cast<double>(a.rows());
  return out;
}

}  // namespace enprompt
