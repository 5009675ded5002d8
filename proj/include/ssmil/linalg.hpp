#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

namespace ssmil {

/// Norm below which a row is treated as degenerate and rejected.
inline constexpr double kEpsNorm = 1e-12;

/// Dense row-major matrix of doubles.
///
/// Entries are checked for finiteness when a matrix is built from external
/// data (`from_rows`, the data constructor). Arithmetic helpers below never
/// re-check; they propagate whatever the caller feeds them.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Matrix identity(std::size_t n);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  bool same_shape(const Matrix& other) const {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }
  bool all_finite() const;
  void fill(double v);

  Matrix& operator+=(const Matrix& other);
  Matrix& operator-=(const Matrix& other);
  Matrix& operator*=(double s);

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// Dense vector of doubles.
class Vector {
 public:
  Vector() = default;
  explicit Vector(std::size_t len, double fill = 0.0) : data_(len, fill) {}
  explicit Vector(std::vector<double> data);
  Vector(std::initializer_list<double> values);

  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  auto begin() const { return data_.begin(); }
  auto end() const { return data_.end(); }

  bool all_finite() const;
  friend bool operator==(const Vector&, const Vector&) = default;

 private:
  std::vector<double> data_;
};

// --- products (Eigen-backed, row-major) ---

/// a * b
Matrix matmul(const Matrix& a, const Matrix& b);
/// a * b^T
Matrix matmul_nt(const Matrix& a, const Matrix& b);
/// a^T * b
Matrix matmul_tn(const Matrix& a, const Matrix& b);

Matrix transpose(const Matrix& m);
Matrix operator+(Matrix a, const Matrix& b);
Matrix operator-(Matrix a, const Matrix& b);
Matrix operator*(Matrix a, double s);

double dot(std::span<const double> a, std::span<const double> b);
double norm(std::span<const double> v);
/// Column-wise mean of a matrix with at least one row.
Vector column_mean(const Matrix& m);
/// Largest |a_i - b_i|; shapes must agree.
double max_abs_diff(const Matrix& a, const Matrix& b);

// --- numerically stable transforms ---

/// Row-wise softmax of m / tau using a max shift.
Matrix softmax_rows(const Matrix& m, double tau = 1.0);
/// Row-wise log-softmax of m / tau.
Matrix log_softmax_rows(const Matrix& m, double tau = 1.0);
/// Rows scaled to unit Euclidean norm; rows with norm <= kEpsNorm are rejected.
Matrix l2_normalize_rows(const Matrix& m);
/// Cosine of the angle between u and v, clamped to [-1, 1].
double cosine_similarity(const Vector& u, const Vector& v);
double log_sum_exp(std::span<const double> v);
inline double log_sum_exp(const Vector& v) { return log_sum_exp(v.values()); }
/// Shannon entropy (nats) of a probability row.
double entropy(std::span<const double> p);

}  // namespace ssmil
