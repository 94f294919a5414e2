#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace dialm {

/// Dense row-major matrix of doubles. Vectors are stored as 1 x n.
class Matrix {
public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const double& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  const double& operator[](std::size_t i) const { return data_[i]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  void fill(double v);
  bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }
  bool operator==(const Matrix& o) const = default;

private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// C = alpha * op(A) * op(B) + beta * C, op = identity or transpose.
/// C must already have the result shape.
void gemm(const Matrix& a, bool trans_a, const Matrix& b, bool trans_b, Matrix& c,
          double alpha = 1.0, double beta = 0.0);

Matrix matmul(const Matrix& a, const Matrix& b);     // A * B
Matrix matmul_tn(const Matrix& a, const Matrix& b);  // A^T * B
Matrix matmul_nt(const Matrix& a, const Matrix& b);  // A * B^T

/// y += alpha * x (same shape).
void axpy(double alpha, const Matrix& x, Matrix& y);

/// Adds the 1 x cols row vector `bias` to every row of m.
void add_row_vector(Matrix& m, const Matrix& bias);

/// Accumulates column sums of m into the 1 x cols row vector `out`.
void accumulate_column_sums(const Matrix& m, Matrix& out);

double dot(std::span<const double> a, std::span<const double> b);
double l2_norm(std::span<const double> a);

/// Cosine similarity; 0 when either vector is zero.
double cosine(std::span<const double> a, std::span<const double> b);

/// Gradient of cosine(a, b) w.r.t. a, scaled by `upstream` and added to `grad_a`.
void cosine_grad_accumulate(std::span<const double> a, std::span<const double> b,
                            double upstream, std::span<double> grad_a);

/// Numerically stable in-place softmax of one row.
void softmax_inplace(std::span<double> row);

double sigmoid(double x);

/// Returns "rows x cols" for diagnostics.
std::string shape_string(const Matrix& m);

}  // namespace dialm
