#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <vector>

namespace tcprof {

/// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
  Matrix(std::initializer_list<std::initializer_list<double>> rows);

  static Matrix identity(std::size_t n);
  static Matrix diagonal(std::span<const double> values);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  const std::vector<double>& storage() const noexcept { return data_; }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

Matrix transpose(const Matrix& m);
Matrix operator+(const Matrix& a, const Matrix& b);
Matrix operator-(const Matrix& a, const Matrix& b);
Matrix operator*(double s, const Matrix& m);

double frobenius_norm(const Matrix& m);
double squared_frobenius(const Matrix& m);
double max_abs_diff(const Matrix& a, const Matrix& b);
/// ||a - b||_F / ||b||_F, or the absolute norm when b is zero.
double relative_error(const Matrix& approx, const Matrix& exact);
bool all_finite(const Matrix& m);
double trace(const Matrix& m);

std::vector<double> column(const Matrix& m, std::size_t c);
void set_column(Matrix& m, std::size_t c, std::span<const double> v);
Matrix slice_cols(const Matrix& m, std::size_t first, std::size_t count);
Matrix slice_rows(const Matrix& m, std::size_t first, std::size_t count);
Matrix vstack(std::span<const Matrix> parts);

std::vector<double> column_means(const Matrix& m);
/// Subtracts `means` from every row.
Matrix center_rows(const Matrix& m, std::span<const double> means);

/// FNV-1a over the raw bytes of the values, continuing from `h`.
std::uint64_t checksum(std::span<const double> values, std::uint64_t h = 0xCBF29CE484222325ULL);

/// Throws InvalidArgument when `m` holds NaN or infinity.
void require_finite(const Matrix& m, const char* what);

}  // namespace tcprof
