#include "tcprof/kernels.hpp"

#include <omp.h>

#include <string>

#include "tcprof/errors.hpp"

namespace tcprof::kernels {
namespace {

void check_inner(std::size_t lhs, std::size_t rhs, const char* op) {
  if (lhs != rhs) {
    throw InvalidArgument(std::string(op) + ": inner dimensions differ (" + std::to_string(lhs) +
                          " vs " + std::to_string(rhs) + ")");
  }
}

// Row i of A*B, accumulated over k in ascending order.
inline void matmul_row(const Matrix& a, const Matrix& b, Matrix& c, std::size_t i) {
  auto out = c.row(i);
  for (std::size_t k = 0; k < a.cols(); ++k) {
    const double aik = a(i, k);
    if (aik == 0.0) continue;
    auto brow = b.row(k);
    for (std::size_t j = 0; j < out.size(); ++j) out[j] += aik * brow[j];
  }
}

inline void matmul_nt_row(const Matrix& a, const Matrix& b, Matrix& c, std::size_t i) {
  auto arow = a.row(i);
  for (std::size_t j = 0; j < b.rows(); ++j) {
    auto brow = b.row(j);
    double s = 0.0;
    for (std::size_t k = 0; k < arow.size(); ++k) s += arow[k] * brow[k];
    c(i, j) = s;
  }
}

inline void matmul_tn_row(const Matrix& a, const Matrix& b, Matrix& c, std::size_t i) {
  auto out = c.row(i);
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const double ari = a(r, i);
    if (ari == 0.0) continue;
    auto brow = b.row(r);
    for (std::size_t j = 0; j < out.size(); ++j) out[j] += ari * brow[j];
  }
}

}  // namespace

Matrix matmul(const Matrix& a, const Matrix& b) {
  check_inner(a.cols(), b.rows(), "matmul");
  Matrix c(a.rows(), b.cols());
  const auto n = static_cast<std::ptrdiff_t>(a.rows());
#pragma omp parallel for schedule(static) if (a.size() * b.cols() > 32768)
  for (std::ptrdiff_t i = 0; i < n; ++i) matmul_row(a, b, c, static_cast<std::size_t>(i));
  return c;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  check_inner(a.cols(), b.cols(), "matmul_nt");
  Matrix c(a.rows(), b.rows());
  const auto n = static_cast<std::ptrdiff_t>(a.rows());
#pragma omp parallel for schedule(static) if (a.size() * b.rows() > 32768)
  for (std::ptrdiff_t i = 0; i < n; ++i) matmul_nt_row(a, b, c, static_cast<std::size_t>(i));
  return c;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  check_inner(a.rows(), b.rows(), "matmul_tn");
  Matrix c(a.cols(), b.cols());
  const auto n = static_cast<std::ptrdiff_t>(a.cols());
#pragma omp parallel for schedule(static) if (a.size() * b.cols() > 32768)
  for (std::ptrdiff_t i = 0; i < n; ++i) matmul_tn_row(a, b, c, static_cast<std::size_t>(i));
  return c;
}

Matrix matmul_serial(const Matrix& a, const Matrix& b) {
  check_inner(a.cols(), b.rows(), "matmul");
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) matmul_row(a, b, c, i);
  return c;
}

Matrix matmul_nt_serial(const Matrix& a, const Matrix& b) {
  check_inner(a.cols(), b.cols(), "matmul_nt");
  Matrix c(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) matmul_nt_row(a, b, c, i);
  return c;
}

Matrix matmul_tn_serial(const Matrix& a, const Matrix& b) {
  check_inner(a.rows(), b.rows(), "matmul_tn");
  Matrix c(a.cols(), b.cols());
  for (std::size_t i = 0; i < a.cols(); ++i) matmul_tn_row(a, b, c, i);
  return c;
}

int thread_count() { return omp_get_max_threads(); }

void set_thread_count(int n) {
  if (n > 0) omp_set_num_threads(n);
}

}  // namespace tcprof::kernels
