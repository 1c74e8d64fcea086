#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "tcprof/matrix.hpp"

namespace tcprof::linalg {

/// Convergence contract shared by the Jacobi solvers: a sweep with every
/// off-diagonal pair below kTolerance (relative) ends the iteration;
/// reaching kMaxSweeps throws NumericalError.
inline constexpr double kTolerance = 1e-12;
inline constexpr int kMaxSweeps = 10000;

struct SvdResult {
  Matrix u;                   // m x k, orthonormal columns
  std::vector<double> s;      // k values, descending
  Matrix v;                   // n x k, orthonormal columns
};

struct EigResult {
  std::vector<double> values;  // descending
  Matrix vectors;              // columns are eigenvectors
};

struct RidgeSolution {
  Matrix coef;                   // d x k
  bool pseudo_inverse = false;   // lambda == 0 and X^T X was rank deficient
};

/// Thin SVD by one-sided Jacobi. `k` truncates to the leading k triplets;
/// nullopt keeps min(rows, cols). Ties in singular values keep input column order.
SvdResult svd_thin(const Matrix& m, std::optional<std::size_t> k = std::nullopt);

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi.
EigResult sym_eig(const Matrix& s);

/// argmin ||Y - X A||_F^2 + lambda ||A||_F^2.
RidgeSolution ridge_solve(const Matrix& x, const Matrix& y, double lambda);

/// (S + ridge I)^(-1/2) for symmetric PSD S.
Matrix inv_sqrt_psd(const Matrix& s, double ridge);

/// max |Q^T Q - I| over entries.
double orthonormality_error(const Matrix& q);

/// Modified Gram-Schmidt (two passes) on the columns of `m`, in order.
/// Throws NumericalError if a column is numerically dependent on earlier ones.
Matrix orthonormalize_columns(const Matrix& m);

/// Sample covariance (divides by n - 1) of already-centered rows.
Matrix covariance(const Matrix& centered);

}  // namespace tcprof::linalg
