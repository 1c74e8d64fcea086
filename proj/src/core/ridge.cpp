#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "tcprof/errors.hpp"
#include "tcprof/kernels.hpp"
#include "tcprof/linalg.hpp"

namespace tcprof::linalg {

RidgeSolution ridge_solve(const Matrix& x, const Matrix& y, double lambda) {
  if (lambda < 0.0 || !std::isfinite(lambda)) {
    throw InvalidArgument("ridge_solve: lambda must be finite and >= 0");
  }
  if (x.rows() == 0) throw InvalidArgument("ridge_solve: X has no rows");
  if (x.rows() != y.rows()) {
    throw InvalidArgument("ridge_solve: X has " + std::to_string(x.rows()) + " rows, Y has " +
                          std::to_string(y.rows()));
  }
  require_finite(x, "ridge_solve");
  require_finite(y, "ridge_solve");

  // A = V diag(s / (s^2 + lambda)) U^T Y
  const SvdResult svd = svd_thin(x);
  const double smax = svd.s.empty() ? 0.0 : svd.s.front();
  const double cutoff = smax * static_cast<double>(std::max(x.rows(), x.cols())) *
                        std::numeric_limits<double>::epsilon();
  RidgeSolution out;
  Matrix uty = kernels::matmul_tn(svd.u, y);
  for (std::size_t i = 0; i < svd.s.size(); ++i) {
    const double s = svd.s[i];
    double f = 0.0;
    if (lambda > 0.0) {
      f = s / (s * s + lambda);
    } else if (s > cutoff) {
      f = 1.0 / s;
    } else {
      out.pseudo_inverse = true;
    }
    for (double& v : uty.row(i)) v *= f;
  }
  if (lambda == 0.0 && x.rows() < x.cols()) out.pseudo_inverse = true;
  out.coef = kernels::matmul(svd.v, uty);
  return out;
}

Matrix inv_sqrt_psd(const Matrix& s, double ridge) {
  if (ridge < 0.0 || !std::isfinite(ridge)) {
    throw InvalidArgument("inv_sqrt_psd: ridge must be finite and >= 0");
  }
  Matrix shifted = s;
  for (std::size_t i = 0; i < std::min(s.rows(), s.cols()); ++i) shifted(i, i) += ridge;
  const EigResult eig = sym_eig(shifted);
  const double top = eig.values.empty() ? 0.0 : std::abs(eig.values.front());
  const double neg_tol = 1e-8 * std::max(1.0, top);
  const std::size_t n = shifted.rows();
  Matrix scaled = eig.vectors;
  for (std::size_t c = 0; c < n; ++c) {
    const double lam = eig.values[c];
    if (lam < -neg_tol) {
      throw NumericalError("inv_sqrt_psd: matrix is not PSD (eigenvalue " + std::to_string(lam) +
                           ")");
    }
    if (lam <= 0.0) {
      throw NumericalError("inv_sqrt_psd: matrix is singular; add ridge");
    }
    const double f = 1.0 / std::sqrt(lam);
    for (std::size_t r = 0; r < n; ++r) scaled(r, c) *= f;
  }
  Matrix out = kernels::matmul_nt(scaled, eig.vectors);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double avg = 0.5 * (out(i, j) + out(j, i));
      out(i, j) = avg;
      out(j, i) = avg;
    }
  }
  return out;
}

double orthonormality_error(const Matrix& q) {
  const Matrix g = kernels::matmul_tn(q, q);
  return max_abs_diff(g, Matrix::identity(g.rows()));
}

Matrix orthonormalize_columns(const Matrix& m) {
  Matrix qt = transpose(m);
  for (std::size_t c = 0; c < qt.rows(); ++c) {
    auto col = qt.row(c);
    double original = 0.0;
    for (double v : col) original += v * v;
    original = std::sqrt(original);
    for (int pass = 0; pass < 2; ++pass) {
      for (std::size_t o = 0; o < c; ++o) {
        auto q = qt.row(o);
        double proj = 0.0;
        for (std::size_t i = 0; i < col.size(); ++i) proj += q[i] * col[i];
        for (std::size_t i = 0; i < col.size(); ++i) col[i] -= proj * q[i];
      }
    }
    double norm = 0.0;
    for (double v : col) norm += v * v;
    norm = std::sqrt(norm);
    if (!(norm > 1e-10 * original) || norm == 0.0) {
      throw NumericalError("orthonormalize_columns: column " + std::to_string(c) +
                           " is linearly dependent on earlier columns");
    }
    for (double& v : col) v /= norm;
  }
  return transpose(qt);
}

Matrix covariance(const Matrix& centered) {
  if (centered.rows() < 2) throw InvalidArgument("covariance: need at least two rows");
  Matrix c = kernels::matmul_tn(centered, centered);
  const double inv = 1.0 / static_cast<double>(centered.rows() - 1);
  for (double& v : c.values()) v *= inv;
  return c;
}

}  // namespace tcprof::linalg
