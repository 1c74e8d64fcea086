#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "tcprof/errors.hpp"
#include "tcprof/linalg.hpp"

namespace tcprof::linalg {
namespace {

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

void rotate(std::span<double> a, std::span<double> b, double c, double s) {
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = a[i];
    const double y = b[i];
    a[i] = c * x - s * y;
    b[i] = s * x + c * y;
  }
}

// Fills every column of `u` flagged in `missing` with a unit vector orthogonal
// to all other columns, trying standard basis vectors in order.
void complete_basis(Matrix& ut, const std::vector<bool>& missing) {
  const std::size_t m = ut.cols();
  std::size_t candidate = 0;
  for (std::size_t c = 0; c < ut.rows(); ++c) {
    if (!missing[c]) continue;
    for (;; ++candidate) {
      if (candidate >= m) throw NumericalError("svd_thin: cannot complete orthonormal basis");
      std::vector<double> e(m, 0.0);
      e[candidate] = 1.0;
      for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t o = 0; o < ut.rows(); ++o) {
          if (o == c || (missing[o] && o > c)) continue;
          auto q = ut.row(o);
          const double proj = dot(q, e);
          for (std::size_t i = 0; i < m; ++i) e[i] -= proj * q[i];
        }
      }
      const double norm = std::sqrt(dot(e, e));
      if (norm > 0.5) {
        auto dst = ut.row(c);
        for (std::size_t i = 0; i < m; ++i) dst[i] = e[i] / norm;
        ++candidate;
        break;
      }
    }
  }
}

SvdResult svd_tall(const Matrix& m, std::optional<std::size_t> k) {
  const std::size_t rows = m.rows();
  const std::size_t n = m.cols();
  // Work on columns stored as contiguous rows.
  Matrix a = transpose(m);
  Matrix vt = Matrix::identity(n);

  bool converged = n < 2;
  for (int sweep = 0; sweep < kMaxSweeps && !converged; ++sweep) {
    bool rotated = false;
    for (std::size_t i = 0; i + 1 < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        auto ai = a.row(i);
        auto aj = a.row(j);
        const double alpha = dot(ai, ai);
        const double beta = dot(aj, aj);
        const double gamma = dot(ai, aj);
        if (gamma == 0.0 || std::abs(gamma) <= kTolerance * std::sqrt(alpha) * std::sqrt(beta)) {
          continue;
        }
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        rotate(ai, aj, c, s);
        rotate(vt.row(i), vt.row(j), c, s);
      }
    }
    converged = !rotated;
  }
  if (!converged) {
    throw NumericalError("svd_thin: no convergence within " + std::to_string(kMaxSweeps) +
                         " sweeps");
  }

  std::vector<double> norms(n);
  for (std::size_t i = 0; i < n; ++i) norms[i] = std::sqrt(dot(a.row(i), a.row(i)));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return norms[x] > norms[y]; });

  const std::size_t keep = k.value_or(n);
  Matrix ut(n, rows);
  std::vector<bool> missing(n, false);
  SvdResult out;
  out.s.resize(n);
  Matrix v(n, n);
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t src = order[r];
    out.s[r] = norms[src];
    auto dst = ut.row(r);
    if (norms[src] > 0.0) {
      auto col = a.row(src);
      for (std::size_t i = 0; i < rows; ++i) dst[i] = col[i] / norms[src];
    } else {
      missing[r] = true;
    }
    for (std::size_t i = 0; i < n; ++i) v(i, r) = vt(src, i);
  }
  if (std::find(missing.begin(), missing.end(), true) != missing.end()) complete_basis(ut, missing);

  out.u = slice_cols(transpose(ut), 0, keep);
  out.v = slice_cols(v, 0, keep);
  out.s.resize(keep);
  return out;
}

}  // namespace

SvdResult svd_thin(const Matrix& m, std::optional<std::size_t> k) {
  require_finite(m, "svd_thin");
  const std::size_t full = std::min(m.rows(), m.cols());
  if (k && *k > full) {
    throw InvalidArgument("svd_thin: k = " + std::to_string(*k) + " exceeds min(rows, cols) = " +
                          std::to_string(full));
  }
  if (m.rows() >= m.cols()) return svd_tall(m, k);
  SvdResult t = svd_tall(transpose(m), k);
  std::swap(t.u, t.v);
  return t;
}

}  // namespace tcprof::linalg
