#include "tcprof/spectral.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "tcprof/errors.hpp"
#include "tcprof/kernels.hpp"

namespace tcprof::spectral {
namespace {

using kernels::matmul;
using kernels::matmul_nt;
using kernels::matmul_tn;

// Indices of the `count` largest |values|, earlier index first on ties.
std::vector<std::size_t> top_indices(std::span<const double> values, std::size_t count) {
  std::vector<std::size_t> idx(values.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return std::abs(values[a]) > std::abs(values[b]);
  });
  idx.resize(count);
  return idx;
}

std::size_t keep_count(std::size_t n, double fraction) {
  return std::min(n, static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n))));
}

}  // namespace

Matrix dct_basis(std::size_t n) {
  Matrix c(n, n);
  const double a0 = std::sqrt(1.0 / static_cast<double>(n));
  const double a = std::sqrt(2.0 / static_cast<double>(n));
  for (std::size_t k = 0; k < n; ++k) {
    for (std::size_t i = 0; i < n; ++i) {
      c(k, i) = (k == 0 ? a0 : a) *
                std::cos(std::numbers::pi * static_cast<double>((2 * i + 1) * k) /
                         static_cast<double>(2 * n));
    }
  }
  return c;
}

Matrix dct2(const Matrix& m, Direction direction) {
  require_finite(m, "dct2");
  if (m.empty()) return m;
  const Matrix cr = dct_basis(m.rows());
  const Matrix cc = dct_basis(m.cols());
  if (direction == Direction::kForward) return matmul_nt(matmul(cr, m), cc);
  return matmul(matmul_tn(cr, m), cc);
}

double gini(std::vector<double> values) {
  if (values.empty()) throw InvalidArgument("gini: empty input");
  double total = 0.0;
  for (double v : values) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw InvalidArgument("gini: values must be finite and >= 0");
    total += v;
  }
  if (total == 0.0) throw InvalidArgument("gini: all-zero input");
  std::sort(values.begin(), values.end());
  const double n = static_cast<double>(values.size());
  double weighted = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) weighted += static_cast<double>(i + 1) * values[i];
  return 2.0 * weighted / (n * total) - (n + 1.0) / n;
}

double energy_capture(const Matrix& coefficients, double fraction) {
  std::vector<double> sq(coefficients.values().begin(), coefficients.values().end());
  for (double& v : sq) v *= v;
  std::sort(sq.begin(), sq.end(), std::greater<>());
  const double total = std::accumulate(sq.begin(), sq.end(), 0.0);
  if (total == 0.0) return 1.0;
  const std::size_t k = keep_count(sq.size(), fraction);
  if (k == sq.size()) return 1.0;
  return std::accumulate(sq.begin(), sq.begin() + static_cast<std::ptrdiff_t>(k), 0.0) / total;
}

SpectralReport spectral_report(const Matrix& w, std::string label) {
  const Matrix coef = dct2(w);
  std::vector<double> sq(coef.values().begin(), coef.values().end());
  for (double& v : sq) v *= v;
  SpectralReport r;
  r.label = std::move(label);
  r.gini = gini(std::move(sq));
  for (double f : kCaptureFractions) r.energy_capture.emplace_back(f, energy_capture(coef, f));
  return r;
}

DctCompressed dct_compress(const Matrix& w, double keep_fraction,
                           const std::optional<quant::QuantScheme>& inner) {
  if (!(keep_fraction > 0.0 && keep_fraction <= 1.0)) {
    throw InvalidArgument("dct_compress: keep_fraction must lie in (0, 1]");
  }
  const Matrix coef = dct2(w);
  const std::size_t k = std::max<std::size_t>(1, keep_count(coef.size(), keep_fraction));
  const auto idx = top_indices(coef.values(), k);

  Matrix kept(1, k);
  for (std::size_t i = 0; i < k; ++i) kept(0, i) = coef.values()[idx[i]];

  DctCompressed out;
  out.kept = k;
  if (inner) {
    const auto q = quant::quantize(kept, *inner);
    kept = quant::dequantize(q);
    out.budget = quant::bit_budget(q);
  } else {
    out.budget.payload_bits = static_cast<std::uint64_t>(k) * 64;
  }
  out.budget.bits_per_weight = static_cast<double>(out.budget.payload_bits + out.budget.overhead_bits) /
                               static_cast<double>(w.size());

  Matrix sparse(coef.rows(), coef.cols(), 0.0);
  for (std::size_t i = 0; i < k; ++i) sparse.values()[idx[i]] = kept(0, i);
  out.reconstruction = dct2(sparse, Direction::kInverse);
  return out;
}

}  // namespace tcprof::spectral
