#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "tcprof/matrix.hpp"
#include "tcprof/quant.hpp"

namespace tcprof::spectral {

enum class Direction { kForward, kInverse };

/// Orthonormal DCT-II basis, n x n; row k is the k-th cosine.
Matrix dct_basis(std::size_t n);

/// 2-D orthonormal DCT-II (forward) or DCT-III (inverse) along rows then columns.
Matrix dct2(const Matrix& m, Direction direction = Direction::kForward);

/// Gini coefficient of a nonnegative vector; throws on all-zero input.
double gini(std::vector<double> values);

inline const std::vector<double> kCaptureFractions = {0.05, 0.10, 0.25, 0.50, 1.0};

struct SpectralReport {
  std::string label;
  double gini = 0.0;
  /// (fraction of coefficients kept, fraction of energy captured), largest first.
  std::vector<std::pair<double, double>> energy_capture;
};

SpectralReport spectral_report(const Matrix& w, std::string label = {});

/// Energy fraction held by the largest `fraction` of squared coefficients.
double energy_capture(const Matrix& coefficients, double fraction);

struct DctCompressed {
  Matrix reconstruction;
  std::size_t kept = 0;
  /// Coefficient payload and quantizer metadata; the positions of kept
  /// coefficients are not counted.
  quant::BitBudget budget;
};

/// Keeps the round(keep_fraction * size) largest-magnitude DCT coefficients,
/// quantizes them as one vector with `inner` (nullopt keeps them exact) and
/// inverts the transform.
DctCompressed dct_compress(const Matrix& w, double keep_fraction,
                           const std::optional<quant::QuantScheme>& inner);

}  // namespace tcprof::spectral
