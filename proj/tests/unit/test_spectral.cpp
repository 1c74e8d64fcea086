#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "oracles.hpp"
#include "tcprof/errors.hpp"
#include "tcprof/rng.hpp"
#include "tcprof/spectral.hpp"

using namespace tcprof;
using spectral::Direction;

namespace {

// X[k][l] = a_k a_l sum_ij M[i][j] cos(pi (2i+1) k / 2R) cos(pi (2j+1) l / 2C)
Matrix dct_by_definition(const Matrix& m) {
  const std::size_t R = m.rows(), C = m.cols();
  auto a = [](std::size_t k, std::size_t n) {
    return k == 0 ? std::sqrt(1.0L / n) : std::sqrt(2.0L / n);
  };
  const long double pi = std::numbers::pi_v<long double>;
  Matrix out(R, C);
  for (std::size_t k = 0; k < R; ++k)
    for (std::size_t l = 0; l < C; ++l) {
      long double s = 0.0L;
      for (std::size_t i = 0; i < R; ++i)
        for (std::size_t j = 0; j < C; ++j)
          s += m(i, j) * std::cos(pi * (2 * i + 1) * k / (2.0L * R)) *
               std::cos(pi * (2 * j + 1) * l / (2.0L * C));
      out(k, l) = static_cast<double>(a(k, R) * a(l, C) * s);
    }
  return out;
}

Matrix inverse_by_definition(const Matrix& x) {
  const std::size_t R = x.rows(), C = x.cols();
  auto a = [](std::size_t k, std::size_t n) {
    return k == 0 ? std::sqrt(1.0L / n) : std::sqrt(2.0L / n);
  };
  const long double pi = std::numbers::pi_v<long double>;
  // separable: columns first, then rows
  std::vector<std::vector<long double>> tmp(R, std::vector<long double>(C, 0.0L));
  for (std::size_t k = 0; k < R; ++k)
    for (std::size_t j = 0; j < C; ++j)
      for (std::size_t l = 0; l < C; ++l)
        tmp[k][j] += a(l, C) * x(k, l) * std::cos(pi * (2 * j + 1) * l / (2.0L * C));
  Matrix out(R, C);
  for (std::size_t i = 0; i < R; ++i)
    for (std::size_t j = 0; j < C; ++j) {
      long double s = 0.0L;
      for (std::size_t k = 0; k < R; ++k) s += a(k, R) * tmp[k][j] * std::cos(pi * (2 * i + 1) * k / (2.0L * R));
      out(i, j) = static_cast<double>(s);
    }
  return out;
}

Matrix smooth_rank1(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      m(i, j) = std::cos(0.05 * static_cast<double>(i)) * (1.0 + 0.01 * static_cast<double>(j));
  return m;
}

Matrix structured(std::size_t n, std::uint64_t seed) {
  Matrix m = Rng(seed).gaussian(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      m(i, j) += 4.0 * std::cos(std::numbers::pi * static_cast<double>(i) / static_cast<double>(n)) *
                 std::sin(std::numbers::pi * static_cast<double>(j) / static_cast<double>(n));
  return m;
}

}  // namespace

TEST_CASE("dct2: basis is orthonormal") {
  for (std::size_t n : {1u, 2u, 7u, 16u}) {
    const Matrix c = spectral::dct_basis(n);
    CHECK(max_abs_diff(oracle::naive_matmul(c, oracle::naive_transpose(c)), Matrix::identity(n)) < 1e-13);
  }
}

TEST_CASE("dct2: constant matrix has only a DC coefficient") {
  const Matrix m(6, 5, 2.5);
  const Matrix x = spectral::dct2(m);
  CHECK(x(0, 0) == doctest::Approx(2.5 * std::sqrt(30.0)).epsilon(1e-14));
  for (std::size_t i = 0; i < x.size(); ++i)
    if (i != 0) CHECK(std::abs(x.values()[i]) < 1e-13);
}

TEST_CASE("dct2: matches the definition sum and its inverse") {
  const Matrix m = Rng(3).gaussian(4, 4);
  CHECK(max_abs_diff(spectral::dct2(m), dct_by_definition(m)) < 1e-10);
  const Matrix r = Rng(4).gaussian(5, 3);
  CHECK(max_abs_diff(spectral::dct2(r), dct_by_definition(r)) < 1e-10);
  CHECK(max_abs_diff(spectral::dct2(r, Direction::kInverse), inverse_by_definition(r)) < 1e-10);
}

TEST_CASE("dct2: roundtrip and Parseval") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Matrix m = Rng(seed).gaussian(9 + seed, 13, 3.0);
    const Matrix x = spectral::dct2(m);
    CHECK(max_abs_diff(spectral::dct2(x, Direction::kInverse), m) < 1e-12);
    CHECK(std::abs(frobenius_norm(x) - frobenius_norm(m)) / frobenius_norm(m) < 1e-10);
  }
}

TEST_CASE("gini: hand values and bounds") {
  CHECK(spectral::gini({3.0, 3.0, 3.0}) == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(std::abs(spectral::gini({1.0, 2.0, 3.0, 4.0}) - 0.25) < 1e-15);
  CHECK(std::abs(spectral::gini({4.0, 1.0, 3.0, 2.0}) - 0.25) < 1e-15);
  std::vector<double> one_hot(100, 0.0);
  one_hot[37] = 5.0;
  CHECK(std::abs(spectral::gini(one_hot) - 0.99) < 1e-14);
  CHECK_THROWS_AS(spectral::gini({0.0, 0.0}), InvalidArgument);
  CHECK_THROWS_AS(spectral::gini({1.0, -1.0}), InvalidArgument);
}

TEST_CASE("gini: scale invariant and bounded by 1 - 1/n") {
  Rng rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> v(1 + rng.index(40));
    for (double& x : v) x = rng.uniform() * (rng.uniform() < 0.3 ? 0.0 : 1.0);
    v[0] += 0.1;
    const double g = spectral::gini(v);
    std::vector<double> scaled = v;
    for (double& x : scaled) x *= 7.25;
    CHECK(std::abs(spectral::gini(scaled) - g) < 1e-12);
    CHECK(g >= -1e-15);
    CHECK(g <= 1.0 - 1.0 / static_cast<double>(v.size()) + 1e-15);
  }
}

TEST_CASE("spectral_report: curve shape and concentration") {
  const auto r = spectral::spectral_report(smooth_rank1(32), "smooth");
  CHECK(r.label == "smooth");
  CHECK(r.gini > 0.9);
  REQUIRE(r.energy_capture.size() == spectral::kCaptureFractions.size());
  for (std::size_t i = 1; i < r.energy_capture.size(); ++i)
    CHECK(r.energy_capture[i].second >= r.energy_capture[i - 1].second);
  CHECK(r.energy_capture.back().first == 1.0);
  CHECK(r.energy_capture.back().second == 1.0);
}

TEST_CASE("spectral_report: Gaussian control is seed-stable") {
  std::vector<double> g;
  for (std::uint64_t seed = 0; seed < 10; ++seed)
    g.push_back(spectral::spectral_report(Rng(1000 + seed).gaussian(256, 256)).gini);
  const double mean = std::accumulate(g.begin(), g.end(), 0.0) / 10.0;
  for (double v : g) CHECK(std::abs(v - mean) <= 0.02);
  // squared coefficients of i.i.d. Gaussians follow chi-square(1), whose Gini is 2/pi
  CHECK(std::abs(mean - 2.0 / std::numbers::pi) < 0.01);
}

TEST_CASE("spectral_report: structured beats Gaussian on Gini and capture") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto s = spectral::spectral_report(structured(64, seed));
    const auto g = spectral::spectral_report(Rng(seed).gaussian(64, 64));
    CHECK(s.gini > g.gini);
    CHECK(s.energy_capture[2].second > g.energy_capture[2].second);
  }
}

TEST_CASE("dct_compress: exact cases") {
  const Matrix w = Rng(5).gaussian(12, 10);
  const auto full = spectral::dct_compress(w, 1.0, std::nullopt);
  CHECK(full.kept == w.size());
  CHECK(max_abs_diff(full.reconstruction, w) < 1e-10);

  const Matrix c(8, 8, -1.5);
  for (double f : {0.02, 0.3, 1.0}) {
    const auto r = spectral::dct_compress(c, f, quant::QuantScheme::uniform(4));
    CHECK(max_abs_diff(r.reconstruction, c) < 1e-12);
  }
  CHECK_THROWS_AS(spectral::dct_compress(w, 0.0, std::nullopt), InvalidArgument);
  CHECK_THROWS_AS(spectral::dct_compress(w, 1.5, std::nullopt), InvalidArgument);
}

TEST_CASE("dct_compress: matches mask-quantize-invert oracle") {
  const Matrix w = Rng(64).gaussian(64, 64);
  const double keep = 0.25;
  const auto scheme = quant::QuantScheme::uniform(8);
  const auto got = spectral::dct_compress(w, keep, scheme);

  const Matrix coef = dct_by_definition(w);
  const std::size_t k = static_cast<std::size_t>(std::llround(keep * 4096.0));
  std::vector<double> mags(coef.values().begin(), coef.values().end());
  for (double& v : mags) v = std::abs(v);
  std::vector<double> sorted = mags;
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  const double cutoff = sorted[k - 1];
  REQUIRE(sorted[k] < cutoff);

  // min-max grid over the kept coefficients, 255 steps
  double lo = 0.0, hi = 0.0;
  bool first = true;
  for (std::size_t i = 0; i < coef.size(); ++i)
    if (mags[i] >= cutoff) {
      const double v = coef.values()[i];
      lo = first ? v : std::min(lo, v);
      hi = first ? v : std::max(hi, v);
      first = false;
    }
  const double step = (hi - lo) / 255.0;
  Matrix masked(64, 64);
  for (std::size_t i = 0; i < coef.size(); ++i)
    if (mags[i] >= cutoff) {
      const double q = std::nearbyint((coef.values()[i] - lo) / step);
      masked.values()[i] = lo + q * step;
    }
  const Matrix want = inverse_by_definition(masked);
  double mse_want = 0.0, mse_got = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    mse_want += std::pow(want.values()[i] - w.values()[i], 2);
    mse_got += std::pow(got.reconstruction.values()[i] - w.values()[i], 2);
  }
  CHECK(got.kept == k);
  CHECK(std::abs(mse_got - mse_want) / w.size() < 1e-12);
  CHECK(max_abs_diff(got.reconstruction, want) < 1e-9);
}

TEST_CASE("dct_compress: budget counts kept payload and metadata only") {
  const Matrix w = Rng(2).gaussian(16, 16);
  const auto r = spectral::dct_compress(w, 0.5, quant::QuantScheme::uniform(8));
  CHECK(r.budget.payload_bits == 128 * 8);
  CHECK(r.budget.overhead_bits == 2 * quant::kMetadataBits);
  CHECK(r.budget.bits_per_weight == doctest::Approx((1024.0 + 64.0) / 256.0));
}

TEST_CASE("energy_capture: largest coefficients first") {
  const Matrix c{{3.0, 0.0}, {4.0, 0.0}};
  CHECK(spectral::energy_capture(c, 0.25) == doctest::Approx(16.0 / 25.0));
  CHECK(spectral::energy_capture(c, 0.5) == 1.0);
  CHECK(spectral::energy_capture(c, 1.0) == 1.0);
}
