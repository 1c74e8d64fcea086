#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "doctest.h"
#include "oracles.hpp"
#include "tcprof/errors.hpp"
#include "tcprof/kernels.hpp"
#include "tcprof/quant.hpp"

using namespace tcprof;
using namespace tcprof::quant;

namespace {

// Nearest grid point by exhaustive search, ties to the even code.
double brute_force_round(double v, double zero, double scale, unsigned levels) {
  double best = zero;
  double best_d = std::numeric_limits<double>::infinity();
  unsigned best_k = 0;
  for (unsigned k = 0; k < levels; ++k) {
    const double g = zero + k * scale;
    const double d = std::abs(v - g);
    if (d < best_d || (d == best_d && k % 2 == 0 && best_k % 2 == 1)) {
      best_d = d;
      best = g;
      best_k = k;
    }
  }
  return best;
}

double group_mse(const Matrix& a, const Matrix& b, std::size_t g, std::size_t size) {
  double s = 0.0;
  for (std::size_t i = g * size; i < (g + 1) * size; ++i) {
    const double e = a.values()[i] - b.values()[i];
    s += e * e;
  }
  return s / static_cast<double>(size);
}

}  // namespace

TEST_CASE("values on a 16-level grid roundtrip exactly") {
  Matrix w(4, 8);
  for (std::size_t i = 0; i < w.size(); ++i) w.values()[i] = -1.0 + 0.25 * static_cast<double>(i % 16);
  CHECK(fake_quantize(w, QuantScheme::uniform(4)) == w);
}

TEST_CASE("kmeans with enough levels is lossless") {
  const Matrix w{{0.5, -1.25, 3.0, 0.5}, {3.0, 7.0, -1.25, 0.0}};
  CHECK(tensor_mse(w, fake_quantize(w, QuantScheme::kmeans(5))) == 0.0);
  CHECK(tensor_mse(w, fake_quantize(w, QuantScheme::kmeans(16))) == 0.0);
}

TEST_CASE("two-level Lloyd-Max on {0, 0.1, 0.9, 1.0} matches exhaustive partition search") {
  const std::vector<double> v = {0.0, 0.1, 0.9, 1.0};
  double best = std::numeric_limits<double>::infinity();
  std::vector<double> best_book;
  for (unsigned mask = 1; mask < 15; ++mask) {
    double s[2] = {0, 0};
    int n[2] = {0, 0};
    for (unsigned i = 0; i < 4; ++i) {
      s[(mask >> i) & 1] += v[i];
      ++n[(mask >> i) & 1];
    }
    const double c0 = s[0] / n[0], c1 = s[1] / n[1];
    double sse = 0.0;
    for (unsigned i = 0; i < 4; ++i) sse += std::pow(v[i] - (((mask >> i) & 1) ? c1 : c0), 2);
    if (sse < best - 1e-15) {
      best = sse;
      best_book = {std::min(c0, c1), std::max(c0, c1)};
    }
  }
  const auto book = lloyd_max(v, 2);
  REQUIRE(book.size() == 2);
  CHECK(book[0] == doctest::Approx(best_book[0]).epsilon(1e-12));
  CHECK(book[1] == doctest::Approx(best_book[1]).epsilon(1e-12));
  CHECK(book[0] == doctest::Approx(0.05));
  CHECK(book[1] == doctest::Approx(0.95));
}

TEST_CASE("Lloyd-Max codebook is a fixed point: centroids of nearest-level cells") {
  const Matrix w = oracle::random_matrix(1, 500, 4);
  const auto book = lloyd_max(w.values(), 8);
  std::vector<double> sum(8, 0.0);
  std::vector<int> cnt(8, 0);
  for (double x : w.values()) {
    std::size_t k = 0;
    for (std::size_t j = 1; j < 8; ++j)
      if (std::abs(x - book[j]) < std::abs(x - book[k])) k = j;
    sum[k] += x;
    ++cnt[k];
  }
  for (std::size_t j = 0; j < 8; ++j) {
    REQUIRE(cnt[j] > 0);
    CHECK(book[j] == doctest::Approx(sum[j] / cnt[j]).epsilon(1e-12));
  }
}

TEST_CASE("requantizing a dequantized tensor reproduces it") {
  const Matrix w = oracle::random_matrix(16, 16, 5);
  for (const auto& s : {QuantScheme::uniform(4), QuantScheme::uniform(2, 64), QuantScheme::kmeans(16),
                        QuantScheme::nf4(64)}) {
    CAPTURE(s.label());
    const auto q1 = quantize(w, s);
    const Matrix d1 = dequantize(q1);
    const auto q2 = quantize(d1, s);
    CHECK(q2.codes == q1.codes);
    CHECK(max_abs_diff(dequantize(q2), d1) <= 1e-14);
  }
}

TEST_CASE("zero tensor stays zero under every scheme") {
  const Matrix z(8, 8, 0.0);
  for (const auto& s : {QuantScheme::uniform(2), QuantScheme::uniform(8, 16), QuantScheme::kmeans(4),
                        QuantScheme::nf4(), QuantScheme::nf4(32)}) {
    CAPTURE(s.label());
    CHECK(fake_quantize(z, s) == z);
  }
}

TEST_CASE("constant group under uniform: scale 0, codes 0, exact") {
  const Matrix c(3, 5, 2.5);
  const auto q = quantize(c, QuantScheme::uniform(4));
  CHECK(q.scale[0] == 0.0);
  CHECK(std::all_of(q.codes.begin(), q.codes.end(), [](auto v) { return v == 0; }));
  CHECK(dequantize(q) == c);
}

TEST_CASE("uniform INT4 on a 64x64 Gaussian matches brute-force rounding") {
  const Matrix w = oracle::random_matrix(64, 64, 6);
  const auto q = quantize(w, QuantScheme::uniform(4));
  const auto [mn, mx] = std::minmax_element(w.values().begin(), w.values().end());
  const double scale = (*mx - *mn) / 15.0;
  double sse = 0.0;
  for (double v : w.values()) sse += std::pow(v - brute_force_round(v, *mn, scale, 16), 2);
  CHECK(std::abs(tensor_mse(w, dequantize(q)) - sse / 4096.0) < 1e-12);
}

TEST_CASE("uniform rounding ties go to even codes") {
  // grid 0..3 over [0, 3], values at exact half steps
  const Matrix w{{0.0, 0.5, 1.5, 2.5, 3.0}};
  const auto q = quantize(w, QuantScheme::uniform(2));
  CHECK(q.codes == std::vector<std::uint8_t>{0, 0, 2, 2, 3});
  CHECK(round_half_even(0.5) == 0.0);
  CHECK(round_half_even(1.5) == 2.0);
  CHECK(round_half_even(-2.5) == -2.0);
}

TEST_CASE("dequantized uniform values are exactly zero + code * scale") {
  const Matrix w = oracle::random_matrix(8, 16, 7);
  const auto q = quantize(w, QuantScheme::uniform(3, 32));
  const Matrix d = dequantize(q);
  for (std::size_t i = 0; i < d.size(); ++i) {
    const std::size_t g = i / 32;
    CHECK(d.values()[i] == q.zero[g] + q.codes[i] * q.scale[g]);
  }
}

TEST_CASE("dequantize rejects corrupt codes") {
  auto q = quantize(oracle::random_matrix(2, 8, 8), QuantScheme::uniform(2));
  q.codes[3] = 4;
  CHECK_THROWS_AS(dequantize(q), InvalidArgument);
}

TEST_CASE("scheme validation") {
  CHECK_THROWS_AS(quantize(Matrix(2, 2), QuantScheme::uniform(5)), InvalidArgument);
  CHECK_THROWS_AS(quantize(Matrix(2, 2), QuantScheme::kmeans(1)), InvalidArgument);
  CHECK_THROWS_AS(quantize(Matrix(2, 2), QuantScheme::kmeans(257)), InvalidArgument);
  CHECK_THROWS_AS(quantize(Matrix(2, 3), QuantScheme::uniform(4, 4)), InvalidArgument);
  Matrix bad(2, 2);
  bad(0, 0) = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(quantize(bad, QuantScheme::uniform(4)), InvalidArgument);
}

TEST_CASE("uniform MSE is non-increasing in bit width") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Matrix w = oracle::random_matrix(32, 32, 100 + seed);
    double prev = std::numeric_limits<double>::infinity();
    for (unsigned b : {2u, 3u, 4u, 8u}) {
      const double m = tensor_mse(w, fake_quantize(w, QuantScheme::uniform(b)));
      CHECK(m <= prev);
      prev = m;
    }
  }
}

TEST_CASE("Lloyd-Max never loses to uniform on the same group") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Matrix w = oracle::random_matrix(16, 64, 200 + seed);
    if (seed % 2) w(3, 5) = 25.0;  // outlier
    for (std::optional<std::size_t> g : {std::optional<std::size_t>{}, std::optional<std::size_t>{64}}) {
      const Matrix u = fake_quantize(w, QuantScheme::uniform(4, g));
      const Matrix k = fake_quantize(w, QuantScheme::kmeans(16, g));
      const std::size_t gs = g.value_or(w.size());
      for (std::size_t gi = 0; gi < w.size() / gs; ++gi) CHECK(group_mse(w, k, gi, gs) <= group_mse(w, u, gi, gs));
    }
  }
}

TEST_CASE("quantization is permutation-equivariant within a group") {
  const Matrix w = oracle::random_matrix(1, 64, 9);
  Matrix p(1, 64);
  for (std::size_t i = 0; i < 64; ++i) p(0, i) = w(0, (i * 37) % 64);
  for (const auto& s : {QuantScheme::uniform(4), QuantScheme::kmeans(8), QuantScheme::nf4()}) {
    const Matrix dw = fake_quantize(w, s);
    const Matrix dp = fake_quantize(p, s);
    for (std::size_t i = 0; i < 64; ++i) CHECK(dp(0, i) == dw(0, (i * 37) % 64));
  }
}

TEST_CASE("NF4 table construction") {
  const auto& lv = nf4_levels();
  CHECK(std::is_sorted(lv.begin(), lv.end()));
  CHECK(std::adjacent_find(lv.begin(), lv.end()) == lv.end());
  CHECK(lv[7] == 0.0);
  CHECK(lv.front() == -1.0);
  CHECK(lv.back() == 1.0);
  // codes span both signs and the scale is the group absmax
  const Matrix w{{-2.0, 0.0, 1.0, 2.0}};
  const auto q = quantize(w, QuantScheme::nf4());
  CHECK(q.absmax[0] == 2.0);
  CHECK(dequantize(q) (0, 0) == -2.0);
  CHECK(dequantize(q) (0, 3) == 2.0);
}

TEST_CASE("bit budget arithmetic") {
  const auto a = bit_budget(quantize(oracle::random_matrix(32, 32, 10), QuantScheme::uniform(4)));
  CHECK(a.payload_bits == 4096);
  CHECK(a.overhead_bits == 64);
  CHECK(a.bits_per_weight == doctest::Approx(4160.0 / 1024.0));

  const auto k = bit_budget(quantize(oracle::random_matrix(8, 64, 11), QuantScheme::kmeans(16, 64)));
  CHECK(k.payload_bits == 512 * 4);
  CHECK(k.overhead_bits == 8 * 16 * 32);

  const auto n = bit_budget(quantize(oracle::random_matrix(4, 64, 12), QuantScheme::nf4(64)));
  CHECK(n.overhead_bits == 4 * 32);
}

TEST_CASE("SVD rank n/2 with INT4 factors matches the direct INT4 payload") {
  for (std::size_t n : {8u, 64u, 128u, 768u}) {
    const std::size_t rank = n * n / (n + n);
    CHECK(rank == n / 2);
    const std::uint64_t factor_payload = 2 * n * rank * 4;
    const std::uint64_t direct_payload = n * n * 4;
    CHECK(factor_payload == direct_payload);
  }
  // and the quantizer agrees on whole-tensor factors
  const auto qa = quantize(Matrix(64, 32), QuantScheme::uniform(4));
  const auto qd = quantize(Matrix(64, 64), QuantScheme::uniform(4));
  CHECK(2 * bit_budget(qa).payload_bits == bit_budget(qd).payload_bits);
}

TEST_CASE("tensor and output MSE") {
  const Matrix a = oracle::random_matrix(8, 8, 13);
  CHECK(tensor_mse(a, a) == 0.0);

  const Matrix x = oracle::random_matrix(20, 8, 14);
  const double eps = 0.01;
  const Matrix w_hat = a + eps * Matrix::identity(8);
  double sq = 0.0;
  for (double v : x.values()) sq += v * v;
  const double closed = eps * eps * (sq / 20.0) / 8.0;
  CHECK(output_mse(a, w_hat, x) == doctest::Approx(closed).epsilon(1e-10));

  const Matrix b = oracle::random_matrix(8, 8, 15);
  double s = 0.0;
  for (std::size_t n = 0; n < 20; ++n)
    for (std::size_t o = 0; o < 8; ++o) {
      double ya = 0.0, yb = 0.0;
      for (std::size_t i = 0; i < 8; ++i) {
        ya += x(n, i) * a(o, i);
        yb += x(n, i) * b(o, i);
      }
      s += (ya - yb) * (ya - yb);
    }
  CHECK(std::abs(output_mse(a, b, x) - s / 160.0) < 1e-12);
  double t = 0.0;
  for (std::size_t i = 0; i < 64; ++i) t += std::pow(a.values()[i] - b.values()[i], 2);
  CHECK(std::abs(tensor_mse(a, b) - t / 64.0) < 1e-12);
}

TEST_CASE("quantization is deterministic and thread-count independent") {
  const Matrix w = oracle::random_matrix(64, 64, 16);
  const int saved = kernels::thread_count();
  kernels::set_thread_count(1);
  const auto a = quantize(w, QuantScheme::kmeans(16, 64));
  kernels::set_thread_count(3);
  const auto b = quantize(w, QuantScheme::kmeans(16, 64));
  kernels::set_thread_count(saved);
  CHECK(a.codes == b.codes);
  CHECK(a.codebook == b.codebook);
}
