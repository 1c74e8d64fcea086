#include "tcprof/quant.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "tcprof/errors.hpp"
#include "tcprof/kernels.hpp"

namespace tcprof::quant {
namespace {

// Actual NF4 table: 8 positive and 7 negative standard-normal quantiles
// (offset 0.9677083) plus an exact zero, normalized to [-1, 1].
constexpr std::array<double, 16> kNf4 = {
    -1.0,
    -0.69619289060372,
    -0.5250730386952291,
    -0.3949174906993099,
    -0.2844413576181077,
    -0.18477343519288886,
    -0.09104999214427931,
    0.0,
    0.07958032909416937,
    0.16093017270493618,
    0.2461122939299359,
    0.33791519352165506,
    0.44070980241319013,
    0.562616970075237,
    0.7229567278928821,
    1.0,
};

// Index of the nearest entry of an ascending table; ties go to the lower index.
std::uint8_t nearest(std::span<const double> table, double v) {
  std::size_t best = 0;
  double best_d = std::abs(v - table[0]);
  for (std::size_t i = 1; i < table.size(); ++i) {
    const double d = std::abs(v - table[i]);
    if (d < best_d) {
      best_d = d;
      best = i;
    }
  }
  return static_cast<std::uint8_t>(best);
}

struct UniformGrid {
  double zero = 0.0;
  double scale = 0.0;
};

UniformGrid uniform_grid(std::span<const double> g, unsigned levels) {
  const auto [mn, mx] = std::minmax_element(g.begin(), g.end());
  UniformGrid grid{*mn, 0.0};
  if (*mx > *mn) grid.scale = (*mx - *mn) / static_cast<double>(levels - 1);
  return grid;
}

std::uint8_t uniform_code(double v, const UniformGrid& grid, unsigned levels) {
  if (grid.scale == 0.0) return 0;
  const double c = round_half_even((v - grid.zero) / grid.scale);
  return static_cast<std::uint8_t>(std::clamp(c, 0.0, static_cast<double>(levels - 1)));
}

double sse_for(std::span<const double> sorted, std::span<const double> codebook,
               std::vector<std::uint8_t>& assign) {
  double sse = 0.0;
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    assign[i] = nearest(codebook, sorted[i]);
    const double e = sorted[i] - codebook[assign[i]];
    sse += e * e;
  }
  return sse;
}

}  // namespace

double round_half_even(double v) { return std::nearbyint(v); }

unsigned QuantScheme::level_count() const {
  switch (kind) {
    case SchemeKind::kUniform:
      return 1u << param;
    case SchemeKind::kKMeans:
      return param;
    case SchemeKind::kNf4:
      return 16;
  }
  return 0;
}

unsigned QuantScheme::code_bits() const {
  const unsigned levels = level_count();
  return levels <= 1 ? 1u : static_cast<unsigned>(std::bit_width(levels - 1));
}

void QuantScheme::validate(std::size_t element_count) const {
  if (kind == SchemeKind::kUniform && param != 2 && param != 3 && param != 4 && param != 8) {
    throw InvalidArgument("uniform scheme: bits must be one of {2, 3, 4, 8}, got " +
                          std::to_string(param));
  }
  if (kind == SchemeKind::kKMeans && (param < 2 || param > 256)) {
    throw InvalidArgument("kmeans scheme: levels must be in [2, 256], got " +
                          std::to_string(param));
  }
  if (group_size) {
    if (*group_size == 0 || element_count % *group_size != 0) {
      throw InvalidArgument("group_size " + std::to_string(*group_size) +
                            " does not divide tensor length " + std::to_string(element_count));
    }
  }
}

std::string QuantScheme::label() const {
  std::string s;
  switch (kind) {
    case SchemeKind::kUniform:
      s = "int" + std::to_string(param);
      break;
    case SchemeKind::kKMeans:
      s = "kmeans" + std::to_string(param);
      break;
    case SchemeKind::kNf4:
      s = "nf4";
      break;
  }
  if (group_size) s += "/g" + std::to_string(*group_size);
  return s;
}

std::size_t QuantizedTensor::group_count() const {
  const std::size_t n = rows * cols;
  const std::size_t g = group_size();
  return g == 0 ? 0 : n / g;
}

const std::array<double, 16>& nf4_levels() { return kNf4; }

std::vector<double> lloyd_max(std::span<const double> values, unsigned levels) {
  if (values.empty()) throw InvalidArgument("lloyd_max: empty input");
  if (levels < 2) throw InvalidArgument("lloyd_max: need at least two levels");
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());

  std::vector<double> distinct;
  for (double v : sorted)
    if (distinct.empty() || v != distinct.back()) distinct.push_back(v);
  if (distinct.size() <= levels) {
    distinct.resize(levels, distinct.back());
    return distinct;
  }

  const UniformGrid grid = uniform_grid(sorted, levels);
  std::vector<double> codebook(levels);
  for (unsigned i = 0; i < levels; ++i) codebook[i] = grid.zero + i * grid.scale;

  // Iteration 0 scores the uniform grid with the uniform quantizer's own
  // rounding, so the best codebook found never loses to uniform.
  std::vector<std::uint8_t> assign(sorted.size());
  double sse = 0.0;
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    assign[i] = uniform_code(sorted[i], grid, levels);
    const double e = sorted[i] - codebook[assign[i]];
    sse += e * e;
  }
  std::vector<double> best = codebook;
  double best_sse = sse;

  std::vector<double> sum(levels);
  std::vector<double> dist(levels);
  std::vector<std::size_t> count(levels);
  std::vector<std::uint8_t> next(sorted.size());
  for (int iter = 0; iter < 100; ++iter) {
    std::fill(sum.begin(), sum.end(), 0.0);
    std::fill(count.begin(), count.end(), 0);
    for (std::size_t i = 0; i < sorted.size(); ++i) {
      sum[assign[i]] += sorted[i];
      ++count[assign[i]];
    }
    for (unsigned c = 0; c < levels; ++c)
      if (count[c] > 0) codebook[c] = sum[c] / static_cast<double>(count[c]);

    // Empty cells: split the cell with the largest distortion, placing the new
    // level midway between its centroid and its farthest member.
    for (unsigned c = 0; c < levels; ++c) {
      if (count[c] > 0) continue;
      std::fill(dist.begin(), dist.end(), 0.0);
      for (std::size_t i = 0; i < sorted.size(); ++i) {
        const double e = sorted[i] - codebook[assign[i]];
        dist[assign[i]] += e * e;
      }
      const auto worst = static_cast<std::size_t>(
          std::max_element(dist.begin(), dist.end()) - dist.begin());
      double far = codebook[worst];
      for (std::size_t i = 0; i < sorted.size(); ++i) {
        if (assign[i] == worst &&
            std::abs(sorted[i] - codebook[worst]) > std::abs(far - codebook[worst])) {
          far = sorted[i];
        }
      }
      codebook[c] = 0.5 * (codebook[worst] + far);
      count[c] = 1;
    }
    std::sort(codebook.begin(), codebook.end());

    sse = sse_for(sorted, codebook, next);
    if (sse < best_sse) {
      best_sse = sse;
      best = codebook;
    }
    if (next == assign) break;
    assign.swap(next);
  }
  return best;
}

QuantizedTensor quantize(const Matrix& w, const QuantScheme& scheme) {
  require_finite(w, "quantize");
  scheme.validate(w.size());
  QuantizedTensor q;
  q.scheme = scheme;
  q.rows = w.rows();
  q.cols = w.cols();
  q.codes.assign(w.size(), 0);
  const std::size_t gsize = q.group_size();
  const std::size_t groups = w.size() == 0 ? 0 : q.group_count();
  const unsigned levels = scheme.level_count();
  auto values = w.values();

  switch (scheme.kind) {
    case SchemeKind::kUniform:
      q.scale.resize(groups);
      q.zero.resize(groups);
      break;
    case SchemeKind::kKMeans:
      q.codebook.resize(groups * levels);
      break;
    case SchemeKind::kNf4:
      q.absmax.resize(groups);
      break;
  }

  const auto ngroups = static_cast<std::ptrdiff_t>(groups);
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t gi = 0; gi < ngroups; ++gi) {
    const auto g = static_cast<std::size_t>(gi);
    auto group = values.subspan(g * gsize, gsize);
    std::uint8_t* codes = q.codes.data() + g * gsize;
    switch (scheme.kind) {
      case SchemeKind::kUniform: {
        const UniformGrid grid = uniform_grid(group, levels);
        q.zero[g] = grid.zero;
        q.scale[g] = grid.scale;
        for (std::size_t i = 0; i < gsize; ++i) codes[i] = uniform_code(group[i], grid, levels);
        break;
      }
      case SchemeKind::kKMeans: {
        const std::vector<double> book = lloyd_max(group, levels);
        std::copy(book.begin(), book.end(), q.codebook.begin() + static_cast<std::ptrdiff_t>(g * levels));
        for (std::size_t i = 0; i < gsize; ++i) codes[i] = nearest(book, group[i]);
        break;
      }
      case SchemeKind::kNf4: {
        double amax = 0.0;
        for (double v : group) amax = std::max(amax, std::abs(v));
        q.absmax[g] = amax;
        for (std::size_t i = 0; i < gsize; ++i) {
          codes[i] = amax == 0.0 ? std::uint8_t{7} : nearest(kNf4, group[i] / amax);
        }
        break;
      }
    }
  }
  return q;
}

Matrix dequantize(const QuantizedTensor& q) {
  if (q.codes.size() != q.rows * q.cols) throw InvalidArgument("dequantize: code count mismatch");
  Matrix out(q.rows, q.cols);
  if (q.codes.empty()) return out;
  const std::size_t gsize = q.group_size();
  const unsigned levels = q.scheme.level_count();
  auto values = out.values();
  for (std::size_t i = 0; i < q.codes.size(); ++i) {
    const std::uint8_t c = q.codes[i];
    if (c >= levels) {
      throw InvalidArgument("dequantize: code " + std::to_string(c) + " at element " +
                            std::to_string(i) + " exceeds level count " + std::to_string(levels));
    }
    const std::size_t g = i / gsize;
    switch (q.scheme.kind) {
      case SchemeKind::kUniform:
        values[i] = q.zero.at(g) + c * q.scale.at(g);
        break;
      case SchemeKind::kKMeans:
        values[i] = q.codebook.at(g * levels + c);
        break;
      case SchemeKind::kNf4:
        values[i] = kNf4[c] * q.absmax.at(g);
        break;
    }
  }
  return out;
}

Matrix fake_quantize(const Matrix& w, const QuantScheme& scheme) {
  return dequantize(quantize(w, scheme));
}

BitBudget bit_budget(const QuantizedTensor& q) {
  BitBudget b;
  const std::uint64_t n = q.codes.size();
  const std::uint64_t groups = n == 0 ? 0 : q.group_count();
  b.payload_bits = n * q.scheme.code_bits();
  switch (q.scheme.kind) {
    case SchemeKind::kUniform:
      b.overhead_bits = groups * 2 * kMetadataBits;
      break;
    case SchemeKind::kKMeans:
      b.overhead_bits = groups * q.scheme.level_count() * kMetadataBits;
      break;
    case SchemeKind::kNf4:
      b.overhead_bits = groups * kMetadataBits;
      break;
  }
  b.bits_per_weight =
      n == 0 ? 0.0 : static_cast<double>(b.payload_bits + b.overhead_bits) / static_cast<double>(n);
  return b;
}

BitBudget combine_budgets(std::span<const BitBudget> parts, std::uint64_t weight_count) {
  BitBudget b;
  for (const auto& p : parts) {
    b.payload_bits += p.payload_bits;
    b.overhead_bits += p.overhead_bits;
  }
  b.bits_per_weight = weight_count == 0 ? 0.0
                                        : static_cast<double>(b.payload_bits + b.overhead_bits) /
                                              static_cast<double>(weight_count);
  return b;
}

double tensor_mse(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw InvalidArgument("tensor_mse: shape mismatch");
  }
  if (a.size() == 0) return 0.0;
  return squared_frobenius(a - b) / static_cast<double>(a.size());
}

double output_mse(const Matrix& w, const Matrix& w_hat, const Matrix& x) {
  if (w.rows() != w_hat.rows() || w.cols() != w_hat.cols()) {
    throw InvalidArgument("output_mse: W and W_hat shapes differ");
  }
  if (x.cols() != w.cols()) throw InvalidArgument("output_mse: X columns != W input dimension");
  const Matrix diff = kernels::matmul_nt(x, w - w_hat);
  if (diff.size() == 0) return 0.0;
  return squared_frobenius(diff) / static_cast<double>(diff.size());
}

Matrix absmax_uniform_fake_quantize(const Matrix& w, unsigned bits,
                                    std::optional<std::size_t> group_size) {
  if (bits < 1 || bits > 8) throw InvalidArgument("absmax uniform: bits must be in [1, 8]");
  const std::size_t n = w.size();
  const std::size_t g = group_size.value_or(n);
  if (g == 0 || n % g != 0) throw InvalidArgument("absmax uniform: group does not divide length");
  const double top = static_cast<double>((1u << bits) - 1);
  Matrix out(w.rows(), w.cols());
  auto src = w.values();
  auto dst = out.values();
  for (std::size_t start = 0; start < n; start += g) {
    double amax = 0.0;
    for (std::size_t i = start; i < start + g; ++i) amax = std::max(amax, std::abs(src[i]));
    if (amax == 0.0) continue;
    const double step = 2.0 * amax / top;
    for (std::size_t i = start; i < start + g; ++i) {
      const double c = std::clamp(round_half_even((src[i] + amax) / step), 0.0, top);
      dst[i] = -amax + c * step;
    }
  }
  return out;
}

}  // namespace tcprof::quant
