#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tcprof/matrix.hpp"

namespace tcprof::quant {

enum class SchemeKind : std::uint8_t { kUniform = 0, kKMeans = 1, kNf4 = 2 };

struct QuantScheme {
  SchemeKind kind = SchemeKind::kUniform;
  /// Bit width for kUniform; level count for kKMeans; ignored for kNf4 (16 levels).
  unsigned param = 4;
  /// Elements per group, consecutive in row-major order. nullopt = whole tensor.
  std::optional<std::size_t> group_size;

  static QuantScheme uniform(unsigned bits, std::optional<std::size_t> group = std::nullopt) {
    return {SchemeKind::kUniform, bits, group};
  }
  static QuantScheme kmeans(unsigned levels, std::optional<std::size_t> group = std::nullopt) {
    return {SchemeKind::kKMeans, levels, group};
  }
  static QuantScheme nf4(std::optional<std::size_t> group = std::nullopt) {
    return {SchemeKind::kNf4, 16, group};
  }

  unsigned level_count() const;
  /// Bits needed to store one code.
  unsigned code_bits() const;
  void validate(std::size_t element_count) const;
  std::string label() const;

  bool operator==(const QuantScheme&) const = default;
};

/// Codes plus per-group metadata. Uniform groups carry (zero, scale);
/// codebook groups (k-means, NF4) carry their level table, already scaled.
struct QuantizedTensor {
  QuantScheme scheme;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> codes;
  std::vector<double> scale;      // uniform only, one per group
  std::vector<double> zero;       // uniform only, one per group
  std::vector<double> codebook;   // groups x levels, row-major
  /// NF4 per-group absmax scale (the codebook is nf4_levels() * absmax).
  std::vector<double> absmax;

  std::size_t group_size() const { return scheme.group_size.value_or(rows * cols); }
  std::size_t group_count() const;
};

struct BitBudget {
  std::uint64_t payload_bits = 0;
  std::uint64_t overhead_bits = 0;
  double bits_per_weight = 0.0;
};

/// Metadata values are accounted at this width in every budget.
inline constexpr unsigned kMetadataBits = 32;

QuantizedTensor quantize(const Matrix& w, const QuantScheme& scheme);
Matrix dequantize(const QuantizedTensor& q);
/// quantize then dequantize.
Matrix fake_quantize(const Matrix& w, const QuantScheme& scheme);

BitBudget bit_budget(const QuantizedTensor& q);
/// Combined budget of several tensors that together encode one weight matrix.
BitBudget combine_budgets(std::span<const BitBudget> parts, std::uint64_t weight_count);

/// Mean squared elementwise difference.
double tensor_mse(const Matrix& a, const Matrix& b);
/// Mean squared elementwise difference of X W^T and X W_hat^T.
double output_mse(const Matrix& w, const Matrix& w_hat, const Matrix& x);

/// The 16 NF4 levels on [-1, 1], ascending, level[7] == 0.
const std::array<double, 16>& nf4_levels();

/// Lloyd-Max codebook for a 1-D sample, initialized from the uniform
/// min-max grid with `levels` entries. Returns ascending levels.
std::vector<double> lloyd_max(std::span<const double> values, unsigned levels);

/// Symmetric uniform grid of 2^bits levels spanning [-absmax, absmax] per
/// group. The baseline NF4 is compared against; not a storage format.
Matrix absmax_uniform_fake_quantize(const Matrix& w, unsigned bits,
                                    std::optional<std::size_t> group_size);

/// Round half to even, as used by the uniform quantizer.
double round_half_even(double v);

}  // namespace tcprof::quant
