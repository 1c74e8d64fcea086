#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "tcprof/model.hpp"
#include "tcprof/probes.hpp"
#include "tcprof/quant.hpp"

namespace tcprof::surgery {

// ---------------------------------------------------------------------------
// Block replacement

struct ReplaceResult {
  ModelBundle model;
  LinearBlockMap map;
  double fit_r2 = 0.0;
  double heldout_r2 = 0.0;
  double baseline_ppl = 0.0;
  double ppl = 0.0;
  double delta_ppl = 0.0;
  /// Block parameters / map parameters; 0 for a degenerate (empty) map.
  double compression_ratio = 0.0;
};

ReplaceResult replace_single(const ModelBundle& model, std::size_t block, double var_threshold,
                             double lambda, const TokenDataset& data);

struct TrailStep {
  std::size_t block = 0;
  std::size_t rank = 0;
  double fit_r2 = 0.0;
  double heldout_r2 = 0.0;
  double ppl = 0.0;
};

/// Step 0 is the baseline (no block replaced, r2 fields 1).
struct ReplacementTrail {
  double baseline_ppl = 0.0;
  std::vector<TrailStep> steps;
};

/// Replaces blocks one at a time, refitting each map on the stream of the
/// already-modified model.
ReplacementTrail replace_sequential(const ModelBundle& model, const std::vector<std::size_t>& blocks,
                                    double var_threshold, double lambda, const TokenDataset& data);

// ---------------------------------------------------------------------------
// Residual projection

struct ProjectionRow {
  std::size_t k = 0;
  double ppl = 0.0;
};

/// For each k, projects the stream after every block in [first, last) onto
/// its top-k calibration principal directions (about the calibration mean).
std::vector<ProjectionRow> pca_projection_ppl(const ModelBundle& model, std::size_t first,
                                              std::size_t last, const std::vector<std::size_t>& ks,
                                              const TokenDataset& data);

// ---------------------------------------------------------------------------
// Reconstruction wall

enum class RotationBasis { kPca, kCca, kIdentity };

struct RotatedMixed {
  Matrix reconstruction;
  std::size_t high_columns = 0;
  quant::BitBudget budget;
};

/// Fraction of rotated columns kept at high_bits so that the average is budget bits.
double high_fraction(unsigned high_bits, unsigned low_bits, double budget_bits);

/// Rotates W into an activation-derived orthonormal basis R, stores the
/// leading round(p n) columns of W R at high_bits and the rest at low_bits
/// (each block one whole-tensor uniform quantizer) and returns (W R)^ R^T.
/// PCA ranks directions by activation variance; CCA by canonical
/// correlation between the layer input and its output X W^T.
RotatedMixed rotate_mixed(const Matrix& w, const Matrix& acts, RotationBasis basis,
                          unsigned high_bits = 8, unsigned low_bits = 2, double budget_bits = 4.0);

struct WallRow {
  std::string method;
  double output_mse = 0.0;
  double bits_per_weight = 0.0;
  Matrix reconstruction;
};

struct WallResult {
  std::vector<WallRow> rows;  // direct_int4, dct_int4, svd_int4, rotated_mixed
  /// All DCT coefficients at the budget width; reported alongside, not ranked.
  WallRow dct_full;
  const WallRow& row(const std::string& method) const;
  /// Method with the lowest output_mse (first on ties).
  const WallRow& best() const;
};

inline constexpr double kWallBudgetTolerance = 0.02;
inline constexpr double kDctKeepFraction = 0.5;
inline constexpr unsigned kDctInnerBits = 8;

/// Throws InvalidArgument when a method's budget is more than 2% off.
WallResult reconstruction_wall(const Matrix& w, const Matrix& x, double budget_bits = 4.0);

/// Trained-like test matrix: rank d/8 product plus noise_scale * Gaussian,
/// with log-normal column scales.
Matrix trained_like_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed,
                           double noise_scale = 0.3, double column_log_sd = 0.25);

/// Calibration activations with a decaying spectrum and a few outlier channels.
Matrix trained_like_activations(std::size_t rows, std::size_t cols, std::uint64_t seed);

struct CrossTermReport {
  double eps_a_b_norm = 0.0;
  double a_eps_b_norm = 0.0;
  double eps_eps_norm = 0.0;
  double total_error_norm = 0.0;
  /// ||(A^ B^ - A B) - (eps_A B + A eps_B + eps_A eps_B)||_F / ||A^ B^ - A B||_F
  /// (absolute when the total is zero).
  double identity_residual = 0.0;
};

CrossTermReport cross_terms(const Matrix& a, const Matrix& b, const quant::QuantScheme& scheme);

// ---------------------------------------------------------------------------
// Component destruction and ablation

/// KL(p || q) for two log-probability vectors.
double kl_divergence(std::span<const double> logp, std::span<const double> logq);

/// Per-position KL(reference || modified) over every eval position that has a
/// next token, sequences in order.
std::vector<double> token_kl(const ModelBundle& reference, const ModelBundle& modified,
                             const TokenDataset& data, Split split = Split::kEval);

struct DestructionCell {
  std::size_t block = 0;
  Component component = Component::kAttn;
  double kl = 0.0;
};

struct DestructionMap {
  std::vector<DestructionCell> cells;  // block-major, attention first
  double at(std::size_t block, Component c) const;
};

inline quant::QuantScheme default_destroy_scheme() { return quant::QuantScheme::uniform(2); }

/// Quantizes one component (per weight-matrix row) at a time and records the
/// mean token KL against the intact model.
DestructionMap destroy_components(const ModelBundle& model, const quant::QuantScheme& scheme,
                                  const TokenDataset& data);

/// Mean output of a block component over calibration tokens.
std::vector<double> component_mean(const ModelBundle& model, std::size_t block, Component c,
                                   const TokenDataset& data);

enum class AblationMode { kSkip, kMean };

struct AblationResult {
  double baseline_ppl = 0.0;
  double ppl = 0.0;
  double delta_ppl = 0.0;
  ModelBundle model;
};

AblationResult ablate_component(const ModelBundle& model, std::size_t block, Component c,
                                AblationMode mode, const TokenDataset& data);

struct EasyTokenResult {
  double fraction = 0.0;
  double threshold = 0.0;
  std::vector<double> kl;
  /// Every KL is zero (nothing destroyed), so the fraction carries no information.
  bool degenerate = false;
};

/// floor(q n)-th smallest value (0-based) of `values`.
double quantile_floor(std::vector<double> values, double q);

/// Destroys every component of `late_blocks` at once; a token is easy when its
/// KL is strictly below the q-quantile of `reference` (its own KL vector when
/// no reference is given).
EasyTokenResult easy_token_fraction(const ModelBundle& model, const std::vector<std::size_t>& late_blocks,
                                    const quant::QuantScheme& scheme, double q, const TokenDataset& data,
                                    const std::optional<std::vector<double>>& reference = std::nullopt);

}  // namespace tcprof::surgery
