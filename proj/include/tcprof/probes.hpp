#pragma once

#include <cstdint>
#include <vector>

#include "tcprof/model.hpp"

namespace tcprof::probes {

inline constexpr double kDefaultVarThreshold = 0.95;
inline constexpr double kDefaultLambda = 1e-3;

/// Low-rank ridge fit of a block's residual: Delta ~ X_in A V_k^T, with V_k the
/// top right singular vectors of Delta covering `var_threshold` of its energy.
LinearBlockMap fit_block_linear(const BlockTrace& trace, double var_threshold = kDefaultVarThreshold,
                                double lambda = kDefaultLambda);

/// 1 - ||Delta - X_in A V_k^T||^2 / ||Delta||^2 on any trace (1 when Delta = 0).
double map_r2(const LinearBlockMap& map, const BlockTrace& trace);

struct LinearityRow {
  std::size_t block = 0;
  std::size_t rank = 0;
  double fit_r2 = 0.0;
  double heldout_r2 = 0.0;
  bool degenerate = false;
};

/// Fit on calibration traces, score on eval traces, every block.
std::vector<LinearityRow> linearity_profile(const ModelBundle& model, const TokenDataset& data,
                                            double var_threshold = kDefaultVarThreshold,
                                            double lambda = kDefaultLambda);

struct PcaResult {
  std::vector<double> thresholds;
  std::vector<std::size_t> dims;  // one per threshold
  DirectionSet directions;        // all d principal directions, descending variance
  std::vector<double> mean;
  double total_variance = 0.0;
};

inline const std::vector<double> kPcaThresholds = {0.90, 0.95, 0.99};

PcaResult pca_dimensionality(const Matrix& x, const std::vector<double>& thresholds = kPcaThresholds);

/// First k columns of a direction set.
DirectionSet leading(const DirectionSet& dirs, std::size_t k);

struct SensitivityProfile {
  std::vector<double> delta_logprob;  // one per direction
  double sigma_rule = 0.0;
  DirectionSet directions;
};

inline constexpr std::size_t kSensitivityDraws = 8;

/// Mean |change in log p(next token)| over eval tokens when noise
/// eps ~ N(0, (sigma_rule ||x_t||)^2) along each direction is added to the
/// stream after `block`. All directions share the same noise draws.
SensitivityProfile perturb_sensitivity(const ModelBundle& model, std::size_t block,
                                       const DirectionSet& dirs, double sigma_rule,
                                       const TokenDataset& data, std::uint64_t seed,
                                       std::size_t draws = kSensitivityDraws);

struct CcaResult {
  Matrix directions_b;  // d_b x k
  Matrix directions_B;  // d_B x k
  std::vector<double> correlations;
  double ridge = 0.0;
  std::vector<double> mean_b;
  std::vector<double> mean_B;
};

inline constexpr double kCcaRidge = 0.1;

CcaResult cca(const Matrix& x_b, const Matrix& x_B, std::size_t k, double ridge = kCcaRidge);

/// Orthonormalized span of the CCA directions on the X_b side.
DirectionSet cca_directions(const CcaResult& result);

/// (1/k) ||U^T V||_F^2.
double subspace_overlap(const DirectionSet& u, const DirectionSet& v);

struct ImportanceProfile {
  std::vector<double> variance;
  std::vector<double> sensitivity;
  std::vector<double> importance;
  /// Pearson correlation of variance and sensitivity (0 if either is constant).
  double correlation = 0.0;
};

ImportanceProfile importance_profile(const std::vector<double>& variance,
                                     const SensitivityProfile& sens);

/// Held-out R^2 of ridge-predicting X_B from X_b projected on `dirs`. The first
/// half of the rows fits, the second half scores; both are centered by the
/// fitting half's means. k = 0 gives 0.
double prediction_r2(const DirectionSet& dirs, const Matrix& x_b, const Matrix& x_B,
                     double lambda = kDefaultLambda);

double pearson(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace tcprof::probes
