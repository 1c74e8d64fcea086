#pragma once

#include <cstdint>
#include <vector>

#include "tcprof/model.hpp"

namespace tcprof::exit {

/// Norm + linear head reading the residual stream at the input of
/// `attach_block` (attach_block = L reads the final stream).
struct ExitHead {
  std::size_t attach_block = 0;
  std::vector<double> norm_gain;
  std::vector<double> norm_bias;  // layer norm with biases only; never trained
  Matrix weight;                  // V x d
  std::size_t trained_steps = 0;

  bool operator==(const ExitHead&) const = default;
};

/// Copies the final norm and unembedding of the model.
ExitHead init_head(const ModelBundle& model, std::size_t attach_block);

/// Residual stream entering `block` (block = L gives the final stream).
Matrix stream_at(const ModelBundle& model, std::span<const std::uint32_t> tokens, std::size_t block);

Matrix head_logits(const ExitHead& head, const ModelBundle& model, const Matrix& stream);

enum class Optimizer { kAdam, kSgd };

struct TrainOptions {
  std::size_t steps = 500;
  double lr = 1e-3;
  std::size_t batch_sequences = 32;
  Optimizer optimizer = Optimizer::kAdam;
  bool train_gain = true;
  std::uint64_t seed = 0;
};

struct TrainResult {
  ExitHead head;
  std::vector<double> losses;  // mean batch cross-entropy before each update
};

/// Cross-entropy on calibration next tokens with analytic gradients for the
/// head weight (and norm gain when enabled). The trunk is only read.
TrainResult train_head(const ExitHead& head, const ModelBundle& model, const TokenDataset& data,
                       const TrainOptions& options);

/// Gradient of the mean cross-entropy over (normalized input, target) rows.
struct HeadGradient {
  double loss = 0.0;
  Matrix weight;
  std::vector<double> gain;
};
HeadGradient head_gradient(const ExitHead& head, const Matrix& normalized,
                           std::span<const std::uint32_t> targets);

/// Index of the largest value, lowest index on ties.
std::size_t argmax(std::span<const double> v);

/// Fraction of positions where head and full-model argmax agree.
double agreement(const ExitHead& head, const ModelBundle& model, const TokenDataset& data,
                 Split split = Split::kEval);

struct RoutingPolicy {
  std::vector<ExitHead> exits;  // attach blocks strictly ascending, < L
  double threshold = 1.0;       // 1.0 disables exiting

  void validate(const ModelConfig& config) const;
};

struct RoutingReport {
  double threshold = 1.0;
  double ppl = 0.0;
  double baseline_ppl = 0.0;
  double delta_ppl = 0.0;
  double compute_saved = 0.0;
  /// Tokens exiting at each head, then tokens running the full model.
  std::vector<std::size_t> exit_histogram;
  std::size_t tokens = 0;
};

/// Teacher-forced confidence routing over the eval split. A token exits at the
/// first head whose max softmax probability reaches the threshold; its state
/// is then held fixed through the remaining blocks.
RoutingReport route(const ModelBundle& model, const RoutingPolicy& policy, const TokenDataset& data);

}  // namespace tcprof::exit
