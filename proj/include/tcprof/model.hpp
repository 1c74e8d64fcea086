#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "tcprof/matrix.hpp"
#include "tcprof/quant.hpp"

namespace tcprof {

enum class NormKind { kRms, kLayer };
enum class PosKind { kLearned, kRotary };
enum class MlpKind { kGelu, kSwiglu };
enum class Component { kAttn, kMlp };

const char* to_string(Component c);

struct ModelConfig {
  std::size_t n_blocks = 1;
  std::size_t d_model = 8;
  std::size_t n_heads = 1;
  /// 0 means n_heads (plain multi-head attention).
  std::size_t n_kv_heads = 0;
  std::size_t d_ff = 32;
  std::size_t vocab = 16;
  std::size_t max_seq = 32;
  NormKind norm = NormKind::kRms;
  PosKind pos = PosKind::kLearned;
  MlpKind mlp = MlpKind::kGelu;
  /// Linear and layer-norm biases (GPT-2 style checkpoints).
  bool biases = false;
  double norm_eps = 1e-5;
  double rope_base = 10000.0;
  /// Standard deviation of synth_model's Gaussian weights.
  double init_std = 0.02;

  std::size_t kv_heads() const { return n_kv_heads == 0 ? n_heads : n_kv_heads; }
  std::size_t head_dim() const { return d_model / n_heads; }
  std::size_t kv_dim() const { return kv_heads() * head_dim(); }
  std::size_t qkv_rows() const { return d_model + 2 * kv_dim(); }

  /// Throws InvalidArgument naming the offending field.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

/// Linear weights use the out x in convention: y = x W^T.
struct BlockWeights {
  Matrix attn_qkv;  // qkv_rows x d
  Matrix attn_out;  // d x d
  Matrix mlp_in;    // d_ff x d
  Matrix mlp_gate;  // d_ff x d, swiglu only
  Matrix mlp_out;   // d x d_ff
  std::vector<double> norm1_gain;
  std::vector<double> norm2_gain;
  // Present only when ModelConfig::biases.
  std::vector<double> norm1_bias;
  std::vector<double> norm2_bias;
  std::vector<double> attn_qkv_bias;
  std::vector<double> attn_out_bias;
  std::vector<double> mlp_in_bias;
  std::vector<double> mlp_gate_bias;
  std::vector<double> mlp_out_bias;

  bool operator==(const BlockWeights&) const = default;
};

/// Low-rank linear stand-in for a block: x + (x A) V_k^T.
struct LinearBlockMap {
  std::size_t block = 0;
  Matrix basis;  // V_k, d x k with orthonormal columns
  Matrix coef;   // A, d x k
  double lambda = 0.0;
  double r2 = 0.0;
  /// The fitted residual was identically zero; the map is the zero map.
  bool degenerate = false;

  std::size_t rank() const { return basis.cols(); }
  std::size_t parameter_count() const { return basis.size() + coef.size(); }
};

struct DirectionSet {
  enum class Origin { kPca, kCca, kCustom };
  Matrix basis;  // d x k, orthonormal columns
  Origin origin = Origin::kCustom;
  std::vector<double> explained_variance;

  std::size_t dim() const { return basis.rows(); }
  std::size_t count() const { return basis.cols(); }
};

struct QuantizeComponent {
  quant::QuantScheme scheme;
  /// One group per weight-matrix row; overrides scheme.group_size.
  bool per_row = false;
};
struct SkipComponent {};
struct MeanAblateComponent {
  std::vector<double> cached_mean;
};
using ComponentAction = std::variant<QuantizeComponent, SkipComponent, MeanAblateComponent>;

/// Replaces the residual stream after a block by center + P_k (x - center),
/// P_k projecting onto the first k directions.
struct ProjectResidual {
  DirectionSet directions;
  std::size_t k = 0;
  std::vector<double> center;
};

struct BlockSurgery {
  std::optional<ComponentAction> attn;
  std::optional<ComponentAction> mlp;
  std::optional<LinearBlockMap> replace;
  std::optional<ProjectResidual> project;
};

/// Per-block actions; each (block, slot) takes at most one action.
class SurgeryPlan {
 public:
  SurgeryPlan& set_component(std::size_t block, Component c, ComponentAction action);
  SurgeryPlan& replace_block(LinearBlockMap map);
  SurgeryPlan& project_after(std::size_t block, ProjectResidual projection);

  /// Adds every action of `other`; a slot filled in both throws InvalidArgument.
  void merge(const SurgeryPlan& other);

  const BlockSurgery* find(std::size_t block) const;
  const std::map<std::size_t, BlockSurgery>& blocks() const { return blocks_; }
  bool empty() const { return blocks_.empty(); }
  /// True when some action needs the forward pass to interpret it
  /// (anything other than quantization, which is baked into weights).
  bool has_runtime_actions() const;
  std::string describe() const;

 private:
  std::map<std::size_t, BlockSurgery> blocks_;
};

struct ModelBundle {
  ModelConfig config;
  Matrix embedding;      // vocab x d
  Matrix pos_embedding;  // max_seq x d, learned positions only
  std::vector<BlockWeights> blocks;
  std::vector<double> final_norm_gain;
  std::vector<double> final_norm_bias;
  Matrix head;  // vocab x d
  SurgeryPlan surgery;

  /// Shape checks against config.
  void validate() const;
  std::size_t block_parameter_count(std::size_t b) const;
};

enum class Split { kCalibration, kEval };
const char* to_string(Split s);

struct TokenDataset {
  std::vector<std::vector<std::uint32_t>> calibration;
  std::vector<std::vector<std::uint32_t>> eval;
  std::size_t vocab = 0;

  const std::vector<std::vector<std::uint32_t>>& split(Split s) const {
    return s == Split::kCalibration ? calibration : eval;
  }
  std::size_t token_count(Split s) const;
  /// ids < vocab; no sequence appears in both splits.
  void validate() const;
};

struct BlockTrace {
  std::size_t block = 0;
  Matrix x_in;   // N x d
  Matrix x_out;  // N x d
  Matrix delta;  // x_out - x_in
};

// ---------------------------------------------------------------------------
// Forward pass

/// Called after each block with its input and (mutable) output stream.
using BlockHook = std::function<void(std::size_t block, const Matrix& x_in, Matrix& x_out)>;

/// Token + position embedding, seq x d.
Matrix embed(const ModelBundle& model, std::span<const std::uint32_t> tokens);

struct BlockParts {
  Matrix attn;  // attention branch output
  Matrix mid;   // x + attn
  Matrix mlp;   // MLP branch output evaluated at mid
};

/// Intact (surgery-free) component outputs of block b on stream x.
BlockParts block_parts(const ModelBundle& model, std::size_t b, const Matrix& x);

/// Runs block b on x in place, applying the block's surgery actions.
void run_block(const ModelBundle& model, std::size_t b, Matrix& x);

/// Runs blocks [first, last) then the hook for each; returns the stream.
Matrix run_blocks(const ModelBundle& model, std::size_t first, std::size_t last, Matrix x,
                  const BlockHook& hook = {});

/// Final norm and unembedding, seq x vocab.
Matrix final_logits(const ModelBundle& model, const Matrix& x);

/// Logits for every position, seq x vocab.
Matrix forward(const ModelBundle& model, std::span<const std::uint32_t> tokens,
               const BlockHook& hook = {});

/// Token-at-a-time causal decoding with cached keys and values. Each step's
/// logits equal the last row of forward() on the same prefix, bit for bit.
/// Intact models only.
class IncrementalDecoder {
 public:
  explicit IncrementalDecoder(const ModelBundle& model);
  /// Appends `token` and returns the logits predicting the next position.
  std::vector<double> step(std::uint32_t token);
  std::size_t length() const { return length_; }

 private:
  const ModelBundle& model_;
  std::vector<Matrix> kv_;  // per block, max_seq x qkv_rows
  std::size_t length_ = 0;
};

/// Normalization as used in the model (RMS or layer norm), applied per row.
Matrix apply_norm(NormKind kind, const Matrix& x, std::span<const double> gain,
                  std::span<const double> bias, double eps);

/// Row-wise log-softmax.
std::vector<double> log_softmax(std::span<const double> logits);

// ---------------------------------------------------------------------------
// Evaluation

std::vector<BlockTrace> capture_traces(const ModelBundle& model, const TokenDataset& data,
                                       std::span<const std::size_t> blocks,
                                       Split split = Split::kCalibration);

/// Sum of next-token NLL and number of predicted positions for one sequence.
struct NllSum {
  double nll = 0.0;
  std::size_t count = 0;
};
NllSum sequence_nll(const ModelBundle& model, std::span<const std::uint32_t> tokens);

/// exp(mean next-token NLL) over the split, natural log.
double perplexity(const ModelBundle& model, const TokenDataset& data, Split split = Split::kEval);
/// Same reduction from precomputed per-sequence sums.
double perplexity_from(std::span<const NllSum> sums);

// ---------------------------------------------------------------------------
// Construction and surgery

ModelBundle apply_surgery(const ModelBundle& model, const SurgeryPlan& plan);

/// Gaussian N(0, init_std^2) weights, unit norm gains, zero biases.
ModelBundle synth_model(const ModelConfig& config, std::uint64_t seed);

/// Model with all-zero weights (gains included) for the given config.
ModelBundle zero_model(const ModelConfig& config);

/// Desk-scale model used throughout tests and the acceptance suite.
ModelConfig toy_config();

/// FNV-1a over the raw bytes of every tensor, for quick identity checks.
std::uint64_t weights_checksum(const ModelBundle& model);

}  // namespace tcprof
