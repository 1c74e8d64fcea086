#pragma once

// On-disk formats.
//
// TCPF tensor file (little-endian):
//   "TCPF" | u32 version (= 1) | u32 tensor count
//   per tensor:
//     u16 name length | UTF-8 name | u8 dtype | u8 rank | rank x u64 dims
//     zero padding up to the next 64-byte file offset | raw data
//   dtype 0 = f32, 1 = f64, 16 = uniform quantizer codes (u8 each),
//   17 = codebook quantizer codes (u8 each). Quantized tensors carry sidecar
//   f64 tensors "<name>.qparams" = [scheme kind, param, group size (0 = whole)]
//   plus "<name>.scale"/"<name>.zero" (uniform), "<name>.codebook" (k-means)
//   or "<name>.absmax" (NF4).
//
// Model tensor names: embedding, pos_embedding, head, final_norm_gain,
// final_norm_bias, blocks.<i>.{attn_qkv, attn_out, mlp_in, mlp_gate, mlp_out,
// norm1_gain, norm2_gain, norm1_bias, norm2_bias, attn_qkv_bias,
// attn_out_bias, mlp_in_bias, mlp_gate_bias, mlp_out_bias}. Linear weights are
// stored out x in.
//
// TOKS token file: "TOKS" | u32 version (= 1) | u32 vocab | u64 count | count x u32 ids.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "tcprof/exit.hpp"
#include "tcprof/model.hpp"
#include "tcprof/quant.hpp"

namespace tcprof::io {

inline constexpr std::uint32_t kTcpfVersion = 1;
inline constexpr std::uint32_t kToksVersion = 1;
inline constexpr std::size_t kTcpfAlignment = 64;

enum class DType : std::uint8_t { kF32 = 0, kF64 = 1, kUniformCodes = 16, kCodebookCodes = 17 };

struct Tensor {
  std::string name;
  DType dtype = DType::kF64;
  std::vector<std::uint64_t> shape;
  std::vector<double> values;         // f32 / f64 (f32 widened on read)
  std::vector<std::uint8_t> codes;    // dtype 16 / 17

  std::uint64_t element_count() const;
};

struct TensorFile {
  std::vector<Tensor> tensors;

  const Tensor* find(const std::string& name) const;
  const Tensor& at(const std::string& name) const;
  void add_matrix(const std::string& name, const Matrix& m, DType dtype = DType::kF64);
  void add_vector(const std::string& name, const std::vector<double>& v, DType dtype = DType::kF64);
};

std::vector<std::uint8_t> encode_tcpf(const TensorFile& file);
TensorFile decode_tcpf(const std::vector<std::uint8_t>& bytes);
void write_tcpf(const std::filesystem::path& path, const TensorFile& file);
TensorFile read_tcpf(const std::filesystem::path& path);

Matrix tensor_to_matrix(const Tensor& t);
std::vector<double> tensor_to_vector(const Tensor& t);

void add_quantized(TensorFile& file, const std::string& name, const quant::QuantizedTensor& q);
quant::QuantizedTensor read_quantized(const TensorFile& file, const std::string& name);

/// Weights only; config travels in the manifest. Runtime surgery actions
/// (skip, mean, replace, project) cannot be saved and are rejected.
TensorFile model_to_tensors(const ModelBundle& model, DType dtype = DType::kF64);
ModelBundle model_from_tensors(const TensorFile& file, const ModelConfig& config);

struct TokenStream {
  std::uint32_t vocab = 0;
  std::vector<std::uint32_t> ids;
};
std::vector<std::uint8_t> encode_toks(const TokenStream& s);
TokenStream decode_toks(const std::vector<std::uint8_t>& bytes);
void write_toks(const std::filesystem::path& path, const TokenStream& s);
TokenStream read_toks(const std::filesystem::path& path);

/// Contiguous runs of fixed-length sequences cut from a token stream.
struct SplitSpec {
  std::size_t seq_len = 0;
  std::size_t calibration_offset = 0;  // in sequences
  std::size_t calibration_count = 0;
  std::size_t eval_offset = 0;
  std::size_t eval_count = 0;
};

TokenDataset make_dataset(const TokenStream& stream, const SplitSpec& spec);
/// Inverse of make_dataset: calibration sequences first, then eval.
std::pair<TokenStream, SplitSpec> flatten_dataset(const TokenDataset& data);

/// Recorded exporter output used as a cross-component check.
struct Fingerprint {
  std::vector<std::uint32_t> probe_tokens;
  std::vector<double> logits;  // first logits of the last probe position
};

/// JSON manifest tying a weights file, a token file, config and splits together.
struct Manifest {
  ModelConfig config;
  std::filesystem::path weights;  // relative paths resolve against the manifest directory
  std::filesystem::path tokens;
  std::optional<SplitSpec> splits;
  std::optional<Fingerprint> fingerprint;
};

Manifest read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const Manifest& m);
std::string config_to_json_string(const ModelConfig& c);
ModelConfig config_from_json_string(const std::string& s);

/// Writes `<stem>.tcpf` and the manifest `<stem>.json` next to it.
void save_model(const ModelBundle& model, const std::filesystem::path& manifest_path);
/// Loads the weights named by a manifest (or `<path>.json` next to a .tcpf file).
ModelBundle load_model(const std::filesystem::path& path);
TokenDataset load_dataset(const std::filesystem::path& manifest_path);

/// Exit heads as "exit.<i>.{weight, norm_gain, norm_bias, meta}", meta being
/// [attach block, trained steps].
TensorFile exit_heads_to_tensors(const std::vector<exit::ExitHead>& heads);
std::vector<exit::ExitHead> exit_heads_from_tensors(const TensorFile& file);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

}  // namespace tcprof::io
