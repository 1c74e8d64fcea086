#include <omp.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "tcprof/errors.hpp"
#include "tcprof/kernels.hpp"
#include "tcprof/model.hpp"

namespace tcprof {
namespace {

void add_bias(Matrix& m, std::span<const double> bias) {
  if (bias.empty()) return;
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += bias[c];
  }
}

Matrix linear(const Matrix& x, const Matrix& w, std::span<const double> bias) {
  Matrix y = kernels::matmul_nt(x, w);
  add_bias(y, bias);
  return y;
}

double gelu(double x) {
  constexpr double k = 0.7978845608028654;  // sqrt(2 / pi)
  return 0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * x * x * x)));
}

double silu(double x) { return x / (1.0 + std::exp(-x)); }

// Rotates pairs (i, i + half) of each head by position-dependent angles; row t
// sits at position pos0 + t.
void apply_rotary(Matrix& m, std::size_t col0, std::size_t heads, std::size_t hd, double base,
                  std::size_t pos0 = 0) {
  const std::size_t half = hd / 2;
  for (std::size_t t = 0; t < m.rows(); ++t) {
    auto row = m.row(t);
    for (std::size_t h = 0; h < heads; ++h) {
      double* v = row.data() + col0 + h * hd;
      for (std::size_t i = 0; i < half; ++i) {
        const double freq = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(hd));
        const double angle = static_cast<double>(pos0 + t) * freq;
        const double c = std::cos(angle);
        const double s = std::sin(angle);
        const double a = v[i];
        const double b = v[i + half];
        v[i] = a * c - b * s;
        v[i + half] = a * s + b * c;
      }
    }
  }
}

// Causal attention context for query row t of `qkv` over key/value rows 0..t.
void attend_row(const ModelConfig& cfg, const Matrix& q_rows, std::size_t q_row, const Matrix& kv, std::size_t t,
                std::span<double> ctx, std::vector<double>& scores) {
  const std::size_t d = cfg.d_model;
  const std::size_t hd = cfg.head_dim();
  const std::size_t kvd = cfg.kv_dim();
  const std::size_t group = cfg.n_heads / cfg.kv_heads();
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  scores.resize(t + 1);
  for (std::size_t head = 0; head < cfg.n_heads; ++head) {
    const std::size_t qo = head * hd;
    const std::size_t ko = d + (head / group) * hd;
    const std::size_t vo = d + kvd + (head / group) * hd;
    const double* q = q_rows.row(q_row).data() + qo;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t s = 0; s <= t; ++s) {
      const double* k = kv.row(s).data() + ko;
      double dot = 0.0;
      for (std::size_t i = 0; i < hd; ++i) dot += q[i] * k[i];
      scores[s] = dot * inv_sqrt;
      mx = std::max(mx, scores[s]);
    }
    double z = 0.0;
    for (std::size_t s = 0; s <= t; ++s) {
      scores[s] = std::exp(scores[s] - mx);
      z += scores[s];
    }
    double* out = ctx.data() + qo;
    for (std::size_t s = 0; s <= t; ++s) {
      const double p = scores[s] / z;
      const double* v = kv.row(s).data() + vo;
      for (std::size_t i = 0; i < hd; ++i) out[i] += p * v[i];
    }
  }
}

Matrix qkv_projection(const ModelConfig& cfg, const BlockWeights& w, const Matrix& x, std::size_t pos0) {
  const Matrix h = apply_norm(cfg.norm, x, w.norm1_gain, w.norm1_bias, cfg.norm_eps);
  Matrix qkv = linear(h, w.attn_qkv, w.attn_qkv_bias);
  if (cfg.pos == PosKind::kRotary) {
    apply_rotary(qkv, 0, cfg.n_heads, cfg.head_dim(), cfg.rope_base, pos0);
    apply_rotary(qkv, cfg.d_model, cfg.kv_heads(), cfg.head_dim(), cfg.rope_base, pos0);
  }
  return qkv;
}

Matrix attention(const ModelConfig& cfg, const BlockWeights& w, const Matrix& x) {
  const Matrix qkv = qkv_projection(cfg, w, x, 0);
  Matrix ctx(x.rows(), cfg.d_model);
  std::vector<double> scores;
  for (std::size_t t = 0; t < x.rows(); ++t) attend_row(cfg, qkv, t, qkv, t, ctx.row(t), scores);
  return linear(ctx, w.attn_out, w.attn_out_bias);
}

Matrix mlp(const ModelConfig& cfg, const BlockWeights& w, const Matrix& x) {
  const Matrix h = apply_norm(cfg.norm, x, w.norm2_gain, w.norm2_bias, cfg.norm_eps);
  Matrix up = linear(h, w.mlp_in, w.mlp_in_bias);
  if (cfg.mlp == MlpKind::kGelu) {
    for (double& v : up.values()) v = gelu(v);
  } else {
    const Matrix gate = linear(h, w.mlp_gate, w.mlp_gate_bias);
    auto u = up.values();
    auto g = gate.values();
    for (std::size_t i = 0; i < u.size(); ++i) u[i] *= silu(g[i]);
  }
  return linear(up, w.mlp_out, w.mlp_out_bias);
}

// Branch output under the slot's surgery action (nullopt = intact).
Matrix component_output(const ModelConfig& cfg, const BlockWeights& w, Component c,
                        const std::optional<ComponentAction>& action, const Matrix& x) {
  if (action) {
    if (std::holds_alternative<SkipComponent>(*action)) return Matrix(x.rows(), x.cols());
    if (const auto* mean = std::get_if<MeanAblateComponent>(&*action)) {
      Matrix out(x.rows(), x.cols());
      for (std::size_t r = 0; r < out.rows(); ++r)
        std::copy(mean->cached_mean.begin(), mean->cached_mean.end(), out.row(r).begin());
      return out;
    }
  }
  return c == Component::kAttn ? attention(cfg, w, x) : mlp(cfg, w, x);
}

void project(const ProjectResidual& p, Matrix& x) {
  const std::size_t d = x.cols();
  std::vector<double> center = p.center.empty() ? std::vector<double>(d, 0.0) : p.center;
  Matrix centered = center_rows(x, center);
  Matrix kept(x.rows(), d);
  if (p.k > 0) {
    const Matrix basis = slice_cols(p.directions.basis, 0, p.k);
    kept = kernels::matmul_nt(kernels::matmul(centered, basis), basis);
  }
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < d; ++c) x(r, c) = center[c] + kept(r, c);
}

}  // namespace

Matrix apply_norm(NormKind kind, const Matrix& x, std::span<const double> gain,
                  std::span<const double> bias, double eps) {
  Matrix out(x.rows(), x.cols());
  const double n = static_cast<double>(x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto in = x.row(r);
    auto o = out.row(r);
    double mean = 0.0;
    if (kind == NormKind::kLayer) {
      for (double v : in) mean += v;
      mean /= n;
    }
    double ms = 0.0;
    for (double v : in) ms += (v - mean) * (v - mean);
    const double inv = 1.0 / std::sqrt(ms / n + eps);
    for (std::size_t c = 0; c < in.size(); ++c) {
      o[c] = (in[c] - mean) * inv * gain[c];
      if (!bias.empty()) o[c] += bias[c];
    }
  }
  return out;
}

std::vector<double> log_softmax(std::span<const double> logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double v : logits) z += std::exp(v - mx);
  const double lse = mx + std::log(z);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
  return out;
}

Matrix embed(const ModelBundle& model, std::span<const std::uint32_t> tokens) {
  const ModelConfig& cfg = model.config;
  if (tokens.empty()) throw InvalidArgument("forward: empty token sequence");
  if (tokens.size() > cfg.max_seq) {
    throw InvalidArgument("forward: sequence length " + std::to_string(tokens.size()) +
                          " exceeds max_seq " + std::to_string(cfg.max_seq));
  }
  Matrix x(tokens.size(), cfg.d_model);
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    if (tokens[t] >= cfg.vocab) {
      throw InvalidArgument("forward: token id " + std::to_string(tokens[t]) + " at position " +
                            std::to_string(t) + " >= vocab " + std::to_string(cfg.vocab));
    }
    auto row = x.row(t);
    auto e = model.embedding.row(tokens[t]);
    std::copy(e.begin(), e.end(), row.begin());
    if (cfg.pos == PosKind::kLearned) {
      auto p = model.pos_embedding.row(t);
      for (std::size_t c = 0; c < row.size(); ++c) row[c] += p[c];
    }
  }
  return x;
}

BlockParts block_parts(const ModelBundle& model, std::size_t b, const Matrix& x) {
  const auto& cfg = model.config;
  const auto& w = model.blocks.at(b);
  BlockParts parts;
  parts.attn = attention(cfg, w, x);
  parts.mid = x + parts.attn;
  parts.mlp = mlp(cfg, w, parts.mid);
  return parts;
}

void run_block(const ModelBundle& model, std::size_t b, Matrix& x) {
  const auto& cfg = model.config;
  const auto& w = model.blocks.at(b);
  const BlockSurgery* s = model.surgery.find(b);
  if (s && s->replace) {
    const auto& map = *s->replace;
    if (map.rank() > 0) x = x + kernels::matmul_nt(kernels::matmul(x, map.coef), map.basis);
  } else {
    static const std::optional<ComponentAction> kNone;
    const Matrix a = component_output(cfg, w, Component::kAttn, s ? s->attn : kNone, x);
    Matrix mid = x + a;
    const Matrix m = component_output(cfg, w, Component::kMlp, s ? s->mlp : kNone, mid);
    x = mid + m;
  }
  if (s && s->project) project(*s->project, x);
}

Matrix run_blocks(const ModelBundle& model, std::size_t first, std::size_t last, Matrix x,
                  const BlockHook& hook) {
  if (last > model.config.n_blocks || first > last) {
    throw InvalidArgument("run_blocks: block range out of bounds");
  }
  for (std::size_t b = first; b < last; ++b) {
    if (hook) {
      const Matrix in = x;
      run_block(model, b, x);
      hook(b, in, x);
    } else {
      run_block(model, b, x);
    }
  }
  return x;
}

Matrix final_logits(const ModelBundle& model, const Matrix& x) {
  const auto& cfg = model.config;
  const Matrix h = apply_norm(cfg.norm, x, model.final_norm_gain, model.final_norm_bias, cfg.norm_eps);
  return kernels::matmul_nt(h, model.head);
}

Matrix forward(const ModelBundle& model, std::span<const std::uint32_t> tokens,
               const BlockHook& hook) {
  Matrix x = run_blocks(model, 0, model.config.n_blocks, embed(model, tokens), hook);
  return final_logits(model, x);
}

NllSum sequence_nll(const ModelBundle& model, std::span<const std::uint32_t> tokens) {
  NllSum out;
  if (tokens.size() < 2) return out;
  const Matrix logits = forward(model, tokens);
  for (std::size_t t = 0; t + 1 < tokens.size(); ++t) {
    const auto lp = log_softmax(logits.row(t));
    out.nll -= lp[tokens[t + 1]];
    ++out.count;
  }
  return out;
}

double perplexity_from(std::span<const NllSum> sums) {
  double nll = 0.0;
  std::size_t count = 0;
  for (const auto& s : sums) {
    nll += s.nll;
    count += s.count;
  }
  if (count == 0) throw InvalidArgument("perplexity: no predicted positions");
  return std::exp(nll / static_cast<double>(count));
}

double perplexity(const ModelBundle& model, const TokenDataset& data, Split split) {
  const auto& seqs = data.split(split);
  if (seqs.empty()) {
    throw InvalidArgument(std::string("perplexity: ") + to_string(split) + " split is empty");
  }
  std::vector<NllSum> sums(seqs.size());
  const auto n = static_cast<std::ptrdiff_t>(seqs.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    sums[static_cast<std::size_t>(i)] = sequence_nll(model, seqs[static_cast<std::size_t>(i)]);
  }
  return perplexity_from(sums);
}

std::vector<BlockTrace> capture_traces(const ModelBundle& model, const TokenDataset& data,
                                       std::span<const std::size_t> blocks, Split split) {
  const auto& seqs = data.split(split);
  if (seqs.empty()) {
    throw InvalidArgument(std::string("capture_traces: ") + to_string(split) + " split is empty");
  }
  std::vector<std::size_t> wanted(blocks.begin(), blocks.end());
  std::sort(wanted.begin(), wanted.end());
  wanted.erase(std::unique(wanted.begin(), wanted.end()), wanted.end());
  if (wanted.empty()) return {};
  if (wanted.back() >= model.config.n_blocks) {
    throw InvalidArgument("capture_traces: block " + std::to_string(wanted.back()) +
                          " out of range");
  }
  const std::size_t last = wanted.back() + 1;

  // per_seq[s][i] = (x_in, x_out) for wanted[i]
  std::vector<std::vector<std::pair<Matrix, Matrix>>> per_seq(seqs.size());
  const auto n = static_cast<std::ptrdiff_t>(seqs.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t si = 0; si < n; ++si) {
    const auto s = static_cast<std::size_t>(si);
    auto& slots = per_seq[s];
    slots.resize(wanted.size());
    run_blocks(model, 0, last, embed(model, seqs[s]),
               [&](std::size_t b, const Matrix& in, Matrix& out) {
                 auto it = std::lower_bound(wanted.begin(), wanted.end(), b);
                 if (it != wanted.end() && *it == b) {
                   slots[static_cast<std::size_t>(it - wanted.begin())] = {in, out};
                 }
               });
  }

  std::vector<BlockTrace> traces;
  traces.reserve(wanted.size());
  for (std::size_t i = 0; i < wanted.size(); ++i) {
    std::vector<Matrix> ins;
    std::vector<Matrix> outs;
    ins.reserve(seqs.size());
    outs.reserve(seqs.size());
    for (auto& slots : per_seq) {
      ins.push_back(std::move(slots[i].first));
      outs.push_back(std::move(slots[i].second));
    }
    BlockTrace t;
    t.block = wanted[i];
    t.x_in = vstack(ins);
    t.x_out = vstack(outs);
    t.delta = t.x_out - t.x_in;
    traces.push_back(std::move(t));
  }
  return traces;
}

IncrementalDecoder::IncrementalDecoder(const ModelBundle& model) : model_(model) {
  if (!model.surgery.empty()) throw InvalidArgument("IncrementalDecoder: model carries a surgery plan");
  for (std::size_t b = 0; b < model.config.n_blocks; ++b) kv_.emplace_back(model.config.max_seq, model.config.qkv_rows());
}

std::vector<double> IncrementalDecoder::step(std::uint32_t token) {
  const ModelConfig& cfg = model_.config;
  if (length_ >= cfg.max_seq) throw InvalidArgument("IncrementalDecoder: sequence exceeds max_seq");
  if (token >= cfg.vocab) throw InvalidArgument("IncrementalDecoder: token id " + std::to_string(token) + " >= vocab");
  const std::size_t t = length_++;
  Matrix x(1, cfg.d_model);
  {
    auto row = x.row(0);
    auto e = model_.embedding.row(token);
    std::copy(e.begin(), e.end(), row.begin());
    if (cfg.pos == PosKind::kLearned) {
      auto p = model_.pos_embedding.row(t);
      for (std::size_t c = 0; c < row.size(); ++c) row[c] += p[c];
    }
  }
  std::vector<double> scores;
  for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
    const auto& w = model_.blocks[b];
    const Matrix qkv = qkv_projection(cfg, w, x, t);
    auto cache = kv_[b].row(t);
    std::copy(qkv.values().begin(), qkv.values().end(), cache.begin());
    Matrix ctx(1, cfg.d_model);
    attend_row(cfg, qkv, 0, kv_[b], t, ctx.row(0), scores);
    const Matrix mid = x + linear(ctx, w.attn_out, w.attn_out_bias);
    x = mid + mlp(cfg, w, mid);
  }
  const Matrix logits = final_logits(model_, x);
  return {logits.values().begin(), logits.values().end()};
}

}  // namespace tcprof
