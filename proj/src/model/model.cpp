#include <algorithm>
#include <cstring>
#include <set>
#include <sstream>
#include <string>

#include "tcprof/errors.hpp"
#include "tcprof/model.hpp"
#include "tcprof/rng.hpp"

namespace tcprof {
namespace {

std::string shape_str(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

void expect_shape(const Matrix& m, std::size_t rows, std::size_t cols, const std::string& name) {
  if (m.rows() != rows || m.cols() != cols) {
    throw InvalidArgument(name + ": expected " + std::to_string(rows) + "x" + std::to_string(cols) +
                          ", got " + shape_str(m));
  }
}

void expect_len(const std::vector<double>& v, std::size_t n, const std::string& name,
                bool optional = false) {
  if (optional && v.empty()) return;
  if (v.size() != n) {
    throw InvalidArgument(name + ": expected length " + std::to_string(n) + ", got " +
                          std::to_string(v.size()));
  }
}

std::optional<ComponentAction>& slot(BlockSurgery& s, Component c) {
  return c == Component::kAttn ? s.attn : s.mlp;
}

std::string describe_action(const ComponentAction& a) {
  if (const auto* q = std::get_if<QuantizeComponent>(&a)) return q->scheme.label();
  if (std::holds_alternative<SkipComponent>(a)) return "skip";
  return "mean";
}

void fnv_values(std::uint64_t& h, std::span<const double> v) { h = checksum(v, h); }

}  // namespace

const char* to_string(Component c) { return c == Component::kAttn ? "attn" : "mlp"; }
const char* to_string(Split s) { return s == Split::kCalibration ? "calibration" : "eval"; }

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v < 1) throw InvalidArgument(std::string("config.") + name + " must be >= 1");
  };
  positive(n_blocks, "n_blocks");
  positive(d_model, "d_model");
  positive(n_heads, "n_heads");
  positive(d_ff, "d_ff");
  positive(vocab, "vocab");
  positive(max_seq, "max_seq");
  if (d_model % n_heads != 0) {
    throw InvalidArgument("config.d_model (" + std::to_string(d_model) +
                          ") must be divisible by n_heads (" + std::to_string(n_heads) + ")");
  }
  if (n_heads % kv_heads() != 0) {
    throw InvalidArgument("config.n_kv_heads must divide n_heads");
  }
  if (pos == PosKind::kRotary && head_dim() % 2 != 0) {
    throw InvalidArgument("config: rotary positions need an even head dimension");
  }
  if (!(norm_eps > 0.0)) throw InvalidArgument("config.norm_eps must be > 0");
  if (!(init_std >= 0.0)) throw InvalidArgument("config.init_std must be >= 0");
}

void ModelBundle::validate() const {
  config.validate();
  const std::size_t d = config.d_model;
  expect_shape(embedding, config.vocab, d, "embedding");
  if (config.pos == PosKind::kLearned) expect_shape(pos_embedding, config.max_seq, d, "pos_embedding");
  if (blocks.size() != config.n_blocks) {
    throw InvalidArgument("model has " + std::to_string(blocks.size()) + " blocks, config says " +
                          std::to_string(config.n_blocks));
  }
  const bool b = config.biases;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const auto& w = blocks[i];
    const std::string p = "blocks." + std::to_string(i) + ".";
    expect_shape(w.attn_qkv, config.qkv_rows(), d, p + "attn_qkv");
    expect_shape(w.attn_out, d, d, p + "attn_out");
    expect_shape(w.mlp_in, config.d_ff, d, p + "mlp_in");
    if (config.mlp == MlpKind::kSwiglu) expect_shape(w.mlp_gate, config.d_ff, d, p + "mlp_gate");
    expect_shape(w.mlp_out, d, config.d_ff, p + "mlp_out");
    expect_len(w.norm1_gain, d, p + "norm1_gain");
    expect_len(w.norm2_gain, d, p + "norm2_gain");
    expect_len(w.norm1_bias, d, p + "norm1_bias", !b);
    expect_len(w.norm2_bias, d, p + "norm2_bias", !b);
    expect_len(w.attn_qkv_bias, config.qkv_rows(), p + "attn_qkv_bias", !b);
    expect_len(w.attn_out_bias, d, p + "attn_out_bias", !b);
    expect_len(w.mlp_in_bias, config.d_ff, p + "mlp_in_bias", !b);
    expect_len(w.mlp_gate_bias, config.d_ff, p + "mlp_gate_bias", true);
    expect_len(w.mlp_out_bias, d, p + "mlp_out_bias", !b);
  }
  expect_len(final_norm_gain, d, "final_norm_gain");
  expect_len(final_norm_bias, d, "final_norm_bias", !b);
  expect_shape(head, config.vocab, d, "head");
}

std::size_t ModelBundle::block_parameter_count(std::size_t b) const {
  const auto& w = blocks.at(b);
  return w.attn_qkv.size() + w.attn_out.size() + w.mlp_in.size() + w.mlp_gate.size() +
         w.mlp_out.size() + w.norm1_gain.size() + w.norm2_gain.size() + w.norm1_bias.size() +
         w.norm2_bias.size() + w.attn_qkv_bias.size() + w.attn_out_bias.size() +
         w.mlp_in_bias.size() + w.mlp_gate_bias.size() + w.mlp_out_bias.size();
}

std::size_t TokenDataset::token_count(Split s) const {
  std::size_t n = 0;
  for (const auto& seq : split(s)) n += seq.size();
  return n;
}

void TokenDataset::validate() const {
  for (Split s : {Split::kCalibration, Split::kEval}) {
    for (const auto& seq : split(s)) {
      for (std::uint32_t id : seq) {
        if (id >= vocab) {
          throw InvalidArgument(std::string(to_string(s)) + " split: token id " +
                                std::to_string(id) + " >= vocab " + std::to_string(vocab));
        }
      }
    }
  }
  const std::set<std::vector<std::uint32_t>> calib(calibration.begin(), calibration.end());
  for (const auto& seq : eval) {
    if (calib.contains(seq)) throw InvalidArgument("dataset: a sequence appears in both splits");
  }
}

SurgeryPlan& SurgeryPlan::set_component(std::size_t block, Component c, ComponentAction action) {
  auto& s = slot(blocks_[block], c);
  if (s) {
    throw InvalidArgument("surgery: block " + std::to_string(block) + " " + to_string(c) +
                          " already has an action");
  }
  s = std::move(action);
  return *this;
}

SurgeryPlan& SurgeryPlan::replace_block(LinearBlockMap map) {
  auto& s = blocks_[map.block];
  if (s.replace) {
    throw InvalidArgument("surgery: block " + std::to_string(map.block) + " already replaced");
  }
  s.replace = std::move(map);
  return *this;
}

SurgeryPlan& SurgeryPlan::project_after(std::size_t block, ProjectResidual projection) {
  auto& s = blocks_[block];
  if (s.project) {
    throw InvalidArgument("surgery: block " + std::to_string(block) + " already has a projection");
  }
  s.project = std::move(projection);
  return *this;
}

void SurgeryPlan::merge(const SurgeryPlan& other) {
  for (const auto& [b, s] : other.blocks_) {
    if (s.attn) set_component(b, Component::kAttn, *s.attn);
    if (s.mlp) set_component(b, Component::kMlp, *s.mlp);
    if (s.replace) replace_block(*s.replace);
    if (s.project) project_after(b, *s.project);
  }
}

const BlockSurgery* SurgeryPlan::find(std::size_t block) const {
  auto it = blocks_.find(block);
  return it == blocks_.end() ? nullptr : &it->second;
}

bool SurgeryPlan::has_runtime_actions() const {
  auto runtime = [](const std::optional<ComponentAction>& a) {
    return a && !std::holds_alternative<QuantizeComponent>(*a);
  };
  return std::any_of(blocks_.begin(), blocks_.end(), [&](const auto& kv) {
    const BlockSurgery& s = kv.second;
    return runtime(s.attn) || runtime(s.mlp) || s.replace || s.project;
  });
}

std::string SurgeryPlan::describe() const {
  std::ostringstream out;
  bool first = true;
  for (const auto& [b, s] : blocks_) {
    if (!first) out << "; ";
    first = false;
    out << "block " << b << ":";
    if (s.attn) out << " attn=" << describe_action(*s.attn);
    if (s.mlp) out << " mlp=" << describe_action(*s.mlp);
    if (s.replace) out << " replace(rank " << s.replace->rank() << ")";
    if (s.project) out << " project(k=" << s.project->k << ")";
  }
  return out.str();
}

namespace {

void quantize_into(Matrix& m, const QuantizeComponent& q) {
  if (m.empty()) return;
  quant::QuantScheme scheme = q.scheme;
  if (q.per_row) scheme.group_size = m.cols();
  m = quant::fake_quantize(m, scheme);
}

void bake_quantization(BlockWeights& w, Component c, const QuantizeComponent& q) {
  if (c == Component::kAttn) {
    quantize_into(w.attn_qkv, q);
    quantize_into(w.attn_out, q);
  } else {
    quantize_into(w.mlp_in, q);
    quantize_into(w.mlp_gate, q);
    quantize_into(w.mlp_out, q);
  }
}

void check_action(const ComponentAction& a, const ModelConfig& cfg, std::size_t b) {
  if (const auto* m = std::get_if<MeanAblateComponent>(&a)) {
    if (m->cached_mean.size() != cfg.d_model) {
      throw InvalidArgument("surgery: block " + std::to_string(b) +
                            " cached mean length != d_model");
    }
  }
}

}  // namespace

ModelBundle apply_surgery(const ModelBundle& model, const SurgeryPlan& plan) {
  ModelBundle out = model;
  const ModelConfig& cfg = model.config;
  for (const auto& [b, s] : plan.blocks()) {
    if (b >= cfg.n_blocks) {
      throw InvalidArgument("surgery: block " + std::to_string(b) + " out of range");
    }
    for (Component c : {Component::kAttn, Component::kMlp}) {
      const auto& a = c == Component::kAttn ? s.attn : s.mlp;
      if (!a) continue;
      check_action(*a, cfg, b);
      if (const auto* q = std::get_if<QuantizeComponent>(&*a)) bake_quantization(out.blocks[b], c, *q);
    }
    if (s.replace) {
      const auto& m = *s.replace;
      if (m.basis.rows() != cfg.d_model || m.coef.rows() != cfg.d_model ||
          m.coef.cols() != m.basis.cols()) {
        throw InvalidArgument("surgery: LinearBlockMap for block " + std::to_string(b) +
                              " has shapes V " + shape_str(m.basis) + ", A " + shape_str(m.coef) +
                              " (need d x k each, d = " + std::to_string(cfg.d_model) + ")");
      }
      if (m.block != b) throw InvalidArgument("surgery: LinearBlockMap block index mismatch");
    }
    if (s.project) {
      const auto& p = *s.project;
      if (p.directions.dim() != cfg.d_model && !(p.k == 0 && p.directions.basis.empty())) {
        throw InvalidArgument("surgery: projection basis dimension != d_model");
      }
      if (p.k > p.directions.count()) {
        throw InvalidArgument("surgery: projection k exceeds available directions");
      }
      if (!p.center.empty() && p.center.size() != cfg.d_model) {
        throw InvalidArgument("surgery: projection center length != d_model");
      }
    }
  }
  out.surgery.merge(plan);
  return out;
}

ModelBundle zero_model(const ModelConfig& config) {
  config.validate();
  ModelBundle m;
  m.config = config;
  const std::size_t d = config.d_model;
  m.embedding = Matrix(config.vocab, d);
  if (config.pos == PosKind::kLearned) m.pos_embedding = Matrix(config.max_seq, d);
  m.blocks.resize(config.n_blocks);
  for (auto& w : m.blocks) {
    w.attn_qkv = Matrix(config.qkv_rows(), d);
    w.attn_out = Matrix(d, d);
    w.mlp_in = Matrix(config.d_ff, d);
    if (config.mlp == MlpKind::kSwiglu) w.mlp_gate = Matrix(config.d_ff, d);
    w.mlp_out = Matrix(d, config.d_ff);
    w.norm1_gain.assign(d, 0.0);
    w.norm2_gain.assign(d, 0.0);
    if (config.biases) {
      w.norm1_bias.assign(d, 0.0);
      w.norm2_bias.assign(d, 0.0);
      w.attn_qkv_bias.assign(config.qkv_rows(), 0.0);
      w.attn_out_bias.assign(d, 0.0);
      w.mlp_in_bias.assign(config.d_ff, 0.0);
      if (config.mlp == MlpKind::kSwiglu) w.mlp_gate_bias.assign(config.d_ff, 0.0);
      w.mlp_out_bias.assign(d, 0.0);
    }
  }
  m.final_norm_gain.assign(d, 0.0);
  if (config.biases) m.final_norm_bias.assign(d, 0.0);
  m.head = Matrix(config.vocab, d);
  return m;
}

ModelBundle synth_model(const ModelConfig& config, std::uint64_t seed) {
  ModelBundle m = zero_model(config);
  Rng rng(seed);
  const double sd = config.init_std;
  auto fill = [&](Matrix& w) {
    for (double& v : w.values()) v = sd * rng.normal();
  };
  fill(m.embedding);
  if (config.pos == PosKind::kLearned) fill(m.pos_embedding);
  for (auto& w : m.blocks) {
    fill(w.attn_qkv);
    fill(w.attn_out);
    fill(w.mlp_in);
    if (config.mlp == MlpKind::kSwiglu) fill(w.mlp_gate);
    fill(w.mlp_out);
    std::fill(w.norm1_gain.begin(), w.norm1_gain.end(), 1.0);
    std::fill(w.norm2_gain.begin(), w.norm2_gain.end(), 1.0);
  }
  std::fill(m.final_norm_gain.begin(), m.final_norm_gain.end(), 1.0);
  fill(m.head);
  return m;
}

ModelConfig toy_config() {
  ModelConfig c;
  c.n_blocks = 6;
  c.d_model = 32;
  c.n_heads = 4;
  c.d_ff = 64;
  c.vocab = 48;
  c.max_seq = 32;
  c.norm = NormKind::kRms;
  c.pos = PosKind::kLearned;
  c.mlp = MlpKind::kGelu;
  c.init_std = 0.2;
  return c;
}

std::uint64_t weights_checksum(const ModelBundle& model) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  fnv_values(h, model.embedding.values());
  fnv_values(h, model.pos_embedding.values());
  for (const auto& w : model.blocks) {
    for (const Matrix* m : {&w.attn_qkv, &w.attn_out, &w.mlp_in, &w.mlp_gate, &w.mlp_out})
      fnv_values(h, m->values());
    for (const auto* v : {&w.norm1_gain, &w.norm2_gain, &w.norm1_bias, &w.norm2_bias,
                          &w.attn_qkv_bias, &w.attn_out_bias, &w.mlp_in_bias, &w.mlp_gate_bias,
                          &w.mlp_out_bias})
      fnv_values(h, *v);
  }
  fnv_values(h, model.final_norm_gain);
  fnv_values(h, model.final_norm_bias);
  fnv_values(h, model.head.values());
  return h;
}

}  // namespace tcprof
