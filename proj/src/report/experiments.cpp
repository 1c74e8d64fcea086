#include "tcprof/experiments.hpp"

#include <omp.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <set>

#include "tcprof/data.hpp"
#include "tcprof/exit.hpp"
#include "tcprof/io.hpp"
#include "tcprof/linalg.hpp"
#include "tcprof/probes.hpp"
#include "tcprof/rng.hpp"
#include "tcprof/spectral.hpp"
#include "tcprof/surgery.hpp"

namespace tcprof::experiments {

using report::Report;
using report::Table;
namespace fs = std::filesystem;

ConfigError::ConfigError(std::vector<std::string> issues)
    : InvalidArgument([&] {
        std::string s = "invalid configuration";
        for (const auto& i : issues) s += "\n  " + i;
        return s;
      }()),
      issues_(std::move(issues)) {}

json ExperimentConfig::to_json() const {
  return {{"subcommand", subcommand}, {"seed", seed},   {"experiment", experiment},
          {"model", model},           {"tokens", tokens}, {"params", params}};
}

// ---------------------------------------------------------------------------
// Inputs

class Inputs {
 public:
  explicit Inputs(const ExperimentConfig& c) : cfg_(c) {}

  const ModelBundle& model() {
    if (model_) return *model_;
    const auto t0 = std::chrono::steady_clock::now();
    if (cfg_.model.is_string()) {
      const fs::path p = cfg_.model.get<std::string>();
      model_ = io::load_model(p);
      hashes_["model.file"] = report::content_hash(io::read_file(p));
    } else {
      const json& s = cfg_.model.at("synth");
      model_ = synth_model(synth_config(s), s.at("seed").get<std::uint64_t>());
    }
    hashes_["model.config"] = report::content_hash(io::config_to_json_string(model_->config));
    hashes_["model.weights"] = report::content_hash(io::encode_tcpf(io::model_to_tensors(*model_)));
    load_seconds_ += elapsed(t0);
    return *model_;
  }

  const TokenDataset& data() {
    if (data_) return *data_;
    const ModelBundle& m = model();
    const auto t0 = std::chrono::steady_clock::now();
    if (cfg_.tokens.is_string()) {
      data_ = io::load_dataset(cfg_.tokens.get<std::string>());
    } else if (cfg_.tokens.is_null()) {
      fs::path manifest = cfg_.model.get<std::string>();
      if (manifest.extension() != ".json") manifest.replace_extension(".json");
      if (io::read_manifest(manifest).tokens.empty()) {
        throw ConfigError({"tokens: the model manifest names no token file; pass --tokens"});
      }
      data_ = io::load_dataset(manifest);
    } else {
      const json& s = cfg_.tokens.at("synth");
      const auto seq_len = s.at("seq_len").get<std::size_t>();
      const auto cal = s.at("calibration").get<std::size_t>();
      const auto ev = s.at("eval").get<std::size_t>();
      const auto seed = s.at("seed").get<std::uint64_t>();
      if (seq_len > m.config.max_seq) {
        throw ConfigError({"tokens.synth.seq_len: " + std::to_string(seq_len) + " exceeds the model's max_seq " +
                           std::to_string(m.config.max_seq)});
      }
      data_ = s.at("kind").get<std::string>() == "random"
                  ? random_dataset(m.config.vocab, seq_len, cal, ev, seed)
                  : sample_dataset(m, seq_len, cal, ev, seed, s.at("temperature").get<double>());
    }
    const auto [stream, split] = io::flatten_dataset(*data_);
    hashes_["tokens"] = report::content_hash(io::encode_toks(stream));
    hashes_["tokens.splits"] = {{"seq_len", split.seq_len},
                                {"calibration", split.calibration_count},
                                {"eval", split.eval_count}};
    load_seconds_ += elapsed(t0);
    return *data_;
  }

  void add_hash(const std::string& name, const std::string& hash) { hashes_[name] = hash; }
  const json& hashes() const { return hashes_; }
  double load_seconds() const { return load_seconds_; }

  static ModelConfig synth_config(const json& synth) {
    json c = json::parse(io::config_to_json_string(toy_config()));
    if (synth.contains("config")) c.update(synth.at("config"));
    return io::config_from_json_string(c.dump());
  }

 private:
  static double elapsed(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }

  const ExperimentConfig& cfg_;
  std::optional<ModelBundle> model_;
  std::optional<TokenDataset> data_;
  json hashes_ = json::object();
  double load_seconds_ = 0.0;
};

namespace {

// ---------------------------------------------------------------------------
// Parameter helpers

std::int64_t int_param(const ExperimentConfig& c, const char* k) { return c.params.at(k).get<std::int64_t>(); }
double real_param(const ExperimentConfig& c, const char* k) { return c.params.at(k).get<double>(); }
std::string str_param(const ExperimentConfig& c, const char* k) { return c.params.at(k).get<std::string>(); }

std::size_t count_param(const ExperimentConfig& c, const char* k, std::size_t lo = 1) {
  const auto v = int_param(c, k);
  if (v < static_cast<std::int64_t>(lo)) {
    throw ConfigError({"params." + std::string(k) + ": must be >= " + std::to_string(lo)});
  }
  return static_cast<std::size_t>(v);
}

double unit_param(const ExperimentConfig& c, const char* k, bool closed_top = false) {
  const double v = real_param(c, k);
  if (!(v > 0.0 && (closed_top ? v <= 1.0 : v < 1.0))) {
    throw ConfigError({"params." + std::string(k) + ": must lie in (0, 1" + (closed_top ? "]" : ")")});
  }
  return v;
}

double nonneg_param(const ExperimentConfig& c, const char* k) {
  const double v = real_param(c, k);
  if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError({"params." + std::string(k) + ": must be >= 0"});
  return v;
}

std::size_t block_param(const ExperimentConfig& c, const char* k, std::size_t L, std::size_t fallback,
                        std::size_t limit_extra = 0) {
  const json& v = c.params.at(k);
  if (v.is_null()) return fallback;
  const auto b = v.get<std::int64_t>();
  if (b < 0 || b >= static_cast<std::int64_t>(L + limit_extra)) {
    throw ConfigError({"params." + std::string(k) + ": block " + std::to_string(b) + " out of range [0, " +
                       std::to_string(L + limit_extra) + ")"});
  }
  return static_cast<std::size_t>(b);
}

std::vector<std::size_t> blocks_param(const ExperimentConfig& c, const char* k, std::size_t L,
                                      std::vector<std::size_t> fallback, bool ascending) {
  const json& v = c.params.at(k);
  if (v.is_null()) return fallback;
  std::vector<std::size_t> out;
  for (const auto& e : v) {
    const auto b = e.get<std::int64_t>();
    if (b < 0 || b >= static_cast<std::int64_t>(L)) {
      throw ConfigError({"params." + std::string(k) + ": block " + std::to_string(b) + " out of range [0, " +
                         std::to_string(L) + ")"});
    }
    if (ascending && !out.empty() && static_cast<std::size_t>(b) <= out.back()) {
      throw ConfigError({"params." + std::string(k) + ": blocks must be strictly ascending"});
    }
    out.push_back(static_cast<std::size_t>(b));
  }
  return out;
}

std::vector<std::size_t> range(std::size_t first, std::size_t last) {
  std::vector<std::size_t> v;
  for (std::size_t i = first; i < last; ++i) v.push_back(i);
  return v;
}

quant::QuantScheme scheme_param(const ExperimentConfig& c, const char* k) {
  try {
    return parse_scheme(str_param(c, k));
  } catch (const InvalidArgument& e) {
    throw ConfigError({"params." + std::string(k) + ": " + e.what()});
  }
}

Component component_from(const std::string& s) {
  if (s == "attn") return Component::kAttn;
  if (s == "mlp") return Component::kMlp;
  throw ConfigError({"component: expected \"attn\" or \"mlp\", got \"" + s + "\""});
}

std::string col(const std::string& prefix, double v) { return prefix + report::format_number(v); }

Report start(const ExperimentConfig& c) {
  Report r;
  r.subcommand = c.subcommand;
  return r;
}

/// Every linear weight of the model with a stable name.
std::vector<std::pair<std::string, const Matrix*>> weight_matrices(const ModelBundle& m) {
  std::vector<std::pair<std::string, const Matrix*>> out;
  for (std::size_t b = 0; b < m.blocks.size(); ++b) {
    const auto& w = m.blocks[b];
    const std::string p = "blocks." + std::to_string(b) + ".";
    out.emplace_back(p + "attn_qkv", &w.attn_qkv);
    out.emplace_back(p + "attn_out", &w.attn_out);
    out.emplace_back(p + "mlp_in", &w.mlp_in);
    if (!w.mlp_gate.empty()) out.emplace_back(p + "mlp_gate", &w.mlp_gate);
    out.emplace_back(p + "mlp_out", &w.mlp_out);
  }
  return out;
}

std::string source_param(const ExperimentConfig& c) {
  const std::string s = str_param(c, "source");
  if (s != "synthetic" && s != "model") {
    throw ConfigError({"params.source: expected \"synthetic\" or \"model\", got \"" + s + "\""});
  }
  return s;
}

// ---------------------------------------------------------------------------
// Runners

Report run_linearity(const ExperimentConfig& c, Inputs& in, const fs::path&) {
  const auto rows = probes::linearity_profile(in.model(), in.data(), unit_param(c, "var_threshold", true),
                                              nonneg_param(c, "lambda"));
  Report r = start(c);
  Table t{"blocks", {"block", "rank", "fit_r2", "heldout_r2", "degenerate"}, {}};
  double mean = 0.0;
  for (const auto& row : rows) {
    t.add({row.block, row.rank, row.fit_r2, row.heldout_r2, row.degenerate});
    mean += row.heldout_r2 / static_cast<double>(rows.size());
  }
  r.tables.push_back(std::move(t));
  r.summary = {{"early_heldout_r2", rows.front().heldout_r2},
               {"late_heldout_r2", rows.back().heldout_r2},
               {"late_minus_early_heldout_r2", rows.back().heldout_r2 - rows.front().heldout_r2},
               {"mean_heldout_r2", mean}};
  return r;
}

Report run_pca_dims(const ExperimentConfig& c, Inputs& in, const fs::path&) {
  const auto thresholds = c.params.at("thresholds").get<std::vector<double>>();
  for (double t : thresholds)
    if (!(t > 0.0 && t <= 1.0)) throw ConfigError({"params.thresholds: every value must lie in (0, 1]"});
  const ModelBundle& m = in.model();
  const auto blocks = range(0, m.config.n_blocks);
  const auto traces = capture_traces(m, in.data(), blocks, Split::kCalibration);
  Report r = start(c);
  Table t{"dims", {"block", "d_model"}, {}};
  for (double th : thresholds) t.columns.push_back(col("dims_", th));
  t.columns.push_back("total_variance");
  std::size_t widest = 0;
  for (const auto& tr : traces) {
    const auto p = probes::pca_dimensionality(tr.x_out, thresholds);
    json row = {tr.block, m.config.d_model};
    for (std::size_t d : p.dims) row.push_back(d);
    row.push_back(p.total_variance);
    t.add(std::move(row));
    widest = std::max(widest, p.dims.back());
  }
  r.tables.push_back(std::move(t));
  r.summary = {{"max_dims_at_last_threshold", widest}, {"d_model", m.config.d_model}};
  r.notes["stream"] = "residual stream after each block, calibration split";
  return r;
}

Report run_project_ppl(const ExperimentConfig& c, Inputs& in, const fs::path&) {
  const ModelBundle& m = in.model();
  const std::size_t L = m.config.n_blocks, d = m.config.d_model;
  const std::size_t first = block_param(c, "first", L, 0);
  const std::size_t last = block_param(c, "last", L, std::min(first + 3, L), 1);
  if (last <= first) throw ConfigError({"params.last: must exceed params.first"});
  std::vector<std::size_t> ks;
  if (c.params.at("ks").is_null()) {
    // kept-dimension ratios 8, 64, 256 and 768 of 768
    for (double f : {8.0 / 768, 64.0 / 768, 256.0 / 768, 1.0})
      ks.push_back(std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(f * static_cast<double>(d)))));
  } else {
    for (auto k : c.params.at("ks").get<std::vector<std::int64_t>>()) {
      if (k < 0 || k > static_cast<std::int64_t>(d)) {
        throw ConfigError({"params.ks: " + std::to_string(k) + " outside [0, d_model = " + std::to_string(d) + "]"});
      }
      ks.push_back(static_cast<std::size_t>(k));
    }
  }
  const TokenDataset& data = in.data();
  const double base = perplexity(m, data);
  const auto rows = surgery::pca_projection_ppl(m, first, last, ks, data);
  const std::size_t fb[] = {first};
  const auto pca = probes::pca_dimensionality(capture_traces(m, data, fb, Split::kCalibration)[0].x_out);
  const auto& ev = pca.directions.explained_variance;

  Report r = start(c);
  Table t{"projection", {"k", "variance_fraction", "ppl", "delta_ppl"}, {}};
  for (const auto& row : rows) {
    const double captured = std::accumulate(ev.begin(), ev.begin() + static_cast<std::ptrdiff_t>(row.k), 0.0);
    t.add({row.k, captured / pca.total_variance, row.ppl, row.ppl - base});
  }
  r.tables.push_back(std::move(t));
  r.summary = {{"baseline_ppl", base}, {"first", first}, {"last", last}};
  r.notes["variance_fraction"] = "calibration variance captured after the first block of the range";
  return r;
}

Report run_sensitivity(const ExperimentConfig& c, Inputs& in, const fs::path&) {
  const ModelBundle& m = in.model();
  const std::size_t block = block_param(c, "block", m.config.n_blocks, m.config.n_blocks / 2);
  const std::size_t n = count_param(c, "directions");
  if (n > m.config.d_model) throw ConfigError({"params.directions: exceeds d_model"});
  const TokenDataset& data = in.data();
  const std::size_t bb[] = {block};
  const auto pca = probes::pca_dimensionality(capture_traces(m, data, bb, Split::kCalibration)[0].x_out);
  const auto dirs = probes::leading(pca.directions, n);
  const auto sens = probes::perturb_sensitivity(m, block, dirs, nonneg_param(c, "sigma"), data,
                                                Rng::derive(c.seed, 2), count_param(c, "draws"));
  const auto imp = probes::importance_profile(dirs.explained_variance, sens);

  Report r = start(c);
  Table t{"directions", {"direction", "variance", "sensitivity", "importance"}, {}};
  std::size_t most = 0;
  for (std::size_t i = 0; i < n; ++i) {
    t.add({i, imp.variance[i], imp.sensitivity[i], imp.importance[i]});
    if (imp.sensitivity[i] > imp.sensitivity[most]) most = i;
  }
  r.tables.push_back(std::move(t));
  r.summary = {{"block", block},
               {"variance_sensitivity_correlation", imp.correlation},
               {"most_sensitive_variance_rank", most}};
  r.notes["directions"] = "principal directions of the stream after the block, by descending variance";
  return r;
}

Report run_cca_overlap(const ExperimentConfig& c, Inputs& in, const fs::path&) {
  const ModelBundle& m = in.model();
  const std::size_t L = m.config.n_blocks;
  const std::size_t b = block_param(c, "block_b", L, std::min<std::size_t>(1, L - 1));
  const std::size_t B = block_param(c, "block_B", L, L - 1);
  if (B <= b) throw ConfigError({"params.block_B: must exceed params.block_b"});
  const auto ks = c.params.at("ks").get<std::vector<std::int64_t>>();
  for (auto k : ks)
    if (k < 1 || k > static_cast<std::int64_t>(m.config.d_model)) {
      throw ConfigError({"params.ks: " + std::to_string(k) + " outside [1, d_model]"});
    }
  const std::size_t bl[] = {b, B};
  const auto traces = capture_traces(m, in.data(), bl, Split::kCalibration);
  const Matrix& xb = traces[0].x_out;
  const Matrix& xB = traces[1].x_out;
  const double ridge = nonneg_param(c, "ridge"), lambda = nonneg_param(c, "lambda");
  const auto pca = probes::pca_dimensionality(xb);

  Report r = start(c);
  Table t{"subspaces", {"k", "cca_r2", "pca_r2", "relative_gain", "overlap", "top_correlation"}, {}};
  for (auto k64 : ks) {
    const auto k = static_cast<std::size_t>(k64);
    const auto res = probes::cca(xb, xB, k, ridge);
    const auto cdirs = probes::cca_directions(res);
    const auto pdirs = probes::leading(pca.directions, k);
    const double rc = probes::prediction_r2(cdirs, xb, xB, lambda);
    const double rp = probes::prediction_r2(pdirs, xb, xB, lambda);
    t.add({k, rc, rp, rp != 0.0 ? (rc - rp) / std::abs(rp) : 0.0, probes::subspace_overlap(pdirs, cdirs),
           res.correlations.front()});
  }
  r.summary = {{"block_b", b},
               {"block_B", B},
               {"pca_cca_overlap", t.rows.front()[4]},
               {"relative_gain_smallest_k", t.rows.front()[3]}};
  r.tables.push_back(std::move(t));
  r.notes["prediction_r2"] = "ridge fit on the first half of calibration rows, scored on the second half";
  return r;
}

Report run_wall(const ExperimentConfig& c, Inputs& in, const fs::path&) {
  const std::string source = source_param(c);
  const double budget = real_param(c, "budget");
  struct Cell {
    std::string tensor;
    Matrix w, x;
  };
  std::vector<Cell> cells;
  if (source == "synthetic") {
    const std::size_t trials = count_param(c, "trials"), size = count_param(c, "size", 2),
                      samples = count_param(c, "samples", 2);
    for (std::size_t i = 0; i < trials; ++i) {
      cells.push_back({"trained_like." + std::to_string(i),
                       surgery::trained_like_matrix(size, size, Rng::derive(c.seed, 10 + 2 * i)),
                       surgery::trained_like_activations(samples, size, Rng::derive(c.seed, 11 + 2 * i))});
    }
  } else {
    const ModelBundle& m = in.model();
    const auto traces = capture_traces(m, in.data(), range(0, m.config.n_blocks), Split::kCalibration);
    for (const auto& tr : traces) {
      const auto& w = m.blocks[tr.block];
      cells.push_back({"blocks." + std::to_string(tr.block) + ".attn_qkv", w.attn_qkv,
                       apply_norm(m.config.norm, tr.x_in, w.norm1_gain, w.norm1_bias, m.config.norm_eps)});
    }
  }
  std::vector<surgery::WallResult> results(cells.size());
  std::vector<std::string> errors(cells.size());
  const auto n = static_cast<std::ptrdiff_t>(cells.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    try {
      results[i] = surgery::reconstruction_wall(cells[i].w, cells[i].x, budget);
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  }
  for (const auto& e : errors)
    if (!e.empty()) throw InvalidArgument(e);

  Report r = start(c);
  Table t{"trials", {"trial", "tensor", "method", "output_mse", "bits_per_weight", "ranked", "best"}, {}};
  std::size_t direct_wins = 0;
  std::map<std::string, double> ratio;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const auto& res = results[i];
    const auto& best = res.best();
    const double direct = res.row("direct_int4").output_mse;
    bool strict = best.method == "direct_int4";
    for (const auto& row : res.rows)
      if (row.method != "direct_int4" && !(row.output_mse > direct)) strict = false;
    direct_wins += strict;
    for (const auto& row : res.rows) {
      t.add({i, cells[i].tensor, row.method, row.output_mse, row.bits_per_weight, true, &row == &best});
      ratio[row.method] += (direct > 0 ? row.output_mse / direct : 1.0) / static_cast<double>(cells.size());
    }
    t.add({i, cells[i].tensor, res.dct_full.method, res.dct_full.output_mse, res.dct_full.bits_per_weight, false,
           false});
  }
  r.tables.push_back(std::move(t));
  r.summary = {{"trials", cells.size()},
               {"direct_strictly_best", direct_wins},
               {"direct_best_fraction", static_cast<double>(direct_wins) / static_cast<double>(cells.size())},
               {"mean_mse_ratio_to_direct", ratio}};
  r.notes["dct_full"] = "all DCT coefficients at the budget width; reported, not ranked";
  return r;
}

Report run_cross_terms(const ExperimentConfig& c, Inputs& in, const fs::path&) {
  const std::string source = source_param(c);
  std::vector<quant::QuantScheme> schemes;
  for (const auto& s : c.params.at("schemes").get<std::vector<std::string>>()) {
    try {
      schemes.push_back(parse_scheme(s));
    } catch (const InvalidArgument& e) {
      throw ConfigError({std::string("params.schemes: ") + e.what()});
    }
  }
  if (schemes.empty()) throw ConfigError({"params.schemes: at least one scheme required"});
  struct Cell {
    std::string tensor;
    Matrix a, b;
    quant::QuantScheme scheme;
  };
  std::vector<Cell> cells;
  if (source == "synthetic") {
    const std::size_t triples = count_param(c, "triples"), size = count_param(c, "size");
    for (std::size_t i = 0; i < triples; ++i) {
      cells.push_back({"gaussian." + std::to_string(i), Rng(Rng::derive(c.seed, 3 * i)).gaussian(size, size),
                       Rng(Rng::derive(c.seed, 3 * i + 1)).gaussian(size, size), schemes[i % schemes.size()]});
    }
  } else {
    for (const auto& [name, w] : weight_matrices(in.model())) {
      const std::size_t rank = std::max<std::size_t>(1, w->rows() * w->cols() / (w->rows() + w->cols()));
      const auto s = linalg::svd_thin(*w, rank);
      Matrix a = s.u, b = transpose(s.v);
      for (std::size_t k = 0; k < s.s.size(); ++k) {
        const double root = std::sqrt(s.s[k]);
        for (std::size_t i = 0; i < a.rows(); ++i) a(i, k) *= root;
        for (std::size_t j = 0; j < b.cols(); ++j) b(k, j) *= root;
      }
      for (const auto& sc : schemes) cells.push_back({name + ".svd_factors", a, b, sc});
    }
  }
  std::vector<surgery::CrossTermReport> out(cells.size());
  const auto n = static_cast<std::ptrdiff_t>(cells.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < n; ++i) out[i] = surgery::cross_terms(cells[i].a, cells[i].b, cells[i].scheme);

  Report r = start(c);
  Table t{"triples",
          {"trial", "tensor", "scheme", "eps_a_b", "a_eps_b", "eps_eps", "total", "identity_residual"},
          {}};
  double worst = 0.0, eps_share = 0.0;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const auto& o = out[i];
    t.add({i, cells[i].tensor, cells[i].scheme.label(), o.eps_a_b_norm, o.a_eps_b_norm, o.eps_eps_norm,
           o.total_error_norm, o.identity_residual});
    worst = std::max(worst, o.identity_residual);
    const double parts = o.eps_a_b_norm + o.a_eps_b_norm + o.eps_eps_norm;
    eps_share += (parts > 0 ? o.eps_eps_norm / parts : 0.0) / static_cast<double>(cells.size());
  }
  r.tables.push_back(std::move(t));
  r.summary = {{"triples", cells.size()}, {"max_identity_residual", worst}, {"mean_eps_eps_share", eps_share}};
  return r;
}

/// Per-group MSE of `approx` against `w` with consecutive row-major groups.
std::vector<double> group_mse(const Matrix& w, const Matrix& approx, std::size_t group) {
  const auto a = w.values(), b = approx.values();
  std::vector<double> out;
  for (std::size_t g = 0; g < a.size(); g += group) {
    const std::size_t end = std::min(a.size(), g + group);
    double s = 0.0;
    for (std::size_t i = g; i < end; ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    out.push_back(s / static_cast<double>(end - g));
  }
  return out;
}

Report run_kmeans_compare(const ExperimentConfig& c, Inputs& in, const fs::path&) {
  const std::string source = source_param(c);
  const auto levels = static_cast<unsigned>(count_param(c, "levels", 2));
  const auto bits = static_cast<unsigned>(std::llround(std::log2(levels)));
  if ((1u << bits) != levels) throw ConfigError({"params.levels: must be a power of two"});
  std::vector<std::size_t> groups;
  for (auto g : c.params.at("group_sizes").get<std::vector<std::int64_t>>()) {
    if (g < 0) throw ConfigError({"params.group_sizes: must be >= 0 (0 = whole tensor)"});
    groups.push_back(static_cast<std::size_t>(g));
  }
  struct Cell {
    std::string tensor, kind;
    Matrix w;
  };
  std::vector<Cell> cells;
  if (source == "synthetic") {
    const std::size_t count = count_param(c, "tensors"), rows = count_param(c, "rows"), cols = count_param(c, "cols");
    for (std::size_t i = 0; i < count; ++i) {
      const bool gaussian = i % 2 == 0;
      cells.push_back({"synthetic." + std::to_string(i), gaussian ? "gaussian" : "trained_like",
                       gaussian ? Rng(Rng::derive(c.seed, 40 + i)).gaussian(rows, cols)
                                : surgery::trained_like_matrix(rows, cols, Rng::derive(c.seed, 40 + i))});
    }
  } else {
    for (const auto& [name, w] : weight_matrices(in.model())) cells.push_back({name, "model", *w});
  }
  struct Out {
    std::size_t groups = 0, violations = 0;
    double uniform = 0, kmeans = 0, nf4 = 0, absmax = 0;
  };
  std::vector<Out> out(cells.size() * groups.size());
  const auto n = static_cast<std::ptrdiff_t>(out.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t idx = 0; idx < n; ++idx) {
    const auto& cell = cells[static_cast<std::size_t>(idx) / groups.size()];
    const std::size_t g = groups[static_cast<std::size_t>(idx) % groups.size()];
    const std::optional<std::size_t> gs = g == 0 ? std::nullopt : std::optional<std::size_t>(g);
    const Matrix u = quant::fake_quantize(cell.w, quant::QuantScheme::uniform(bits, gs));
    const Matrix k = quant::fake_quantize(cell.w, quant::QuantScheme::kmeans(levels, gs));
    const auto gu = group_mse(cell.w, u, g == 0 ? cell.w.size() : g);
    const auto gk = group_mse(cell.w, k, g == 0 ? cell.w.size() : g);
    Out& o = out[idx];
    o.groups = gu.size();
    for (std::size_t j = 0; j < gu.size(); ++j) o.violations += gk[j] > gu[j] * (1.0 + 1e-12);
    o.uniform = quant::tensor_mse(cell.w, u);
    o.kmeans = quant::tensor_mse(cell.w, k);
    o.nf4 = quant::tensor_mse(cell.w, quant::fake_quantize(cell.w, quant::QuantScheme::nf4(gs)));
    o.absmax = quant::tensor_mse(cell.w, quant::absmax_uniform_fake_quantize(cell.w, 4, gs));
  }

  Report r = start(c);
  Table t{"tensors",
          {"tensor", "kind", "group_size", "groups", "uniform_mse", "kmeans_mse", "uniform_over_kmeans",
           "group_violations", "nf4_mse", "absmax_int4_mse"},
          {}};
  std::size_t violations = 0;
  double gauss_ratio = 0.0, gauss_n = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto& cell = cells[i / groups.size()];
    const auto& o = out[i];
    const double ratio = o.kmeans > 0 ? o.uniform / o.kmeans : 1.0;
    t.add({cell.tensor, cell.kind, groups[i % groups.size()], o.groups, o.uniform, o.kmeans, ratio, o.violations,
           o.nf4, o.absmax});
    violations += o.violations;
    if (cell.kind == "gaussian") {
      gauss_ratio += ratio;
      gauss_n += 1.0;
    }
  }
  r.tables.push_back(std::move(t));
  r.summary = {{"group_violations", violations},
               {"levels", levels},
               {"gaussian_mean_uniform_over_kmeans", gauss_n > 0 ? json(gauss_ratio / gauss_n) : json(nullptr)}};
  r.notes["violation"] = "k-means group MSE above uniform group MSE by more than 1e-12 relative";
  return r;
}

Report run_dct_analyze(const ExperimentConfig& c, Inputs& in, const fs::path&) {
  const std::string source = source_param(c);
  std::vector<std::pair<std::string, Matrix>> cells;
  if (source == "model") {
    for (const auto& [name, w] : weight_matrices(in.model())) cells.emplace_back(name, *w);
  } else {
    const std::size_t count = count_param(c, "tensors"), size = count_param(c, "size", 2);
    for (std::size_t i = 0; i < count; ++i)
      cells.emplace_back("trained_like." + std::to_string(i),
                         surgery::trained_like_matrix(size, size, Rng::derive(c.seed, 60 + i)));
  }
  std::vector<spectral::SpectralReport> rep(cells.size()), ctrl(cells.size());
  const auto n = static_cast<std::ptrdiff_t>(cells.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const Matrix& w = cells[i].second;
    rep[i] = spectral::spectral_report(w, cells[i].first);
    ctrl[i] = spectral::spectral_report(Rng(Rng::derive(c.seed, 1000 + i)).gaussian(w.rows(), w.cols()), "gaussian");
  }
  Report r = start(c);
  Table t{"spectra", {"tensor", "rows", "cols", "gini", "gaussian_gini"}, {}};
  for (double f : spectral::kCaptureFractions) t.columns.push_back(col("capture_", f));
  double g = 0, gg = 0;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    json row = {cells[i].first, cells[i].second.rows(), cells[i].second.cols(), rep[i].gini, ctrl[i].gini};
    for (const auto& [f, e] : rep[i].energy_capture) row.push_back(e);
    t.add(std::move(row));
    g += rep[i].gini / static_cast<double>(cells.size());
    gg += ctrl[i].gini / static_cast<double>(cells.size());
  }
  r.tables.push_back(std::move(t));
  r.summary = {{"mean_gini", g}, {"mean_gaussian_gini", gg}};
  return r;
}

Report run_destroy_map(const ExperimentConfig& c, Inputs& in, const fs::path&) {
  const auto map = surgery::destroy_components(in.model(), scheme_param(c, "scheme"), in.data());
  Report r = start(c);
  Table t{"cells", {"block", "component", "kl"}, {}};
  const surgery::DestructionCell* worst = &map.cells.front();
  double attn = 0, mlp = 0;
  for (const auto& cell : map.cells) {
    t.add({cell.block, to_string(cell.component), cell.kl});
    if (cell.kl > worst->kl) worst = &cell;
    (cell.component == Component::kAttn ? attn : mlp) += cell.kl;
  }
  const double blocks = static_cast<double>(map.cells.size() / 2);
  r.tables.push_back(std::move(t));
  r.summary = {{"most_damaging_block", worst->block},
               {"most_damaging_component", to_string(worst->component)},
               {"mean_attn_kl", attn / blocks},
               {"mean_mlp_kl", mlp / blocks}};
  r.notes["kl"] = "mean per-token KL(intact || destroyed), eval split; weights quantized per row";
  return r;
}

Report run_ablate(const ExperimentConfig& c, Inputs& in, const fs::path&) {
  const ModelBundle& m = in.model();
  const auto blocks = blocks_param(c, "blocks", m.config.n_blocks, range(0, m.config.n_blocks), false);
  std::vector<Component> comps;
  for (const auto& s : c.params.at("components").get<std::vector<std::string>>()) comps.push_back(component_from(s));
  std::vector<surgery::AblationMode> modes;
  for (const auto& s : c.params.at("modes").get<std::vector<std::string>>()) {
    if (s == "skip") modes.push_back(surgery::AblationMode::kSkip);
    else if (s == "mean") modes.push_back(surgery::AblationMode::kMean);
    else throw ConfigError({"params.modes: expected \"skip\" or \"mean\", got \"" + s + "\""});
  }
  const TokenDataset& data = in.data();
  Report r = start(c);
  Table t{"ablations", {"block", "component", "mode", "ppl", "delta_ppl"}, {}};
  double base = 0.0;
  for (std::size_t b : blocks)
    for (Component comp : comps)
      for (auto mode : modes) {
        const auto res = surgery::ablate_component(m, b, comp, mode, data);
        base = res.baseline_ppl;
        t.add({b, to_string(comp), mode == surgery::AblationMode::kSkip ? "skip" : "mean", res.ppl, res.delta_ppl});
      }
  r.tables.push_back(std::move(t));
  r.summary = {{"baseline_ppl", base == 0.0 ? perplexity(m, data) : base}};
  r.notes["mean"] = "component output replaced by its calibration-token mean";
  return r;
}

Report run_replace(const ExperimentConfig& c, Inputs& in, const fs::path&) {
  const ModelBundle& m = in.model();
  const auto blocks = blocks_param(c, "blocks", m.config.n_blocks, range(0, m.config.n_blocks), false);
  const double vt = unit_param(c, "var_threshold", true), lambda = nonneg_param(c, "lambda");
  Report r = start(c);
  Table t{"blocks",
          {"block", "rank", "fit_r2", "heldout_r2", "ppl", "delta_ppl", "compression_ratio", "degenerate"},
          {}};
  double base = perplexity(m, in.data()), mean = 0.0, best = INFINITY;
  std::size_t best_block = 0;
  for (std::size_t b : blocks) {
    const auto res = surgery::replace_single(m, b, vt, lambda, in.data());
    t.add({b, res.map.rank(), res.fit_r2, res.heldout_r2, res.ppl, res.delta_ppl, res.compression_ratio,
           res.map.degenerate});
    mean += res.delta_ppl / static_cast<double>(blocks.size());
    if (res.delta_ppl < best) {
      best = res.delta_ppl;
      best_block = b;
    }
  }
  r.tables.push_back(std::move(t));
  r.summary = {{"baseline_ppl", base}, {"mean_delta_ppl", mean}, {"best_block", best_block}};
  return r;
}

Report run_replace_multi(const ExperimentConfig& c, Inputs& in, const fs::path&) {
  const ModelBundle& m = in.model();
  const std::size_t L = m.config.n_blocks;
  const auto blocks = blocks_param(c, "blocks", L, range(std::min<std::size_t>(1, L - 1), L), true);
  const auto trail = surgery::replace_sequential(m, blocks, unit_param(c, "var_threshold", true),
                                                 nonneg_param(c, "lambda"), in.data());
  Report r = start(c);
  Table t{"trail", {"step", "block", "rank", "fit_r2", "heldout_r2", "ppl", "delta_ppl"}, {}};
  bool monotone = true;
  for (std::size_t i = 0; i < trail.steps.size(); ++i) {
    const auto& s = trail.steps[i];
    t.add({i, i == 0 ? json(nullptr) : json(s.block), s.rank, s.fit_r2, s.heldout_r2, s.ppl, s.ppl - trail.baseline_ppl});
    if (i > 0 && s.ppl < trail.steps[i - 1].ppl) monotone = false;
  }
  r.tables.push_back(std::move(t));
  r.summary = {{"baseline_ppl", trail.baseline_ppl},
               {"final_delta_ppl", trail.steps.back().ppl - trail.baseline_ppl},
               {"ppl_monotone", monotone}};
  if (trail.steps.size() > 1) {
    r.summary["heldout_r2_first_step"] = trail.steps[1].heldout_r2;
    r.summary["heldout_r2_last_step"] = trail.steps.back().heldout_r2;
  }
  r.notes["refit"] = "each map is fit on the stream of the already-modified model";
  return r;
}

Report run_easy_tokens(const ExperimentConfig& c, Inputs& in, const fs::path&) {
  const ModelBundle& m = in.model();
  const std::size_t L = m.config.n_blocks;
  const auto late = blocks_param(c, "late_blocks", L, range(L / 2, L), true);
  const double q = unit_param(c, "q");
  const auto scheme = scheme_param(c, "scheme");
  const std::string ref = str_param(c, "reference");
  std::optional<std::vector<double>> reference;
  if (ref == "early") {
    const auto early = surgery::easy_token_fraction(m, range(0, late.size()), scheme, q, in.data());
    reference = early.kl;
  } else if (ref != "self") {
    throw ConfigError({"params.reference: expected \"self\" or \"early\", got \"" + ref + "\""});
  }
  const auto res = surgery::easy_token_fraction(m, late, scheme, q, in.data(), reference);
  Report r = start(c);
  Table t{"kl_quantiles", {"quantile", "kl"}, {}};
  for (double p : {0.1, 0.25, 0.5, 0.75, 0.9}) t.add({p, surgery::quantile_floor(res.kl, p)});
  r.tables.push_back(std::move(t));
  r.summary = {{"easy_fraction", res.fraction},
               {"threshold", res.threshold},
               {"degenerate", res.degenerate},
               {"tokens", res.kl.size()},
               {"late_blocks", late}};
  r.notes["reference"] = ref == "self" ? "quantile of this run's own KL vector (fraction = q by construction)"
                                       : "quantile of the KL vector from destroying the same number of leading blocks";
  return r;
}

exit::TrainOptions train_options(const ExperimentConfig& c) {
  exit::TrainOptions o;
  o.steps = count_param(c, "steps", 0);
  o.lr = real_param(c, "lr");
  if (!(o.lr > 0.0)) throw ConfigError({"params.lr: must be > 0"});
  o.batch_sequences = count_param(c, "batch");
  o.train_gain = c.params.at("train_gain").get<bool>();
  const std::string opt = str_param(c, "optimizer");
  if (opt == "adam") o.optimizer = exit::Optimizer::kAdam;
  else if (opt == "sgd") o.optimizer = exit::Optimizer::kSgd;
  else throw ConfigError({"params.optimizer: expected \"adam\" or \"sgd\", got \"" + opt + "\""});
  return o;
}

std::vector<std::size_t> default_exits(std::size_t L) {
  std::vector<std::size_t> v;
  for (std::size_t b : {L / 3, 2 * L / 3})
    if (b > 0 && b < L && (v.empty() || b > v.back())) v.push_back(b);
  return v;
}

struct TrainedHeads {
  std::vector<exit::ExitHead> naive, trained;
  std::vector<std::pair<double, double>> losses;
};

TrainedHeads train_heads(const ExperimentConfig& c, const ModelBundle& m, const TokenDataset& data) {
  const auto blocks = blocks_param(c, "exit_blocks", m.config.n_blocks, default_exits(m.config.n_blocks), true);
  if (blocks.empty()) throw ConfigError({"params.exit_blocks: at least one exit block required"});
  auto opt = train_options(c);
  TrainedHeads h;
  for (std::size_t b : blocks) {
    opt.seed = Rng::derive(c.seed, 20 + b);
    h.naive.push_back(exit::init_head(m, b));
    auto res = exit::train_head(h.naive.back(), m, data, opt);
    h.trained.push_back(std::move(res.head));
    h.losses.emplace_back(res.losses.empty() ? NAN : res.losses.front(), res.losses.empty() ? NAN : res.losses.back());
  }
  return h;
}

Report run_exit_train(const ExperimentConfig& c, Inputs& in, const fs::path& out_dir) {
  const ModelBundle& m = in.model();
  const TokenDataset& data = in.data();
  const auto heads = train_heads(c, m, data);
  Report r = start(c);
  Table t{"heads", {"block", "naive_agreement", "trained_agreement", "initial_loss", "final_loss"}, {}};
  bool all_ge = true;
  for (std::size_t i = 0; i < heads.trained.size(); ++i) {
    const double a0 = exit::agreement(heads.naive[i], m, data);
    const double a1 = exit::agreement(heads.trained[i], m, data);
    all_ge = all_ge && a1 >= a0;
    t.add({heads.trained[i].attach_block, a0, a1, heads.losses[i].first, heads.losses[i].second});
  }
  r.tables.push_back(std::move(t));
  fs::create_directories(out_dir);
  const auto file = io::exit_heads_to_tensors(heads.trained);
  io::write_tcpf(out_dir / "exit_heads.tcpf", file);
  r.summary = {{"trained_ge_naive_all", all_ge}, {"heads_file", "exit_heads.tcpf"},
               {"heads_hash", report::content_hash(io::encode_tcpf(file))}};
  r.notes["agreement"] = "top-1 agreement with the full model over eval positions";
  return r;
}

Report run_exit_route(const ExperimentConfig& c, Inputs& in, const fs::path&) {
  const ModelBundle& m = in.model();
  const TokenDataset& data = in.data();
  std::vector<exit::ExitHead> heads;
  const std::string path = str_param(c, "heads");
  if (path.empty()) {
    heads = train_heads(c, m, data).trained;
  } else {
    heads = io::exit_heads_from_tensors(io::read_tcpf(path));
    in.add_hash("heads.file", report::content_hash(io::read_file(path)));
  }
  exit::RoutingPolicy policy;
  policy.exits = heads;
  try {
    policy.validate(m.config);
  } catch (const InvalidArgument& e) {
    throw ConfigError({std::string("params.heads: ") + e.what()});
  }
  Report r = start(c);
  Table t{"routing", {"threshold", "ppl", "delta_ppl", "compute_saved"}, {}};
  for (const auto& h : heads) t.columns.push_back("exit_at_" + std::to_string(h.attach_block));
  t.columns.push_back("full_depth");
  bool monotone = true;
  double prev_saved = -1.0, prev_t = INFINITY, base = 0.0;
  for (double th : c.params.at("thresholds").get<std::vector<double>>()) {
    if (!(th > 0.0 && th <= 1.0)) throw ConfigError({"params.thresholds: every value must lie in (0, 1]"});
    policy.threshold = th;
    const auto rep = exit::route(m, policy, data);
    base = rep.baseline_ppl;
    json row = {th, rep.ppl, rep.delta_ppl, rep.compute_saved};
    for (auto n : rep.exit_histogram) row.push_back(n);
    t.add(std::move(row));
    if (th < prev_t && rep.compute_saved < prev_saved) monotone = false;
    prev_saved = rep.compute_saved;
    prev_t = th;
  }
  r.tables.push_back(std::move(t));
  r.summary = {{"baseline_ppl", base}, {"compute_saved_monotone", monotone}};
  r.notes["compute_saved"] = "skipped blocks / (tokens x blocks); exit-head cost not counted";
  r.notes["state"] = "exited tokens keep their exit-block state for later tokens' attention";
  return r;
}

Report run_synth_model(const ExperimentConfig& c, Inputs& in, const fs::path& out_dir) {
  const ModelBundle& m = in.model();
  const TokenDataset& data = in.data();
  fs::create_directories(out_dir);
  const fs::path manifest = out_dir / "synth_model.json";
  io::save_model(m, manifest);
  const auto [stream, split] = io::flatten_dataset(data);
  io::write_toks(out_dir / "synth_model.toks", stream);
  auto man = io::read_manifest(manifest);
  man.weights = "synth_model.tcpf";
  man.tokens = "synth_model.toks";
  man.splits = split;
  io::write_manifest(manifest, man);

  Report r = start(c);
  Table t{"files", {"file", "hash"}, {}};
  for (const char* f : {"synth_model.tcpf", "synth_model.toks"})
    t.add({f, report::content_hash(io::read_file(out_dir / f))});
  r.tables.push_back(std::move(t));
  std::size_t params = m.embedding.size() + m.pos_embedding.size() + m.head.size();
  for (std::size_t b = 0; b < m.config.n_blocks; ++b) params += m.block_parameter_count(b);
  r.summary = {{"manifest", "synth_model.json"}, {"parameters", params}, {"baseline_ppl", perplexity(m, data)}};
  return r;
}

struct GuidanceRow {
  const char* finding;
  const char* implication;
  const char* recommendation;
  const char* source;
  const char* metric;
};

const GuidanceRow kGuidance[] = {
    {"1. Variance ≠ importance",
     "PCA, activation magnitude, and output variance are poor proxies for which dimensions to compress",
     "Use downstream-aware importance metrics or compress uniformly via quantization", "cca-overlap",
     "pca_cca_overlap"},
    {"2. Conditional linearity",
     "Single-block linear replacement works; multi-block fails due to distribution shift",
     "Limit linear approximation to ≤ 1 contiguous block; prefer direct quantization for multi-block compression",
     "replace-multi", "final_delta_ppl"},
    {"3. Reconstruction wall", "Factored quantization amplifies errors through cross-terms",
     "Quantize weights directly (GPTQ, AWQ) rather than factoring first", "wall", "direct_best_fraction"},
    {"4. Linearity gradient",
     "Early blocks are nonlinear (must preserve); late blocks are near-linear (safe to compress)",
     "Allocate compression budget unevenly: protect early blocks, compress late blocks more aggressively",
     "linearity", "late_minus_early_heldout_r2"},
    {"5. 30% easy tokens", "A substantial fraction of tokens require minimal computation",
     "Invest in adaptive per-token computation (early exit, speculative decoding) rather than static compression alone",
     "easy-tokens", "easy_fraction"},
};

Report run_report_merge(const ExperimentConfig& c, Inputs& in, const fs::path& out_dir) {
  auto paths = c.params.at("inputs").get<std::vector<std::string>>();
  if (paths.empty())
    for (const auto& g : kGuidance) paths.push_back((out_dir / (std::string(g.source) + ".json")).string());
  std::vector<std::string> missing;
  for (const auto& p : paths)
    if (!fs::is_regular_file(p)) missing.push_back("params.inputs: no such report " + p);
  if (!missing.empty()) throw ConfigError(missing);

  std::map<std::string, Report> by_sub;
  json sources = json::object();
  for (const auto& p : paths) {
    const auto bytes = io::read_file(p);
    json j;
    try {
      j = json::parse(bytes);
    } catch (const json::parse_error& e) {
      throw ConfigError({"params.inputs: " + p + ": " + e.what()});
    }
    Report rep = report::from_json(j);
    sources[rep.subcommand] = report::without_timings(j);
    in.add_hash("report." + rep.subcommand, report::content_hash(sources[rep.subcommand].dump()));
    by_sub[rep.subcommand] = std::move(rep);
  }
  Report r = start(c);
  Table t{"guidance", {"finding", "implication", "recommendation", "metric", "value", "source"}, {}};
  std::size_t filled = 0;
  for (const auto& g : kGuidance) {
    json value = nullptr;
    if (auto it = by_sub.find(g.source); it != by_sub.end() && it->second.summary.contains(g.metric)) {
      value = it->second.summary.at(g.metric);
      ++filled;
    }
    t.add({g.finding, g.implication, g.recommendation, g.metric, value, g.source});
  }
  r.tables.push_back(std::move(t));
  r.summary = {{"rows", std::size(kGuidance)}, {"rows_with_values", filled}};
  r.extra["sources"] = std::move(sources);
  r.notes["inputs"] = "report hashes cover each input report without its timings";
  return r;
}

// ---------------------------------------------------------------------------
// Subcommand table

ParamSpec P(std::string name, ParamType type, json def, std::string help) {
  return {std::move(name), type, std::move(def), std::move(help)};
}

std::vector<ParamSpec> train_params() {
  return {P("exit_blocks", ParamType::kIntList, nullptr, "exit blocks, ascending (default L/3, 2L/3)"),
          P("steps", ParamType::kInt, 500, "training steps per head"),
          P("lr", ParamType::kReal, 1e-3, "learning rate"),
          P("batch", ParamType::kInt, 32, "sequences per batch"),
          P("train_gain", ParamType::kBool, true, "also train the head's norm gain"),
          P("optimizer", ParamType::kString, "adam", "adam or sgd")};
}

std::vector<Subcommand> build_table() {
  using T = ParamType;
  const auto vt = P("var_threshold", T::kReal, probes::kDefaultVarThreshold, "residual energy kept by the map rank");
  const auto lam = P("lambda", T::kReal, probes::kDefaultLambda, "ridge penalty");
  const auto src = [](const char* def) {
    return P("source", T::kString, def, "synthetic ensemble or the model's weight matrices");
  };
  std::vector<Subcommand> t = {
      {"linearity", "per-block linear-replacement R^2", {vt, lam}, true, run_linearity},
      {"pca-dims", "PCA dimensionality of the residual stream",
       {P("thresholds", T::kRealList, json::array({0.90, 0.95, 0.99}), "variance thresholds")}, true, run_pca_dims},
      {"project-ppl", "perplexity after projecting the stream onto top-k PCA directions",
       {P("first", T::kInt, 0, "first block of the range"),
        P("last", T::kInt, nullptr, "end of the range, exclusive (default first + 3)"),
        P("ks", T::kIntList, nullptr, "kept dimensions (default d x {8, 64, 256, 768}/768)")},
       true, run_project_ppl},
      {"sensitivity", "perturbation sensitivity of principal directions",
       {P("block", T::kInt, nullptr, "block whose output is perturbed (default L/2)"),
        P("directions", T::kInt, 8, "leading principal directions probed"),
        P("sigma", T::kReal, 0.01, "noise scale as a fraction of the token norm"),
        P("draws", T::kInt, static_cast<std::int64_t>(probes::kSensitivityDraws), "noise draws per token")},
       true, run_sensitivity},
      {"cca-overlap", "CCA vs PCA directions linking two blocks",
       {P("block_b", T::kInt, nullptr, "earlier block (default 1)"),
        P("block_B", T::kInt, nullptr, "later block (default L - 1)"),
        P("ks", T::kIntList, json::array({1, 2, 4, 8}), "subspace sizes"),
        P("ridge", T::kReal, probes::kCcaRidge, "CCA covariance ridge"), lam},
       true, run_cca_overlap},
      {"wall", "direct INT4 vs factored reconstructions at a matched budget",
       {src("synthetic"), P("trials", T::kInt, 50, "synthetic trials"), P("size", T::kInt, 128, "matrix size"),
        P("samples", T::kInt, 512, "activation rows"), P("budget", T::kReal, 4.0, "bits per weight")},
       false, run_wall},
      {"cross-terms", "error decomposition of quantized products",
       {src("synthetic"), P("triples", T::kInt, 100, "synthetic pairs"), P("size", T::kInt, 32, "matrix size"),
        P("schemes", T::kStringList, json::array({"int4", "int4/g32", "kmeans16", "nf4/g64"}), "schemes, cycled")},
       false, run_cross_terms},
      {"kmeans-compare", "Lloyd-Max codebooks vs uniform grids",
       {src("synthetic"), P("tensors", T::kInt, 100, "synthetic tensors (even: Gaussian, odd: trained-like)"),
        P("rows", T::kInt, 64, "rows"), P("cols", T::kInt, 64, "columns"),
        P("group_sizes", T::kIntList, json::array({0, 64}), "group sizes, 0 = whole tensor"),
        P("levels", T::kInt, 16, "codebook levels")},
       false, run_kmeans_compare},
      {"dct-analyze", "2-D DCT energy concentration of weight matrices",
       {src("model"), P("tensors", T::kInt, 8, "synthetic tensors"), P("size", T::kInt, 64, "synthetic size")},
       true, run_dct_analyze},
      {"destroy-map", "per-component destruction KL",
       {P("scheme", T::kString, "int2", "destruction scheme, per row")}, true, run_destroy_map},
      {"ablate", "skip and mean ablation of components",
       {P("blocks", T::kIntList, nullptr, "blocks (default all)"),
        P("components", T::kStringList, json::array({"attn", "mlp"}), "attn and/or mlp"),
        P("modes", T::kStringList, json::array({"skip", "mean"}), "skip and/or mean")},
       true, run_ablate},
      {"replace", "single-block linear replacement", {P("blocks", T::kIntList, nullptr, "blocks (default all)"), vt, lam},
       true, run_replace},
      {"replace-multi", "sequential multi-block linear replacement",
       {P("blocks", T::kIntList, nullptr, "ascending blocks (default 1 .. L-1)"), vt, lam}, true, run_replace_multi},
      {"easy-tokens", "tokens barely affected by destroying late blocks",
       {P("late_blocks", T::kIntList, nullptr, "destroyed blocks (default second half)"),
        P("q", T::kReal, 0.5, "quantile of the reference KL"), P("scheme", T::kString, "int2", "destruction scheme"),
        P("reference", T::kString, "self", "self or early")},
       true, run_easy_tokens},
      {"exit-train", "train exit heads and measure agreement", train_params(), true, run_exit_train},
      {"exit-route", "multi-exit confidence routing sweep", train_params(), true, run_exit_route},
      {"synth-model", "write a seeded synthetic model and dataset", {}, true, run_synth_model},
      {"report-merge", "assemble the findings-to-guidance table",
       {P("inputs", T::kStringList, json::array(), "report paths (default the five finding reports in the out dir)")},
       false, run_report_merge},
  };
  auto& route = t[15].params;
  route.push_back(P("heads", T::kString, "", "exit heads file from exit-train (default: train here)"));
  route.push_back(P("thresholds", T::kRealList, json::array({1.0, 0.95, 0.8, 0.7, 0.5}), "confidence thresholds"));
  return t;
}

// ---------------------------------------------------------------------------
// Config checks

bool type_ok(ParamType t, const json& v) {
  auto elems = [&](auto pred) { return v.is_array() && std::all_of(v.begin(), v.end(), pred); };
  switch (t) {
    case ParamType::kInt: return v.is_number_integer();
    case ParamType::kReal: return v.is_number();
    case ParamType::kString: return v.is_string();
    case ParamType::kBool: return v.is_boolean();
    case ParamType::kIntList: return elems([](const json& e) { return e.is_number_integer(); });
    case ParamType::kRealList: return elems([](const json& e) { return e.is_number(); });
    case ParamType::kStringList: return elems([](const json& e) { return e.is_string(); });
  }
  return false;
}

const char* type_name(ParamType t) {
  switch (t) {
    case ParamType::kInt: return "an integer";
    case ParamType::kReal: return "a number";
    case ParamType::kString: return "a string";
    case ParamType::kBool: return "a boolean";
    case ParamType::kIntList: return "a list of integers";
    case ParamType::kRealList: return "a list of numbers";
    case ParamType::kStringList: return "a list of strings";
  }
  return "?";
}

bool is_uint(const json& v) { return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0); }

void check_path(const json& v, const std::string& field, std::vector<std::string>& issues) {
  const std::string p = v.get<std::string>();
  if (!fs::is_regular_file(p)) issues.push_back(field + ": no such file " + p);
}

}  // namespace

const std::vector<Subcommand>& subcommands() {
  static const std::vector<Subcommand> table = build_table();
  return table;
}

const Subcommand& find_subcommand(const std::string& name) {
  for (const auto& s : subcommands())
    if (s.name == name) return s;
  throw ConfigError({"subcommand: unknown \"" + name + "\""});
}

json parse_param_value(const ParamSpec& spec, const std::string& text) {
  auto fail = [&](const std::string& why) -> ConfigError {
    return ConfigError({"--" + spec.name + ": " + why + " (got \"" + text + "\")"});
  };
  auto one_int = [&](const std::string& s) -> json {
    std::size_t used = 0;
    long long v = 0;
    try {
      v = std::stoll(s, &used);
    } catch (const std::exception&) {
      throw fail("expected an integer");
    }
    if (used != s.size()) throw fail("expected an integer");
    return v;
  };
  auto one_real = [&](const std::string& s) -> json {
    std::size_t used = 0;
    double v = 0;
    try {
      v = std::stod(s, &used);
    } catch (const std::exception&) {
      throw fail("expected a number");
    }
    if (used != s.size()) throw fail("expected a number");
    return v;
  };
  auto split = [](const std::string& s) {
    std::vector<std::string> out;
    if (s.empty()) return out;
    std::size_t start = 0;
    while (true) {
      const auto comma = s.find(',', start);
      out.push_back(s.substr(start, comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    return out;
  };
  if (text == "auto" && spec.default_value.is_null()) return nullptr;
  switch (spec.type) {
    case ParamType::kInt: return one_int(text);
    case ParamType::kReal: return one_real(text);
    case ParamType::kString: return text;
    case ParamType::kBool:
      if (text == "true" || text == "1") return true;
      if (text == "false" || text == "0") return false;
      throw fail("expected true or false");
    case ParamType::kIntList: {
      json a = json::array();
      for (const auto& s : split(text)) a.push_back(one_int(s));
      return a;
    }
    case ParamType::kRealList: {
      json a = json::array();
      for (const auto& s : split(text)) a.push_back(one_real(s));
      return a;
    }
    case ParamType::kStringList: {
      json a = json::array();
      for (const auto& s : split(text)) a.push_back(s);
      return a;
    }
  }
  return nullptr;
}

ExperimentConfig resolve_config(const Subcommand& sub, const json& document, const json& overrides) {
  std::vector<std::string> issues;
  if (!document.is_object()) throw ConfigError({"config: expected a JSON object"});
  json doc = document;
  for (const auto& [key, value] : overrides.items()) {
    if (key == "params" && doc.contains("params") && doc["params"].is_object()) {
      for (const auto& [k, v] : value.items()) doc["params"][k] = v;
    } else {
      doc[key] = value;
    }
  }
  static const std::set<std::string> top = {"seed", "experiment", "model", "tokens", "params"};
  for (const auto& [key, value] : doc.items())
    if (!top.count(key)) issues.push_back(key + ": unknown field");

  ExperimentConfig c;
  c.subcommand = sub.name;
  if (!doc.contains("seed")) {
    issues.push_back("seed: required (config \"seed\" or --seed)");
  } else if (!is_uint(doc["seed"])) {
    issues.push_back("seed: expected a non-negative integer");
  } else {
    c.seed = doc["seed"].get<std::uint64_t>();
  }
  c.experiment = sub.name;
  if (doc.contains("experiment")) {
    if (doc["experiment"].is_string()) c.experiment = doc["experiment"].get<std::string>();
    else issues.push_back("experiment: expected a string");
  }

  // model
  c.model = doc.contains("model") ? doc["model"] : json{{"synth", json::object()}};
  if (c.model.is_string()) {
    check_path(c.model, "model", issues);
  } else if (c.model.is_object() && c.model.size() == 1 && c.model.contains("synth") && c.model["synth"].is_object()) {
    json& s = c.model["synth"];
    for (const auto& [k, v] : s.items())
      if (k != "seed" && k != "config") issues.push_back("model.synth." + k + ": unknown field");
    if (!s.contains("seed")) s["seed"] = Rng::derive(c.seed, 0);
    else if (!is_uint(s["seed"])) issues.push_back("model.synth.seed: expected a non-negative integer");
    if (s.contains("config") && !s["config"].is_object()) {
      issues.push_back("model.synth.config: expected an object");
    } else {
      try {
        Inputs::synth_config(s);
      } catch (const InvalidArgument& e) {
        issues.push_back(std::string("model.synth.") + e.what());
      }
    }
  } else {
    issues.push_back("model: expected a path or {\"synth\": {...}}");
  }

  // tokens
  if (doc.contains("tokens") && !doc["tokens"].is_null()) {
    c.tokens = doc["tokens"];
  } else if (!c.model.is_string()) {
    c.tokens = {{"synth", json::object()}};
  }
  if (c.tokens.is_string()) {
    check_path(c.tokens, "tokens", issues);
  } else if (c.tokens.is_object()) {
    if (c.tokens.size() != 1 || !c.tokens.contains("synth") || !c.tokens["synth"].is_object()) {
      issues.push_back("tokens: expected a path or {\"synth\": {...}}");
    } else {
      json& s = c.tokens["synth"];
      const json defaults = {{"kind", "sample"},   {"seq_len", 16},
                             {"calibration", 64},  {"eval", 32},
                             {"seed", Rng::derive(c.seed, 1)}, {"temperature", 1.0}};
      for (const auto& [k, v] : s.items())
        if (!defaults.contains(k)) issues.push_back("tokens.synth." + k + ": unknown field");
      for (const auto& [k, v] : defaults.items())
        if (!s.contains(k)) s[k] = v;
      if (!s["kind"].is_string() || (s["kind"] != "sample" && s["kind"] != "random"))
        issues.push_back("tokens.synth.kind: expected \"sample\" or \"random\"");
      for (const char* k : {"seq_len", "calibration", "eval"})
        if (!is_uint(s[k]) || s[k].get<std::int64_t>() < (std::string(k) == "seq_len" ? 2 : 1))
          issues.push_back(std::string("tokens.synth.") + k + ": expected a positive integer");
      if (!is_uint(s["seed"])) issues.push_back("tokens.synth.seed: expected a non-negative integer");
      if (!s["temperature"].is_number() || !(s["temperature"].get<double>() > 0.0))
        issues.push_back("tokens.synth.temperature: expected a positive number");
    }
  } else if (!c.tokens.is_null()) {
    issues.push_back("tokens: expected a path or {\"synth\": {...}}");
  }

  // params
  const json given = doc.contains("params") ? doc["params"] : json::object();
  if (!given.is_object()) {
    issues.push_back("params: expected an object");
  } else {
    for (const auto& [k, v] : given.items()) {
      const bool known = std::any_of(sub.params.begin(), sub.params.end(), [&](const ParamSpec& p) { return p.name == k; });
      if (!known) issues.push_back("params." + k + ": unknown parameter for " + sub.name);
    }
    for (const auto& p : sub.params) {
      if (!given.contains(p.name)) {
        c.params[p.name] = p.default_value;
        continue;
      }
      const json& v = given[p.name];
      if (v.is_null() && p.default_value.is_null()) {
        c.params[p.name] = nullptr;
      } else if (!type_ok(p.type, v)) {
        issues.push_back("params." + p.name + ": expected " + type_name(p.type) + ", got " + v.dump());
      } else {
        c.params[p.name] = v;
      }
    }
  }
  if (!issues.empty()) throw ConfigError(std::move(issues));
  return c;
}

Report run(const ExperimentConfig& config, const fs::path& out_dir) {
  const Subcommand& sub = find_subcommand(config.subcommand);
  const auto t0 = std::chrono::steady_clock::now();
  Inputs in(config);
  Report r = sub.run(config, in, out_dir);
  r.subcommand = config.subcommand;
  r.config = config.to_json();
  r.inputs.update(in.hashes());
  r.timings["total_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  r.timings["load_seconds"] = in.load_seconds();
  r.timings["threads"] = omp_get_max_threads();
  report::write_report(r, out_dir);
  return r;
}

quant::QuantScheme parse_scheme(const std::string& label) {
  std::string body = label;
  std::optional<std::size_t> group;
  if (const auto slash = label.find("/g"); slash != std::string::npos) {
    body = label.substr(0, slash);
    const std::string g = label.substr(slash + 2);
    if (g.empty() || g.find_first_not_of("0123456789") != std::string::npos || std::stoull(g) == 0)
      throw InvalidArgument("bad group size in scheme \"" + label + "\"");
    group = std::stoull(g);
  }
  auto number = [&](std::size_t prefix) {
    const std::string n = body.substr(prefix);
    if (n.empty() || n.size() > 3 || n.find_first_not_of("0123456789") != std::string::npos)
      throw InvalidArgument("bad scheme \"" + label + "\" (expected intB, kmeansK or nf4, optionally /gN)");
    return static_cast<unsigned>(std::stoul(n));
  };
  quant::QuantScheme s;
  if (body == "nf4") s = quant::QuantScheme::nf4(group);
  else if (body.rfind("kmeans", 0) == 0) s = quant::QuantScheme::kmeans(number(6), group);
  else if (body.rfind("int", 0) == 0) s = quant::QuantScheme::uniform(number(3), group);
  else throw InvalidArgument("bad scheme \"" + label + "\" (expected intB, kmeansK or nf4, optionally /gN)");
  s.validate(group.value_or(1) * 1024);
  return s;
}

}  // namespace tcprof::experiments
