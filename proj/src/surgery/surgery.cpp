#include "tcprof/surgery.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "tcprof/errors.hpp"
#include "tcprof/kernels.hpp"
#include "tcprof/linalg.hpp"
#include "tcprof/rng.hpp"
#include "tcprof/spectral.hpp"

namespace tcprof::surgery {
namespace {

using kernels::matmul;
using kernels::matmul_nt;
using kernels::matmul_tn;
using quant::QuantScheme;

std::vector<Matrix> eval_logprobs(const ModelBundle& model, const TokenDataset& data, Split split) {
  const auto& seqs = data.split(split);
  if (seqs.empty()) throw InvalidArgument(std::string(to_string(split)) + " split is empty");
  std::vector<Matrix> out(seqs.size());
  const auto n = static_cast<std::ptrdiff_t>(seqs.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t si = 0; si < n; ++si) {
    const auto i = static_cast<std::size_t>(si);
    const Matrix logits = forward(model, seqs[i]);
    const std::size_t positions = seqs[i].size() - 1;
    Matrix lp(positions, logits.cols());
    for (std::size_t t = 0; t < positions; ++t) {
      const auto row = log_softmax(logits.row(t));
      std::copy(row.begin(), row.end(), lp.row(t).begin());
    }
    out[i] = std::move(lp);
  }
  return out;
}

std::vector<double> kl_against(const std::vector<Matrix>& ref, const ModelBundle& modified,
                               const TokenDataset& data, Split split) {
  const auto mod = eval_logprobs(modified, data, split);
  std::vector<double> kl;
  for (std::size_t i = 0; i < ref.size(); ++i)
    for (std::size_t t = 0; t < ref[i].rows(); ++t) kl.push_back(kl_divergence(ref[i].row(t), mod[i].row(t)));
  return kl;
}

double mean(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

QuantizeComponent destroy_action(const QuantScheme& scheme) { return {scheme, true}; }

void check_budget(const std::string& method, double bpw, double target) {
  if (std::abs(bpw - target) > kWallBudgetTolerance * target) {
    throw InvalidArgument("reconstruction_wall: " + method + " uses " + std::to_string(bpw) +
                          " bits/weight, more than 2% from the " + std::to_string(target) +
                          "-bit budget");
  }
}

}  // namespace

// ---------------------------------------------------------------------------

ReplaceResult replace_single(const ModelBundle& model, std::size_t block, double var_threshold,
                             double lambda, const TokenDataset& data) {
  if (block >= model.config.n_blocks) throw InvalidArgument("replace_single: block out of range");
  const std::size_t blocks[] = {block};
  const auto fit = capture_traces(model, data, blocks, Split::kCalibration);
  const auto held = capture_traces(model, data, blocks, Split::kEval);
  ReplaceResult r;
  r.map = probes::fit_block_linear(fit[0], var_threshold, lambda);
  r.fit_r2 = r.map.r2;
  r.heldout_r2 = probes::map_r2(r.map, held[0]);
  SurgeryPlan plan;
  plan.replace_block(r.map);
  r.model = apply_surgery(model, plan);
  r.baseline_ppl = perplexity(model, data);
  r.ppl = perplexity(r.model, data);
  r.delta_ppl = r.ppl - r.baseline_ppl;
  const auto params = r.map.parameter_count();
  r.compression_ratio =
      params == 0 ? 0.0 : static_cast<double>(model.block_parameter_count(block)) / static_cast<double>(params);
  return r;
}

ReplacementTrail replace_sequential(const ModelBundle& model, const std::vector<std::size_t>& blocks,
                                    double var_threshold, double lambda, const TokenDataset& data) {
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    if (blocks[i] >= model.config.n_blocks || (i > 0 && blocks[i] <= blocks[i - 1])) {
      throw InvalidArgument("replace_sequential: blocks must be strictly ascending and in range");
    }
  }
  ReplacementTrail trail;
  trail.baseline_ppl = perplexity(model, data);
  trail.steps.push_back({0, 0, 1.0, 1.0, trail.baseline_ppl});
  ModelBundle current = model;
  for (std::size_t b : blocks) {
    const std::size_t one[] = {b};
    const auto fit = capture_traces(current, data, one, Split::kCalibration);
    const auto held = capture_traces(current, data, one, Split::kEval);
    const auto map = probes::fit_block_linear(fit[0], var_threshold, lambda);
    const double heldout = probes::map_r2(map, held[0]);
    SurgeryPlan plan;
    plan.replace_block(map);
    current = apply_surgery(current, plan);
    trail.steps.push_back({b, map.rank(), map.r2, heldout, perplexity(current, data)});
  }
  return trail;
}

std::vector<ProjectionRow> pca_projection_ppl(const ModelBundle& model, std::size_t first,
                                              std::size_t last, const std::vector<std::size_t>& ks,
                                              const TokenDataset& data) {
  if (first >= last || last > model.config.n_blocks) {
    throw InvalidArgument("pca_projection_ppl: block range must be non-empty and within [0, L)");
  }
  for (std::size_t k : ks) {
    if (k > model.config.d_model) throw InvalidArgument("pca_projection_ppl: k exceeds d_model");
  }
  std::vector<std::size_t> blocks(last - first);
  std::iota(blocks.begin(), blocks.end(), first);
  const auto traces = capture_traces(model, data, blocks, Split::kCalibration);
  std::vector<probes::PcaResult> pcas;
  for (const auto& t : traces) pcas.push_back(probes::pca_dimensionality(t.x_out));

  std::vector<ProjectionRow> rows;
  for (std::size_t k : ks) {
    SurgeryPlan plan;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      plan.project_after(blocks[i], ProjectResidual{pcas[i].directions, k, pcas[i].mean});
    }
    rows.push_back({k, perplexity(apply_surgery(model, plan), data)});
  }
  return rows;
}

// ---------------------------------------------------------------------------

double high_fraction(unsigned high_bits, unsigned low_bits, double budget_bits) {
  if (high_bits <= low_bits) throw InvalidArgument("rotate_mixed: high_bits must exceed low_bits");
  if (budget_bits < low_bits || budget_bits > high_bits) {
    throw InvalidArgument("rotate_mixed: budget must lie between low_bits and high_bits");
  }
  return (budget_bits - low_bits) / static_cast<double>(high_bits - low_bits);
}

RotatedMixed rotate_mixed(const Matrix& w, const Matrix& acts, RotationBasis basis,
                          unsigned high_bits, unsigned low_bits, double budget_bits) {
  const std::size_t n = w.cols();
  if (acts.cols() != n) throw InvalidArgument("rotate_mixed: activation width != W input dimension");
  const double p = high_fraction(high_bits, low_bits, budget_bits);

  Matrix r;
  switch (basis) {
    case RotationBasis::kIdentity:
      r = Matrix::identity(n);
      break;
    case RotationBasis::kPca:
      r = probes::pca_dimensionality(acts).directions.basis;
      break;
    case RotationBasis::kCca: {
      const auto c = probes::cca(acts, matmul_nt(acts, w), std::min(n, w.rows()));
      r = probes::cca_directions(c).basis;
      if (r.cols() != n) throw InvalidArgument("rotate_mixed: CCA basis is not complete (W has fewer rows than columns)");
      break;
    }
  }
  if (r.rows() != n || r.cols() != n || linalg::orthonormality_error(r) > 1e-8) {
    throw InvalidArgument("rotate_mixed: rotation basis is not orthonormal");
  }

  const Matrix wr = matmul(w, r);
  const std::size_t nh = std::min(n, static_cast<std::size_t>(std::llround(p * static_cast<double>(n))));
  RotatedMixed out;
  out.high_columns = nh;
  Matrix q(wr.rows(), n);
  std::vector<quant::BitBudget> parts;
  auto place = [&](std::size_t first, std::size_t count, unsigned bits) {
    if (count == 0) return;
    const auto qt = quant::quantize(slice_cols(wr, first, count), QuantScheme::uniform(bits));
    parts.push_back(quant::bit_budget(qt));
    const Matrix deq = quant::dequantize(qt);
    for (std::size_t i = 0; i < q.rows(); ++i)
      for (std::size_t j = 0; j < count; ++j) q(i, first + j) = deq(i, j);
  };
  place(0, nh, high_bits);
  place(nh, n - nh, low_bits);
  out.budget = quant::combine_budgets(parts, w.size());
  out.reconstruction = matmul_nt(q, r);
  return out;
}

const WallRow& WallResult::row(const std::string& method) const {
  for (const auto& r : rows)
    if (r.method == method) return r;
  throw InvalidArgument("WallResult: no method " + method);
}

const WallRow& WallResult::best() const {
  if (rows.empty()) throw InvalidArgument("WallResult: empty");
  const WallRow* b = &rows.front();
  for (const auto& r : rows)
    if (r.output_mse < b->output_mse) b = &r;
  return *b;
}

WallResult reconstruction_wall(const Matrix& w, const Matrix& x, double budget_bits) {
  if (x.rows() == 0 || x.cols() != w.cols()) {
    throw InvalidArgument("reconstruction_wall: X must be n x in_dim with n >= 1");
  }
  require_finite(w, "reconstruction_wall W");
  require_finite(x, "reconstruction_wall X");
  const auto bits = static_cast<unsigned>(std::llround(budget_bits));
  WallResult res;
  auto add = [&](std::string method, Matrix recon, double bpw) {
    check_budget(method, bpw, budget_bits);
    const double mse = quant::output_mse(w, recon, x);
    res.rows.push_back({std::move(method), mse, bpw, std::move(recon)});
  };

  const auto direct = quant::quantize(w, QuantScheme::uniform(bits));
  add("direct_int4", quant::dequantize(direct), quant::bit_budget(direct).bits_per_weight);

  const auto dct = spectral::dct_compress(w, kDctKeepFraction, QuantScheme::uniform(kDctInnerBits));
  add("dct_int4", dct.reconstruction, dct.budget.bits_per_weight);
  const auto full = spectral::dct_compress(w, 1.0, QuantScheme::uniform(bits));
  check_budget("dct_full_int4", full.budget.bits_per_weight, budget_bits);
  res.dct_full = {"dct_full_int4", quant::output_mse(w, full.reconstruction, x),
                  full.budget.bits_per_weight, full.reconstruction};

  const std::size_t m = w.rows(), n = w.cols();
  const std::size_t rank = std::max<std::size_t>(1, (m * n) / (m + n));
  const auto svd = linalg::svd_thin(w, rank);
  Matrix a = svd.u, b = transpose(svd.v);
  for (std::size_t j = 0; j < rank; ++j) {
    const double s = std::sqrt(svd.s[j]);
    for (std::size_t i = 0; i < m; ++i) a(i, j) *= s;
    for (std::size_t i = 0; i < n; ++i) b(j, i) *= s;
  }
  const auto qa = quant::quantize(a, QuantScheme::uniform(bits));
  const auto qb = quant::quantize(b, QuantScheme::uniform(bits));
  const quant::BitBudget svd_parts[] = {quant::bit_budget(qa), quant::bit_budget(qb)};
  add("svd_int4", matmul(quant::dequantize(qa), quant::dequantize(qb)),
      quant::combine_budgets(svd_parts, w.size()).bits_per_weight);

  const auto rm = rotate_mixed(w, x, RotationBasis::kPca, 8, 2, budget_bits);
  add("rotated_mixed", rm.reconstruction, rm.budget.bits_per_weight);
  return res;
}

Matrix trained_like_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed, double noise_scale,
                           double column_log_sd) {
  Rng rng(seed);
  const std::size_t r = std::max<std::size_t>(1, std::min(rows, cols) / 8);
  const Matrix left = rng.gaussian(rows, r, 1.0 / std::sqrt(static_cast<double>(r)));
  const Matrix right = rng.gaussian(r, cols, 1.0);
  Matrix w = matmul(left, right) + noise_scale * rng.gaussian(rows, cols, 1.0);
  for (std::size_t j = 0; j < cols; ++j) {
    const double s = std::exp(column_log_sd * rng.normal());
    for (std::size_t i = 0; i < rows; ++i) w(i, j) *= s;
  }
  return w;
}

Matrix trained_like_activations(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  Rng rng(seed);
  Matrix x = rng.gaussian(rows, cols, 1.0);
  for (std::size_t j = 0; j < cols; ++j) {
    const double s = std::exp(0.5 * rng.normal());
    for (std::size_t i = 0; i < rows; ++i) x(i, j) *= s;
  }
  return x;
}

CrossTermReport cross_terms(const Matrix& a, const Matrix& b, const QuantScheme& scheme) {
  if (a.cols() != b.rows()) throw InvalidArgument("cross_terms: A cols != B rows");
  const Matrix qa = quant::fake_quantize(a, scheme);
  const Matrix qb = quant::fake_quantize(b, scheme);
  const Matrix ea = qa - a;
  const Matrix eb = qb - b;
  const Matrix t1 = matmul(ea, b);
  const Matrix t2 = matmul(a, eb);
  const Matrix t3 = matmul(ea, eb);
  const Matrix total = matmul(qa, qb) - matmul(a, b);
  CrossTermReport r;
  r.eps_a_b_norm = frobenius_norm(t1);
  r.a_eps_b_norm = frobenius_norm(t2);
  r.eps_eps_norm = frobenius_norm(t3);
  r.total_error_norm = frobenius_norm(total);
  const double resid = frobenius_norm(total - (t1 + t2 + t3));
  r.identity_residual = r.total_error_norm > 0.0 ? resid / r.total_error_norm : resid;
  return r;
}

// ---------------------------------------------------------------------------

double kl_divergence(std::span<const double> logp, std::span<const double> logq) {
  if (logp.size() != logq.size()) throw InvalidArgument("kl_divergence: length mismatch");
  double kl = 0.0;
  for (std::size_t i = 0; i < logp.size(); ++i) {
    const double p = std::exp(logp[i]);
    if (p > 0.0) kl += p * (logp[i] - logq[i]);
  }
  return std::max(kl, 0.0);
}

std::vector<double> token_kl(const ModelBundle& reference, const ModelBundle& modified,
                             const TokenDataset& data, Split split) {
  return kl_against(eval_logprobs(reference, data, split), modified, data, split);
}

double DestructionMap::at(std::size_t block, Component c) const {
  for (const auto& cell : cells)
    if (cell.block == block && cell.component == c) return cell.kl;
  throw InvalidArgument("DestructionMap: no such cell");
}

DestructionMap destroy_components(const ModelBundle& model, const QuantScheme& scheme,
                                  const TokenDataset& data) {
  const auto ref = eval_logprobs(model, data, Split::kEval);
  DestructionMap map;
  for (std::size_t b = 0; b < model.config.n_blocks; ++b) {
    for (Component c : {Component::kAttn, Component::kMlp}) {
      SurgeryPlan plan;
      plan.set_component(b, c, destroy_action(scheme));
      map.cells.push_back({b, c, mean(kl_against(ref, apply_surgery(model, plan), data, Split::kEval))});
    }
  }
  return map;
}

std::vector<double> component_mean(const ModelBundle& model, std::size_t block, Component c,
                                   const TokenDataset& data) {
  if (block >= model.config.n_blocks) throw InvalidArgument("component_mean: block out of range");
  const auto& seqs = data.calibration;
  if (seqs.empty()) throw InvalidArgument("component_mean: calibration split is empty");
  const std::size_t d = model.config.d_model;
  std::vector<std::vector<double>> sums(seqs.size(), std::vector<double>(d, 0.0));
  const auto n = static_cast<std::ptrdiff_t>(seqs.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t si = 0; si < n; ++si) {
    const auto i = static_cast<std::size_t>(si);
    const Matrix x = run_blocks(model, 0, block, embed(model, seqs[i]));
    const auto parts = block_parts(model, block, x);
    const Matrix& out = c == Component::kAttn ? parts.attn : parts.mlp;
    for (std::size_t t = 0; t < out.rows(); ++t)
      for (std::size_t j = 0; j < d; ++j) sums[i][j] += out(t, j);
  }
  std::vector<double> m(d, 0.0);
  for (const auto& s : sums)
    for (std::size_t j = 0; j < d; ++j) m[j] += s[j];
  const double count = static_cast<double>(data.token_count(Split::kCalibration));
  for (double& v : m) v /= count;
  return m;
}

AblationResult ablate_component(const ModelBundle& model, std::size_t block, Component c,
                                AblationMode mode, const TokenDataset& data) {
  if (block >= model.config.n_blocks) throw InvalidArgument("ablate_component: block out of range");
  SurgeryPlan plan;
  if (mode == AblationMode::kSkip) {
    plan.set_component(block, c, SkipComponent{});
  } else {
    plan.set_component(block, c, MeanAblateComponent{component_mean(model, block, c, data)});
  }
  AblationResult r;
  r.model = apply_surgery(model, plan);
  r.baseline_ppl = perplexity(model, data);
  r.ppl = perplexity(r.model, data);
  r.delta_ppl = r.ppl - r.baseline_ppl;
  return r;
}

double quantile_floor(std::vector<double> values, double q) {
  if (values.empty()) throw InvalidArgument("quantile: empty input");
  if (!(q > 0.0 && q < 1.0)) throw InvalidArgument("quantile: q must lie in (0, 1)");
  const auto idx = std::min(values.size() - 1,
                            static_cast<std::size_t>(std::floor(q * static_cast<double>(values.size()))));
  std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(idx), values.end());
  return values[idx];
}

EasyTokenResult easy_token_fraction(const ModelBundle& model, const std::vector<std::size_t>& late_blocks,
                                    const QuantScheme& scheme, double q, const TokenDataset& data,
                                    const std::optional<std::vector<double>>& reference) {
  if (!(q > 0.0 && q < 1.0)) throw InvalidArgument("easy_token_fraction: q must lie in (0, 1)");
  SurgeryPlan plan;
  for (std::size_t b : late_blocks) {
    if (b >= model.config.n_blocks) throw InvalidArgument("easy_token_fraction: block out of range");
    plan.set_component(b, Component::kAttn, destroy_action(scheme));
    plan.set_component(b, Component::kMlp, destroy_action(scheme));
  }
  EasyTokenResult r;
  r.kl = token_kl(model, apply_surgery(model, plan), data);
  r.degenerate = std::all_of(r.kl.begin(), r.kl.end(), [](double v) { return v == 0.0; });
  r.threshold = quantile_floor(reference ? *reference : r.kl, q);
  const auto below = std::count_if(r.kl.begin(), r.kl.end(), [&](double v) { return v < r.threshold; });
  r.fraction = static_cast<double>(below) / static_cast<double>(r.kl.size());
  return r;
}

}  // namespace tcprof::surgery
