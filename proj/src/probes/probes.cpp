#include "tcprof/probes.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "tcprof/errors.hpp"
#include "tcprof/kernels.hpp"
#include "tcprof/linalg.hpp"
#include "tcprof/rng.hpp"

namespace tcprof::probes {
namespace {

using kernels::matmul;
using kernels::matmul_nt;
using kernels::matmul_tn;

std::size_t rank_for(const std::vector<double>& s, double threshold) {
  double total = 0.0;
  for (double v : s) total += v * v;
  double acc = 0.0;
  for (std::size_t k = 0; k < s.size(); ++k) {
    acc += s[k] * s[k];
    if (acc >= threshold * total) return k + 1;
  }
  return s.size();
}

double residual_r2(const Matrix& delta, const Matrix& predicted) {
  const double denom = squared_frobenius(delta);
  if (denom == 0.0) return squared_frobenius(predicted) == 0.0 ? 1.0 : 0.0;
  return 1.0 - squared_frobenius(delta - predicted) / denom;
}

Matrix predict(const LinearBlockMap& map, const Matrix& x_in) {
  if (map.rank() == 0) return Matrix(x_in.rows(), x_in.cols(), 0.0);
  return matmul_nt(matmul(x_in, map.coef), map.basis);
}

void require_orthonormal(const DirectionSet& dirs, const char* what) {
  if (dirs.count() > 0 && linalg::orthonormality_error(dirs.basis) > 1e-8) {
    throw InvalidArgument(std::string(what) + ": directions are not orthonormal");
  }
}

std::vector<double> target_logprobs(const ModelBundle& model, const Matrix& stream_after_block,
                                    std::size_t first_block, std::span<const std::uint32_t> seq) {
  const Matrix x = run_blocks(model, first_block, model.config.n_blocks, stream_after_block);
  const Matrix logits = final_logits(model, x);
  std::vector<double> out(seq.size() - 1);
  for (std::size_t t = 0; t + 1 < seq.size(); ++t) out[t] = log_softmax(logits.row(t))[seq[t + 1]];
  return out;
}

}  // namespace

LinearBlockMap fit_block_linear(const BlockTrace& trace, double var_threshold, double lambda) {
  if (!(var_threshold > 0.0 && var_threshold <= 1.0)) {
    throw InvalidArgument("fit_block_linear: var_threshold must lie in (0, 1]");
  }
  if (lambda < 0.0) throw InvalidArgument("fit_block_linear: lambda must be >= 0");
  const Matrix& x = trace.x_in;
  const Matrix& delta = trace.delta;
  if (x.rows() != delta.rows() || x.rows() == 0) {
    throw InvalidArgument("fit_block_linear: trace is empty or inconsistent");
  }
  LinearBlockMap map;
  map.block = trace.block;
  map.lambda = lambda;
  const std::size_t d = x.cols();
  if (squared_frobenius(delta) == 0.0) {
    map.basis = Matrix(delta.cols(), 0);
    map.coef = Matrix(d, 0);
    map.r2 = 1.0;
    map.degenerate = true;
    return map;
  }
  const auto svd = linalg::svd_thin(delta);
  const std::size_t k = rank_for(svd.s, var_threshold);
  if (x.rows() < k) throw InvalidArgument("fit_block_linear: fewer trace rows than map rank");
  map.basis = slice_cols(svd.v, 0, k);
  map.coef = linalg::ridge_solve(x, matmul(delta, map.basis), lambda).coef;
  map.r2 = residual_r2(delta, predict(map, x));
  return map;
}

double map_r2(const LinearBlockMap& map, const BlockTrace& trace) {
  return residual_r2(trace.delta, predict(map, trace.x_in));
}

std::vector<LinearityRow> linearity_profile(const ModelBundle& model, const TokenDataset& data,
                                            double var_threshold, double lambda) {
  std::vector<std::size_t> blocks(model.config.n_blocks);
  std::iota(blocks.begin(), blocks.end(), 0);
  const auto fit_traces = capture_traces(model, data, blocks, Split::kCalibration);
  const auto eval_traces = capture_traces(model, data, blocks, Split::kEval);
  std::vector<LinearityRow> rows;
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const auto map = fit_block_linear(fit_traces[b], var_threshold, lambda);
    rows.push_back({b, map.rank(), map.r2, map_r2(map, eval_traces[b]), map.degenerate});
  }
  return rows;
}

PcaResult pca_dimensionality(const Matrix& x, const std::vector<double>& thresholds) {
  if (x.rows() < 2) throw InvalidArgument("pca_dimensionality: need at least 2 rows");
  require_finite(x, "pca_dimensionality");
  PcaResult r;
  r.thresholds = thresholds;
  r.mean = column_means(x);
  const Matrix cov = linalg::covariance(center_rows(x, r.mean));
  r.total_variance = trace(cov);
  if (!(r.total_variance > 0.0)) throw InvalidArgument("pca_dimensionality: zero-variance input");
  auto eig = linalg::sym_eig(cov);
  for (double& v : eig.values) v = std::max(v, 0.0);
  r.directions.basis = std::move(eig.vectors);
  r.directions.origin = DirectionSet::Origin::kPca;
  r.directions.explained_variance = eig.values;
  for (double t : thresholds) {
    if (!(t > 0.0 && t <= 1.0)) throw InvalidArgument("pca_dimensionality: thresholds must lie in (0, 1]");
    double acc = 0.0;
    std::size_t k = eig.values.size();
    for (std::size_t i = 0; i < eig.values.size(); ++i) {
      acc += eig.values[i];
      if (acc >= t * r.total_variance) {
        k = i + 1;
        break;
      }
    }
    r.dims.push_back(k);
  }
  return r;
}

DirectionSet leading(const DirectionSet& dirs, std::size_t k) {
  if (k > dirs.count()) throw InvalidArgument("leading: k exceeds the direction count");
  DirectionSet out;
  out.basis = slice_cols(dirs.basis, 0, k);
  out.origin = dirs.origin;
  if (!dirs.explained_variance.empty()) {
    out.explained_variance.assign(dirs.explained_variance.begin(),
                                  dirs.explained_variance.begin() + static_cast<std::ptrdiff_t>(k));
  }
  return out;
}

SensitivityProfile perturb_sensitivity(const ModelBundle& model, std::size_t block,
                                       const DirectionSet& dirs, double sigma_rule,
                                       const TokenDataset& data, std::uint64_t seed,
                                       std::size_t draws) {
  if (block >= model.config.n_blocks) throw InvalidArgument("perturb_sensitivity: block out of range");
  if (dirs.dim() != model.config.d_model) {
    throw InvalidArgument("perturb_sensitivity: direction dimension != d_model");
  }
  if (sigma_rule < 0.0 || draws == 0) {
    throw InvalidArgument("perturb_sensitivity: sigma_rule >= 0 and draws >= 1 required");
  }
  require_orthonormal(dirs, "perturb_sensitivity");
  const auto& seqs = data.eval;
  if (seqs.empty()) throw InvalidArgument("perturb_sensitivity: eval split is empty");

  const std::size_t nd = dirs.count();
  // sums[i][j]: sum over draws and positions of |delta log p| for sequence i, direction j.
  std::vector<std::vector<double>> sums(seqs.size(), std::vector<double>(nd, 0.0));
  std::vector<std::size_t> counts(seqs.size(), 0);
  const auto n = static_cast<std::ptrdiff_t>(seqs.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t si = 0; si < n; ++si) {
    const auto i = static_cast<std::size_t>(si);
    const auto& seq = seqs[i];
    if (seq.size() < 2) continue;
    const Matrix base = run_blocks(model, 0, block + 1, embed(model, seq));
    const auto ref = target_logprobs(model, base, block + 1, seq);
    std::vector<double> norms(base.rows());
    for (std::size_t t = 0; t < base.rows(); ++t) {
      double s = 0.0;
      for (double v : base.row(t)) s += v * v;
      norms[t] = std::sqrt(s);
    }
    for (std::size_t draw = 0; draw < draws; ++draw) {
      Rng rng(Rng::derive(Rng::derive(seed, i), draw));
      std::vector<double> eps(base.rows());
      for (std::size_t t = 0; t < base.rows(); ++t) eps[t] = rng.normal() * sigma_rule * norms[t];
      for (std::size_t j = 0; j < nd; ++j) {
        Matrix x = base;
        for (std::size_t t = 0; t < x.rows(); ++t)
          for (std::size_t c = 0; c < x.cols(); ++c) x(t, c) += eps[t] * dirs.basis(c, j);
        const auto lp = target_logprobs(model, x, block + 1, seq);
        for (std::size_t t = 0; t < lp.size(); ++t) sums[i][j] += std::abs(lp[t] - ref[t]);
      }
    }
    counts[i] = (seq.size() - 1) * draws;
  }
  SensitivityProfile p;
  p.sigma_rule = sigma_rule;
  p.directions = dirs;
  p.delta_logprob.assign(nd, 0.0);
  const std::size_t total = std::accumulate(counts.begin(), counts.end(), std::size_t{0});
  for (std::size_t j = 0; j < nd; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < seqs.size(); ++i) s += sums[i][j];
    p.delta_logprob[j] = total == 0 ? 0.0 : s / static_cast<double>(total);
  }
  return p;
}

CcaResult cca(const Matrix& x_b, const Matrix& x_B, std::size_t k, double ridge) {
  if (x_b.rows() != x_B.rows()) throw InvalidArgument("cca: inputs need the same row count");
  const std::size_t n = x_b.rows();
  if (n < x_b.cols() || n < x_B.cols()) {
    throw InvalidArgument("cca: fewer rows (" + std::to_string(n) +
                          ") than columns; collect more calibration tokens");
  }
  if (k > std::min(x_b.cols(), x_B.cols())) throw InvalidArgument("cca: k exceeds dimension");
  if (ridge < 0.0) throw InvalidArgument("cca: ridge must be >= 0");
  CcaResult r;
  r.ridge = ridge;
  r.mean_b = column_means(x_b);
  r.mean_B = column_means(x_B);
  const Matrix cb = center_rows(x_b, r.mean_b);
  const Matrix cB = center_rows(x_B, r.mean_B);
  const Matrix wb = linalg::inv_sqrt_psd(linalg::covariance(cb), ridge);
  const Matrix wB = linalg::inv_sqrt_psd(linalg::covariance(cB), ridge);
  const Matrix cross = (1.0 / static_cast<double>(n - 1)) * matmul_tn(cb, cB);
  const Matrix t = matmul(matmul(wb, cross), wB);
  const auto svd = linalg::svd_thin(t, k);
  r.directions_b = matmul(wb, svd.u);
  r.directions_B = matmul(wB, svd.v);
  r.correlations = svd.s;
  for (double& c : r.correlations) c = std::clamp(c, 0.0, 1.0);
  return r;
}

DirectionSet cca_directions(const CcaResult& result) {
  DirectionSet d;
  d.basis = linalg::orthonormalize_columns(result.directions_b);
  d.origin = DirectionSet::Origin::kCca;
  return d;
}

double subspace_overlap(const DirectionSet& u, const DirectionSet& v) {
  if (u.dim() != v.dim()) throw InvalidArgument("subspace_overlap: ambient dimensions differ");
  if (u.count() != v.count()) throw InvalidArgument("subspace_overlap: subspace sizes differ");
  if (u.count() == 0) throw InvalidArgument("subspace_overlap: empty subspaces");
  return squared_frobenius(matmul_tn(u.basis, v.basis)) / static_cast<double>(u.count());
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.empty()) throw InvalidArgument("pearson: length mismatch");
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

ImportanceProfile importance_profile(const std::vector<double>& variance,
                                     const SensitivityProfile& sens) {
  if (variance.size() != sens.delta_logprob.size()) {
    throw InvalidArgument("importance_profile: variance and sensitivity lengths differ");
  }
  ImportanceProfile p;
  p.variance = variance;
  p.sensitivity = sens.delta_logprob;
  p.importance.resize(variance.size());
  for (std::size_t i = 0; i < variance.size(); ++i) p.importance[i] = variance[i] * p.sensitivity[i];
  p.correlation = variance.empty() ? 0.0 : pearson(p.variance, p.sensitivity);
  return p;
}

double prediction_r2(const DirectionSet& dirs, const Matrix& x_b, const Matrix& x_B, double lambda) {
  if (x_b.rows() != x_B.rows()) throw InvalidArgument("prediction_r2: row counts differ");
  if (dirs.dim() != x_b.cols()) throw InvalidArgument("prediction_r2: direction dimension mismatch");
  if (x_b.rows() < 4) throw InvalidArgument("prediction_r2: need at least 4 rows");
  if (dirs.count() == 0) return 0.0;
  const std::size_t n_fit = x_b.rows() / 2;
  const std::size_t n_eval = x_b.rows() - n_fit;
  const Matrix fb = slice_rows(x_b, 0, n_fit);
  const Matrix fB = slice_rows(x_B, 0, n_fit);
  const auto mb = column_means(fb);
  const auto mB = column_means(fB);
  const Matrix z_fit = matmul(center_rows(fb, mb), dirs.basis);
  const Matrix z_eval = matmul(center_rows(slice_rows(x_b, n_fit, n_eval), mb), dirs.basis);
  const Matrix coef = linalg::ridge_solve(z_fit, center_rows(fB, mB), lambda).coef;
  const Matrix target = center_rows(slice_rows(x_B, n_fit, n_eval), mB);
  const double denom = squared_frobenius(target);
  if (denom == 0.0) return 0.0;
  return 1.0 - squared_frobenius(target - matmul(z_eval, coef)) / denom;
}

}  // namespace tcprof::probes
