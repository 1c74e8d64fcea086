#include "tcprof/exit.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "tcprof/errors.hpp"
#include "tcprof/kernels.hpp"
#include "tcprof/rng.hpp"

namespace tcprof::exit {
namespace {

Matrix normalize(const ModelBundle& model, const Matrix& x) {
  const std::vector<double> ones(x.cols(), 1.0);
  return apply_norm(model.config.norm, x, ones, {}, model.config.norm_eps);
}

void check_head(const ExitHead& head, const ModelBundle& model) {
  const auto& cfg = model.config;
  if (head.attach_block > cfg.n_blocks) throw InvalidArgument("exit head: attach block out of range");
  if (head.weight.rows() != cfg.vocab || head.weight.cols() != cfg.d_model ||
      head.norm_gain.size() != cfg.d_model) {
    throw InvalidArgument("exit head: shapes do not match the model");
  }
}

}  // namespace

ExitHead init_head(const ModelBundle& model, std::size_t attach_block) {
  if (attach_block > model.config.n_blocks) throw InvalidArgument("init_head: block out of range");
  return {attach_block, model.final_norm_gain, model.final_norm_bias, model.head, 0};
}

Matrix stream_at(const ModelBundle& model, std::span<const std::uint32_t> tokens, std::size_t block) {
  return run_blocks(model, 0, block, embed(model, tokens));
}

Matrix head_logits(const ExitHead& head, const ModelBundle& model, const Matrix& stream) {
  const Matrix h = apply_norm(model.config.norm, stream, head.norm_gain, head.norm_bias,
                              model.config.norm_eps);
  return kernels::matmul_nt(h, head.weight);
}

std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

HeadGradient head_gradient(const ExitHead& head, const Matrix& normalized,
                           std::span<const std::uint32_t> targets) {
  const std::size_t n = normalized.rows();
  const std::size_t d = normalized.cols();
  const std::size_t v = head.weight.rows();
  HeadGradient g;
  g.weight = Matrix(v, d, 0.0);
  g.gain.assign(d, 0.0);
  if (n == 0) return g;
  Matrix h = normalized;
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) {
      h(r, c) *= head.norm_gain[c];
      if (!head.norm_bias.empty()) h(r, c) += head.norm_bias[c];
    }
  Matrix dz = kernels::matmul_nt(h, head.weight);
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t r = 0; r < n; ++r) {
    const auto lp = log_softmax(dz.row(r));
    g.loss -= lp[targets[r]];
    auto row = dz.row(r);
    for (std::size_t k = 0; k < v; ++k) row[k] = std::exp(lp[k]) * inv_n;
    row[targets[r]] -= inv_n;
  }
  g.loss *= inv_n;
  g.weight = kernels::matmul_tn(dz, h);
  const Matrix dh = kernels::matmul(dz, head.weight);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) g.gain[c] += dh(r, c) * normalized(r, c);
  return g;
}

TrainResult train_head(const ExitHead& head, const ModelBundle& model, const TokenDataset& data,
                       const TrainOptions& options) {
  check_head(head, model);
  TrainResult res;
  res.head = head;
  if (options.steps == 0) return res;
  if (!(options.lr > 0.0) || options.batch_sequences == 0) {
    throw InvalidArgument("train_head: lr > 0 and batch_sequences >= 1 required");
  }
  const auto& seqs = data.calibration;
  if (seqs.empty()) throw InvalidArgument("train_head: calibration split is empty");

  // The trunk is frozen, so normalized head inputs are computed once.
  std::vector<Matrix> inputs(seqs.size());
  const auto ns = static_cast<std::ptrdiff_t>(seqs.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t si = 0; si < ns; ++si) {
    const auto i = static_cast<std::size_t>(si);
    const Matrix x = stream_at(model, seqs[i], head.attach_block);
    inputs[i] = normalize(model, slice_rows(x, 0, x.rows() - 1));
  }

  ExitHead& h = res.head;
  const std::size_t v = h.weight.rows(), d = h.weight.cols();
  std::vector<double> mw(v * d, 0.0), vw(v * d, 0.0), mg(d, 0.0), vg(d, 0.0);
  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;

  Rng rng(options.seed);
  std::vector<std::size_t> order(seqs.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  for (std::size_t step = 0; step < options.steps; ++step) {
    std::vector<Matrix> rows;
    std::vector<std::uint32_t> targets;
    for (std::size_t b = 0; b < std::min(options.batch_sequences, seqs.size()); ++b) {
      if (cursor == order.size()) {
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
        cursor = 0;
      }
      const std::size_t s = order[cursor++];
      rows.push_back(inputs[s]);
      targets.insert(targets.end(), seqs[s].begin() + 1, seqs[s].end());
    }
    const auto g = head_gradient(h, vstack(rows), targets);
    if (!std::isfinite(g.loss)) {
      throw NumericalError("train_head: non-finite loss at step " + std::to_string(step));
    }
    res.losses.push_back(g.loss);

    const double t = static_cast<double>(step + 1);
    auto update = [&](std::span<double> p, std::span<const double> grad, std::vector<double>& m,
                      std::vector<double>& s2) {
      for (std::size_t i = 0; i < p.size(); ++i) {
        if (options.optimizer == Optimizer::kSgd) {
          p[i] -= options.lr * grad[i];
          continue;
        }
        m[i] = kBeta1 * m[i] + (1 - kBeta1) * grad[i];
        s2[i] = kBeta2 * s2[i] + (1 - kBeta2) * grad[i] * grad[i];
        const double mhat = m[i] / (1 - std::pow(kBeta1, t));
        const double vhat = s2[i] / (1 - std::pow(kBeta2, t));
        p[i] -= options.lr * mhat / (std::sqrt(vhat) + kEps);
      }
    };
    update(h.weight.values(), g.weight.values(), mw, vw);
    if (options.train_gain) update(h.norm_gain, g.gain, mg, vg);
    ++h.trained_steps;
  }
  return res;
}

double agreement(const ExitHead& head, const ModelBundle& model, const TokenDataset& data, Split split) {
  check_head(head, model);
  const auto& seqs = data.split(split);
  if (seqs.empty()) throw InvalidArgument("agreement: split is empty");
  std::vector<std::size_t> hits(seqs.size(), 0);
  const auto ns = static_cast<std::ptrdiff_t>(seqs.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t si = 0; si < ns; ++si) {
    const auto i = static_cast<std::size_t>(si);
    const Matrix x = stream_at(model, seqs[i], head.attach_block);
    const Matrix hl = head_logits(head, model, x);
    const Matrix full = final_logits(model, run_blocks(model, head.attach_block, model.config.n_blocks, x));
    for (std::size_t t = 0; t < x.rows(); ++t) hits[i] += argmax(hl.row(t)) == argmax(full.row(t));
  }
  const std::size_t total = data.token_count(split);
  return static_cast<double>(std::accumulate(hits.begin(), hits.end(), std::size_t{0})) /
         static_cast<double>(total);
}

void RoutingPolicy::validate(const ModelConfig& config) const {
  if (!(threshold > 0.0 && threshold <= 1.0)) throw InvalidArgument("routing: threshold must lie in (0, 1]");
  for (std::size_t i = 0; i < exits.size(); ++i) {
    if (exits[i].attach_block >= config.n_blocks ||
        (i > 0 && exits[i].attach_block <= exits[i - 1].attach_block)) {
      throw InvalidArgument("routing: exit blocks must be strictly ascending and < L");
    }
  }
}

RoutingReport route(const ModelBundle& model, const RoutingPolicy& policy, const TokenDataset& data) {
  policy.validate(model.config);
  for (const auto& e : policy.exits) check_head(e, model);
  const auto& seqs = data.eval;
  if (seqs.empty()) throw InvalidArgument("route: eval split is empty");
  const std::size_t L = model.config.n_blocks;
  const bool enabled = policy.threshold < 1.0;
  const std::size_t n_exits = policy.exits.size();

  struct SeqStats {
    NllSum nll;
    std::vector<std::size_t> hist;
    std::size_t skipped = 0;
  };
  std::vector<SeqStats> stats(seqs.size());
  const auto ns = static_cast<std::ptrdiff_t>(seqs.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t si = 0; si < ns; ++si) {
    const auto i = static_cast<std::size_t>(si);
    const auto& seq = seqs[i];
    SeqStats& st = stats[i];
    st.hist.assign(n_exits + 1, 0);
    Matrix x = embed(model, seq);
    const std::size_t scored = seq.size() - 1;
    std::vector<int> exited(x.rows(), -1);
    std::vector<double> exit_logp(x.rows(), 0.0);
    Matrix frozen = x;
    std::size_t e = 0;
    for (std::size_t b = 0; b <= L; ++b) {
      if (enabled && e < n_exits && policy.exits[e].attach_block == b) {
        const Matrix hl = head_logits(policy.exits[e], model, x);
        for (std::size_t t = 0; t < x.rows(); ++t) {
          if (exited[t] >= 0) continue;
          const auto lp = log_softmax(hl.row(t));
          if (std::exp(*std::max_element(lp.begin(), lp.end())) >= policy.threshold) {
            exited[t] = static_cast<int>(e);
            if (t < scored) exit_logp[t] = lp[seq[t + 1]];
            std::copy(x.row(t).begin(), x.row(t).end(), frozen.row(t).begin());
          }
        }
        ++e;
      }
      if (b == L) break;
      run_block(model, b, x);
      for (std::size_t t = 0; t < x.rows(); ++t)
        if (exited[t] >= 0) std::copy(frozen.row(t).begin(), frozen.row(t).end(), x.row(t).begin());
    }
    const Matrix logits = final_logits(model, x);
    for (std::size_t t = 0; t < scored; ++t) {
      if (exited[t] >= 0) {
        const auto k = static_cast<std::size_t>(exited[t]);
        st.nll.nll -= exit_logp[t];
        ++st.hist[k];
        st.skipped += L - policy.exits[k].attach_block;
      } else {
        st.nll.nll -= log_softmax(logits.row(t))[seq[t + 1]];
        ++st.hist[n_exits];
      }
      ++st.nll.count;
    }
  }

  RoutingReport r;
  r.threshold = policy.threshold;
  r.exit_histogram.assign(n_exits + 1, 0);
  std::vector<NllSum> sums;
  std::size_t skipped = 0;
  for (const auto& st : stats) {
    sums.push_back(st.nll);
    skipped += st.skipped;
    r.tokens += st.nll.count;
    for (std::size_t k = 0; k <= n_exits; ++k) r.exit_histogram[k] += st.hist[k];
  }
  r.ppl = perplexity_from(sums);
  r.baseline_ppl = perplexity(model, data);
  r.delta_ppl = r.ppl - r.baseline_ppl;
  r.compute_saved = r.tokens == 0 ? 0.0
                                  : static_cast<double>(skipped) / static_cast<double>(r.tokens * L);
  return r;
}

}  // namespace tcprof::exit
