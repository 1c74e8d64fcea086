#include <doctest.h>

#include <cmath>
#include <numeric>

#include "oracles.hpp"
#include "tcprof/data.hpp"
#include "tcprof/errors.hpp"
#include "tcprof/linalg.hpp"
#include "tcprof/quant.hpp"
#include "tcprof/rng.hpp"
#include "tcprof/surgery.hpp"

using namespace tcprof;
using quant::QuantScheme;

namespace {

ModelConfig small_config(bool biases = false) {
  ModelConfig c = toy_config();
  c.n_blocks = 4;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_ff = 32;
  c.vocab = 24;
  c.max_seq = 12;
  c.biases = biases;
  return c;
}

// With zero norm gains a block's branches only see their norm biases, so the
// block adds a constant c. Coordinate 0 of the stream is pinned to 1 and
// c[0] = 0, which makes the residual exactly x (e0 c^T).
void make_constant_block(ModelBundle& m, std::size_t b, std::uint64_t seed) {
  Rng rng(seed);
  auto& w = m.blocks[b];
  std::fill(w.norm1_gain.begin(), w.norm1_gain.end(), 0.0);
  std::fill(w.norm2_gain.begin(), w.norm2_gain.end(), 0.0);
  for (double& v : w.norm1_bias) v = rng.normal();
  for (double& v : w.norm2_bias) v = rng.normal();
  for (std::size_t j = 0; j < w.attn_out.cols(); ++j) w.attn_out(0, j) = 0.0;
  for (std::size_t j = 0; j < w.mlp_out.cols(); ++j) w.mlp_out(0, j) = 0.0;
  w.attn_out_bias[0] = 0.0;
  w.mlp_out_bias[0] = 0.0;
}

ModelBundle pinned_model(std::uint64_t seed) {
  ModelBundle m = synth_model(small_config(true), seed);
  for (std::size_t v = 0; v < m.config.vocab; ++v) m.embedding(v, 0) = 1.0;
  for (std::size_t t = 0; t < m.config.max_seq; ++t) m.pos_embedding(t, 0) = 0.0;
  for (auto& w : m.blocks) {
    for (std::size_t j = 0; j < w.attn_out.cols(); ++j) w.attn_out(0, j) = 0.0;
    for (std::size_t j = 0; j < w.mlp_out.cols(); ++j) w.mlp_out(0, j) = 0.0;
    w.attn_out_bias[0] = 0.0;
    w.mlp_out_bias[0] = 0.0;
  }
  return m;
}

TokenDataset data_for(const ModelBundle& m, std::uint64_t seed) {
  return random_dataset(m.config.vocab, 12, 12, 6, seed);
}

double naive_output_mse(const Matrix& w, const Matrix& w_hat, const Matrix& x) {
  const Matrix a = oracle::naive_matmul(x, oracle::naive_transpose(w));
  const Matrix b = oracle::naive_matmul(x, oracle::naive_transpose(w_hat));
  long double s = 0.0L;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const long double d = static_cast<long double>(a.values()[i]) - b.values()[i];
    s += d * d;
  }
  return static_cast<double>(s / a.size());
}

}  // namespace

TEST_CASE("replace_single: exactly linear block costs nothing") {
  ModelBundle m = pinned_model(3);
  make_constant_block(m, 2, 4);
  const TokenDataset data = data_for(m, 5);
  const auto r = surgery::replace_single(m, 2, 0.95, 1e-10, data);
  CHECK(r.map.rank() == 1);
  CHECK(r.fit_r2 > 1.0 - 1e-12);
  CHECK(std::abs(r.delta_ppl) <= 1e-6);
  CHECK(r.compression_ratio > 1.0);
}

TEST_CASE("replace_single: zero block gives a degenerate map and an unchanged model") {
  ModelBundle m = synth_model(small_config(), 3);
  m.blocks[1] = zero_model(m.config).blocks[1];
  const auto r = surgery::replace_single(m, 1, 0.95, 1e-3, data_for(m, 1));
  CHECK(r.map.degenerate);
  CHECK(r.delta_ppl == 0.0);
  CHECK(r.compression_ratio == 0.0);
  CHECK_THROWS_AS(surgery::replace_single(m, 9, 0.95, 1e-3, data_for(m, 1)), InvalidArgument);
}

TEST_CASE("replace_sequential: linear model gives a flat trail") {
  ModelBundle m = pinned_model(7);
  for (std::size_t b = 0; b < m.config.n_blocks; ++b) make_constant_block(m, b, 100 + b);
  const TokenDataset data = data_for(m, 8);
  const auto trail = surgery::replace_sequential(m, {0, 1, 2, 3}, 0.95, 1e-10, data);
  REQUIRE(trail.steps.size() == 5);
  CHECK(trail.steps[0].ppl == perplexity(m, data));
  for (const auto& s : trail.steps) CHECK(std::abs(s.ppl - trail.baseline_ppl) <= 1e-6);
}

TEST_CASE("replace_sequential: baseline step, empty list, ordering") {
  const ModelBundle m = synth_model(small_config(), 2);
  const TokenDataset data = data_for(m, 3);
  const double base = perplexity(m, data);
  const auto empty = surgery::replace_sequential(m, {}, 0.95, 1e-3, data);
  REQUIRE(empty.steps.size() == 1);
  CHECK(empty.steps[0].ppl == base);
  CHECK(empty.baseline_ppl == base);

  const auto two = surgery::replace_sequential(m, {1, 3}, 0.95, 1e-3, data);
  CHECK(two.steps[0].ppl == base);
  CHECK(two.steps[1].block == 1);
  CHECK(two.steps[2].block == 3);
  // step 1 fits on the intact stream, so it matches a single replacement
  const auto single = surgery::replace_single(m, 1, 0.95, 1e-3, data);
  CHECK(two.steps[1].ppl == single.ppl);
  CHECK(two.steps[1].fit_r2 == single.fit_r2);

  CHECK_THROWS_AS(surgery::replace_sequential(m, {2, 1}, 0.95, 1e-3, data), InvalidArgument);
  CHECK_THROWS_AS(surgery::replace_sequential(m, {1, 1}, 0.95, 1e-3, data), InvalidArgument);
}

TEST_CASE("pca_projection_ppl: full basis, empty basis, rejections") {
  const ModelBundle m = synth_model(small_config(), 4);
  const TokenDataset data = data_for(m, 5);
  const double base = perplexity(m, data);
  const auto rows = surgery::pca_projection_ppl(m, 1, 3, {0, 4, m.config.d_model}, data);
  REQUIRE(rows.size() == 3);
  CHECK(std::isfinite(rows[0].ppl));
  CHECK(rows[0].ppl > 0.0);
  CHECK(std::abs(rows[2].ppl - base) <= 1e-8);
  CHECK_THROWS_AS(surgery::pca_projection_ppl(m, 0, 1, {m.config.d_model + 1}, data), InvalidArgument);
  CHECK_THROWS_AS(surgery::pca_projection_ppl(m, 2, 2, {1}, data), InvalidArgument);
  CHECK_THROWS_AS(surgery::pca_projection_ppl(m, 0, 5, {1}, data), InvalidArgument);
}

TEST_CASE("pca_projection_ppl: more directions never hurt on the toy model") {
  int monotone = 0;
  const int seeds = 20;
  for (int s = 0; s < seeds; ++s) {
    const ModelBundle m = synth_model(toy_config(), 50 + s);
    const TokenDataset data = sample_dataset(m, 16, 64, 32, 60 + s);
    const auto rows = surgery::pca_projection_ppl(m, 0, 3, {1, 3, 11, 32}, data);
    bool ok = true;
    for (std::size_t i = 1; i < rows.size(); ++i) ok = ok && rows[i].ppl <= rows[i - 1].ppl;
    monotone += ok;
  }
  CHECK(monotone >= 18);
}

TEST_CASE("reconstruction_wall: grid-exact matrix and oracle cross-check") {
  Matrix w(64, 64);
  Rng rng(1);
  for (double& v : w.values()) v = 0.25 * (static_cast<double>(rng.index(16)) - 7.0);
  w(0, 0) = -1.75;
  w(0, 1) = 2.0;
  const Matrix x = surgery::trained_like_activations(256, 64, 2);
  const auto res = surgery::reconstruction_wall(w, x);
  CHECK(res.row("direct_int4").output_mse == 0.0);
  for (const auto& r : res.rows) {
    CAPTURE(r.method);
    CHECK(r.output_mse >= 0.0);
    CHECK(std::abs(r.bits_per_weight - 4.0) <= 0.08);
  }

  const Matrix w2 = surgery::trained_like_matrix(64, 64, 3);
  const Matrix x2 = surgery::trained_like_activations(256, 64, 4);
  const auto res2 = surgery::reconstruction_wall(w2, x2);
  REQUIRE(res2.rows.size() == 4);
  for (const auto& r : res2.rows) {
    CAPTURE(r.method);
    const double want = naive_output_mse(w2, r.reconstruction, x2);
    CHECK(std::abs(r.output_mse - want) <= 1e-12 * std::max(1.0, want));
  }
  CHECK(res2.row("direct_int4").reconstruction == quant::fake_quantize(w2, QuantScheme::uniform(4)));
  CHECK_THROWS_AS(surgery::reconstruction_wall(w2, Matrix(0, 32)), InvalidArgument);
  CHECK_THROWS_AS(surgery::reconstruction_wall(w2, Matrix(4, 31)), InvalidArgument);
}

TEST_CASE("reconstruction_wall: budget mismatch is a hard error") {
  const Matrix w = surgery::trained_like_matrix(32, 32, 3);
  const Matrix x = surgery::trained_like_activations(64, 32, 4);
  CHECK_THROWS_AS(surgery::reconstruction_wall(w, x, 5.0), InvalidArgument);
}

TEST_CASE("rotate_mixed: fraction arithmetic and identity degenerate case") {
  CHECK(surgery::high_fraction(8, 2, 4.0) == 1.0 / 3.0);
  CHECK(surgery::high_fraction(8, 2, 8.0) == 1.0);
  CHECK_THROWS_AS(surgery::high_fraction(2, 8, 4.0), InvalidArgument);
  CHECK_THROWS_AS(surgery::high_fraction(8, 2, 9.0), InvalidArgument);

  const Matrix w = surgery::trained_like_matrix(24, 24, 5);
  const Matrix x = surgery::trained_like_activations(64, 24, 6);
  const auto r = surgery::rotate_mixed(w, x, surgery::RotationBasis::kIdentity, 8, 2, 8.0);
  CHECK(r.high_columns == 24);
  CHECK(r.reconstruction == quant::fake_quantize(w, QuantScheme::uniform(8)));

  const Matrix w64 = surgery::trained_like_matrix(64, 64, 8);
  const Matrix x64 = surgery::trained_like_activations(256, 64, 9);
  const auto third = surgery::rotate_mixed(w64, x64, surgery::RotationBasis::kPca);
  CHECK(third.high_columns == 21);
  CHECK(std::abs(third.budget.bits_per_weight - 4.0) <= 0.08);
  CHECK_THROWS_AS(surgery::rotate_mixed(w, Matrix(10, 5), surgery::RotationBasis::kPca), InvalidArgument);
  const Matrix wide = surgery::trained_like_matrix(8, 24, 7);
  CHECK_THROWS_AS(surgery::rotate_mixed(wide, x, surgery::RotationBasis::kCca), InvalidArgument);
  CHECK_NOTHROW(surgery::rotate_mixed(w, x, surgery::RotationBasis::kCca));
}

TEST_CASE("rotate_mixed: worse than direct INT4 on the trained-like ensemble") {
  for (std::uint64_t s = 0; s < 10; ++s) {
    const Matrix w = surgery::trained_like_matrix(64, 64, Rng::derive(7, 2 * s));
    const Matrix x = surgery::trained_like_activations(256, 64, Rng::derive(7, 2 * s + 1));
    const auto rm = surgery::rotate_mixed(w, x, surgery::RotationBasis::kPca);
    CHECK(quant::output_mse(w, rm.reconstruction, x) >
          quant::output_mse(w, quant::fake_quantize(w, QuantScheme::uniform(4)), x));
  }
}

TEST_CASE("cross_terms: decomposition identity and grid cases") {
  for (std::uint64_t s = 0; s < 10; ++s) {
    const Matrix a = Rng(s).gaussian(32, 32);
    const Matrix b = Rng(s + 50).gaussian(32, 32);
    const auto r = surgery::cross_terms(a, b, QuantScheme::uniform(4, 32));
    CHECK(r.identity_residual <= 1e-10);
    CHECK(r.total_error_norm > 0.0);
    // independent check of the total with naive products
    const Matrix qa = quant::fake_quantize(a, QuantScheme::uniform(4, 32));
    const Matrix qb = quant::fake_quantize(b, QuantScheme::uniform(4, 32));
    const double total = oracle::frob(oracle::naive_matmul(qa, qb) - oracle::naive_matmul(a, b));
    CHECK(std::abs(r.total_error_norm - total) <= 1e-10 * total);
  }

  Matrix grid(8, 8);
  for (std::size_t i = 0; i < grid.size(); ++i) grid.values()[i] = static_cast<double>(i % 16);
  const Matrix b = Rng(9).gaussian(8, 8);
  const auto one = surgery::cross_terms(grid, b, QuantScheme::uniform(4));
  CHECK(one.eps_a_b_norm == 0.0);
  CHECK(one.eps_eps_norm == 0.0);
  CHECK(std::abs(one.total_error_norm - one.a_eps_b_norm) <= 1e-12 * one.a_eps_b_norm);
  const auto both = surgery::cross_terms(grid, grid, QuantScheme::uniform(4));
  CHECK(both.total_error_norm == 0.0);
  CHECK(both.eps_a_b_norm == 0.0);
  CHECK(both.a_eps_b_norm == 0.0);
  CHECK(both.eps_eps_norm == 0.0);
  CHECK_THROWS_AS(surgery::cross_terms(Matrix(2, 3), Matrix(2, 3), QuantScheme::uniform(4)), InvalidArgument);
}

TEST_CASE("kl_divergence: hand values") {
  const std::vector<double> p{0.5, 0.3, 0.2}, q{0.2, 0.5, 0.3};
  std::vector<double> lp(3), lq(3);
  long double want = 0.0L;
  for (int i = 0; i < 3; ++i) {
    lp[i] = std::log(p[i]);
    lq[i] = std::log(q[i]);
    want += p[i] * std::log(static_cast<long double>(p[i]) / q[i]);
  }
  CHECK(std::abs(surgery::kl_divergence(lp, lq) - static_cast<double>(want)) < 1e-12);
  CHECK(surgery::kl_divergence(lp, lp) == 0.0);
  const std::vector<double> r{1.0 / 3, 1.0 / 3, 1.0 / 3};
  std::vector<double> lr(3);
  for (int i = 0; i < 3; ++i) lr[i] = std::log(r[i]);
  CHECK(std::abs(surgery::kl_divergence(lp, lr) - (std::log(3.0) + 0.5 * std::log(0.5) + 0.3 * std::log(0.3) +
                                                    0.2 * std::log(0.2))) < 1e-12);
  CHECK_THROWS_AS(surgery::kl_divergence(lp, std::vector<double>{0.0}), InvalidArgument);
}

TEST_CASE("token_kl: matches a token loop and vanishes for the intact model") {
  const ModelBundle m = synth_model(small_config(), 11);
  const TokenDataset data = data_for(m, 12);
  SurgeryPlan plan;
  plan.set_component(2, Component::kMlp, QuantizeComponent{QuantScheme::uniform(2), true});
  const ModelBundle d = apply_surgery(m, plan);
  const auto kl = surgery::token_kl(m, d, data);
  std::size_t idx = 0;
  for (const auto& seq : data.eval) {
    const Matrix a = forward(m, seq);
    const Matrix b = forward(d, seq);
    for (std::size_t t = 0; t + 1 < seq.size(); ++t, ++idx) {
      long double za = 0, zb = 0;
      for (std::size_t v = 0; v < a.cols(); ++v) {
        za += std::exp(static_cast<long double>(a(t, v)));
        zb += std::exp(static_cast<long double>(b(t, v)));
      }
      long double s = 0;
      for (std::size_t v = 0; v < a.cols(); ++v) {
        const long double pa = std::exp(static_cast<long double>(a(t, v))) / za;
        const long double pb = std::exp(static_cast<long double>(b(t, v))) / zb;
        s += pa * std::log(pa / pb);
      }
      REQUIRE(idx < kl.size());
      CHECK(std::abs(kl[idx] - static_cast<double>(s)) < 1e-12);
    }
  }
  CHECK(idx == kl.size());
  for (double v : surgery::token_kl(m, m, data)) CHECK(v == 0.0);
}

TEST_CASE("destroy_components: nonnegative, zero for zero weights, order independent") {
  ModelBundle m = synth_model(small_config(), 13);
  const ModelBundle z = zero_model(m.config);
  m.blocks[1].attn_qkv = z.blocks[1].attn_qkv;
  m.blocks[1].attn_out = z.blocks[1].attn_out;
  const TokenDataset data = data_for(m, 14);
  const auto map = surgery::destroy_components(m, surgery::default_destroy_scheme(), data);
  REQUIRE(map.cells.size() == 2 * m.config.n_blocks);
  for (const auto& c : map.cells) CHECK(c.kl >= 0.0);
  CHECK(map.at(1, Component::kAttn) == 0.0);
  CHECK(map.at(0, Component::kMlp) > 0.0);

  // recompute cells in reverse order, each on its own
  for (std::size_t b = m.config.n_blocks; b-- > 0;) {
    for (Component c : {Component::kMlp, Component::kAttn}) {
      SurgeryPlan plan;
      plan.set_component(b, c, QuantizeComponent{surgery::default_destroy_scheme(), true});
      const auto kl = surgery::token_kl(m, apply_surgery(m, plan), data);
      const double mean = std::accumulate(kl.begin(), kl.end(), 0.0) / static_cast<double>(kl.size());
      CHECK(map.at(b, c) == mean);
    }
  }
}

TEST_CASE("ablate_component: zero component, constant component, isolation") {
  ModelBundle m = synth_model(small_config(true), 15);
  const TokenDataset data = data_for(m, 16);
  m.blocks[0].mlp_out = Matrix(m.config.d_model, m.config.d_ff);
  const auto skip0 = surgery::ablate_component(m, 0, Component::kMlp, surgery::AblationMode::kSkip, data);
  CHECK(skip0.delta_ppl == 0.0);

  // block 2's MLP sees only its norm bias, so its output is the same for every token
  auto& w = m.blocks[2];
  std::fill(w.norm2_gain.begin(), w.norm2_gain.end(), 0.0);
  Rng rng(3);
  for (double& v : w.norm2_bias) v = rng.normal();
  for (double& v : w.mlp_out_bias) v = 0.5 * rng.normal();
  const auto skip = surgery::ablate_component(m, 2, Component::kMlp, surgery::AblationMode::kSkip, data);
  const auto mean = surgery::ablate_component(m, 2, Component::kMlp, surgery::AblationMode::kMean, data);
  CHECK(std::abs(mean.delta_ppl) < 1e-9);
  CHECK(std::abs(mean.delta_ppl) <= std::abs(skip.delta_ppl));
  CHECK(skip.delta_ppl != 0.0);
  for (std::size_t b = 0; b < m.config.n_blocks; ++b) {
    CHECK(skip.model.blocks[b] == m.blocks[b]);
    CHECK(mean.model.blocks[b] == m.blocks[b]);
  }

  const auto cm = surgery::component_mean(m, 2, Component::kMlp, data);
  const Matrix x = run_blocks(m, 0, 2, embed(m, data.eval[0]));
  const auto parts = block_parts(m, 2, x);
  for (std::size_t j = 0; j < cm.size(); ++j) CHECK(std::abs(cm[j] - parts.mlp(3, j)) < 1e-12);
}

TEST_CASE("component_mean: calibration tokens only") {
  const ModelBundle m = synth_model(small_config(), 17);
  TokenDataset a = data_for(m, 18);
  TokenDataset b = a;
  b.eval = data_for(m, 99).eval;
  CHECK(surgery::component_mean(m, 1, Component::kAttn, a) == surgery::component_mean(m, 1, Component::kAttn, b));
}

TEST_CASE("easy tokens: own-quantile fraction, degenerate case, reference quantile") {
  const ModelBundle m = synth_model(small_config(), 19);
  const TokenDataset data = data_for(m, 20);
  const auto r = surgery::easy_token_fraction(m, {2, 3}, surgery::default_destroy_scheme(), 0.5, data);
  REQUIRE(r.kl.size() % 2 == 0);
  CHECK(r.fraction == 0.5);
  CHECK(!r.degenerate);
  CHECK(r.kl == surgery::token_kl(m, apply_surgery(m, [] {
                                    SurgeryPlan p;
                                    for (std::size_t b : {2u, 3u}) {
                                      p.set_component(b, Component::kAttn, QuantizeComponent{surgery::default_destroy_scheme(), true});
                                      p.set_component(b, Component::kMlp, QuantizeComponent{surgery::default_destroy_scheme(), true});
                                    }
                                    return p;
                                  }()), data));

  const auto none = surgery::easy_token_fraction(m, {}, surgery::default_destroy_scheme(), 0.5, data);
  CHECK(none.degenerate);
  for (double v : none.kl) CHECK(v == 0.0);
  CHECK(none.fraction == 0.0);

  const std::vector<double> ref(10, 1e9);
  const auto all = surgery::easy_token_fraction(m, {3}, surgery::default_destroy_scheme(), 0.5, data, ref);
  CHECK(all.fraction == 1.0);
  CHECK_THROWS_AS(surgery::easy_token_fraction(m, {3}, surgery::default_destroy_scheme(), 1.0, data), InvalidArgument);
}

TEST_CASE("quantile_floor: floor(qN)-th smallest") {
  CHECK(surgery::quantile_floor({5, 1, 4, 2, 3}, 0.5) == 3.0);
  CHECK(surgery::quantile_floor({5, 1, 4, 2}, 0.5) == 4.0);
  CHECK(surgery::quantile_floor({5, 1, 4, 2}, 0.1) == 1.0);
  CHECK_THROWS_AS(surgery::quantile_floor({}, 0.5), InvalidArgument);
}

TEST_CASE("trained_like generators are seeded") {
  CHECK(surgery::trained_like_matrix(16, 8, 3) == surgery::trained_like_matrix(16, 8, 3));
  CHECK(surgery::trained_like_matrix(16, 8, 3) != surgery::trained_like_matrix(16, 8, 4));
  CHECK(surgery::trained_like_activations(16, 8, 3) == surgery::trained_like_activations(16, 8, 3));
}
