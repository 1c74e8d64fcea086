#include <doctest.h>

#include <cmath>

#include "tcprof/data.hpp"
#include "tcprof/errors.hpp"
#include "tcprof/exit.hpp"
#include "tcprof/rng.hpp"

using namespace tcprof;

namespace {

ModelConfig small_config() {
  ModelConfig c = toy_config();
  c.n_blocks = 4;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_ff = 32;
  c.vocab = 24;
  c.max_seq = 12;
  return c;
}

exit::ExitHead random_head(std::size_t v, std::size_t d, std::uint64_t seed) {
  Rng rng(seed);
  exit::ExitHead h;
  h.weight = rng.gaussian(v, d);
  h.norm_gain.resize(d);
  for (double& g : h.norm_gain) g = 0.5 + rng.uniform();
  return h;
}

}  // namespace

TEST_CASE("argmax: lowest index wins ties") {
  CHECK(exit::argmax(std::vector<double>{1, 3, 3, 2}) == 1);
  CHECK(exit::argmax(std::vector<double>{5}) == 0);
  CHECK(exit::argmax(std::vector<double>{-1, -1, -1}) == 0);
}

TEST_CASE("init_head: copies the final head and is reproducible") {
  const ModelBundle m = synth_model(small_config(), 1);
  const auto a = exit::init_head(m, 2);
  CHECK(a == exit::init_head(m, 2));
  CHECK(a.weight == m.head);
  CHECK(a.norm_gain == m.final_norm_gain);
  CHECK(a.trained_steps == 0);
  CHECK_THROWS_AS(exit::init_head(m, 5), InvalidArgument);
}

TEST_CASE("agreement: pass-through tail and final attachment give 1") {
  ModelBundle m = synth_model(small_config(), 2);
  const TokenDataset data = random_dataset(m.config.vocab, 10, 4, 6, 3);
  CHECK(exit::agreement(exit::init_head(m, 4), m, data) == 1.0);
  m.blocks[3] = zero_model(m.config).blocks[3];
  CHECK(exit::agreement(exit::init_head(m, 3), m, data) == 1.0);
}

TEST_CASE("agreement: invariant to positive logit scaling") {
  const ModelBundle m = synth_model(small_config(), 4);
  const TokenDataset data = random_dataset(m.config.vocab, 10, 4, 8, 5);
  auto h = exit::init_head(m, 1);
  const double base = exit::agreement(h, m, data);
  for (double& w : h.weight.values()) w *= 2.5;
  CHECK(exit::agreement(h, m, data) == base);
}

TEST_CASE("agreement: random heads sit at the 1/V chance level") {
  ModelConfig c = small_config();
  c.vocab = 256;
  c.max_seq = 32;
  const ModelBundle m = synth_model(c, 6);
  const TokenDataset data = random_dataset(c.vocab, 32, 2, 40, 7);
  const double n_pos = static_cast<double>(data.token_count(Split::kEval));
  double hits = 0.0;
  const int heads = 20;
  for (int k = 0; k < heads; ++k) {
    auto h = random_head(c.vocab, c.d_model, 100 + k);
    h.attach_block = 2;
    hits += exit::agreement(h, m, data) * n_pos;
  }
  const double n = n_pos * heads, p = 1.0 / c.vocab;
  const double sigma = std::sqrt(n * p * (1 - p));
  CHECK(std::abs(hits - n * p) <= 3.0 * sigma);
}

TEST_CASE("head_gradient: matches central finite differences") {
  const std::size_t v = 4, d = 5, n = 7;
  auto head = random_head(v, d, 11);
  const Matrix x = Rng(12).gaussian(n, d);
  std::vector<std::uint32_t> targets(n);
  Rng rt(13);
  for (auto& t : targets) t = static_cast<std::uint32_t>(rt.index(v));

  const auto g = exit::head_gradient(head, x, targets);
  const double h = 1e-6;
  auto loss = [&](const exit::ExitHead& e) { return exit::head_gradient(e, x, targets).loss; };
  for (std::size_t i = 0; i < head.weight.size(); ++i) {
    auto up = head, dn = head;
    up.weight.values()[i] += h;
    dn.weight.values()[i] -= h;
    const double fd = (loss(up) - loss(dn)) / (2 * h);
    CHECK(std::abs(fd - g.weight.values()[i]) <= 1e-5 * std::max(1.0, std::abs(fd)));
  }
  for (std::size_t i = 0; i < d; ++i) {
    auto up = head, dn = head;
    up.norm_gain[i] += h;
    dn.norm_gain[i] -= h;
    const double fd = (loss(up) - loss(dn)) / (2 * h);
    CHECK(std::abs(fd - g.gain[i]) <= 1e-5 * std::max(1.0, std::abs(fd)));
  }
}

TEST_CASE("train_head: zero steps, frozen trunk, validation") {
  const ModelBundle m = synth_model(small_config(), 14);
  const TokenDataset data = sample_dataset(m, 10, 16, 4, 15);
  const auto h = exit::init_head(m, 1);
  exit::TrainOptions opt;
  opt.steps = 0;
  CHECK(exit::train_head(h, m, data, opt).head == h);

  const auto before = weights_checksum(m);
  opt.steps = 5;
  const auto r = exit::train_head(h, m, data, opt);
  CHECK(weights_checksum(m) == before);
  CHECK(r.head.trained_steps == 5);
  CHECK(r.losses.size() == 5);
  CHECK(exit::train_head(h, m, data, opt).head == r.head);

  opt.train_gain = false;
  CHECK(exit::train_head(h, m, data, opt).head.norm_gain == h.norm_gain);
  opt.lr = 0.0;
  CHECK_THROWS_AS(exit::train_head(h, m, data, opt), InvalidArgument);
}

TEST_CASE("train_head: full-batch SGD loss never increases") {
  const ModelBundle m = synth_model(small_config(), 16);
  const TokenDataset data = sample_dataset(m, 10, 12, 2, 17);
  exit::TrainOptions opt;
  opt.steps = 50;
  opt.lr = 0.05;
  opt.batch_sequences = data.calibration.size();
  opt.optimizer = exit::Optimizer::kSgd;
  const auto r = exit::train_head(exit::init_head(m, 1), m, data, opt);
  for (std::size_t i = 1; i < r.losses.size(); ++i) CHECK(r.losses[i] <= r.losses[i - 1] + 1e-12);
  CHECK(r.losses.back() < r.losses.front());
}

TEST_CASE("train_head: Adam lowers loss and raises agreement") {
  const ModelBundle m = synth_model(toy_config(), 18);
  const TokenDataset data = sample_dataset(m, 16, 64, 32, 19);
  const auto naive = exit::init_head(m, 2);
  exit::TrainOptions opt;
  opt.steps = 200;
  opt.lr = 1e-2;
  const auto r = exit::train_head(naive, m, data, opt);
  CHECK(r.losses.back() < r.losses.front());
  CHECK(exit::agreement(r.head, m, data) >= exit::agreement(naive, m, data));
}

TEST_CASE("naive heads agree more at later blocks") {
  int later_better = 0;
  const int seeds = 10;
  for (int s = 0; s < seeds; ++s) {
    const ModelBundle m = synth_model(toy_config(), 200 + s);
    const TokenDataset data = sample_dataset(m, 16, 2, 32, 300 + s);
    later_better += exit::agreement(exit::init_head(m, 1), m, data) <
                    exit::agreement(exit::init_head(m, m.config.n_blocks - 1), m, data);
  }
  CHECK(later_better >= 9);
}

TEST_CASE("route: threshold 1 is the baseline") {
  const ModelBundle m = synth_model(small_config(), 20);
  const TokenDataset data = sample_dataset(m, 10, 4, 8, 21);
  exit::RoutingPolicy p;
  p.exits = {exit::init_head(m, 1), exit::init_head(m, 2)};
  p.threshold = 1.0;
  const auto r = exit::route(m, p, data);
  CHECK(r.ppl == perplexity(m, data));
  CHECK(r.delta_ppl == 0.0);
  CHECK(r.compute_saved == 0.0);
  CHECK(r.exit_histogram == std::vector<std::size_t>{0, 0, r.tokens});
  CHECK(r.tokens == data.token_count(Split::kEval) - data.eval.size());
}

TEST_CASE("route: single last-block exit with threshold near zero") {
  ModelBundle m = synth_model(small_config(), 22);
  m.blocks[3] = zero_model(m.config).blocks[3];
  const TokenDataset data = sample_dataset(m, 10, 4, 8, 23);
  exit::RoutingPolicy p;
  p.exits = {exit::init_head(m, 3)};
  p.threshold = 1e-9;
  const auto r = exit::route(m, p, data);
  CHECK(r.compute_saved == 1.0 / 4.0);
  CHECK(r.exit_histogram == std::vector<std::size_t>{r.tokens, 0});
  CHECK(std::abs(r.ppl - perplexity(m, data)) <= 1e-12 * r.ppl);
}

TEST_CASE("route: lowering the threshold moves exits earlier") {
  const ModelBundle m = synth_model(toy_config(), 24);
  const TokenDataset data = sample_dataset(m, 16, 4, 32, 25);
  exit::RoutingPolicy p;
  p.exits = {exit::init_head(m, 2), exit::init_head(m, 4)};
  double prev_saved = -1.0;
  std::vector<std::size_t> prev_cum(p.exits.size(), 0);
  for (double t : {1.0, 0.95, 0.8, 0.7, 0.5, 0.2, 0.05}) {
    p.threshold = t;
    const auto r = exit::route(m, p, data);
    CAPTURE(t);
    CHECK(r.compute_saved >= prev_saved);
    CHECK(r.compute_saved < 1.0);
    std::size_t sum = 0;
    for (std::size_t k = 0; k < r.exit_histogram.size(); ++k) {
      sum += r.exit_histogram[k];
      if (k < prev_cum.size()) {
        CHECK(sum >= prev_cum[k]);
        prev_cum[k] = sum;
      }
    }
    CHECK(sum == r.tokens);
    prev_saved = r.compute_saved;
  }
}

TEST_CASE("route: policy validation") {
  const ModelBundle m = synth_model(small_config(), 26);
  const TokenDataset data = sample_dataset(m, 10, 2, 2, 27);
  exit::RoutingPolicy p;
  p.exits = {exit::init_head(m, 2), exit::init_head(m, 1)};
  CHECK_THROWS_AS(exit::route(m, p, data), InvalidArgument);
  p.exits = {exit::init_head(m, 1), exit::init_head(m, 1)};
  CHECK_THROWS_AS(exit::route(m, p, data), InvalidArgument);
  p.exits = {exit::init_head(m, 4)};
  CHECK_THROWS_AS(exit::route(m, p, data), InvalidArgument);
  p.exits = {exit::init_head(m, 1)};
  p.threshold = 0.0;
  CHECK_THROWS_AS(exit::route(m, p, data), InvalidArgument);
  p.threshold = 1.5;
  CHECK_THROWS_AS(exit::route(m, p, data), InvalidArgument);
}
