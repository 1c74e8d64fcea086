#include "tcprof/data.hpp"

#include <cmath>
#include <optional>

#include "tcprof/errors.hpp"
#include "tcprof/rng.hpp"

namespace tcprof {
namespace {

std::vector<std::uint32_t> sample_sequence(const ModelBundle& model, std::size_t seq_len,
                                           Rng& rng, double temperature) {
  std::vector<std::uint32_t> seq;
  seq.reserve(seq_len);
  seq.push_back(static_cast<std::uint32_t>(rng.index(model.config.vocab)));
  std::optional<IncrementalDecoder> dec;
  if (model.surgery.empty()) dec.emplace(model);
  while (seq.size() < seq_len) {
    std::vector<double> scaled;
    if (dec) {
      scaled = dec->step(seq.back());
    } else {
      const Matrix logits = forward(model, seq);
      const auto last = logits.row(logits.rows() - 1);
      scaled.assign(last.begin(), last.end());
    }
    for (double& v : scaled) v /= temperature;
    const auto logp = log_softmax(scaled);
    const double u = rng.uniform();
    double acc = 0.0;
    std::uint32_t pick = static_cast<std::uint32_t>(logp.size() - 1);
    for (std::size_t t = 0; t < logp.size(); ++t) {
      acc += std::exp(logp[t]);
      if (u < acc) {
        pick = static_cast<std::uint32_t>(t);
        break;
      }
    }
    seq.push_back(pick);
  }
  return seq;
}

}  // namespace

TokenDataset random_dataset(std::size_t vocab, std::size_t seq_len, std::size_t calibration,
                            std::size_t eval, std::uint64_t seed) {
  if (vocab == 0 || seq_len < 2) throw InvalidArgument("random_dataset: vocab >= 1 and seq_len >= 2");
  TokenDataset d;
  d.vocab = vocab;
  auto fill = [&](std::size_t count, std::uint64_t tag) {
    Rng rng(Rng::derive(seed, tag));
    std::vector<std::vector<std::uint32_t>> out(count, std::vector<std::uint32_t>(seq_len));
    for (auto& s : out)
      for (auto& id : s) id = static_cast<std::uint32_t>(rng.index(vocab));
    return out;
  };
  d.calibration = fill(calibration, 1);
  d.eval = fill(eval, 2);
  return d;
}

TokenDataset sample_dataset(const ModelBundle& model, std::size_t seq_len,
                            std::size_t calibration, std::size_t eval, std::uint64_t seed,
                            double temperature) {
  if (seq_len < 2 || seq_len > model.config.max_seq) {
    throw InvalidArgument("sample_dataset: seq_len must lie in [2, max_seq]");
  }
  if (!(temperature > 0.0)) throw InvalidArgument("sample_dataset: temperature must be > 0");
  TokenDataset d;
  d.vocab = model.config.vocab;
  const std::size_t total = calibration + eval;
  std::vector<std::vector<std::uint32_t>> all(total);
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < total; ++i) {
    Rng rng(Rng::derive(seed, i));
    all[i] = sample_sequence(model, seq_len, rng, temperature);
  }
  d.calibration.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(calibration));
  d.eval.assign(all.begin() + static_cast<std::ptrdiff_t>(calibration), all.end());
  return d;
}

}  // namespace tcprof
