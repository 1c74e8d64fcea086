#pragma once

#include <cstdint>

#include "tcprof/model.hpp"

namespace tcprof {

/// Uniform random token ids; the two splits use independent streams.
TokenDataset random_dataset(std::size_t vocab, std::size_t seq_len, std::size_t calibration,
                            std::size_t eval, std::uint64_t seed);

/// Sequences drawn ancestrally from the model itself at the given temperature,
/// so the model is (near) the true distribution of its evaluation data.
TokenDataset sample_dataset(const ModelBundle& model, std::size_t seq_len,
                            std::size_t calibration, std::size_t eval, std::uint64_t seed,
                            double temperature = 1.0);

}  // namespace tcprof
