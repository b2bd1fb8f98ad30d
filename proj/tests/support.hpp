#pragma once

#include <random>

#include "mtp/textgen.hpp"
#include "mtp/tinylm.hpp"

namespace mtp::testing {

/// A corpus small enough for sub-second training.
inline CorpusSpec small_spec(std::uint64_t seed = 11) {
    CorpusSpec s = CorpusSpec::defaults();
    s.n_tasks = 4;
    s.instances_per_task = 40;
    s.heldout_tasks = 1;
    s.heldout_instances = 40;
    s.seed = seed;
    return s;
}

inline ModelConfig small_model(std::size_t vocab) {
    ModelConfig c;
    c.vocab_size = vocab;
    c.d_model = 16;
    c.n_layers = 2;
    c.n_heads = 2;
    c.d_ff = 32;
    c.max_seq_len = 96;
    return c;
}

/// Checkpoint filled with N(0, scale) draws; norms included.
inline Checkpoint random_checkpoint(const ModelConfig& cfg, std::uint64_t seed, float scale = 0.5f) {
    Checkpoint c(cfg);
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> dist(0.0f, scale);
    for (auto& t : c.tensors()) {
        for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = dist(rng);
    }
    return c;
}

}  // namespace mtp::testing
