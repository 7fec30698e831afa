#pragma once

#include "moeq/linalg.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <vector>

namespace moeq {

struct ModelConfig {
    std::uint32_t vocab_size = 64;
    std::uint32_t d_model = 16;
    std::uint32_t n_layers = 1;
    std::uint32_t d_ff = 32;
    std::uint32_t n_shared = 0;
    std::uint32_t n_routed = 4;
    std::uint32_t top_k = 2;
    std::uint32_t max_seq_len = 64;

    std::uint32_t n_experts() const noexcept { return n_shared + n_routed; }

    /// Throws ConfigError when an invariant is violated.
    void validate() const;

    bool operator==(const ModelConfig &) const = default;
};

/// Gated FFN expert: y = ((x·W_up) ⊙ silu(x·W_gate))·W_down.
struct ExpertFFN {
    Matrix w_up;   // d_model x d_ff
    Matrix w_gate; // d_model x d_ff
    Matrix w_down; // d_ff x d_model

    bool operator==(const ExpertFFN &) const = default;
};

struct LayerWeights {
    std::vector<double> attn_norm;
    Matrix wq, wk, wv, wo;
    std::vector<double> moe_norm;
    Matrix gate; // d_model x (n_shared + n_routed); shared experts occupy the leading columns
    std::vector<ExpertFFN> shared;
    std::vector<ExpertFFN> routed;

    /// Expert by gate column index.
    const ExpertFFN &expert(std::size_t slot) const {
        return slot < shared.size() ? shared[slot] : routed[slot - shared.size()];
    }
    ExpertFFN &expert(std::size_t slot) { return slot < shared.size() ? shared[slot] : routed[slot - shared.size()]; }

    bool operator==(const LayerWeights &) const = default;
};

struct ModelWeights {
    ModelConfig config;
    Matrix token_embedding; // vocab x d_model
    std::vector<LayerWeights> layers;
    Matrix head; // d_model x vocab

    /// Checks tensor shapes against config and finiteness of every value.
    void validate() const;

    bool operator==(const ModelWeights &) const = default;
};

/// Deterministic Gaussian initialization. router_skew adds a graded bias ramp to the
/// routed gate columns along a direction carried by every token embedding, so that
/// routing grows increasingly long-tailed with the skew.
ModelWeights forge_model(const ModelConfig &config, std::uint64_t seed, double router_skew);

// Binary model container ("MOEQ", version 1, little-endian, f32 tensors).
void save_model(const ModelWeights &model, const std::filesystem::path &path);
ModelWeights load_model(const std::filesystem::path &path);

// Shared with the quantized container.
void write_model_config(std::ostream &out, const ModelConfig &config);
ModelConfig read_model_config(std::istream &in);

} // namespace moeq
