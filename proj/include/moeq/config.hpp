#pragma once

#include "moeq/ebss.hpp"
#include "moeq/model.hpp"
#include "moeq/pipeline.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

namespace moeq {

/// Everything one CLI invocation needs. Serialized as nested JSON; every leaf is
/// addressable as a dotted key ("calibration.tau") for --set overrides.
struct PipelineConfig {
    std::string model_path; // empty: use <out>/model.bin, forging from `forge` when absent
    ModelConfig forge{.vocab_size = 256, .d_model = 32, .n_layers = 2, .d_ff = 64, .n_shared = 1, .n_routed = 8, .top_k = 2, .max_seq_len = 64};
    double router_skew = 0.0;

    QuantMethod method = QuantMethod::gptq;
    std::uint32_t bits = 4;
    double damping = kDefaultDamping;
    std::uint32_t awq_grid = static_cast<std::uint32_t>(kDefaultAwqGrid);
    bool agq = true;
    bool hadamard = false;

    bool ebss = true;
    std::string calibration_path; // external calibration file when ebss is off
    EbssConfig ebss_config;       // seed is taken from `seed`

    std::string eval_path;              // empty: ancestral samples from the full precision model
    std::string eval_quantized_path;    // empty: <out>/model.q.bin; a MOEQ file compares the model with itself
    std::uint32_t eval_sequences = 8;
    std::uint32_t eval_length = 32;

    std::string out_dir = "out";
    std::uint64_t seed = 0;

    /// Cross-field checks that do not need the model.
    void validate() const;

    /// Checks that depend on the model shape (hadamard dims, sequence lengths).
    void validate_for(const ModelConfig &model) const;

    QuantizeOptions quantize_options() const;
    EbssConfig sampler_config() const;
};

/// Defaults as JSON; the key set doubles as the schema.
std::string default_config_json();

/// Applies a JSON document over the defaults. Unknown keys and type mismatches throw
/// ConfigError.
PipelineConfig parse_config(std::string_view json_text);
PipelineConfig load_config(const std::filesystem::path &path);

/// Applies "dotted.key=value". The value is parsed according to the key's type.
void apply_override(PipelineConfig &config, std::string_view assignment);

/// Canonical JSON with stable key order.
std::string config_to_json(const PipelineConfig &config);

/// Hex FNV-1a digest of the canonical config with the output directory left out.
std::string config_digest(const PipelineConfig &config);

} // namespace moeq
