#pragma once

#include "moeq/agq.hpp"
#include "moeq/ebss.hpp"
#include "moeq/model.hpp"
#include "moeq/quant.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace moeq {

enum class QuantMethod { rtn, gptq, awq };

const char *to_string(QuantMethod m) noexcept;
QuantMethod parse_quant_method(std::string_view name);

/// One quantized expert linear, stored in (out x in) orientation.
struct QuantizedLinear {
    QuantizedTensor q;
    std::vector<double> channel_scales; // empty unless AWQ scaling was applied
    bool hadamard = false;

    /// dequantize(q)·diag(1/scales)·T, i.e. the weight the layer effectively applies.
    Matrix effective_weight() const;

    bool operator==(const QuantizedLinear &) const = default;
};

struct QuantizedModel {
    QuantSpec spec;
    ModelWeights base; // non-expert tensors at full precision; expert matrices hold the effective weights of `linears`
    std::map<TraceKey, QuantizedLinear> linears;

    /// Full precision model whose expert weights are the effective quantized ones.
    ModelWeights materialize() const;
};

// "MOEQQ" container: version u32 = 1, QuantSpec (bits u32, q_min i32, q_max i32),
// ModelConfig, then tensors in model order with each expert linear replaced by a record
// rows u32, cols u32, flags u8 (bit0 scales, bit1 hadamard), steps f32[rows],
// scales f32[cols] when flagged, codes i8[rows*cols].
void save_quantized_model(const QuantizedModel &model, const std::filesystem::path &path);
QuantizedModel load_quantized_model(const std::filesystem::path &path);

/// Stored expert matrix (in x out) of the given linear, transposed to (out x in).
Matrix linear_weight(const ModelWeights &model, const TraceKey &key);

struct QuantizeOptions {
    QuantMethod method = QuantMethod::gptq;
    bool agq = false;
    bool hadamard = false;
    QuantSpec spec = QuantSpec::symmetric(4);
    double damping = kDefaultDamping;
    std::size_t awq_grid = kDefaultAwqGrid;
    int damping_retries = 3; // each retry multiplies damping by 10
};

struct LinearReport {
    TraceKey key;
    std::size_t tokens = 0;
    double loss = 0.0;          // unweighted output error on the calibration inputs
    double affinity_loss = 0.0; // gate-weighted output error
    double alpha = 0.0;         // AWQ only
    double damping = 0.0;       // GPTQ only, after retries
};

/// Quantizes every expert linear; attention, embeddings, head and gates stay full
/// precision. traces may be null only for RTN.
QuantizedModel quantize_model(const ModelWeights &model, const TraceMap *traces, const QuantizeOptions &options,
                              std::vector<LinearReport> *report = nullptr);

/// Unweighted and gate-weighted errors of `quantized` against `reference` on traces.
std::vector<LinearReport> linear_losses(const ModelWeights &reference, const ModelWeights &quantized,
                                        const TraceMap &traces);

/// Mean squared difference of the per-position log-softmax outputs.
double logit_mse(const ModelWeights &reference, const ModelWeights &candidate,
                 std::span<const std::vector<std::uint32_t>> sequences);

/// Ancestral samples from the model, each started after the begin-of-sequence token.
std::vector<std::vector<std::uint32_t>> sample_sequences(const ModelWeights &model, std::size_t count,
                                                         std::size_t length, std::uint64_t seed);

/// Uniformly random token sequences.
std::vector<std::vector<std::uint32_t>> random_token_sequences(std::uint32_t vocab_size, std::size_t count,
                                                               std::size_t length, std::uint64_t seed);

/// Perplexity over a corpus: exp of the mean NLL of every scored position.
double corpus_perplexity(const ModelWeights &model, std::span<const std::vector<std::uint32_t>> sequences);

/// Stable 64-bit FNV-1a digest.
std::uint64_t fnv1a(std::string_view bytes);

} // namespace moeq
