#pragma once

#include "moeq/model.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace moeq {

/// Routing record for one token in one MoE layer.
struct RoutingEntry {
    std::vector<double> gate_probs;     // softmax over all n_shared + n_routed gate columns
    std::vector<std::uint32_t> topk;    // selected routed indices (0-based within routed set), by decreasing prob
    std::vector<double> input;          // normalized expert input x (empty unless captured)

    /// Probabilities of the selected routed experts, in topk order.
    std::vector<double> selected_probs(std::size_t n_shared) const;
    std::vector<double> shared_probs(std::size_t n_shared) const;
};

/// Per-token, per-layer routing of one sequence: entries[t][l].
struct RoutingTrace {
    std::size_t n_layers = 0;
    std::size_t n_shared = 0;
    std::size_t n_routed = 0;
    std::vector<std::vector<RoutingEntry>> entries;
};

struct ExpertUsageStats {
    std::vector<std::vector<double>> frequency; // [layer][routed expert]
    std::vector<double> layer_sigma;
    double sigma = 0.0;
};

std::vector<double> softmax(std::span<const double> logits);
double silu(double v);

/// Indices of the k largest values, ties to the lowest index, ordered by decreasing value.
std::vector<std::uint32_t> top_k_indices(std::span<const double> values, std::size_t k);

/// Evaluates one expert on x. When intermediate is non-null it receives
/// (x·W_up) ⊙ silu(x·W_gate), the input of the down projection.
std::vector<double> expert_forward(const ExpertFFN &expert, std::span<const double> x,
                                   std::vector<double> *intermediate = nullptr);

/// Gate probabilities softmax(x·W_g) for a layer.
std::vector<double> gate(const ModelWeights &model, std::size_t layer, std::span<const double> x);

struct MoeOutput {
    std::vector<double> y;
    RoutingEntry trace;
};

/// MoE layer output: Σ shared g_i·E_i(x) + Σ_{j∈topk routed} g_j·E_j(x), no renormalization.
MoeOutput moe_forward(const ModelWeights &model, std::size_t layer, std::span<const double> x);

enum class LogProbs {
    all,  // one distribution per position
    last, // only the final position (sampling loops)
};

struct ForwardOptions {
    LogProbs emit = LogProbs::all;
    bool capture_inputs = false; // store expert inputs in the trace
};

struct ForwardResult {
    std::vector<std::vector<double>> log_probs; // [position][vocab]; single entry when emit == last
    RoutingTrace routing;
};

/// Causal forward pass. log_probs[t] is the next-token distribution after tokens[0..t].
ForwardResult model_forward(const ModelWeights &model, std::span<const std::uint32_t> tokens,
                            const ForwardOptions &options = {});

/// exp of the mean negative log-likelihood of tokens[1..] given log_probs from model_forward.
double perplexity_from_log_probs(std::span<const std::vector<double>> log_probs,
                                 std::span<const std::uint32_t> tokens);

/// Perplexity over tokens[1..]; the first token conditions but is not scored.
double perplexity(const ModelWeights &model, std::span<const std::uint32_t> tokens);

/// Routed-assignment counts [layer][routed expert] accumulated from traces.
std::vector<std::vector<std::uint64_t>> routing_counts(std::span<const RoutingTrace> traces);

ExpertUsageStats expert_usage(std::span<const RoutingTrace> traces);
ExpertUsageStats expert_usage(const std::vector<std::vector<std::uint64_t>> &counts);

} // namespace moeq
