#pragma once

#include "moeq/model.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

namespace moeq {

constexpr double kDefaultTau = 1.2;
constexpr std::uint32_t kDefaultBranches = 4;
constexpr std::uint32_t kBosToken = 0;

/// One live path of the branch search.
struct Branch {
    std::vector<std::uint32_t> tokens;
    double r_s = 0.0; // cumulative log-probability of tokens[1..] given their prefixes
    std::vector<std::vector<std::uint64_t>> usage_counters; // [layer][routed expert]
    double cached_sigma = 0.0;

    /// Tokens whose routing has been folded into usage_counters.
    std::uint64_t routed_tokens(std::uint32_t top_k) const;
};

struct EbssConfig {
    std::uint32_t w = kDefaultBranches;
    std::uint32_t target_len = 32;
    std::uint32_t n_sequences = 16;
    double tau = kDefaultTau;
    std::uint64_t seed = 0;

    void validate() const;

    bool operator==(const EbssConfig &) const = default;
};

struct CalibrationSummary {
    double sigma = 0.0;
    double mean_ppl = 0.0;
};

struct CalibrationSet {
    std::vector<std::vector<std::uint32_t>> sequences;
    std::optional<EbssConfig> ebss; // empty for externally supplied data
    std::optional<CalibrationSummary> summary;
};

/// R_S + log P(v | S).
double extend_logprob(const Branch &branch, double logp_v);

/// exp(-(R_S + log P(v|S)) / (len + 1)).
double extension_perplexity(const Branch &branch, double logp_v);

/// Average NLL of the extension plus the prefix imbalance σ/τ. The candidate token's
/// routing never enters σ.
double score_candidate(const Branch &branch, double logp_v, double tau);

struct Candidate {
    std::size_t parent = 0;
    std::uint32_t token = 0;
    double score = 0.0;
    double log_prob = 0.0;
};

struct PruneResult {
    std::vector<Candidate> selected; // ascending score
    bool underfilled = false;        // fewer than w candidates were offered
};

/// Keeps the w lowest scores; ties go to the lower token id, then the lower parent.
PruneResult prune_topw(std::span<const Candidate> candidates, std::size_t w);

struct EbssStats {
    std::uint64_t prior_passes = 0; // first-token distribution, shared by all searches
    std::vector<std::uint64_t> passes_per_search;
    std::uint64_t total_passes() const;
};

/// Runs one width-w search from the given start tokens. Every step costs one forward
/// pass per live branch; a closing pass folds in the last token's routing.
std::vector<Branch> ebss_search(const ModelWeights &model, std::span<const std::uint32_t> start_tokens,
                                std::uint32_t target_len, double tau, std::uint64_t *forward_passes = nullptr);

/// Samples w distinct start tokens from the model's next-token distribution after the
/// begin-of-sequence token.
std::vector<std::uint32_t> sample_start_tokens(std::span<const double> first_token_log_probs, std::size_t w,
                                               std::uint64_t seed, std::uint64_t search_index);

CalibrationSet ebss_generate(const ModelWeights &model, const EbssConfig &config, EbssStats *stats = nullptr);

/// σ over all routed assignments of the set and the mean per-sequence perplexity.
CalibrationSummary summarize_calibration(const ModelWeights &model,
                                         std::span<const std::vector<std::uint32_t>> sequences);

// Text format: header line then one sequence of space separated ids per line.
void write_calibration_file(const CalibrationSet &set, const std::filesystem::path &path);

/// Throws FormatError carrying the 1-based line number of the first bad line. Ids are
/// checked against vocab_size when it is non-zero.
CalibrationSet read_calibration_file(const std::filesystem::path &path, std::uint32_t vocab_size = 0);

std::string format_real(double v);

} // namespace moeq
