#include "moeq/ebss.hpp"

#include "moeq/errors.hpp"
#include "moeq/runtime.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <string>

namespace moeq {

namespace {

void fold_routing(Branch &branch, const RoutingTrace &trace) {
    const auto &last = trace.entries.back();
    for (std::size_t l = 0; l < last.size(); ++l) {
        for (auto e : last[l].topk) {
            ++branch.usage_counters[l][e];
        }
    }
    branch.cached_sigma = expert_usage(branch.usage_counters).sigma;
}

bool candidate_less(const Candidate &a, const Candidate &b) {
    if (a.score != b.score) {
        return a.score < b.score;
    }
    if (a.token != b.token) {
        return a.token < b.token;
    }
    return a.parent < b.parent;
}

std::uint64_t parse_u64(std::string_view text, std::size_t line) {
    std::uint64_t v = 0;
    const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc{} || ptr != text.data() + text.size()) {
        throw FormatError("line " + std::to_string(line) + ": malformed integer \"" + std::string(text) + "\"");
    }
    return v;
}

double parse_real(std::string_view text, std::size_t line) {
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc{} || ptr != text.data() + text.size()) {
        throw FormatError("line " + std::to_string(line) + ": malformed number \"" + std::string(text) + "\"");
    }
    return v;
}

EbssConfig parse_ebss_header(const std::string &header) {
    std::istringstream in(header);
    std::string tag, version;
    in >> tag >> version;
    if (version != "v1") {
        throw FormatError("line 1: unsupported calibration file version \"" + version + "\"");
    }
    EbssConfig cfg;
    bool have_w = false, have_tau = false, have_seed = false;
    std::string kv;
    while (in >> kv) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) {
            throw FormatError("line 1: malformed header field \"" + kv + "\"");
        }
        const auto key = kv.substr(0, eq);
        const std::string_view value(kv.data() + eq + 1, kv.size() - eq - 1);
        if (key == "w") {
            cfg.w = static_cast<std::uint32_t>(parse_u64(value, 1));
            have_w = true;
        } else if (key == "tau") {
            cfg.tau = parse_real(value, 1);
            have_tau = true;
        } else if (key == "seed") {
            cfg.seed = parse_u64(value, 1);
            have_seed = true;
        } else {
            throw FormatError("line 1: unknown header field \"" + key + "\"");
        }
    }
    if (!have_w || !have_tau || !have_seed) {
        throw FormatError("line 1: ebss header needs w, tau and seed");
    }
    return cfg;
}

} // namespace

std::uint64_t Branch::routed_tokens(std::uint32_t top_k) const {
    if (usage_counters.empty() || top_k == 0) {
        return 0;
    }
    const auto &row = usage_counters.front();
    return std::accumulate(row.begin(), row.end(), std::uint64_t{0}) / top_k;
}

void EbssConfig::validate() const {
    if (w < 1) {
        throw ConfigError("ebss: w must be >= 1");
    }
    if (!(tau > 0.0)) {
        throw ConfigError("ebss: tau must be > 0");
    }
    if (target_len < 2) {
        throw ConfigError("ebss: target_len must be >= 2");
    }
    if (n_sequences < 1) {
        throw ConfigError("ebss: n_sequences must be >= 1");
    }
}

double extend_logprob(const Branch &branch, double logp_v) { return branch.r_s + logp_v; }

double extension_perplexity(const Branch &branch, double logp_v) {
    return std::exp(-extend_logprob(branch, logp_v) / static_cast<double>(branch.tokens.size() + 1));
}

double score_candidate(const Branch &branch, double logp_v, double tau) {
    if (!(tau > 0.0)) {
        throw ConfigError("ebss: tau must be > 0");
    }
    const double avg_nll = -extend_logprob(branch, logp_v) / static_cast<double>(branch.tokens.size() + 1);
    return avg_nll + branch.cached_sigma / tau;
}

PruneResult prune_topw(std::span<const Candidate> candidates, std::size_t w) {
    PruneResult result;
    result.selected.assign(candidates.begin(), candidates.end());
    const std::size_t keep = std::min(w, candidates.size());
    result.underfilled = candidates.size() < w;
    std::partial_sort(result.selected.begin(), result.selected.begin() + static_cast<std::ptrdiff_t>(keep),
                      result.selected.end(), candidate_less);
    result.selected.resize(keep);
    return result;
}

std::uint64_t EbssStats::total_passes() const {
    return std::accumulate(passes_per_search.begin(), passes_per_search.end(), prior_passes);
}

std::vector<Branch> ebss_search(const ModelWeights &model, std::span<const std::uint32_t> start_tokens,
                                std::uint32_t target_len, double tau, std::uint64_t *forward_passes) {
    const auto &cfg = model.config;
    if (start_tokens.empty()) {
        throw ConfigError("ebss: at least one start token is required");
    }
    if (target_len < 2 || target_len > cfg.max_seq_len) {
        throw ConfigError("ebss: target_len must lie in [2, max_seq_len]");
    }
    if (!(tau > 0.0)) {
        throw ConfigError("ebss: tau must be > 0");
    }
    const std::size_t w = start_tokens.size();

    std::vector<Branch> branches;
    for (auto t : start_tokens) {
        Branch b;
        b.tokens = {t};
        b.usage_counters.assign(cfg.n_layers, std::vector<std::uint64_t>(cfg.n_routed, 0));
        branches.push_back(std::move(b));
    }

    std::uint64_t passes = 0;
    const ForwardOptions last_only{LogProbs::last, false};
    std::vector<Candidate> candidates;
    candidates.reserve(w * cfg.vocab_size);

    for (std::uint32_t len = 1; len < target_len; ++len) {
        candidates.clear();
        for (std::size_t bi = 0; bi < branches.size(); ++bi) {
            auto &branch = branches[bi];
            const auto fwd = model_forward(model, branch.tokens, last_only);
            ++passes;
            // Deferred: the pass that consumes the committed token supplies its routing.
            fold_routing(branch, fwd.routing);
            const auto &lp = fwd.log_probs.front();
            for (std::uint32_t v = 0; v < cfg.vocab_size; ++v) {
                candidates.push_back(Candidate{bi, v, score_candidate(branch, lp[v], tau), lp[v]});
            }
        }
        const auto pruned = prune_topw(candidates, w);
        std::vector<Branch> next;
        next.reserve(pruned.selected.size());
        for (const auto &c : pruned.selected) {
            Branch child = branches[c.parent];
            child.r_s = extend_logprob(child, c.log_prob);
            child.tokens.push_back(c.token);
            next.push_back(std::move(child));
        }
        branches = std::move(next);
    }

    for (auto &branch : branches) {
        const auto fwd = model_forward(model, branch.tokens, last_only);
        ++passes;
        fold_routing(branch, fwd.routing);
    }
    if (forward_passes != nullptr) {
        *forward_passes = passes;
    }
    return branches;
}

std::vector<std::uint32_t> sample_start_tokens(std::span<const double> first_token_log_probs, std::size_t w,
                                               std::uint64_t seed, std::uint64_t search_index) {
    if (first_token_log_probs.size() < w) {
        throw ConfigError("ebss: vocab_size (" + std::to_string(first_token_log_probs.size()) +
                          ") is smaller than the branch count w (" + std::to_string(w) + ")");
    }
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(search_index), static_cast<std::uint32_t>(search_index >> 32)};
    std::mt19937_64 rng(seq);
    std::vector<double> weights(first_token_log_probs.size());
    std::transform(first_token_log_probs.begin(), first_token_log_probs.end(), weights.begin(),
                   [](double lp) { return std::exp(lp); });
    std::vector<std::uint32_t> picked;
    picked.reserve(w);
    while (picked.size() < w) {
        std::discrete_distribution<std::uint32_t> dist(weights.begin(), weights.end());
        const auto t = dist(rng);
        picked.push_back(t);
        weights[t] = 0.0;
    }
    return picked;
}

CalibrationSet ebss_generate(const ModelWeights &model, const EbssConfig &config, EbssStats *stats) {
    config.validate();
    if (model.config.vocab_size < config.w) {
        throw ConfigError("ebss: vocab_size (" + std::to_string(model.config.vocab_size) +
                          ") is smaller than the branch count w (" + std::to_string(config.w) + ")");
    }
    const std::uint32_t bos = kBosToken;
    const auto prior = model_forward(model, std::span(&bos, 1), ForwardOptions{LogProbs::last, false});

    CalibrationSet set;
    set.ebss = config;
    EbssStats local;
    local.prior_passes = 1;

    std::vector<std::vector<std::uint64_t>> counts(model.config.n_layers,
                                                   std::vector<std::uint64_t>(model.config.n_routed, 0));
    double ppl_sum = 0.0;
    const std::uint32_t searches = (config.n_sequences + config.w - 1) / config.w;
    for (std::uint32_t s = 0; s < searches; ++s) {
        const auto starts = sample_start_tokens(prior.log_probs.front(), config.w, config.seed, s);
        std::uint64_t passes = 0;
        auto branches = ebss_search(model, starts, config.target_len, config.tau, &passes);
        local.passes_per_search.push_back(passes);
        for (auto &b : branches) {
            if (set.sequences.size() == config.n_sequences) {
                break;
            }
            for (std::size_t l = 0; l < counts.size(); ++l) {
                for (std::size_t e = 0; e < counts[l].size(); ++e) {
                    counts[l][e] += b.usage_counters[l][e];
                }
            }
            ppl_sum += std::exp(-b.r_s / static_cast<double>(b.tokens.size() - 1));
            set.sequences.push_back(std::move(b.tokens));
        }
    }
    set.summary = CalibrationSummary{expert_usage(counts).sigma, ppl_sum / static_cast<double>(set.sequences.size())};
    if (stats != nullptr) {
        *stats = std::move(local);
    }
    return set;
}

CalibrationSummary summarize_calibration(const ModelWeights &model, std::span<const std::vector<std::uint32_t>> sequences) {
    if (sequences.empty()) {
        throw InvalidInput("calibration set is empty");
    }
    std::vector<RoutingTrace> traces;
    double ppl_sum = 0.0;
    std::size_t scored = 0;
    for (const auto &seq : sequences) {
        auto fwd = model_forward(model, seq);
        if (seq.size() >= 2) {
            ppl_sum += perplexity_from_log_probs(fwd.log_probs, seq);
            ++scored;
        }
        traces.push_back(std::move(fwd.routing));
    }
    CalibrationSummary summary;
    summary.sigma = expert_usage(traces).sigma;
    summary.mean_ppl = scored == 0 ? std::numeric_limits<double>::quiet_NaN() : ppl_sum / static_cast<double>(scored);
    return summary;
}

std::string format_real(double v) {
    char buf[64];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, ptr);
}

void write_calibration_file(const CalibrationSet &set, const std::filesystem::path &path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw FormatError("cannot open " + path.string() + " for writing");
    }
    if (set.ebss) {
        out << "#ebss v1 w=" << set.ebss->w << " tau=" << format_real(set.ebss->tau) << " seed=" << set.ebss->seed << '\n';
    } else {
        out << "#external v1\n";
    }
    for (const auto &seq : set.sequences) {
        for (std::size_t i = 0; i < seq.size(); ++i) {
            if (i > 0) {
                out << ' ';
            }
            out << seq[i];
        }
        out << '\n';
    }
    if (!out) {
        throw FormatError("write failed for " + path.string());
    }
}

CalibrationSet read_calibration_file(const std::filesystem::path &path, std::uint32_t vocab_size) {
    std::ifstream in(path);
    if (!in) {
        throw FormatError("cannot open " + path.string());
    }
    CalibrationSet set;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (line_no == 1 && line.starts_with('#')) {
            if (line.starts_with("#ebss ")) {
                set.ebss = parse_ebss_header(line);
            } else if (line != "#external v1") {
                throw FormatError("line 1: unrecognized header \"" + line + "\"");
            }
            continue;
        }
        if (line.empty()) {
            throw FormatError("line " + std::to_string(line_no) + ": empty sequence");
        }
        std::vector<std::uint32_t> seq;
        std::size_t pos = 0;
        while (pos <= line.size()) {
            const auto next = std::min(line.find(' ', pos), line.size());
            const auto id = parse_u64(std::string_view(line).substr(pos, next - pos), line_no);
            if (id > std::numeric_limits<std::uint32_t>::max() || (vocab_size != 0 && id >= vocab_size)) {
                throw FormatError("line " + std::to_string(line_no) + ": token id " + std::to_string(id) +
                                  " is out of vocabulary");
            }
            seq.push_back(static_cast<std::uint32_t>(id));
            pos = next + 1;
        }
        set.sequences.push_back(std::move(seq));
    }
    return set;
}

} // namespace moeq
