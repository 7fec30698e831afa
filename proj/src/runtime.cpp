#include "moeq/runtime.hpp"

#include "moeq/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

namespace moeq {

namespace {

constexpr double kNormEps = 1e-6;
constexpr double kRopeBase = 10000.0;

std::vector<double> vec_mat(std::span<const double> x, const Matrix &w) {
    std::vector<double> out(w.cols(), 0.0);
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double xi = x[i];
        const auto row = w.row(i);
        for (std::size_t j = 0; j < out.size(); ++j) {
            out[j] += xi * row[j];
        }
    }
    return out;
}

std::vector<double> rms_norm(std::span<const double> x, std::span<const double> gain) {
    double ms = 0.0;
    for (double v : x) {
        ms += v * v;
    }
    const double inv = 1.0 / std::sqrt(ms / static_cast<double>(x.size()) + kNormEps);
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = x[i] * inv * gain[i];
    }
    return out;
}

// Rotary phase on consecutive pairs; an odd trailing dimension is left untouched.
void rotate(std::vector<double> &v, std::size_t position) {
    const std::size_t d = v.size();
    for (std::size_t i = 0; i + 1 < d; i += 2) {
        const double theta = static_cast<double>(position) * std::pow(kRopeBase, -static_cast<double>(i) / d);
        const double c = std::cos(theta);
        const double s = std::sin(theta);
        const double a = v[i];
        const double b = v[i + 1];
        v[i] = a * c - b * s;
        v[i + 1] = a * s + b * c;
    }
}

std::vector<double> log_softmax(std::span<const double> logits) {
    const double mx = *std::max_element(logits.begin(), logits.end());
    double sum = 0.0;
    for (double v : logits) {
        sum += std::exp(v - mx);
    }
    const double lse = mx + std::log(sum);
    std::vector<double> out(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = logits[i] - lse;
    }
    return out;
}

void attention_block(const LayerWeights &layer, std::vector<std::vector<double>> &hidden) {
    const std::size_t n = hidden.size();
    const std::size_t d = hidden.front().size();
    std::vector<std::vector<double>> q(n), k(n), v(n);
    for (std::size_t t = 0; t < n; ++t) {
        const auto a = rms_norm(hidden[t], layer.attn_norm);
        q[t] = vec_mat(a, layer.wq);
        k[t] = vec_mat(a, layer.wk);
        v[t] = vec_mat(a, layer.wv);
        rotate(q[t], t);
        rotate(k[t], t);
    }
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    std::vector<double> scores;
    for (std::size_t t = 0; t < n; ++t) {
        scores.assign(t + 1, 0.0);
        for (std::size_t j = 0; j <= t; ++j) {
            double s = 0.0;
            for (std::size_t i = 0; i < d; ++i) {
                s += q[t][i] * k[j][i];
            }
            scores[j] = s * scale;
        }
        const auto p = softmax(scores);
        std::vector<double> ctx(d, 0.0);
        for (std::size_t j = 0; j <= t; ++j) {
            for (std::size_t i = 0; i < d; ++i) {
                ctx[i] += p[j] * v[j][i];
            }
        }
        const auto out = vec_mat(ctx, layer.wo);
        for (std::size_t i = 0; i < d; ++i) {
            hidden[t][i] += out[i];
        }
    }
}

} // namespace

std::vector<double> RoutingEntry::selected_probs(std::size_t n_shared) const {
    std::vector<double> out;
    out.reserve(topk.size());
    for (auto idx : topk) {
        out.push_back(gate_probs[n_shared + idx]);
    }
    return out;
}

std::vector<double> RoutingEntry::shared_probs(std::size_t n_shared) const {
    return {gate_probs.begin(), gate_probs.begin() + static_cast<std::ptrdiff_t>(n_shared)};
}

std::vector<double> softmax(std::span<const double> logits) {
    const double mx = *std::max_element(logits.begin(), logits.end());
    std::vector<double> out(logits.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp(logits[i] - mx);
        sum += out[i];
    }
    for (double &v : out) {
        v /= sum;
    }
    return out;
}

double silu(double v) { return v / (1.0 + std::exp(-v)); }

std::vector<std::uint32_t> top_k_indices(std::span<const double> values, std::size_t k) {
    if (k > values.size()) {
        throw InvalidInput("top_k_indices: k exceeds the number of values");
    }
    std::vector<std::uint32_t> idx(values.size());
    std::iota(idx.begin(), idx.end(), 0u);
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                      [&](std::uint32_t a, std::uint32_t b) { return values[a] > values[b] || (values[a] == values[b] && a < b); });
    idx.resize(k);
    return idx;
}

std::vector<double> expert_forward(const ExpertFFN &expert, std::span<const double> x, std::vector<double> *intermediate) {
    auto up = vec_mat(x, expert.w_up);
    const auto g = vec_mat(x, expert.w_gate);
    for (std::size_t i = 0; i < up.size(); ++i) {
        up[i] *= silu(g[i]);
    }
    auto y = vec_mat(up, expert.w_down);
    if (intermediate != nullptr) {
        *intermediate = std::move(up);
    }
    return y;
}

std::vector<double> gate(const ModelWeights &model, std::size_t layer, std::span<const double> x) {
    if (x.size() != model.config.d_model) {
        throw InvalidInput("gate: activation has wrong dimension");
    }
    return softmax(vec_mat(x, model.layers.at(layer).gate));
}

MoeOutput moe_forward(const ModelWeights &model, std::size_t layer, std::span<const double> x) {
    const auto &cfg = model.config;
    const auto &lw = model.layers.at(layer);
    MoeOutput out;
    out.trace.gate_probs = gate(model, layer, x);
    const std::span<const double> routed_probs(out.trace.gate_probs.data() + cfg.n_shared, cfg.n_routed);
    out.trace.topk = top_k_indices(routed_probs, cfg.top_k);

    out.y.assign(cfg.d_model, 0.0);
    auto accumulate = [&](const ExpertFFN &e, double g) {
        const auto ey = expert_forward(e, x);
        for (std::size_t i = 0; i < ey.size(); ++i) {
            out.y[i] += g * ey[i];
        }
    };
    for (std::size_t s = 0; s < cfg.n_shared; ++s) {
        accumulate(lw.shared[s], out.trace.gate_probs[s]);
    }
    for (auto r : out.trace.topk) {
        accumulate(lw.routed[r], routed_probs[r]);
    }
    return out;
}

ForwardResult model_forward(const ModelWeights &model, std::span<const std::uint32_t> tokens, const ForwardOptions &options) {
    const auto &cfg = model.config;
    if (tokens.empty() || tokens.size() > cfg.max_seq_len) {
        throw InvalidInput("model_forward: sequence length " + std::to_string(tokens.size()) + " outside [1, " +
                           std::to_string(cfg.max_seq_len) + "]");
    }
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        if (tokens[t] >= cfg.vocab_size) {
            throw InvalidInput("model_forward: token id " + std::to_string(tokens[t]) + " at position " +
                               std::to_string(t) + " is out of vocabulary");
        }
    }

    const std::size_t n = tokens.size();
    std::vector<std::vector<double>> hidden(n);
    for (std::size_t t = 0; t < n; ++t) {
        const auto row = model.token_embedding.row(tokens[t]);
        hidden[t].assign(row.begin(), row.end());
    }

    ForwardResult result;
    result.routing.n_layers = cfg.n_layers;
    result.routing.n_shared = cfg.n_shared;
    result.routing.n_routed = cfg.n_routed;
    result.routing.entries.assign(n, std::vector<RoutingEntry>(cfg.n_layers));

    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const auto &lw = model.layers[l];
        attention_block(lw, hidden);
        for (std::size_t t = 0; t < n; ++t) {
            const auto x = rms_norm(hidden[t], lw.moe_norm);
            auto moe = moe_forward(model, l, x);
            for (std::size_t i = 0; i < x.size(); ++i) {
                hidden[t][i] += moe.y[i];
            }
            if (options.capture_inputs) {
                moe.trace.input = x;
            }
            result.routing.entries[t][l] = std::move(moe.trace);
        }
    }

    const std::size_t first = options.emit == LogProbs::last ? n - 1 : 0;
    for (std::size_t t = first; t < n; ++t) {
        result.log_probs.push_back(log_softmax(vec_mat(hidden[t], model.head)));
    }
    return result;
}

double perplexity_from_log_probs(std::span<const std::vector<double>> log_probs, std::span<const std::uint32_t> tokens) {
    if (tokens.size() < 2) {
        throw InvalidInput("perplexity needs at least two tokens");
    }
    if (log_probs.size() + 1 < tokens.size()) {
        throw InvalidInput("perplexity: fewer distributions than predicted positions");
    }
    double nll = 0.0;
    for (std::size_t i = 1; i < tokens.size(); ++i) {
        nll -= log_probs[i - 1].at(tokens[i]);
    }
    return std::exp(nll / static_cast<double>(tokens.size() - 1));
}

double perplexity(const ModelWeights &model, std::span<const std::uint32_t> tokens) {
    if (tokens.size() < 2) {
        throw InvalidInput("perplexity needs at least two tokens");
    }
    const auto fwd = model_forward(model, tokens);
    return perplexity_from_log_probs(fwd.log_probs, tokens);
}

std::vector<std::vector<std::uint64_t>> routing_counts(std::span<const RoutingTrace> traces) {
    if (traces.empty()) {
        throw InvalidInput("expert_usage: empty trace batch");
    }
    const auto n_layers = traces.front().n_layers;
    const auto n_routed = traces.front().n_routed;
    std::vector<std::vector<std::uint64_t>> counts(n_layers, std::vector<std::uint64_t>(n_routed, 0));
    for (const auto &trace : traces) {
        if (trace.n_layers != n_layers || trace.n_routed != n_routed) {
            throw InvalidInput("expert_usage: traces come from different model shapes");
        }
        for (const auto &token : trace.entries) {
            for (std::size_t l = 0; l < n_layers; ++l) {
                for (auto e : token[l].topk) {
                    ++counts[l][e];
                }
            }
        }
    }
    return counts;
}

ExpertUsageStats expert_usage(std::span<const RoutingTrace> traces) { return expert_usage(routing_counts(traces)); }

ExpertUsageStats expert_usage(const std::vector<std::vector<std::uint64_t>> &counts) {
    if (counts.empty()) {
        throw InvalidInput("expert_usage: no layers");
    }
    ExpertUsageStats stats;
    for (std::size_t l = 0; l < counts.size(); ++l) {
        const auto &row = counts[l];
        const std::uint64_t total = std::accumulate(row.begin(), row.end(), std::uint64_t{0});
        if (total == 0) {
            throw InvalidInput("expert_usage: layer " + std::to_string(l) + " has no routed assignments");
        }
        std::vector<double> freq(row.size());
        for (std::size_t e = 0; e < row.size(); ++e) {
            freq[e] = static_cast<double>(row[e]) / static_cast<double>(total);
        }
        double sigma = 0.0;
        if (freq.size() > 1) {
            const double mean = 1.0 / static_cast<double>(freq.size());
            double ss = 0.0;
            for (double u : freq) {
                ss += (u - mean) * (u - mean);
            }
            sigma = std::sqrt(ss / static_cast<double>(freq.size() - 1));
        }
        stats.frequency.push_back(std::move(freq));
        stats.layer_sigma.push_back(sigma);
    }
    stats.sigma = std::accumulate(stats.layer_sigma.begin(), stats.layer_sigma.end(), 0.0) /
                  static_cast<double>(stats.layer_sigma.size());
    return stats;
}

} // namespace moeq
