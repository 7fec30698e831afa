#include "moeq/model.hpp"

#include "binary_io.hpp"
#include "moeq/errors.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <string>

namespace moeq {

namespace {

constexpr std::string_view kModelMagic = "MOEQ";
constexpr std::uint32_t kModelVersion = 1;

constexpr double kGateScale = 4.0;
constexpr double kHeadScale = 0.15;
constexpr double kSkewScale = 3.0;
constexpr double kCopyGain = 2.0;     // identity added to the value and output maps
constexpr std::size_t kCommonTokens = 16;
constexpr double kRarePenalty = 5.0;  // logit offset for tokens outside the common set
constexpr double kAntiRepeat = 4.0;   // discourages emitting the current token again

void check(bool ok, const std::string &what) {
    if (!ok) {
        throw ConfigError(what);
    }
}

void check_shape(const Matrix &m, std::size_t rows, std::size_t cols, const char *name) {
    if (m.rows() != rows || m.cols() != cols) {
        throw InvalidInput(std::string("tensor ") + name + " has shape " + std::to_string(m.rows()) + "x" +
                           std::to_string(m.cols()) + ", expected " + std::to_string(rows) + "x" +
                           std::to_string(cols));
    }
    for (double v : m.data()) {
        if (!std::isfinite(v)) {
            throw InvalidInput(std::string("tensor ") + name + " has a non-finite entry");
        }
    }
}

void check_vector(const std::vector<double> &v, std::size_t n, const char *name) {
    check_shape(Matrix(1, v.size(), v), 1, n, name);
}

// Values are rounded to f32 at creation so the binary container reproduces them exactly.
class Init {
public:
    explicit Init(std::uint64_t seed) : rng_(seed) {}

    Matrix gaussian(std::size_t rows, std::size_t cols, double stddev) {
        Matrix m(rows, cols);
        for (double &v : m.data()) {
            v = to_f32(normal_(rng_) * stddev);
        }
        return m;
    }

    std::vector<double> unit_vector(std::size_t n) {
        std::vector<double> v(n);
        double norm = 0.0;
        for (double &x : v) {
            x = normal_(rng_);
            norm += x * x;
        }
        norm = std::sqrt(norm);
        for (double &x : v) {
            x /= norm;
        }
        return v;
    }

    std::mt19937_64 &rng() { return rng_; }

    static double to_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

private:
    std::mt19937_64 rng_;
    std::normal_distribution<double> normal_{0.0, 1.0};
};

ExpertFFN forge_expert(Init &init, const ModelConfig &c) {
    const double in_std = 1.0 / std::sqrt(static_cast<double>(c.d_model));
    const double out_std = 0.5 / std::sqrt(static_cast<double>(c.d_ff));
    ExpertFFN e;
    e.w_up = init.gaussian(c.d_model, c.d_ff, in_std);
    e.w_gate = init.gaussian(c.d_model, c.d_ff, in_std);
    e.w_down = init.gaussian(c.d_ff, c.d_model, out_std);
    return e;
}

void write_matrix(std::ostream &out, const Matrix &m) { io::write_f32s(out, m.data()); }

} // namespace

void ModelConfig::validate() const {
    check(vocab_size >= 2, "vocab_size must be >= 2");
    check(d_model >= 1, "d_model must be >= 1");
    check(d_ff >= 1, "d_ff must be >= 1");
    check(n_layers >= 1, "n_layers must be >= 1");
    check(n_routed >= 1, "n_routed must be >= 1");
    check(top_k >= 1 && top_k <= n_routed,
          "top_k must satisfy 1 <= k <= n_routed (k=" + std::to_string(top_k) + ", n=" + std::to_string(n_routed) + ")");
    check(max_seq_len >= 1, "max_seq_len must be >= 1");
}

void ModelWeights::validate() const {
    config.validate();
    const std::size_t d = config.d_model;
    const std::size_t f = config.d_ff;
    check_shape(token_embedding, config.vocab_size, d, "token_embedding");
    check_shape(head, d, config.vocab_size, "head");
    if (layers.size() != config.n_layers) {
        throw InvalidInput("layer count does not match config");
    }
    for (const auto &layer : layers) {
        check_vector(layer.attn_norm, d, "attn_norm");
        check_vector(layer.moe_norm, d, "moe_norm");
        check_shape(layer.wq, d, d, "wq");
        check_shape(layer.wk, d, d, "wk");
        check_shape(layer.wv, d, d, "wv");
        check_shape(layer.wo, d, d, "wo");
        check_shape(layer.gate, d, config.n_experts(), "gate");
        if (layer.shared.size() != config.n_shared || layer.routed.size() != config.n_routed) {
            throw InvalidInput("expert count does not match config");
        }
        for (std::size_t s = 0; s < config.n_experts(); ++s) {
            const auto &e = layer.expert(s);
            check_shape(e.w_up, d, f, "w_up");
            check_shape(e.w_gate, d, f, "w_gate");
            check_shape(e.w_down, f, d, "w_down");
        }
    }
}

ModelWeights forge_model(const ModelConfig &config, std::uint64_t seed, double router_skew) {
    config.validate();
    if (!(router_skew >= 0.0) || !std::isfinite(router_skew)) {
        throw ConfigError("router_skew must be finite and >= 0");
    }
    Init init(seed);
    const std::size_t d = config.d_model;
    const double d_std = 1.0 / std::sqrt(static_cast<double>(d));

    ModelWeights w;
    w.config = config;

    // Every embedding shares a common component along `anchor`; the router skew is
    // expressed along the same direction so it survives normalization.
    const auto anchor = init.unit_vector(d);
    w.token_embedding = init.gaussian(config.vocab_size, d, 1.0);
    const Matrix identity_part = w.token_embedding;
    const double anchor_scale = std::sqrt(static_cast<double>(d));
    for (std::size_t t = 0; t < config.vocab_size; ++t) {
        for (std::size_t j = 0; j < d; ++j) {
            w.token_embedding(t, j) = Init::to_f32(w.token_embedding(t, j) + anchor_scale * anchor[j]);
        }
    }

    for (std::size_t l = 0; l < config.n_layers; ++l) {
        LayerWeights layer;
        layer.attn_norm.assign(d, 1.0);
        layer.moe_norm.assign(d, 1.0);
        layer.wq = init.gaussian(d, d, d_std);
        layer.wk = init.gaussian(d, d, d_std);
        layer.wv = init.gaussian(d, d, d_std);
        layer.wo = init.gaussian(d, d, 0.5 * d_std);
        for (std::size_t j = 0; j < d; ++j) {
            layer.wv(j, j) = Init::to_f32(layer.wv(j, j) + std::sqrt(kCopyGain));
            layer.wo(j, j) = Init::to_f32(layer.wo(j, j) + std::sqrt(kCopyGain));
        }
        layer.gate = init.gaussian(d, config.n_experts(), kGateScale * d_std);
        // Remove the anchor component so that, without skew, the shared embedding
        // direction carries no routing preference.
        for (std::size_t col = 0; col < config.n_experts(); ++col) {
            double dot = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                dot += layer.gate(j, col) * anchor[j];
            }
            for (std::size_t j = 0; j < d; ++j) {
                layer.gate(j, col) = Init::to_f32(layer.gate(j, col) - dot * anchor[j]);
            }
        }

        // Bias ramp over routed columns, +0.5 .. -0.5 in a per-layer shuffled order.
        std::vector<std::size_t> order(config.n_routed);
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::shuffle(order.begin(), order.end(), init.rng());
        for (std::size_t rank = 0; rank < order.size(); ++rank) {
            const double ramp = config.n_routed > 1 ? 0.5 - static_cast<double>(rank) / (config.n_routed - 1) : 0.0;
            const std::size_t col = config.n_shared + order[rank];
            for (std::size_t j = 0; j < d; ++j) {
                layer.gate(j, col) = Init::to_f32(layer.gate(j, col) + kSkewScale * router_skew * ramp * anchor[j] * d_std);
            }
        }

        for (std::size_t s = 0; s < config.n_shared; ++s) {
            layer.shared.push_back(forge_expert(init, config));
        }
        for (std::size_t r = 0; r < config.n_routed; ++r) {
            layer.routed.push_back(forge_expert(init, config));
        }
        w.layers.push_back(std::move(layer));
    }
    w.head = init.gaussian(d, config.vocab_size, kHeadScale * d_std);
    // A small shuffled set of common tokens, the rest pushed down along the anchor.
    std::vector<std::size_t> rank(config.vocab_size);
    std::iota(rank.begin(), rank.end(), std::size_t{0});
    std::shuffle(rank.begin(), rank.end(), init.rng());
    for (std::size_t v = 0; v < config.vocab_size; ++v) {
        const double z = rank[v] < kCommonTokens ? 0.0 : -kRarePenalty;
        for (std::size_t j = 0; j < d; ++j) {
            w.head(j, v) = Init::to_f32(w.head(j, v) + z * anchor[j] / anchor_scale -
                                        kAntiRepeat * identity_part(v, j) / static_cast<double>(d));
        }
    }
    return w;
}

void write_model_config(std::ostream &out, const ModelConfig &c) {
    for (std::uint32_t v : {c.vocab_size, c.d_model, c.n_layers, c.d_ff, c.n_shared, c.n_routed, c.top_k, c.max_seq_len}) {
        io::write_u32(out, v);
    }
}

ModelConfig read_model_config(std::istream &in) {
    ModelConfig c;
    for (std::uint32_t *field : {&c.vocab_size, &c.d_model, &c.n_layers, &c.d_ff, &c.n_shared, &c.n_routed, &c.top_k,
                                 &c.max_seq_len}) {
        *field = io::read_u32(in);
    }
    try {
        c.validate();
    } catch (const ConfigError &e) {
        throw FormatError(std::string("invalid model config in file: ") + e.what());
    }
    return c;
}

void save_model(const ModelWeights &model, const std::filesystem::path &path) {
    model.validate();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw FormatError("cannot open " + path.string() + " for writing");
    }
    io::write_magic(out, kModelMagic);
    io::write_u32(out, kModelVersion);
    write_model_config(out, model.config);
    write_matrix(out, model.token_embedding);
    for (const auto &layer : model.layers) {
        io::write_f32s(out, layer.attn_norm);
        for (const Matrix *m : {&layer.wq, &layer.wk, &layer.wv, &layer.wo}) {
            write_matrix(out, *m);
        }
        io::write_f32s(out, layer.moe_norm);
        write_matrix(out, layer.gate);
        for (std::size_t s = 0; s < model.config.n_experts(); ++s) {
            const auto &e = layer.expert(s);
            write_matrix(out, e.w_up);
            write_matrix(out, e.w_gate);
            write_matrix(out, e.w_down);
        }
    }
    write_matrix(out, model.head);
    if (!out) {
        throw FormatError("write failed for " + path.string());
    }
}

ModelWeights load_model(const std::filesystem::path &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw FormatError("cannot open " + path.string());
    }
    io::expect_magic(in, kModelMagic);
    io::expect_version(in, kModelVersion);
    ModelWeights w;
    w.config = read_model_config(in);
    const auto &c = w.config;
    const std::size_t d = c.d_model;
    w.token_embedding = io::read_matrix(in, c.vocab_size, d);
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        LayerWeights layer;
        layer.attn_norm = io::read_f32s(in, d);
        layer.wq = io::read_matrix(in, d, d);
        layer.wk = io::read_matrix(in, d, d);
        layer.wv = io::read_matrix(in, d, d);
        layer.wo = io::read_matrix(in, d, d);
        layer.moe_norm = io::read_f32s(in, d);
        layer.gate = io::read_matrix(in, d, c.n_experts());
        for (std::size_t s = 0; s < c.n_experts(); ++s) {
            ExpertFFN e;
            e.w_up = io::read_matrix(in, d, c.d_ff);
            e.w_gate = io::read_matrix(in, d, c.d_ff);
            e.w_down = io::read_matrix(in, c.d_ff, d);
            (s < c.n_shared ? layer.shared : layer.routed).push_back(std::move(e));
        }
        w.layers.push_back(std::move(layer));
    }
    w.head = io::read_matrix(in, d, c.vocab_size);
    io::expect_eof(in);
    return w;
}

} // namespace moeq
