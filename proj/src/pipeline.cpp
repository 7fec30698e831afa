#include "moeq/pipeline.hpp"

#include "binary_io.hpp"
#include "moeq/errors.hpp"
#include "moeq/runtime.hpp"

#include <cmath>
#include <fstream>
#include <random>
#include <string>

namespace moeq {

namespace {

constexpr std::string_view kQuantMagic = "MOEQQ";
constexpr std::uint32_t kQuantVersion = 1;
constexpr std::uint8_t kFlagScales = 1;
constexpr std::uint8_t kFlagHadamard = 2;

const Matrix &stored_matrix(const ExpertFFN &e, LinearPosition p) {
    switch (p) {
    case LinearPosition::up:
        return e.w_up;
    case LinearPosition::gate:
        return e.w_gate;
    case LinearPosition::down:
        break;
    }
    return e.w_down;
}

Matrix &stored_matrix(ExpertFFN &e, LinearPosition p) {
    return const_cast<Matrix &>(stored_matrix(static_cast<const ExpertFFN &>(e), p));
}

void write_linear(std::ostream &out, const QuantizedLinear &lin) {
    io::write_u32(out, static_cast<std::uint32_t>(lin.q.rows));
    io::write_u32(out, static_cast<std::uint32_t>(lin.q.cols));
    std::uint8_t flags = 0;
    if (!lin.channel_scales.empty()) {
        flags |= kFlagScales;
    }
    if (lin.hadamard) {
        flags |= kFlagHadamard;
    }
    io::write_u8(out, flags);
    io::write_f32s(out, lin.q.steps);
    if (!lin.channel_scales.empty()) {
        io::write_f32s(out, lin.channel_scales);
    }
    out.write(reinterpret_cast<const char *>(lin.q.codes.data()), static_cast<std::streamsize>(lin.q.codes.size()));
}

QuantizedLinear read_linear(std::istream &in, const QuantSpec &spec, std::size_t rows, std::size_t cols) {
    QuantizedLinear lin;
    lin.q.rows = io::read_u32(in);
    lin.q.cols = io::read_u32(in);
    if (lin.q.rows != rows || lin.q.cols != cols) {
        throw FormatError("quantized record has shape " + std::to_string(lin.q.rows) + "x" + std::to_string(lin.q.cols) +
                          ", expected " + std::to_string(rows) + "x" + std::to_string(cols));
    }
    const auto flags = io::read_u8(in);
    if ((flags & ~(kFlagScales | kFlagHadamard)) != 0) {
        throw FormatError("quantized record has unknown flags");
    }
    lin.hadamard = (flags & kFlagHadamard) != 0;
    lin.q.steps = io::read_f32s(in, rows);
    for (double s : lin.q.steps) {
        if (!(s > 0.0)) {
            throw FormatError("quantized record has a non-positive step");
        }
    }
    if ((flags & kFlagScales) != 0) {
        lin.channel_scales = io::read_f32s(in, cols);
        for (double s : lin.channel_scales) {
            if (!(s > 0.0)) {
                throw FormatError("quantized record has a non-positive channel scale");
            }
        }
    }
    if (lin.hadamard && !is_power_of_two(cols)) {
        throw FormatError("hadamard flag on a non power-of-two record");
    }
    lin.q.codes.resize(rows * cols);
    io::read_bytes(in, reinterpret_cast<char *>(lin.q.codes.data()), lin.q.codes.size());
    for (auto code : lin.q.codes) {
        if (code < spec.q_min || code > spec.q_max) {
            throw FormatError("quantized code " + std::to_string(code) + " outside [" + std::to_string(spec.q_min) +
                              ", " + std::to_string(spec.q_max) + "]");
        }
    }
    return lin;
}

QuantizedLinear quantize_linear(const Matrix &weight, const AffinityTrace *trace, const QuantizeOptions &options,
                                LinearReport &report) {
    QuantizedLinear lin;
    lin.hadamard = options.hadamard;
    Matrix w = weight;
    AffinityTrace local;
    const AffinityTrace *data = trace;
    if (options.hadamard) {
        const Matrix t = hadamard_matrix(w.cols());
        w = matmul(w, t);
        if (trace != nullptr) {
            local = *trace;
            local.x = matmul(trace->x, t);
            data = &local;
        }
    }

    const bool have_data = data != nullptr && data->tokens() > 0;
    switch (options.method) {
    case QuantMethod::rtn:
        lin.q = rtn_quantize(w, options.spec);
        break;
    case QuantMethod::gptq: {
        if (data == nullptr) {
            throw ConfigError("gptq needs calibration traces");
        }
        const Matrix h = options.agq ? affinity_hessian(*data) : hessian(data->x);
        double damping = options.damping;
        for (int attempt = 0;; ++attempt) {
            try {
                lin.q = gptq_quantize(w, h, options.spec, damping);
                break;
            } catch (const FactorizationError &) {
                if (attempt >= options.damping_retries) {
                    throw;
                }
                damping *= 10.0;
            }
        }
        report.damping = damping;
        break;
    }
    case QuantMethod::awq:
        if (data == nullptr) {
            throw ConfigError("awq needs calibration traces");
        }
        if (!have_data) {
            // Nothing routed here: no activation statistics to search over.
            lin.q = rtn_quantize(w, options.spec);
            break;
        }
        {
            auto res = options.agq ? agq_awq(w, *data, options.spec, options.awq_grid)
                                   : awq_scale_search(w, data->x, options.spec, options.awq_grid);
            lin.q = std::move(res.quantized);
            lin.channel_scales = std::move(res.scales);
            report.alpha = res.alpha;
        }
        break;
    }
    return lin;
}

} // namespace

const char *to_string(QuantMethod m) noexcept {
    switch (m) {
    case QuantMethod::rtn:
        return "rtn";
    case QuantMethod::gptq:
        return "gptq";
    case QuantMethod::awq:
        return "awq";
    }
    return "?";
}

QuantMethod parse_quant_method(std::string_view name) {
    if (name == "rtn") {
        return QuantMethod::rtn;
    }
    if (name == "gptq") {
        return QuantMethod::gptq;
    }
    if (name == "awq") {
        return QuantMethod::awq;
    }
    throw ConfigError("unknown quantization method \"" + std::string(name) + "\" (expected rtn, gptq or awq)");
}

Matrix QuantizedLinear::effective_weight() const {
    Matrix w = dequantize(q);
    if (!channel_scales.empty()) {
        std::vector<double> inv(channel_scales.size());
        for (std::size_t j = 0; j < inv.size(); ++j) {
            inv[j] = 1.0 / channel_scales[j];
        }
        w = scale_cols(w, inv);
    }
    if (hadamard) {
        // The orthonormal Hadamard matrix is symmetric, hence its own inverse.
        w = matmul(w, hadamard_matrix(w.cols()));
    }
    return w;
}

ModelWeights QuantizedModel::materialize() const {
    ModelWeights out = base;
    for (const auto &[key, lin] : linears) {
        auto &expert = out.layers.at(key.layer).expert(key.expert);
        stored_matrix(expert, key.position) = lin.effective_weight().transposed();
    }
    return out;
}

Matrix linear_weight(const ModelWeights &model, const TraceKey &key) {
    return stored_matrix(model.layers.at(key.layer).expert(key.expert), key.position).transposed();
}

void save_quantized_model(const QuantizedModel &model, const std::filesystem::path &path) {
    const auto &cfg = model.base.config;
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw FormatError("cannot open " + path.string() + " for writing");
    }
    io::write_magic(out, kQuantMagic);
    io::write_u32(out, kQuantVersion);
    io::write_u32(out, model.spec.bits);
    io::write_i32(out, model.spec.q_min);
    io::write_i32(out, model.spec.q_max);
    write_model_config(out, cfg);
    io::write_f32s(out, model.base.token_embedding.data());
    for (std::uint32_t l = 0; l < cfg.n_layers; ++l) {
        const auto &layer = model.base.layers[l];
        io::write_f32s(out, layer.attn_norm);
        for (const Matrix *m : {&layer.wq, &layer.wk, &layer.wv, &layer.wo}) {
            io::write_f32s(out, m->data());
        }
        io::write_f32s(out, layer.moe_norm);
        io::write_f32s(out, layer.gate.data());
        for (std::uint32_t e = 0; e < cfg.n_experts(); ++e) {
            for (auto pos : {LinearPosition::up, LinearPosition::gate, LinearPosition::down}) {
                const auto it = model.linears.find({l, e, pos});
                if (it == model.linears.end()) {
                    throw InvalidInput("quantized model is missing linear (" + std::to_string(l) + ", " +
                                       std::to_string(e) + ", " + to_string(pos) + ")");
                }
                write_linear(out, it->second);
            }
        }
    }
    io::write_f32s(out, model.base.head.data());
    if (!out) {
        throw FormatError("write failed for " + path.string());
    }
}

QuantizedModel load_quantized_model(const std::filesystem::path &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw FormatError("cannot open " + path.string());
    }
    io::expect_magic(in, kQuantMagic);
    io::expect_version(in, kQuantVersion);
    QuantizedModel qm;
    qm.spec.bits = io::read_u32(in);
    qm.spec.q_min = io::read_i32(in);
    qm.spec.q_max = io::read_i32(in);
    try {
        if (QuantSpec::symmetric(qm.spec.bits) != qm.spec) {
            throw FormatError("quantization spec is not the symmetric range for its bit-width");
        }
    } catch (const ConfigError &e) {
        throw FormatError(e.what());
    }

    auto &w = qm.base;
    w.config = read_model_config(in);
    const auto &c = w.config;
    const std::size_t d = c.d_model;
    w.token_embedding = io::read_matrix(in, c.vocab_size, d);
    for (std::uint32_t l = 0; l < c.n_layers; ++l) {
        LayerWeights layer;
        layer.attn_norm = io::read_f32s(in, d);
        layer.wq = io::read_matrix(in, d, d);
        layer.wk = io::read_matrix(in, d, d);
        layer.wv = io::read_matrix(in, d, d);
        layer.wo = io::read_matrix(in, d, d);
        layer.moe_norm = io::read_f32s(in, d);
        layer.gate = io::read_matrix(in, d, c.n_experts());
        for (std::uint32_t e = 0; e < c.n_experts(); ++e) {
            ExpertFFN expert;
            for (auto pos : {LinearPosition::up, LinearPosition::gate, LinearPosition::down}) {
                const std::size_t rows = pos == LinearPosition::down ? d : c.d_ff;
                const std::size_t cols = pos == LinearPosition::down ? c.d_ff : d;
                auto lin = read_linear(in, qm.spec, rows, cols);
                stored_matrix(expert, pos) = lin.effective_weight().transposed();
                qm.linears.emplace(TraceKey{l, e, pos}, std::move(lin));
            }
            (e < c.n_shared ? layer.shared : layer.routed).push_back(std::move(expert));
        }
        w.layers.push_back(std::move(layer));
    }
    w.head = io::read_matrix(in, d, c.vocab_size);
    io::expect_eof(in);
    return qm;
}

QuantizedModel quantize_model(const ModelWeights &model, const TraceMap *traces, const QuantizeOptions &options,
                              std::vector<LinearReport> *report) {
    const auto &cfg = model.config;
    if (options.method != QuantMethod::rtn && traces == nullptr) {
        throw ConfigError(std::string("method ") + to_string(options.method) + " needs calibration data");
    }
    if (options.hadamard && (!is_power_of_two(cfg.d_model) || !is_power_of_two(cfg.d_ff))) {
        throw ConfigError("hadamard preprocessing needs power-of-two d_model and d_ff");
    }

    QuantizedModel qm;
    qm.spec = options.spec;
    qm.base = model;
    for (std::uint32_t l = 0; l < cfg.n_layers; ++l) {
        for (std::uint32_t e = 0; e < cfg.n_experts(); ++e) {
            for (auto pos : {LinearPosition::up, LinearPosition::gate, LinearPosition::down}) {
                const TraceKey key{l, e, pos};
                const AffinityTrace *trace = nullptr;
                if (traces != nullptr) {
                    const auto it = traces->find(key);
                    if (it != traces->end()) {
                        trace = &it->second;
                    }
                }
                LinearReport entry;
                entry.key = key;
                const Matrix w = linear_weight(model, key);
                auto lin = quantize_linear(w, trace, options, entry);
                if (trace != nullptr) {
                    const Matrix w_hat = lin.effective_weight();
                    entry.tokens = trace->tokens();
                    entry.loss = quant_loss(w, w_hat, trace->x);
                    entry.affinity_loss = affinity_loss(w, w_hat, *trace);
                }
                qm.linears.emplace(key, std::move(lin));
                if (report != nullptr) {
                    report->push_back(entry);
                }
            }
        }
    }
    qm.base = qm.materialize();
    return qm;
}

std::vector<LinearReport> linear_losses(const ModelWeights &reference, const ModelWeights &quantized,
                                        const TraceMap &traces) {
    std::vector<LinearReport> out;
    for (const auto &[key, trace] : traces) {
        LinearReport r;
        r.key = key;
        r.tokens = trace.tokens();
        const Matrix w = linear_weight(reference, key);
        const Matrix w_hat = linear_weight(quantized, key);
        r.loss = quant_loss(w, w_hat, trace.x);
        r.affinity_loss = affinity_loss(w, w_hat, trace);
        out.push_back(r);
    }
    return out;
}

double logit_mse(const ModelWeights &reference, const ModelWeights &candidate,
                 std::span<const std::vector<std::uint32_t>> sequences) {
    if (reference.config != candidate.config) {
        throw InvalidInput("logit_mse: models have different configurations");
    }
    double sum = 0.0;
    std::size_t count = 0;
    for (const auto &seq : sequences) {
        const auto a = model_forward(reference, seq);
        const auto b = model_forward(candidate, seq);
        for (std::size_t t = 0; t < a.log_probs.size(); ++t) {
            for (std::size_t v = 0; v < a.log_probs[t].size(); ++v) {
                const double d = a.log_probs[t][v] - b.log_probs[t][v];
                sum += d * d;
            }
            count += a.log_probs[t].size();
        }
    }
    if (count == 0) {
        throw InvalidInput("logit_mse: no positions to compare");
    }
    return sum / static_cast<double>(count);
}

std::vector<std::vector<std::uint32_t>> sample_sequences(const ModelWeights &model, std::size_t count,
                                                         std::size_t length, std::uint64_t seed) {
    if (length < 1 || length > model.config.max_seq_len) {
        throw ConfigError("sample length must lie in [1, max_seq_len]");
    }
    std::mt19937_64 rng(seed);
    std::vector<std::vector<std::uint32_t>> out;
    const ForwardOptions last_only{LogProbs::last, false};
    for (std::size_t i = 0; i < count; ++i) {
        std::vector<std::uint32_t> context{kBosToken};
        std::vector<std::uint32_t> seq;
        while (seq.size() < length) {
            const auto fwd = model_forward(model, seq.empty() ? std::span<const std::uint32_t>(context)
                                                              : std::span<const std::uint32_t>(seq),
                                           last_only);
            std::vector<double> p(fwd.log_probs.front().size());
            for (std::size_t v = 0; v < p.size(); ++v) {
                p[v] = std::exp(fwd.log_probs.front()[v]);
            }
            std::discrete_distribution<std::uint32_t> dist(p.begin(), p.end());
            seq.push_back(dist(rng));
        }
        out.push_back(std::move(seq));
    }
    return out;
}

std::vector<std::vector<std::uint32_t>> random_token_sequences(std::uint32_t vocab_size, std::size_t count,
                                                               std::size_t length, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::uint32_t> dist(0, vocab_size - 1);
    std::vector<std::vector<std::uint32_t>> out(count, std::vector<std::uint32_t>(length));
    for (auto &seq : out) {
        for (auto &t : seq) {
            t = dist(rng);
        }
    }
    return out;
}

double corpus_perplexity(const ModelWeights &model, std::span<const std::vector<std::uint32_t>> sequences) {
    double nll = 0.0;
    std::size_t scored = 0;
    for (const auto &seq : sequences) {
        if (seq.size() < 2) {
            continue;
        }
        const auto fwd = model_forward(model, seq);
        for (std::size_t i = 1; i < seq.size(); ++i) {
            nll -= fwd.log_probs[i - 1][seq[i]];
        }
        scored += seq.size() - 1;
    }
    if (scored == 0) {
        throw InvalidInput("corpus perplexity needs at least one sequence of length >= 2");
    }
    return std::exp(nll / static_cast<double>(scored));
}

std::uint64_t fnv1a(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char b : bytes) {
        h ^= b;
        h *= 0x100000001b3ull;
    }
    return h;
}

} // namespace moeq
