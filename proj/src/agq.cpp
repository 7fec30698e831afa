#include "moeq/agq.hpp"

#include "binary_io.hpp"
#include "moeq/errors.hpp"
#include "moeq/runtime.hpp"

#include <cmath>
#include <fstream>
#include <string>

namespace moeq {

namespace {

constexpr std::string_view kTraceMagic = "MOEQT";

void check_trace(const AffinityTrace &trace) {
    if (trace.c.size() != trace.x.rows()) {
        throw InvalidInput("affinity trace: " + std::to_string(trace.c.size()) + " affinities for " +
                           std::to_string(trace.x.rows()) + " tokens");
    }
    for (double c : trace.c) {
        if (!(c >= 0.0) || !std::isfinite(c)) {
            throw InvalidInput("affinity trace: affinities must be finite and non-negative");
        }
    }
}

// Rows accumulate in a flat buffer and become a Matrix once capture ends.
struct TraceBuilder {
    std::size_t dim = 0;
    std::vector<double> rows;
    std::vector<double> c;

    void add(std::span<const double> x, double affinity) {
        rows.insert(rows.end(), x.begin(), x.end());
        c.push_back(affinity);
    }
};

} // namespace

const char *to_string(LinearPosition p) noexcept {
    switch (p) {
    case LinearPosition::up:
        return "up";
    case LinearPosition::gate:
        return "gate";
    case LinearPosition::down:
        return "down";
    }
    return "?";
}

TraceMap capture_calibration(const ModelWeights &model, std::span<const std::vector<std::uint32_t>> sequences) {
    const auto &cfg = model.config;
    std::map<TraceKey, TraceBuilder> builders;
    for (std::uint32_t l = 0; l < cfg.n_layers; ++l) {
        for (std::uint32_t e = 0; e < cfg.n_experts(); ++e) {
            builders[{l, e, LinearPosition::up}].dim = cfg.d_model;
            builders[{l, e, LinearPosition::gate}].dim = cfg.d_model;
            builders[{l, e, LinearPosition::down}].dim = cfg.d_ff;
        }
    }

    std::vector<double> intermediate;
    for (const auto &seq : sequences) {
        const auto fwd = model_forward(model, seq, ForwardOptions{LogProbs::last, true});
        for (const auto &token : fwd.routing.entries) {
            for (std::uint32_t l = 0; l < cfg.n_layers; ++l) {
                const auto &entry = token[l];
                auto deposit = [&](std::uint32_t slot) {
                    const double c = entry.gate_probs[slot];
                    expert_forward(model.layers[l].expert(slot), entry.input, &intermediate);
                    builders[{l, slot, LinearPosition::up}].add(entry.input, c);
                    builders[{l, slot, LinearPosition::gate}].add(entry.input, c);
                    builders[{l, slot, LinearPosition::down}].add(intermediate, c);
                };
                for (std::uint32_t s = 0; s < cfg.n_shared; ++s) {
                    deposit(s);
                }
                for (auto r : entry.topk) {
                    deposit(cfg.n_shared + r);
                }
            }
        }
    }

    TraceMap traces;
    for (auto &[key, b] : builders) {
        AffinityTrace t;
        t.layer = key.layer;
        t.expert = key.expert;
        t.position = key.position;
        const std::size_t n = b.c.size();
        t.x = Matrix(n, b.dim, std::move(b.rows));
        t.c = std::move(b.c);
        traces.emplace(key, std::move(t));
    }
    return traces;
}

Matrix affinity_hessian(const AffinityTrace &trace) {
    check_trace(trace);
    std::vector<double> root(trace.c.size());
    for (std::size_t i = 0; i < root.size(); ++i) {
        root[i] = std::sqrt(trace.c[i]);
    }
    return gram(scale_rows(trace.x, root));
}

void AffinityHessianAccumulator::add(std::span<const double> x, double c) {
    if (x.size() != h_.rows()) {
        throw InvalidInput("affinity accumulator: activation has wrong dimension");
    }
    if (!(c >= 0.0) || !std::isfinite(c)) {
        throw InvalidInput("affinity accumulator: affinity must be finite and non-negative");
    }
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double cx = c * x[i];
        auto row = h_.row(i);
        for (std::size_t j = i; j < x.size(); ++j) {
            row[j] += cx * x[j];
        }
    }
    ++tokens_;
}

Matrix AffinityHessianAccumulator::result() const {
    Matrix h = h_;
    for (std::size_t i = 0; i < h.rows(); ++i) {
        for (std::size_t j = 0; j < i; ++j) {
            h(i, j) = h(j, i);
        }
    }
    return h;
}

double affinity_loss(const Matrix &w, const Matrix &w_hat, const AffinityTrace &trace) {
    check_trace(trace);
    const Matrix out = matmul_transposed(subtract(w, w_hat), trace.x); // o x b
    double loss = 0.0;
    for (std::size_t t = 0; t < out.cols(); ++t) {
        double tok = 0.0;
        for (std::size_t r = 0; r < out.rows(); ++r) {
            tok += out(r, t) * out(r, t);
        }
        loss += trace.c[t] * tok;
    }
    return loss;
}

QuantizedTensor agq_gptq(const Matrix &w, const AffinityTrace &trace, const QuantSpec &spec, double damping) {
    return gptq_quantize(w, affinity_hessian(trace), spec, damping);
}

AwqResult agq_awq(const Matrix &w, const AffinityTrace &trace, const QuantSpec &spec, std::size_t grid_size) {
    check_trace(trace);
    return awq_scale_search(w, trace.x, spec, grid_size, trace.c);
}

void write_trace_dump(const TraceMap &traces, const std::filesystem::path &path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw FormatError("cannot open " + path.string() + " for writing");
    }
    io::write_magic(out, kTraceMagic);
    for (const auto &[key, t] : traces) {
        io::write_u32(out, t.layer);
        io::write_u32(out, t.expert);
        io::write_u8(out, static_cast<std::uint8_t>(t.position));
        io::write_u32(out, static_cast<std::uint32_t>(t.x.rows()));
        io::write_u32(out, static_cast<std::uint32_t>(t.x.cols()));
        io::write_f32s(out, t.x.data());
        io::write_f32s(out, t.c);
    }
    if (!out) {
        throw FormatError("write failed for " + path.string());
    }
}

TraceMap read_trace_dump(const std::filesystem::path &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw FormatError("cannot open " + path.string());
    }
    io::expect_magic(in, kTraceMagic);
    TraceMap traces;
    while (in.peek() != std::char_traits<char>::eof()) {
        AffinityTrace t;
        t.layer = io::read_u32(in);
        t.expert = io::read_u32(in);
        const auto pos = io::read_u8(in);
        if (pos > 2) {
            throw FormatError("trace dump: unknown linear position " + std::to_string(pos));
        }
        t.position = static_cast<LinearPosition>(pos);
        const auto rows = io::read_u32(in);
        const auto dim = io::read_u32(in);
        t.x = io::read_matrix(in, rows, dim);
        t.c = io::read_f32s(in, rows);
        traces.emplace(t.key(), std::move(t));
    }
    return traces;
}

} // namespace moeq
