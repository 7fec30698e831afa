#include "moeq/agq.hpp"
#include "moeq/commands.hpp"
#include "moeq/config.hpp"
#include "moeq/ebss.hpp"
#include "moeq/errors.hpp"
#include "moeq/model.hpp"
#include "moeq/pipeline.hpp"
#include "moeq/quant.hpp"
#include "moeq/runtime.hpp"

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <algorithm>
#include <string>
#include <vector>

namespace py = pybind11;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;
using Sequences = std::vector<std::vector<std::uint32_t>>;

moeq::Matrix to_matrix(const Array &a) {
    if (a.ndim() != 2) {
        throw moeq::InvalidInput("expected a 2-d array, got " + std::to_string(a.ndim()) + " dimensions");
    }
    const auto rows = static_cast<std::size_t>(a.shape(0));
    const auto cols = static_cast<std::size_t>(a.shape(1));
    return moeq::Matrix(rows, cols, std::vector<double>(a.data(), a.data() + rows * cols));
}

std::vector<double> to_vector(const Array &a) {
    if (a.ndim() != 1) {
        throw moeq::InvalidInput("expected a 1-d array, got " + std::to_string(a.ndim()) + " dimensions");
    }
    return std::vector<double>(a.data(), a.data() + a.shape(0));
}

Array to_array(const moeq::Matrix &m) {
    Array out({m.rows(), m.cols()});
    std::copy(m.data().begin(), m.data().end(), out.mutable_data());
    return out;
}

Array to_array(const std::vector<double> &v) {
    Array out(static_cast<py::ssize_t>(v.size()));
    std::copy(v.begin(), v.end(), out.mutable_data());
    return out;
}

py::array_t<std::int8_t> codes_array(const moeq::QuantizedTensor &q) {
    py::array_t<std::int8_t> out({q.rows, q.cols});
    std::copy(q.codes.begin(), q.codes.end(), out.mutable_data());
    return out;
}

moeq::QuantizedTensor from_codes(const py::array_t<std::int8_t, py::array::c_style | py::array::forcecast> &codes,
                                 const Array &steps) {
    if (codes.ndim() != 2) {
        throw moeq::InvalidInput("codes must be a 2-d array");
    }
    moeq::QuantizedTensor q;
    q.rows = static_cast<std::size_t>(codes.shape(0));
    q.cols = static_cast<std::size_t>(codes.shape(1));
    q.codes.assign(codes.data(), codes.data() + q.rows * q.cols);
    q.steps = to_vector(steps);
    if (q.steps.size() != q.rows) {
        throw moeq::InvalidInput("steps must hold one value per row");
    }
    return q;
}

py::tuple quantized_tuple(const moeq::QuantizedTensor &q) { return py::make_tuple(codes_array(q), to_array(q.steps)); }

moeq::AffinityTrace make_trace(const Array &x, const Array &c) {
    moeq::AffinityTrace t;
    t.x = to_matrix(x);
    t.c = to_vector(c);
    if (t.c.size() != t.x.rows()) {
        throw moeq::InvalidInput("affinities must hold one value per row of x");
    }
    return t;
}

moeq::PipelineConfig make_config(const std::string &json, const std::vector<std::string> &overrides) {
    moeq::PipelineConfig config = json.empty() ? moeq::PipelineConfig{} : moeq::parse_config(json);
    for (const auto &assignment : overrides) {
        moeq::apply_override(config, assignment);
    }
    return config;
}

} // namespace

PYBIND11_MODULE(_moeq, m) {
    m.doc() = "MoE post-training quantization core";

    py::register_exception<moeq::InvalidInput>(m, "InvalidInput", PyExc_ValueError);
    py::register_exception<moeq::ConfigError>(m, "ConfigError", PyExc_ValueError);
    py::register_exception<moeq::UnsupportedShape>(m, "UnsupportedShape", PyExc_ValueError);
    py::register_exception<moeq::FormatError>(m, "FormatError", PyExc_IOError);
    py::register_exception<moeq::FactorizationError>(m, "FactorizationError", PyExc_ArithmeticError);

    py::class_<moeq::ModelConfig>(m, "ModelConfig")
        .def(py::init([](std::uint32_t vocab_size, std::uint32_t d_model, std::uint32_t n_layers, std::uint32_t d_ff,
                         std::uint32_t n_shared, std::uint32_t n_routed, std::uint32_t top_k,
                         std::uint32_t max_seq_len) {
                 moeq::ModelConfig c{vocab_size, d_model, n_layers, d_ff, n_shared, n_routed, top_k, max_seq_len};
                 c.validate();
                 return c;
             }),
             py::arg("vocab_size") = 256, py::arg("d_model") = 32, py::arg("n_layers") = 2, py::arg("d_ff") = 64,
             py::arg("n_shared") = 1, py::arg("n_routed") = 8, py::arg("top_k") = 2, py::arg("max_seq_len") = 64)
        .def_readonly("vocab_size", &moeq::ModelConfig::vocab_size)
        .def_readonly("d_model", &moeq::ModelConfig::d_model)
        .def_readonly("n_layers", &moeq::ModelConfig::n_layers)
        .def_readonly("d_ff", &moeq::ModelConfig::d_ff)
        .def_readonly("n_shared", &moeq::ModelConfig::n_shared)
        .def_readonly("n_routed", &moeq::ModelConfig::n_routed)
        .def_readonly("top_k", &moeq::ModelConfig::top_k)
        .def_readonly("max_seq_len", &moeq::ModelConfig::max_seq_len)
        .def("__eq__", [](const moeq::ModelConfig &a, const moeq::ModelConfig &b) { return a == b; })
        .def("__repr__", [](const moeq::ModelConfig &c) {
            return "ModelConfig(vocab_size=" + std::to_string(c.vocab_size) + ", d_model=" + std::to_string(c.d_model) +
                   ", n_layers=" + std::to_string(c.n_layers) + ", n_routed=" + std::to_string(c.n_routed) +
                   ", top_k=" + std::to_string(c.top_k) + ")";
        });

    py::class_<moeq::ModelWeights>(m, "Model")
        .def_readonly("config", &moeq::ModelWeights::config)
        .def_property_readonly("head", [](const moeq::ModelWeights &w) { return to_array(w.head); })
        .def("gate", [](const moeq::ModelWeights &w, std::size_t layer) { return to_array(w.layers.at(layer).gate); },
             py::arg("layer"))
        .def("save", [](const moeq::ModelWeights &w, const std::filesystem::path &path) { moeq::save_model(w, path); },
             py::arg("path"))
        .def("__eq__", [](const moeq::ModelWeights &a, const moeq::ModelWeights &b) { return a == b; });

    m.def("forge_model", &moeq::forge_model, py::arg("config"), py::arg("seed") = 0, py::arg("router_skew") = 0.0);
    m.def("load_model", &moeq::load_model, py::arg("path"));

    m.def(
        "forward",
        [](const moeq::ModelWeights &model, const std::vector<std::uint32_t> &tokens) {
            const auto result = moeq::model_forward(model, tokens);
            Array out({result.log_probs.size(), static_cast<std::size_t>(model.config.vocab_size)});
            double *dst = out.mutable_data();
            for (const auto &row : result.log_probs) {
                dst = std::copy(row.begin(), row.end(), dst);
            }
            return out;
        },
        py::arg("model"), py::arg("tokens"), "Next-token log-probabilities, one row per position.");
    m.def(
        "perplexity", [](const moeq::ModelWeights &model, const std::vector<std::uint32_t> &tokens) {
            return moeq::perplexity(model, tokens);
        },
        py::arg("model"), py::arg("tokens"));
    m.def(
        "expert_usage",
        [](const moeq::ModelWeights &model, const Sequences &sequences) {
            std::vector<moeq::RoutingTrace> traces;
            for (const auto &s : sequences) {
                traces.push_back(moeq::model_forward(model, s, {.emit = moeq::LogProbs::last}).routing);
            }
            const auto stats = moeq::expert_usage(traces);
            return py::make_tuple(stats.frequency, stats.sigma);
        },
        py::arg("model"), py::arg("sequences"), "Per-layer routed frequencies and the mean balance sigma.");

    m.def(
        "ebss_generate",
        [](const moeq::ModelWeights &model, std::uint32_t n_sequences, std::uint32_t target_len, std::uint32_t w,
           double tau, std::uint64_t seed) {
            const moeq::EbssConfig config{.w = w, .target_len = target_len, .n_sequences = n_sequences, .tau = tau,
                                          .seed = seed};
            moeq::EbssStats stats;
            const auto set = moeq::ebss_generate(model, config, &stats);
            py::dict info;
            info["sigma"] = set.summary->sigma;
            info["mean_ppl"] = set.summary->mean_ppl;
            info["forward_passes"] = stats.total_passes();
            return py::make_tuple(set.sequences, info);
        },
        py::arg("model"), py::arg("n_sequences") = 16, py::arg("target_len") = 32, py::arg("w") = moeq::kDefaultBranches,
        py::arg("tau") = moeq::kDefaultTau, py::arg("seed") = 0);
    m.def(
        "sample_sequences",
        [](const moeq::ModelWeights &model, std::size_t count, std::size_t length, std::uint64_t seed) {
            return moeq::sample_sequences(model, count, length, seed);
        },
        py::arg("model"), py::arg("count"), py::arg("length"), py::arg("seed") = 0);

    m.def(
        "rtn_quantize", [](const Array &w, std::uint32_t bits) {
            return quantized_tuple(moeq::rtn_quantize(to_matrix(w), moeq::QuantSpec::symmetric(bits)));
        },
        py::arg("w"), py::arg("bits") = 4, "Returns (codes, steps).");
    m.def(
        "gptq_quantize",
        [](const Array &w, const Array &h, std::uint32_t bits, double damping) {
            return quantized_tuple(
                moeq::gptq_quantize(to_matrix(w), to_matrix(h), moeq::QuantSpec::symmetric(bits), damping));
        },
        py::arg("w"), py::arg("h"), py::arg("bits") = 4, py::arg("damping") = moeq::kDefaultDamping);
    m.def(
        "agq_gptq",
        [](const Array &w, const Array &x, const Array &c, std::uint32_t bits) {
            return quantized_tuple(moeq::agq_gptq(to_matrix(w), make_trace(x, c), moeq::QuantSpec::symmetric(bits)));
        },
        py::arg("w"), py::arg("x"), py::arg("c"), py::arg("bits") = 4);
    m.def(
        "dequantize", [](const py::array_t<std::int8_t, py::array::c_style | py::array::forcecast> &codes,
                         const Array &steps) { return to_array(moeq::dequantize(from_codes(codes, steps))); },
        py::arg("codes"), py::arg("steps"));
    m.def(
        "hessian", [](const Array &x) { return to_array(moeq::hessian(to_matrix(x))); }, py::arg("x"));
    m.def(
        "quant_loss",
        [](const Array &w, const Array &w_hat, const Array &x) {
            return moeq::quant_loss(to_matrix(w), to_matrix(w_hat), to_matrix(x));
        },
        py::arg("w"), py::arg("w_hat"), py::arg("x"));
    m.def(
        "affinity_hessian", [](const Array &x, const Array &c) { return to_array(moeq::affinity_hessian(make_trace(x, c))); },
        py::arg("x"), py::arg("c"));
    m.def(
        "affinity_loss",
        [](const Array &w, const Array &w_hat, const Array &x, const Array &c) {
            return moeq::affinity_loss(to_matrix(w), to_matrix(w_hat), make_trace(x, c));
        },
        py::arg("w"), py::arg("w_hat"), py::arg("x"), py::arg("c"));
    m.def(
        "hadamard_matrix", [](std::size_t n) { return to_array(moeq::hadamard_matrix(n)); }, py::arg("n"));
    m.def(
        "hadamard_preprocess", [](const Array &w) { return to_array(moeq::hadamard_preprocess(to_matrix(w))); },
        py::arg("w"));

    m.def("default_config", &moeq::default_config_json, "Default pipeline config as JSON.");
    m.def(
        "effective_config",
        [](const std::string &json, const std::vector<std::string> &overrides) {
            return moeq::config_to_json(make_config(json, overrides));
        },
        py::arg("config") = "", py::arg("overrides") = std::vector<std::string>{});
    m.def(
        "run",
        [](const std::string &verb, const std::string &json, const std::vector<std::string> &overrides) {
            using Command = moeq::CommandResult (*)(const moeq::PipelineConfig &);
            static const std::vector<std::pair<std::string, Command>> verbs = {
                {"forge", moeq::cmd_forge},     {"sample", moeq::cmd_sample}, {"capture", moeq::cmd_capture},
                {"quantize", moeq::cmd_quantize}, {"eval", moeq::cmd_eval},   {"report", moeq::cmd_report},
            };
            const auto it = std::find_if(verbs.begin(), verbs.end(), [&](const auto &v) { return v.first == verb; });
            if (it == verbs.end()) {
                throw moeq::ConfigError("unknown command '" + verb + "'");
            }
            const auto config = make_config(json, overrides);
            moeq::CommandResult result;
            {
                py::gil_scoped_release release;
                result = it->second(config);
            }
            return py::make_tuple(result.written, result.message);
        },
        py::arg("verb"), py::arg("config") = "", py::arg("overrides") = std::vector<std::string>{},
        "Runs a pipeline command; returns (written paths, message).");
}
