#include "moeq/commands.hpp"

#include "moeq/agq.hpp"
#include "moeq/errors.hpp"
#include "moeq/pipeline.hpp"
#include "moeq/runtime.hpp"

#include <json.hpp>

#include <chrono>
#include <fstream>
#include <sstream>

namespace moeq {

namespace {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

// Keeps held-out samples apart from the EBSS stream drawn with the same global seed.
constexpr std::uint64_t kEvalSeedSalt = 0x9e3779b97f4a7c15ULL;

class Stopwatch {
public:
    Stopwatch() : start_(std::chrono::steady_clock::now()) {}
    json timing() const {
        const std::chrono::duration<double> elapsed = std::chrono::steady_clock::now() - start_;
        return json{{"wall_seconds", elapsed.count()}};
    }

private:
    std::chrono::steady_clock::time_point start_;
};

void prepare_out_dir(const PipelineConfig &config) {
    std::error_code ec;
    fs::create_directories(config.out_dir, ec);
    if (ec) {
        throw FormatError("cannot create output directory " + config.out_dir + ": " + ec.message());
    }
}

void write_json(const json &j, const fs::path &path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw FormatError("cannot open " + path.string() + " for writing");
    }
    out << j.dump(2) << '\n';
    if (!out) {
        throw FormatError("write failed for " + path.string());
    }
}

json read_json(const fs::path &path) {
    std::ifstream in(path);
    if (!in) {
        throw FormatError("cannot open " + path.string());
    }
    try {
        return json::parse(in);
    } catch (const json::parse_error &e) {
        throw FormatError(path.string() + " is not valid JSON: " + e.what());
    }
}

json header(const char *command, const PipelineConfig &config) {
    return json{{"command", command}, {"config_digest", config_digest(config)}};
}

std::size_t token_count(std::span<const std::vector<std::uint32_t>> sequences) {
    std::size_t n = 0;
    for (const auto &s : sequences) {
        n += s.size();
    }
    return n;
}

json summary_json(const std::optional<CalibrationSummary> &s) {
    if (!s) {
        return nullptr;
    }
    return json{{"sigma", s->sigma}, {"mean_ppl", s->mean_ppl}};
}

json calibration_json(const CalibrationSet &set) {
    json j{{"source", set.ebss ? "ebss" : "external"},
           {"sequences", set.sequences.size()},
           {"tokens", token_count(set.sequences)},
           {"summary", summary_json(set.summary)}};
    if (set.ebss) {
        j["ebss"] = {{"w", set.ebss->w},
                     {"target_len", set.ebss->target_len},
                     {"n_sequences", set.ebss->n_sequences},
                     {"tau", set.ebss->tau},
                     {"seed", set.ebss->seed}};
    }
    return j;
}

json stats_json(const EbssStats &stats) {
    return json{{"prior_passes", stats.prior_passes},
                {"passes_per_search", stats.passes_per_search},
                {"total_passes", stats.total_passes()}};
}

json key_json(const TraceKey &key) {
    return json{{"layer", key.layer}, {"expert", key.expert}, {"position", to_string(key.position)}};
}

bool needs_calibration(const PipelineConfig &config) { return config.method != QuantMethod::rtn; }

ModelWeights validated_model(const PipelineConfig &config) {
    config.validate();
    ModelWeights model = resolve_model(config);
    config.validate_for(model.config);
    return model;
}

} // namespace

ArtifactPaths ArtifactPaths::in(const fs::path &dir) {
    return ArtifactPaths{dir / "model.bin",     dir / "calib.txt",     dir / "sample.json",
                         dir / "traces.bin",    dir / "capture.json",  dir / "model.q.bin",
                         dir / "quantize.json", dir / "eval.json",     dir / "report.json"};
}

ModelWeights resolve_model(const PipelineConfig &config) {
    if (!config.model_path.empty()) {
        return load_model(config.model_path);
    }
    return forge_model(config.forge, config.seed, config.router_skew);
}

CalibrationSet resolve_calibration(const PipelineConfig &config, const ModelWeights &model, EbssStats *stats) {
    if (config.ebss) {
        return ebss_generate(model, config.sampler_config(), stats);
    }
    if (config.calibration_path.empty()) {
        throw ConfigError("no calibration source: enable calibration.ebss or set calibration.path");
    }
    CalibrationSet set = read_calibration_file(config.calibration_path, model.config.vocab_size);
    set.ebss.reset();
    set.summary = summarize_calibration(model, set.sequences);
    return set;
}

std::vector<std::vector<std::uint32_t>> resolve_eval_corpus(const PipelineConfig &config, const ModelWeights &model) {
    if (!config.eval_path.empty()) {
        return read_calibration_file(config.eval_path, model.config.vocab_size).sequences;
    }
    return sample_sequences(model, config.eval_sequences, config.eval_length, config.seed ^ kEvalSeedSalt);
}

CommandResult cmd_forge(const PipelineConfig &config) {
    config.validate();
    if (!config.model_path.empty()) {
        throw ConfigError("forge writes a new model; unset model.path");
    }
    prepare_out_dir(config);
    const auto paths = ArtifactPaths::in(config.out_dir);
    const ModelWeights model = forge_model(config.forge, config.seed, config.router_skew);
    save_model(model, paths.model);
    return {{paths.model}, "forged " + paths.model.string() + " config digest " + config_digest(config)};
}

CommandResult cmd_sample(const PipelineConfig &config) {
    const Stopwatch clock;
    const ModelWeights model = validated_model(config);
    prepare_out_dir(config);
    const auto paths = ArtifactPaths::in(config.out_dir);

    EbssStats stats;
    const CalibrationSet set = resolve_calibration(config, model, &stats);
    write_calibration_file(set, paths.calibration);

    json report = header("sample", config);
    report["calibration"] = calibration_json(set);
    report["counters"] = set.ebss ? stats_json(stats) : json(nullptr);
    report["timing"] = clock.timing();
    write_json(report, paths.sample_report);

    std::ostringstream msg;
    msg << "wrote " << set.sequences.size() << " sequences to " << paths.calibration.string() << " (sigma "
        << format_real(set.summary->sigma) << ", mean ppl " << format_real(set.summary->mean_ppl) << ")";
    return {{paths.calibration, paths.sample_report}, msg.str()};
}

CommandResult cmd_capture(const PipelineConfig &config) {
    const Stopwatch clock;
    const ModelWeights model = validated_model(config);
    prepare_out_dir(config);
    const auto paths = ArtifactPaths::in(config.out_dir);

    const CalibrationSet set = resolve_calibration(config, model);
    const TraceMap traces = capture_calibration(model, set.sequences);
    write_trace_dump(traces, paths.traces);

    json report = header("capture", config);
    report["calibration"] = calibration_json(set);
    json records = json::array();
    for (const auto &[key, trace] : traces) {
        json r = key_json(key);
        r["tokens"] = trace.tokens();
        records.push_back(std::move(r));
    }
    report["traces"] = std::move(records);
    report["timing"] = clock.timing();
    write_json(report, paths.capture_report);
    return {{paths.traces, paths.capture_report}, "wrote " + std::to_string(traces.size()) + " traces to " +
                                                      paths.traces.string()};
}

CommandResult cmd_quantize(const PipelineConfig &config) {
    const Stopwatch clock;
    const ModelWeights model = validated_model(config);
    prepare_out_dir(config);
    const auto paths = ArtifactPaths::in(config.out_dir);

    std::optional<CalibrationSet> set;
    std::optional<TraceMap> traces;
    if (needs_calibration(config)) {
        set = resolve_calibration(config, model);
        traces = capture_calibration(model, set->sequences);
    }
    std::vector<LinearReport> linears;
    const QuantizedModel qm =
        quantize_model(model, traces ? &*traces : nullptr, config.quantize_options(), &linears);
    save_quantized_model(qm, paths.quantized);

    json report = header("quantize", config);
    report["method"] = to_string(config.method);
    report["bits"] = config.bits;
    report["agq"] = config.agq;
    report["hadamard"] = config.hadamard;
    report["calibration"] = set ? calibration_json(*set) : json(nullptr);
    json rows = json::array();
    double total_loss = 0.0;
    double total_affinity = 0.0;
    for (const auto &r : linears) {
        json j = key_json(r.key);
        j["tokens"] = r.tokens;
        j["loss"] = r.loss;
        j["affinity_loss"] = r.affinity_loss;
        if (config.method == QuantMethod::awq) {
            j["alpha"] = r.alpha;
        }
        if (config.method == QuantMethod::gptq) {
            j["damping"] = r.damping;
        }
        total_loss += r.loss;
        total_affinity += r.affinity_loss;
        rows.push_back(std::move(j));
    }
    report["linears"] = std::move(rows);
    report["totals"] = {{"loss", total_loss}, {"affinity_loss", total_affinity}};
    report["timing"] = clock.timing();
    write_json(report, paths.quantize_report);
    return {{paths.quantized, paths.quantize_report},
            "wrote " + paths.quantized.string() + " (" + to_string(config.method) + ", " + std::to_string(config.bits) +
                " bit, agq " + (config.agq ? "on" : "off") + ")"};
}

CommandResult cmd_eval(const PipelineConfig &config) {
    const Stopwatch clock;
    const ModelWeights model = validated_model(config);
    prepare_out_dir(config);
    const auto paths = ArtifactPaths::in(config.out_dir);

    // The candidate is a quantized container, or a plain model file for self comparison.
    const fs::path candidate_path =
        config.eval_quantized_path.empty() ? paths.quantized : fs::path(config.eval_quantized_path);
    std::string magic(5, '\0');
    {
        std::ifstream in(candidate_path, std::ios::binary);
        if (!in) {
            throw FormatError("cannot open " + candidate_path.string());
        }
        in.read(magic.data(), static_cast<std::streamsize>(magic.size()));
        magic.resize(static_cast<std::size_t>(in.gcount()));
    }
    ModelWeights candidate;
    json candidate_info;
    if (magic == "MOEQQ") {
        const QuantizedModel qm = load_quantized_model(candidate_path);
        candidate = qm.materialize();
        candidate_info = {{"path", candidate_path.string()}, {"kind", "quantized"}, {"bits", qm.spec.bits}};
    } else if (magic.rfind("MOEQ", 0) == 0) {
        candidate = load_model(candidate_path);
        candidate_info = {{"path", candidate_path.string()}, {"kind", "full_precision"}, {"bits", nullptr}};
    } else {
        throw FormatError("bad magic in " + candidate_path.string() + ": expected \"MOEQQ\" or \"MOEQ\"");
    }
    if (!(candidate.config == model.config)) {
        throw FormatError(candidate_path.string() + " does not match the model configuration");
    }

    const auto corpus = resolve_eval_corpus(config, model);
    const double ppl_fp = corpus_perplexity(model, corpus);
    const double ppl_q = corpus_perplexity(candidate, corpus);
    const double mse = logit_mse(model, candidate, corpus);
    const TraceMap traces = capture_calibration(model, corpus);
    // Two perplexity sweeps, two logit sweeps and one capture sweep per sequence.
    const std::uint64_t passes = 5 * corpus.size();
    const auto losses = linear_losses(model, candidate, traces);

    std::optional<CalibrationSummary> calibration;
    EbssStats stats;
    if (config.ebss || !config.calibration_path.empty()) {
        calibration = resolve_calibration(config, model, &stats).summary;
    }

    json report = header("eval", config);
    report["candidate"] = std::move(candidate_info);
    report["corpus"] = {{"source", config.eval_path.empty() ? "sampled" : "file"},
                        {"sequences", corpus.size()},
                        {"tokens", token_count(corpus)}};
    report["perplexity"] = {{"full_precision", ppl_fp}, {"quantized", ppl_q}, {"ratio", ppl_q / ppl_fp}};
    report["logit_mse"] = mse;
    report["calibration"] = summary_json(calibration);
    json rows = json::array();
    for (const auto &r : losses) {
        json j = key_json(r.key);
        j["tokens"] = r.tokens;
        j["loss"] = r.loss;
        j["affinity_loss"] = r.affinity_loss;
        rows.push_back(std::move(j));
    }
    report["linears"] = std::move(rows);
    report["counters"] = {{"eval_forward_passes", passes},
                          {"ebss_forward_passes", config.ebss ? json(stats.total_passes()) : json(nullptr)}};
    report["timing"] = clock.timing();
    write_json(report, paths.eval_report);

    std::ostringstream msg;
    msg << "ppl " << format_real(ppl_fp) << " -> " << format_real(ppl_q) << ", logit mse " << format_real(mse);
    return {{paths.eval_report}, msg.str()};
}

CommandResult cmd_report(const PipelineConfig &config) {
    config.validate();
    const auto paths = ArtifactPaths::in(config.out_dir);
    json report = header("report", config);
    report["config"] = json::parse(config_to_json(config));
    json stages = json::object();
    json missing = json::array();
    const std::pair<const char *, fs::path> sources[] = {{"sample", paths.sample_report},
                                                         {"capture", paths.capture_report},
                                                         {"quantize", paths.quantize_report},
                                                         {"eval", paths.eval_report}};
    json timing = json::object();
    for (const auto &[name, path] : sources) {
        if (!fs::exists(path)) {
            missing.push_back(name);
            continue;
        }
        json stage = read_json(path);
        if (stage.contains("timing")) {
            timing[name] = stage["timing"];
            stage.erase("timing");
        }
        stages[name] = std::move(stage);
    }
    if (stages.empty()) {
        throw FormatError("no stage reports found in " + config.out_dir);
    }
    report["stages"] = std::move(stages);
    report["missing"] = std::move(missing);
    report["timing"] = std::move(timing);
    write_json(report, paths.report);
    return {{paths.report}, "wrote " + paths.report.string()};
}

} // namespace moeq
