#pragma once

#include "moeq/config.hpp"
#include "moeq/ebss.hpp"
#include "moeq/model.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace moeq {

/// Fixed artifact names inside the output directory.
struct ArtifactPaths {
    std::filesystem::path model;           // model.bin
    std::filesystem::path calibration;     // calib.txt
    std::filesystem::path sample_report;   // sample.json
    std::filesystem::path traces;          // traces.bin
    std::filesystem::path capture_report;  // capture.json
    std::filesystem::path quantized;       // model.q.bin
    std::filesystem::path quantize_report; // quantize.json
    std::filesystem::path eval_report;     // eval.json
    std::filesystem::path report;          // report.json

    static ArtifactPaths in(const std::filesystem::path &dir);
};

struct CommandResult {
    std::vector<std::filesystem::path> written;
    std::string message; // one line for the terminal
};

/// The configured model file, or the model forged from the config when no path is set.
ModelWeights resolve_model(const PipelineConfig &config);

/// EBSS output or the external calibration file. Throws ConfigError when neither is
/// configured.
CalibrationSet resolve_calibration(const PipelineConfig &config, const ModelWeights &model,
                                   EbssStats *stats = nullptr);

/// Held-out corpus: the eval file, or ancestral samples from the full precision model.
std::vector<std::vector<std::uint32_t>> resolve_eval_corpus(const PipelineConfig &config, const ModelWeights &model);

// Each command derives everything it needs from the config, so reruns with the same
// config and seed write byte-identical artifacts. Reports keep wall-clock figures
// under a top-level "timing" key.
CommandResult cmd_forge(const PipelineConfig &config);
CommandResult cmd_sample(const PipelineConfig &config);
CommandResult cmd_capture(const PipelineConfig &config);
CommandResult cmd_quantize(const PipelineConfig &config);
CommandResult cmd_eval(const PipelineConfig &config);
CommandResult cmd_report(const PipelineConfig &config);

} // namespace moeq
