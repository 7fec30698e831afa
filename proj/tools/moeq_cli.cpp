#include "moeq/commands.hpp"
#include "moeq/config.hpp"
#include "moeq/errors.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

namespace {

enum ExitCode : int { kOk = 0, kInternal = 1, kConfig = 2, kData = 3, kNumerical = 4 };

struct Flags {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out_dir;
    std::vector<std::string> overrides;
    bool print_config = false;
};

// Config file first, then --seed/--out, then --set in the order given.
moeq::PipelineConfig build_config(const Flags &flags) {
    moeq::PipelineConfig config = flags.config_path.empty() ? moeq::PipelineConfig{} : moeq::load_config(flags.config_path);
    if (flags.seed) {
        config.seed = *flags.seed;
    }
    if (!flags.out_dir.empty()) {
        config.out_dir = flags.out_dir;
    }
    for (const auto &assignment : flags.overrides) {
        moeq::apply_override(config, assignment);
    }
    return config;
}

int fail(int code, const char *kind, const std::exception &e) {
    std::fprintf(stderr, "moeq: %s: %s\n", kind, e.what());
    return code;
}

} // namespace

int main(int argc, char **argv) {
    CLI::App app{"MoE post-training quantization pipeline"};
    app.require_subcommand(1);
    Flags flags;

    using Command = std::function<moeq::CommandResult(const moeq::PipelineConfig &)>;
    const std::vector<std::tuple<const char *, const char *, Command>> verbs = {
        {"forge", "write a synthetic model to <out>/model.bin", moeq::cmd_forge},
        {"sample", "build the calibration set (<out>/calib.txt)", moeq::cmd_sample},
        {"capture", "dump expert inputs and gate affinities (<out>/traces.bin)", moeq::cmd_capture},
        {"quantize", "quantize expert linears (<out>/model.q.bin)", moeq::cmd_quantize},
        {"eval", "compare the quantized model with full precision (<out>/eval.json)", moeq::cmd_eval},
        {"report", "merge stage reports into <out>/report.json", moeq::cmd_report},
    };
    std::map<const CLI::App *, Command> handlers;
    for (const auto &[name, help, command] : verbs) {
        CLI::App *sub = app.add_subcommand(name, help);
        sub->add_option("--config", flags.config_path, "JSON config file")->check(CLI::ExistingFile);
        sub->add_option("--seed", flags.seed, "global seed");
        sub->add_option("--out", flags.out_dir, "output directory");
        sub->add_option("--set", flags.overrides, "override a config key, e.g. calibration.tau=1.2")
            ->expected(1)
            ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
        sub->add_flag("--print-config", flags.print_config, "print the effective config and exit");
        handlers[sub] = command;
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError &e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kConfig;
    }

    const CLI::App *chosen = app.get_subcommands().front();
    try {
        const moeq::PipelineConfig config = build_config(flags);
        if (flags.print_config) {
            std::printf("%s\n", moeq::config_to_json(config).c_str());
            return kOk;
        }
        const moeq::CommandResult result = handlers.at(chosen)(config);
        std::printf("%s\n", result.message.c_str());
        return kOk;
    } catch (const moeq::ConfigError &e) {
        return fail(kConfig, "config error", e);
    } catch (const moeq::UnsupportedShape &e) {
        return fail(kConfig, "config error", e);
    } catch (const moeq::FactorizationError &e) {
        return fail(kNumerical, "numerical failure", e);
    } catch (const moeq::FormatError &e) {
        return fail(kData, "data error", e);
    } catch (const moeq::InvalidInput &e) {
        return fail(kData, "data error", e);
    } catch (const std::filesystem::filesystem_error &e) {
        return fail(kData, "data error", e);
    } catch (const std::exception &e) {
        return fail(kInternal, "internal error", e);
    }
}
