#include "moeq/config.hpp"

#include "moeq/errors.hpp"

#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <sstream>

namespace moeq {

namespace {

using json = nlohmann::ordered_json;

json to_json(const PipelineConfig &c) {
    json j;
    j["model"] = {
        {"path", c.model_path},
        {"vocab_size", c.forge.vocab_size},
        {"d_model", c.forge.d_model},
        {"n_layers", c.forge.n_layers},
        {"d_ff", c.forge.d_ff},
        {"n_shared", c.forge.n_shared},
        {"n_routed", c.forge.n_routed},
        {"top_k", c.forge.top_k},
        {"max_seq_len", c.forge.max_seq_len},
        {"router_skew", c.router_skew},
    };
    j["quant"] = {
        {"method", to_string(c.method)}, {"bits", c.bits}, {"damping", c.damping},
        {"awq_grid", c.awq_grid},        {"agq", c.agq},   {"hadamard", c.hadamard},
    };
    j["calibration"] = {
        {"ebss", c.ebss},
        {"path", c.calibration_path},
        {"w", c.ebss_config.w},
        {"target_len", c.ebss_config.target_len},
        {"n_sequences", c.ebss_config.n_sequences},
        {"tau", c.ebss_config.tau},
    };
    j["eval"] = {
        {"path", c.eval_path},
        {"quantized_path", c.eval_quantized_path},
        {"n_sequences", c.eval_sequences},
        {"length", c.eval_length},
    };
    j["out"] = c.out_dir;
    j["seed"] = c.seed;
    return j;
}

template <typename T>
T get(const json &j, const char *section, const char *key) {
    const json &v = section == nullptr ? j.at(key) : j.at(section).at(key);
    try {
        return v.get<T>();
    } catch (const json::exception &) {
        throw ConfigError(std::string("config key ") + (section ? std::string(section) + "." : "") + key +
                          " has the wrong type");
    }
}

PipelineConfig from_json(const json &j) {
    PipelineConfig c;
    c.model_path = get<std::string>(j, "model", "path");
    c.forge.vocab_size = get<std::uint32_t>(j, "model", "vocab_size");
    c.forge.d_model = get<std::uint32_t>(j, "model", "d_model");
    c.forge.n_layers = get<std::uint32_t>(j, "model", "n_layers");
    c.forge.d_ff = get<std::uint32_t>(j, "model", "d_ff");
    c.forge.n_shared = get<std::uint32_t>(j, "model", "n_shared");
    c.forge.n_routed = get<std::uint32_t>(j, "model", "n_routed");
    c.forge.top_k = get<std::uint32_t>(j, "model", "top_k");
    c.forge.max_seq_len = get<std::uint32_t>(j, "model", "max_seq_len");
    c.router_skew = get<double>(j, "model", "router_skew");
    c.method = parse_quant_method(get<std::string>(j, "quant", "method"));
    c.bits = get<std::uint32_t>(j, "quant", "bits");
    c.damping = get<double>(j, "quant", "damping");
    c.awq_grid = get<std::uint32_t>(j, "quant", "awq_grid");
    c.agq = get<bool>(j, "quant", "agq");
    c.hadamard = get<bool>(j, "quant", "hadamard");
    c.ebss = get<bool>(j, "calibration", "ebss");
    c.calibration_path = get<std::string>(j, "calibration", "path");
    c.ebss_config.w = get<std::uint32_t>(j, "calibration", "w");
    c.ebss_config.target_len = get<std::uint32_t>(j, "calibration", "target_len");
    c.ebss_config.n_sequences = get<std::uint32_t>(j, "calibration", "n_sequences");
    c.ebss_config.tau = get<double>(j, "calibration", "tau");
    c.eval_path = get<std::string>(j, "eval", "path");
    c.eval_quantized_path = get<std::string>(j, "eval", "quantized_path");
    c.eval_sequences = get<std::uint32_t>(j, "eval", "n_sequences");
    c.eval_length = get<std::uint32_t>(j, "eval", "length");
    c.out_dir = get<std::string>(j, nullptr, "out");
    c.seed = get<std::uint64_t>(j, nullptr, "seed");
    return c;
}

// Recursively overlays `patch` on `base`, refusing keys the defaults do not define.
void overlay(json &base, const json &patch, const std::string &prefix) {
    if (!patch.is_object()) {
        throw ConfigError("config " + (prefix.empty() ? std::string("document") : "key " + prefix) + " must be an object");
    }
    for (const auto &[key, value] : patch.items()) {
        const std::string path = prefix.empty() ? key : prefix + "." + key;
        if (!base.contains(key)) {
            throw ConfigError("unknown config key " + path);
        }
        if (base[key].is_object()) {
            overlay(base[key], value, path);
        } else {
            if (value.is_object() || value.is_array() || value.is_null()) {
                throw ConfigError("config key " + path + " must be a scalar");
            }
            base[key] = value;
        }
    }
}

json parse_scalar_like(const json &current, std::string_view text, const std::string &key) {
    const std::string s(text);
    try {
        if (current.is_string()) {
            return json(s);
        }
        if (current.is_boolean()) {
            if (s == "true" || s == "on" || s == "1") {
                return json(true);
            }
            if (s == "false" || s == "off" || s == "0") {
                return json(false);
            }
            throw ConfigError("");
        }
        std::size_t used = 0;
        if (current.is_number_unsigned() || current.is_number_integer()) {
            if (s.empty() || s[0] == '-') {
                throw ConfigError("");
            }
            const auto v = std::stoull(s, &used);
            if (used != s.size()) {
                throw ConfigError("");
            }
            return json(v);
        }
        const double v = std::stod(s, &used);
        if (used != s.size()) {
            throw ConfigError("");
        }
        return json(v);
    } catch (const std::exception &) {
        throw ConfigError("cannot parse \"" + s + "\" for config key " + key);
    }
}

} // namespace

void PipelineConfig::validate() const {
    forge.validate();
    if (!(router_skew >= 0.0)) {
        throw ConfigError("model.router_skew must be >= 0");
    }
    QuantSpec::symmetric(bits);
    if (!(damping >= 0.0)) {
        throw ConfigError("quant.damping must be >= 0");
    }
    if (awq_grid < 1) {
        throw ConfigError("quant.awq_grid must be >= 1");
    }
    if (ebss) {
        sampler_config().validate();
    }
    if (agq && !ebss && calibration_path.empty()) {
        throw ConfigError("quant.agq needs a calibration source: enable calibration.ebss or set calibration.path");
    }
    if (eval_sequences < 1 || eval_length < 2) {
        throw ConfigError("eval needs n_sequences >= 1 and length >= 2");
    }
}

void PipelineConfig::validate_for(const ModelConfig &model) const {
    if (hadamard && (!is_power_of_two(model.d_model) || !is_power_of_two(model.d_ff))) {
        throw ConfigError("quant.hadamard needs power-of-two d_model and d_ff (got " + std::to_string(model.d_model) +
                          ", " + std::to_string(model.d_ff) + ")");
    }
    if (ebss && ebss_config.target_len > model.max_seq_len) {
        throw ConfigError("calibration.target_len exceeds the model's max_seq_len");
    }
    if (ebss && ebss_config.w > model.vocab_size) {
        throw ConfigError("calibration.w exceeds the vocabulary size");
    }
    if (eval_length > model.max_seq_len) {
        throw ConfigError("eval.length exceeds the model's max_seq_len");
    }
}

QuantizeOptions PipelineConfig::quantize_options() const {
    QuantizeOptions o;
    o.method = method;
    o.agq = agq;
    o.hadamard = hadamard;
    o.spec = QuantSpec::symmetric(bits);
    o.damping = damping;
    o.awq_grid = awq_grid;
    return o;
}

EbssConfig PipelineConfig::sampler_config() const {
    EbssConfig e = ebss_config;
    e.seed = seed;
    return e;
}

std::string default_config_json() { return to_json(PipelineConfig{}).dump(2); }

PipelineConfig parse_config(std::string_view json_text) {
    json doc;
    try {
        doc = json::parse(json_text);
    } catch (const json::parse_error &e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    json base = to_json(PipelineConfig{});
    overlay(base, doc, "");
    return from_json(base);
}

PipelineConfig load_config(const std::filesystem::path &path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot open config " + path.string());
    }
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_config(buf.str());
}

void apply_override(PipelineConfig &config, std::string_view assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string_view::npos || eq == 0) {
        throw ConfigError("override must look like key=value, got \"" + std::string(assignment) + "\"");
    }
    const std::string key(assignment.substr(0, eq));
    const auto value = assignment.substr(eq + 1);

    json base = to_json(config);
    json *node = &base;
    std::size_t pos = 0;
    while (true) {
        const auto dot = key.find('.', pos);
        const std::string part = key.substr(pos, dot == std::string::npos ? std::string::npos : dot - pos);
        if (!node->is_object() || !node->contains(part)) {
            throw ConfigError("unknown config key " + key);
        }
        node = &(*node)[part];
        if (dot == std::string::npos) {
            break;
        }
        pos = dot + 1;
    }
    if (node->is_object()) {
        throw ConfigError("config key " + key + " is a section, not a value");
    }
    *node = parse_scalar_like(*node, value, key);
    config = from_json(base);
}

std::string config_to_json(const PipelineConfig &config) { return to_json(config).dump(2); }

std::string config_digest(const PipelineConfig &config) {
    json j = to_json(config);
    j.erase("out");
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(j.dump())));
    return buf;
}

} // namespace moeq
