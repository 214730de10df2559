#pragma once

// Sectioned key=value run configuration:
//
//   # comment
//   [train]
//   steps = 2000
//
// Keys may also be written fully qualified (train.steps = 2000). Command-line
// overrides use --section.key=value. Unknown keys are errors.

#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "dit4sr/ablation.hpp"

namespace dit4sr {

struct DataConfig {
    std::size_t count = 288;
    std::uint64_t seed = 0;
    double eval_fraction = 1.0 / 9.0;
};

struct SampleConfig {
    std::size_t steps = 2;  // Euler steps T
    std::uint64_t seed = 0;
    bool dump_attention = false;
};

struct PathsConfig {
    std::string data_dir = "data";
    std::string checkpoint = "model.ckpt";
    std::string report_dir = "reports";
    std::string input;   // LR image for `sample`
    std::string output = "restored.ppm";
};

struct RunConfig {
    ModelConfig model;
    InitOptions init;
    DegradationConfig degradation;
    DataConfig data;
    TrainConfig train;
    std::size_t checkpoint_every = 0;  // 0: only at the end
    SampleConfig sample;
    std::vector<VariantId> ablate_variants{VariantId::FULL, VariantId::A, VariantId::B, VariantId::C, VariantId::D};
    PathsConfig paths;

    /// The degradation chain follows the model's scale factor and the data seed.
    DegradationConfig effective_degradation() const {
        DegradationConfig d = degradation;
        d.scale_factor = static_cast<int>(model.scale_factor);
        d.seed = data.seed;
        return d;
    }

    AblationConfig ablation() const {
        AblationConfig a;
        a.model = model;
        a.init = init;
        a.train = train;
        a.eval_schedule = DiffusionSchedule{sample.steps};
        a.eval_seed = sample.seed;
        a.variants = ablate_variants;
        return a;
    }

    void validate() const {
        model.validate();
        effective_degradation().validate();
        if (train.batch_size == 0) throw ConfigError("train.batch_size must be >= 1");
        if (!(train.tag_drop >= 0.0 && train.tag_drop <= 1.0)) throw ConfigError("train.tag_drop must lie in [0, 1]");
        if (!(train.optimizer.learning_rate > 0.0)) throw ConfigError("train.learning_rate must be positive");
        if (!(train.optimizer.momentum >= 0.0 && train.optimizer.momentum < 1.0))
            throw ConfigError("train.momentum must lie in [0, 1)");
        if (!(train.timesteps.std > 0.0)) throw ConfigError("train.timestep_std must be positive");
        if (sample.steps < 1) throw ConfigError("sample.steps must be >= 1");
        if (data.count < 2) throw ConfigError("data.count must be >= 2");
        if (!(data.eval_fraction > 0.0 && data.eval_fraction < 1.0))
            throw ConfigError("ablate.eval_fraction must lie in (0, 1)");
        if (ablate_variants.empty()) throw ConfigError("ablate.variants is empty");
    }
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

template <class N>
N parse_number(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        N out{};
        if constexpr (std::is_floating_point_v<N>) {
            out = static_cast<N>(std::stod(v, &used));
        } else if constexpr (std::is_signed_v<N>) {
            out = static_cast<N>(std::stoll(v, &used));
        } else {
            if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
            out = static_cast<N>(std::stoull(v, &used));
        }
        if (used != v.size()) throw std::invalid_argument("trailing");
        return out;
    } catch (const std::exception&) {
        throw ConfigError("config key " + key + ": cannot parse '" + v + "' as a number");
    }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "on") return true;
    if (v == "false" || v == "0" || v == "off") return false;
    throw ConfigError("config key " + key + ": expected true/false, got '" + v + "'");
}

template <class N>
std::string fmt_number(N v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

}  // namespace detail

/// Every documented key with its setter and printer.
class ConfigSchema {
public:
    struct Field {
        std::function<void(RunConfig&, const std::string&)> set;
        std::function<std::string(const RunConfig&)> get;
        std::string doc;
    };

    static const ConfigSchema& instance() {
        static const ConfigSchema s;
        return s;
    }

    const std::map<std::string, Field>& fields() const { return fields_; }

    void set(RunConfig& c, const std::string& key, const std::string& value) const {
        auto it = fields_.find(key);
        if (it == fields_.end()) throw ConfigError("unknown config key '" + key + "'");
        it->second.set(c, value);
    }

private:
    template <class N, class Get>
    void number(const std::string& key, Get g, std::string doc) {
        fields_[key] = {[key, g](RunConfig& c, const std::string& v) { g(c) = detail::parse_number<N>(key, v); },
                        [g](const RunConfig& c) { return detail::fmt_number(g(const_cast<RunConfig&>(c))); },
                        std::move(doc)};
    }
    template <class Get>
    void boolean(const std::string& key, Get g, std::string doc) {
        fields_[key] = {[key, g](RunConfig& c, const std::string& v) { g(c) = detail::parse_bool(key, v); },
                        [g](const RunConfig& c) { return std::string(g(const_cast<RunConfig&>(c)) ? "true" : "false"); },
                        std::move(doc)};
    }
    template <class Get>
    void text(const std::string& key, Get g, std::string doc) {
        fields_[key] = {[g](RunConfig& c, const std::string& v) { g(c) = v; },
                        [g](const RunConfig& c) { return g(const_cast<RunConfig&>(c)); }, std::move(doc)};
    }
    void custom(const std::string& key, std::function<void(RunConfig&, const std::string&)> set,
                std::function<std::string(const RunConfig&)> get, std::string doc) {
        fields_[key] = {std::move(set), std::move(get), std::move(doc)};
    }

    ConfigSchema() {
        using S = std::size_t;
        number<S>("model.latent_h", [](RunConfig& c) -> S& { return c.model.latent_h; }, "HR / latent height");
        number<S>("model.latent_w", [](RunConfig& c) -> S& { return c.model.latent_w; }, "HR / latent width");
        number<S>("model.latent_channels", [](RunConfig& c) -> S& { return c.model.latent_channels; }, "latent channels");
        number<S>("model.patch_size", [](RunConfig& c) -> S& { return c.model.patch_size; }, "patch size p");
        number<S>("model.token_dim", [](RunConfig& c) -> S& { return c.model.token_dim; }, "token width D");
        number<S>("model.heads", [](RunConfig& c) -> S& { return c.model.heads; }, "attention heads");
        number<S>("model.depth", [](RunConfig& c) -> S& { return c.model.depth; }, "number of blocks N");
        number<S>("model.text_len", [](RunConfig& c) -> S& { return c.model.text_len; }, "text tokens M");
        number<S>("model.pooled_dim", [](RunConfig& c) -> S& { return c.model.pooled_dim; }, "pooled conditioning width");
        number<S>("model.tag_vocab_size", [](RunConfig& c) -> S& { return c.model.tag_vocab_size; }, "tag vocabulary");
        number<S>("model.scale_factor", [](RunConfig& c) -> S& { return c.model.scale_factor; }, "SR scale factor");
        number<S>("model.controlnet_blocks", [](RunConfig& c) -> S& { return c.model.controlnet_blocks; },
                  "control blocks of the CONTROLNET variant (0: depth / 2)");
        custom(
            "model.variant", [](RunConfig& c, const std::string& v) { c.model.variant = parse_variant(v); },
            [](const RunConfig& c) { return std::string(to_string(c.model.variant)); },
            "FULL, A, B, C, D or CONTROLNET");
        number<std::uint64_t>("model.seed", [](RunConfig& c) -> std::uint64_t& { return c.init.seed; },
                              "weight initialization seed");
        number<double>("model.gate_init", [](RunConfig& c) -> double& { return c.init.gate_init; },
                       "initial adaLN gate bias");

        number<double>("degradation.blur_sigma_min", [](RunConfig& c) -> double& { return c.degradation.blur_sigma_range[0]; }, "");
        number<double>("degradation.blur_sigma_max", [](RunConfig& c) -> double& { return c.degradation.blur_sigma_range[1]; }, "");
        number<double>("degradation.noise_sigma_min", [](RunConfig& c) -> double& { return c.degradation.noise_sigma_range[0]; }, "");
        number<double>("degradation.noise_sigma_max", [](RunConfig& c) -> double& { return c.degradation.noise_sigma_range[1]; }, "");
        number<double>("degradation.resize_factor_min", [](RunConfig& c) -> double& { return c.degradation.resize_factor_range[0]; }, "");
        number<double>("degradation.resize_factor_max", [](RunConfig& c) -> double& { return c.degradation.resize_factor_range[1]; }, "");
        number<int>("degradation.quality_min", [](RunConfig& c) -> int& { return c.degradation.compress_quality_range[0]; }, "");
        number<int>("degradation.quality_max", [](RunConfig& c) -> int& { return c.degradation.compress_quality_range[1]; }, "");
        boolean("degradation.second_order", [](RunConfig& c) -> bool& { return c.degradation.second_order; }, "");
        custom(
            "degradation.resize_methods",
            [](RunConfig& c, const std::string& v) {
                c.degradation.resize_methods.clear();
                for (const auto& m : detail::split_list(v)) c.degradation.resize_methods.push_back(parse_resize_method(m));
            },
            [](const RunConfig& c) {
                std::string s;
                for (auto m : c.degradation.resize_methods) s += (s.empty() ? "" : ",") + std::string(to_string(m));
                return s;
            },
            "comma list of nearest, bilinear, bicubic");

        number<S>("data.count", [](RunConfig& c) -> S& { return c.data.count; }, "number of synthesized pairs");
        number<std::uint64_t>("data.seed", [](RunConfig& c) -> std::uint64_t& { return c.data.seed; }, "glyph and degradation seed");
        number<double>("ablate.eval_fraction", [](RunConfig& c) -> double& { return c.data.eval_fraction; }, "held-out share");

        number<S>("train.steps", [](RunConfig& c) -> S& { return c.train.steps; }, "optimizer steps");
        number<S>("train.batch_size", [](RunConfig& c) -> S& { return c.train.batch_size; }, "");
        custom(
            "train.optimizer", [](RunConfig& c, const std::string& v) { c.train.optimizer.kind = parse_optimizer(v); },
            [](const RunConfig& c) { return std::string(to_string(c.train.optimizer.kind)); }, "sgd_momentum or adam");
        number<double>("train.learning_rate", [](RunConfig& c) -> double& { return c.train.optimizer.learning_rate; }, "");
        number<double>("train.momentum", [](RunConfig& c) -> double& { return c.train.optimizer.momentum; }, "");
        number<S>("train.cosine_steps", [](RunConfig& c) -> S& { return c.train.optimizer.cosine_steps; }, "0: constant learning rate");
        number<double>("train.beta2", [](RunConfig& c) -> double& { return c.train.optimizer.beta2; }, "");
        number<std::uint64_t>("train.seed", [](RunConfig& c) -> std::uint64_t& { return c.train.seed; }, "batch draw seed");
        number<double>("train.tag_drop", [](RunConfig& c) -> double& { return c.train.tag_drop; }, "");
        custom(
            "train.timestep_law",
            [](RunConfig& c, const std::string& v) { c.train.timesteps.law = parse_timestep_law(v); },
            [](const RunConfig& c) { return std::string(to_string(c.train.timesteps.law)); }, "uniform or logit_normal");
        number<double>("train.timestep_mean", [](RunConfig& c) -> double& { return c.train.timesteps.mean; }, "");
        number<double>("train.timestep_std", [](RunConfig& c) -> double& { return c.train.timesteps.std; }, "");
        number<S>("train.checkpoint_every", [](RunConfig& c) -> S& { return c.checkpoint_every; }, "0: final only");

        number<S>("sample.steps", [](RunConfig& c) -> S& { return c.sample.steps; }, "Euler steps T");
        number<std::uint64_t>("sample.seed", [](RunConfig& c) -> std::uint64_t& { return c.sample.seed; }, "");
        boolean("sample.dump_attention", [](RunConfig& c) -> bool& { return c.sample.dump_attention; }, "");

        custom(
            "ablate.variants",
            [](RunConfig& c, const std::string& v) {
                c.ablate_variants.clear();
                for (const auto& id : detail::split_list(v)) c.ablate_variants.push_back(parse_variant(id));
            },
            [](const RunConfig& c) {
                std::string s;
                for (auto id : c.ablate_variants) s += (s.empty() ? "" : ",") + std::string(to_string(id));
                return s;
            },
            "comma list of variant ids");

        text("paths.data_dir", [](RunConfig& c) -> std::string& { return c.paths.data_dir; }, "");
        text("paths.checkpoint", [](RunConfig& c) -> std::string& { return c.paths.checkpoint; }, "");
        text("paths.report_dir", [](RunConfig& c) -> std::string& { return c.paths.report_dir; }, "");
        text("paths.input", [](RunConfig& c) -> std::string& { return c.paths.input; }, "");
        text("paths.output", [](RunConfig& c) -> std::string& { return c.paths.output; }, "");
    }

    std::map<std::string, Field> fields_;
};

/// Applies config text on top of `c`.
inline void apply_config_text(RunConfig& c, const std::string& text, const std::string& origin = "config") {
    std::istringstream in(text);
    std::string line, section;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') throw ConfigError(origin + ":" + std::to_string(lineno) + ": malformed section header");
            section = detail::trim(line.substr(1, line.size() - 2));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key = value");
        std::string key = detail::trim(line.substr(0, eq));
        const std::string value = detail::trim(line.substr(eq + 1));
        if (key.find('.') == std::string::npos) {
            if (section.empty()) throw ConfigError(origin + ":" + std::to_string(lineno) + ": key '" + key + "' outside a section");
            key = section + "." + key;
        }
        try {
            ConfigSchema::instance().set(c, key, value);
        } catch (const ConfigError& e) {
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open config file " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    RunConfig c;
    apply_config_text(c, ss.str(), path);
    return c;
}

/// Applies "--section.key=value" arguments.
inline void apply_overrides(RunConfig& c, const std::vector<std::string>& args) {
    for (const auto& a : args) {
        if (a.rfind("--", 0) != 0 || a.find('=') == std::string::npos)
            throw ConfigError("unrecognized argument '" + a + "' (overrides use --section.key=value)");
        const auto eq = a.find('=');
        ConfigSchema::instance().set(c, a.substr(2, eq - 2), a.substr(eq + 1));
    }
}

/// Full configuration as sectioned text; load(dump(c)) reproduces c.
inline std::string dump_config(const RunConfig& c) {
    std::ostringstream os;
    std::string section;
    for (const auto& [key, field] : ConfigSchema::instance().fields()) {
        const auto dot = key.find('.');
        const std::string sec = key.substr(0, dot);
        if (sec != section) {
            os << (section.empty() ? "" : "\n") << '[' << sec << "]\n";
            section = sec;
        }
        os << key.substr(dot + 1) << " = " << field.get(c) << '\n';
    }
    return os.str();
}

}  // namespace dit4sr
