#pragma once

// Training configuration and its TOML-style text form.
//
// The file is a list of `key = value` lines. `#` starts a comment, `[section]`
// headers may be used for grouping but do not namespace keys. Values are
// integers, reals, booleans (true/false), quoted strings or integer arrays
// such as `[32, 64, 128]`. Unknown keys are rejected.

#include <cstdint>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "palgan/discriminator.hpp"
#include "palgan/generator.hpp"
#include "palgan/losses.hpp"
#include "palgan/palette_encoder.hpp"

namespace palgan {

struct ModelConfig {
    std::vector<int> encoder_widths{32, 64, 128, 256};
    int semantic_channels = 128;
    int encoder_hidden = 256;
    int generator_channels = 16;
    int residual_blocks = 2;
    int latent_dim = 64;
    int attention_key_channels = 32;
    int attention_window = 3;
    double attention_epsilon = 1e-4;
    std::vector<int> discriminator_widths{32, 64, 128};
    int discriminator_embedding = 256;
    bool unconditional_head = true;
    bool use_attention = true;
    bool use_global = true;
    bool use_local = true;
};

struct TrainConfig {
    int epochs = 10;
    int batch_size = 16;
    std::int64_t max_steps = 0;  // 0: epochs x steps per epoch
    double lr_generator = 1e-4;
    double lr_discriminator = 4e-4;
    double adam_beta1 = 0.0;
    double adam_beta2 = 0.9;
    int crop_size = 64;
    int bins = 256;  // n_a * n_b, a perfect square
    double sigma = 0.1;
    LossWeights weights{};
    std::uint64_t seed = 0;
    std::int64_t checkpoint_interval = 0;  // 0: only the final checkpoint
    std::int64_t log_interval = 10;
    bool deterministic = true;
    ModelConfig model{};

    PaletteGrid grid() const { return PaletteGrid::square(bins, sigma); }

    PaletteEncoderConfig encoder_config() const {
        PaletteEncoderConfig c;
        c.widths = model.encoder_widths;
        c.semantic_channels = model.semantic_channels;
        c.mlp_hidden = model.encoder_hidden;
        c.grid = grid();
        return c;
    }

    GeneratorConfig generator_config() const {
        GeneratorConfig c;
        c.base_channels = model.generator_channels;
        c.num_residual_blocks = model.residual_blocks;
        c.latent_dim = model.latent_dim;
        c.grid = grid();
        c.semantic_channels = model.semantic_channels;
        c.attention_stride = 1 << model.encoder_widths.size();
        c.attention.key_channels = model.attention_key_channels;
        c.attention.window = model.attention_window;
        c.attention.epsilon = model.attention_epsilon;
        c.attention.use_global = model.use_global;
        c.attention.use_local = model.use_local;
        c.use_attention = model.use_attention;
        return c;
    }

    DiscriminatorConfig discriminator_config() const {
        DiscriminatorConfig c;
        c.widths = model.discriminator_widths;
        c.embedding_dim = model.discriminator_embedding;
        c.grid = grid();
        c.unconditional_head = model.unconditional_head;
        return c;
    }

    void validate() const {
        if (epochs < 1 || batch_size < 1 || crop_size < 1 || max_steps < 0 || checkpoint_interval < 0 || log_interval < 1)
            throw ValidationError("config: epochs, batch_size, crop_size and log_interval must be positive");
        if (!(lr_generator > 0) || !(lr_discriminator > 0)) throw ValidationError("config: learning rates must be positive");
        if (adam_beta1 < 0 || adam_beta1 >= 1 || adam_beta2 < 0 || adam_beta2 >= 1)
            throw ValidationError("config: Adam betas must lie in [0,1)");
        weights.validate();
        grid();
        const int stride = 1 << model.encoder_widths.size();
        if (crop_size % stride != 0)
            throw ValidationError("config: crop_size " + std::to_string(crop_size) + " must be a multiple of " +
                                  std::to_string(stride));
        generator_config().validate();
    }
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

inline std::string format_real(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    std::string s = os.str();
    if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
    return s;
}

struct ConfigField {
    const char* key;
    const char* doc;
    std::function<void(TrainConfig&, const std::string&)> parse;
    std::function<std::string(const TrainConfig&)> print;
};

template <class Int>
Int parse_int(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const long long x = std::stoll(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return static_cast<Int>(x);
    } catch (const std::logic_error&) {
        throw FormatError("config: " + key + " expects an integer, got '" + v + "'");
    }
}

inline double parse_real(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const double x = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::logic_error&) {
        throw FormatError("config: " + key + " expects a number, got '" + v + "'");
    }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true") return true;
    if (v == "false") return false;
    throw FormatError("config: " + key + " expects true or false, got '" + v + "'");
}

inline std::vector<int> parse_int_list(const std::string& key, const std::string& v) {
    if (v.size() < 2 || v.front() != '[' || v.back() != ']')
        throw FormatError("config: " + key + " expects a list like [32, 64], got '" + v + "'");
    std::vector<int> out;
    std::stringstream ss(v.substr(1, v.size() - 2));
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(parse_int<int>(key, item));
    }
    return out;
}

inline std::string print_int_list(const std::vector<int>& v) {
    std::string s = "[";
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + std::to_string(v[i]);
    return s + "]";
}

#define PALGAN_INT_FIELD(key, member, doc)                                                                       \
    ConfigField {                                                                                                \
        key, doc, [](TrainConfig& c, const std::string& v) { c.member = parse_int<decltype(c.member)>(key, v); }, \
            [](const TrainConfig& c) { return std::to_string(c.member); }                                        \
    }
#define PALGAN_REAL_FIELD(key, member, doc)                                                             \
    ConfigField {                                                                                       \
        key, doc, [](TrainConfig& c, const std::string& v) { c.member = parse_real(key, v); },          \
            [](const TrainConfig& c) { return format_real(c.member); }                                  \
    }
#define PALGAN_BOOL_FIELD(key, member, doc)                                                             \
    ConfigField {                                                                                       \
        key, doc, [](TrainConfig& c, const std::string& v) { c.member = parse_bool(key, v); },          \
            [](const TrainConfig& c) { return std::string(c.member ? "true" : "false"); }               \
    }
#define PALGAN_LIST_FIELD(key, member, doc)                                                             \
    ConfigField {                                                                                       \
        key, doc, [](TrainConfig& c, const std::string& v) { c.member = parse_int_list(key, v); },      \
            [](const TrainConfig& c) { return print_int_list(c.member); }                               \
    }

inline const std::vector<ConfigField>& config_fields() {
    static const std::vector<ConfigField> fields = {
        PALGAN_INT_FIELD("epochs", epochs, "passes over the training set"),
        PALGAN_INT_FIELD("batch_size", batch_size, "images per step"),
        PALGAN_INT_FIELD("max_steps", max_steps, "stop after this many steps (0 = epochs x steps per epoch)"),
        PALGAN_REAL_FIELD("lr_generator", lr_generator, "Adam step size for the palette and assignment generators"),
        PALGAN_REAL_FIELD("lr_discriminator", lr_discriminator, "Adam step size for the discriminator"),
        PALGAN_REAL_FIELD("adam_beta1", adam_beta1, "Adam first-moment decay"),
        PALGAN_REAL_FIELD("adam_beta2", adam_beta2, "Adam second-moment decay"),
        PALGAN_INT_FIELD("crop_size", crop_size, "square training crop, a multiple of the encoder stride"),
        PALGAN_INT_FIELD("bins", bins, "palette bins n_a * n_b (a perfect square)"),
        PALGAN_REAL_FIELD("sigma", sigma, "soft-histogram kernel width"),
        PALGAN_REAL_FIELD("lambda_rec1", weights.lambda_rec1, "palette reconstruction weight"),
        PALGAN_REAL_FIELD("lambda_rg", weights.lambda_rg, "palette entropy weight"),
        PALGAN_REAL_FIELD("lambda_reg", weights.lambda_reg, "chroma L1 weight"),
        PALGAN_REAL_FIELD("lambda_rec2", weights.lambda_rec2, "output palette reconstruction weight"),
        PALGAN_REAL_FIELD("lambda_adv", weights.lambda_adv, "adversarial weight"),
        PALGAN_INT_FIELD("seed", seed, "seed for initialisation, sampling and data order"),
        PALGAN_INT_FIELD("checkpoint_interval", checkpoint_interval, "steps between checkpoints (0 = final only)"),
        PALGAN_INT_FIELD("log_interval", log_interval, "steps between progress-log rows"),
        PALGAN_BOOL_FIELD("deterministic", deterministic, "single-threaded, bit-reproducible kernels"),
        PALGAN_LIST_FIELD("encoder_widths", model.encoder_widths, "channels of the stride-2 palette-encoder blocks"),
        PALGAN_INT_FIELD("semantic_channels", model.semantic_channels, "channels of the semantic map S"),
        PALGAN_INT_FIELD("encoder_hidden", model.encoder_hidden, "hidden width of the palette MLP"),
        PALGAN_INT_FIELD("generator_channels", model.generator_channels, "base width of the assignment generator"),
        PALGAN_INT_FIELD("residual_blocks", model.residual_blocks, "residual blocks at the generator bottleneck"),
        PALGAN_INT_FIELD("latent_dim", model.latent_dim, "size of the latent code z"),
        PALGAN_INT_FIELD("attention_key_channels", model.attention_key_channels, "key/query width in global interaction"),
        PALGAN_INT_FIELD("attention_window", model.attention_window, "box window of local delineation"),
        PALGAN_REAL_FIELD("attention_epsilon", model.attention_epsilon, "variance regulariser of local delineation"),
        PALGAN_LIST_FIELD("discriminator_widths", model.discriminator_widths, "channels of the stride-2 discriminator blocks"),
        PALGAN_INT_FIELD("discriminator_embedding", model.discriminator_embedding, "size of the pooled embedding g"),
        PALGAN_BOOL_FIELD("unconditional_head", model.unconditional_head, "add an h-independent realness term"),
        PALGAN_BOOL_FIELD("use_attention", model.use_attention, "enable chromatic attention"),
        PALGAN_BOOL_FIELD("use_global", model.use_global, "enable global interaction inside chromatic attention"),
        PALGAN_BOOL_FIELD("use_local", model.use_local, "enable local delineation inside chromatic attention"),
    };
    return fields;
}

#undef PALGAN_INT_FIELD
#undef PALGAN_REAL_FIELD
#undef PALGAN_BOOL_FIELD
#undef PALGAN_LIST_FIELD

}  // namespace detail

/// Applies one `key = value` assignment.
inline void set_config_value(TrainConfig& cfg, const std::string& key, const std::string& value) {
    for (const auto& f : detail::config_fields())
        if (key == f.key) return f.parse(cfg, value);
    throw FormatError("config: unknown key '" + key + "'");
}

inline TrainConfig parse_config(const std::string& text) {
    TrainConfig cfg;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        bool quoted = false;
        for (std::size_t i = 0; i < line.size(); ++i) {
            if (line[i] == '"') quoted = !quoted;
            if (line[i] == '#' && !quoted) {
                line.resize(i);
                break;
            }
        }
        line = detail::trim(line);
        if (line.empty() || (line.front() == '[' && line.back() == ']' && line.find('=') == std::string::npos)) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw FormatError("config line " + std::to_string(lineno) + ": expected key = value");
        const std::string key = detail::trim(line.substr(0, eq));
        std::string value = detail::trim(line.substr(eq + 1));
        if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
        try {
            set_config_value(cfg, key, value);
        } catch (const FormatError& e) {
            throw FormatError("config line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return cfg;
}

inline TrainConfig read_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot read config " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    return parse_config(ss.str());
}

/// Every key with its current value and a comment; parse_config inverts it.
inline std::string config_to_text(const TrainConfig& cfg) {
    std::string out;
    for (const auto& f : detail::config_fields()) {
        out += "# ";
        out += f.doc;
        out += "\n";
        out += f.key;
        out += " = " + f.print(cfg) + "\n";
    }
    return out;
}

}  // namespace palgan
