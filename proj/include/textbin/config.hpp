#pragma once

#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "textbin/armodel.hpp"
#include "textbin/codec.hpp"
#include "textbin/textrender.hpp"

namespace textbin {

/// Every knob of one experiment. Loaded from an INI-style document:
///
///   # comment
///   [run]        seed, out
///   [corpus]     size, width, height
///   [tokenizer]  any codec key, plus steps, batch, peak_lr, warmup, decay_rate
///   [ar]         any ArConfig key, plus max_steps, batch, peak_lr, warmup, target_loss, pairs
///   [generate]   mode, k, temperature
///   [ablate]     steps, variants
struct ExperimentConfig {
    std::uint64_t seed = 0;
    std::string out = "out";

    std::size_t corpus_size = 256;
    int width = 64;
    int height = 64;

    CodecConfig codec = [] {
        CodecConfig c;
        c.quantizer.dims = 8;
        c.quantizer.entropy_batch_weight = 1.0f;
        return c;
    }();
    TokenizerTrainConfig tokenizer_train;

    ArConfig ar;
    ArTrainConfig ar_train;
    std::size_t ar_pairs = 8;  // training pairs taken from the train split

    GenerateOptions generate;

    long ablate_steps = 200;
    std::vector<std::string> ablate_variants;  // empty: all
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

inline std::size_t parse_count(const std::string& v, const std::string& key) {
    const long n = parse_long(v, key);
    if (n <= 0) throw ConfigError(key + " must be positive");
    return std::size_t(n);
}

inline std::vector<std::string> parse_list(const std::string& v) {
    std::vector<std::string> out;
    std::stringstream in(v);
    std::string item;
    while (std::getline(in, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

inline std::string join_list(const std::vector<std::string>& v) {
    std::string out;
    for (const auto& x : v) out += (out.empty() ? "" : ",") + x;
    return out;
}

inline SampleMode parse_mode(const std::string& v) {
    if (v == "greedy") return SampleMode::greedy;
    if (v == "topk") return SampleMode::top_k;
    throw ConfigError("mode must be greedy or topk, got '" + v + "'");
}

inline void apply_key(ExperimentConfig& c, const std::string& section, const std::string& key, const std::string& v) {
    if (section == "run") {
        if (key == "seed") c.seed = std::uint64_t(parse_long(v, key));
        else if (key == "out") c.out = v;
        else throw ConfigError("unknown run key: " + key);
    } else if (section == "corpus") {
        if (key == "size") c.corpus_size = parse_count(v, key);
        else if (key == "width") c.width = int(parse_count(v, key));
        else if (key == "height") c.height = int(parse_count(v, key));
        else throw ConfigError("unknown corpus key: " + key);
    } else if (section == "tokenizer") {
        if (key == "steps") c.tokenizer_train.steps = long(parse_count(v, key));
        else if (key == "batch") c.tokenizer_train.batch = parse_count(v, key);
        else if (key == "peak_lr") c.tokenizer_train.peak_lr = float(parse_double(v, key));
        else if (key == "warmup") c.tokenizer_train.warmup = parse_long(v, key);
        else if (key == "decay_rate") c.tokenizer_train.decay_rate = float(parse_double(v, key));
        else set_key(c.codec, key, v);
    } else if (section == "ar") {
        if (key == "max_steps") c.ar_train.max_steps = long(parse_count(v, key));
        else if (key == "batch") c.ar_train.batch = parse_count(v, key);
        else if (key == "peak_lr") c.ar_train.peak_lr = float(parse_double(v, key));
        else if (key == "warmup") c.ar_train.warmup = parse_long(v, key);
        else if (key == "target_loss") c.ar_train.target_loss = parse_double(v, key);
        else if (key == "pairs") c.ar_pairs = parse_count(v, key);
        else set_key(c.ar, key, v);
    } else if (section == "generate") {
        if (key == "mode") c.generate.mode = parse_mode(v);
        else if (key == "k") c.generate.k = parse_count(v, key);
        else if (key == "temperature") c.generate.temperature = float(parse_double(v, key));
        else throw ConfigError("unknown generate key: " + key);
    } else if (section == "ablate") {
        if (key == "steps") c.ablate_steps = long(parse_count(v, key));
        else if (key == "variants") c.ablate_variants = parse_list(v);
        else throw ConfigError("unknown ablate key: " + key);
    } else {
        throw ConfigError("unknown section [" + section + "]");
    }
}

}  // namespace detail

inline void validate(const ExperimentConfig& c) {
    c.codec.validate();
    c.ar.validate();
    if (c.width != int(c.codec.image_size) || c.height != int(c.codec.image_size)) {
        throw ConfigError("corpus geometry must match the tokenizer image_size");
    }
    if (c.generate.temperature <= 0.0f) throw ConfigError("temperature must be positive");
    if (!(c.tokenizer_train.decay_rate > 0.0f)) throw ConfigError("decay_rate must be positive");
}

/// Parses a config document; unknown sections or keys raise ConfigError
/// naming the line.
inline ExperimentConfig parse_experiment_config(const std::string& text) {
    ExperimentConfig c;
    std::istringstream in(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const std::string where = "config line " + std::to_string(lineno) + ": ";
        if (line.front() == '[') {
            if (line.back() != ']') throw ConfigError(where + "unterminated section header");
            section = detail::trim(line.substr(1, line.size() - 2));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError(where + "expected key = value");
        if (section.empty()) throw ConfigError(where + "key outside any section");
        try {
            detail::apply_key(c, section, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
        } catch (const ConfigError& e) {
            throw ConfigError(where + e.what());
        }
    }
    validate(c);
    return c;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
    std::string text;
    try {
        text = read_file(path);
    } catch (const IoError& e) {
        throw ConfigError(e.what());
    }
    return parse_experiment_config(text);
}

/// Canonical text of the resolved config; parsing it yields the same config.
inline std::string experiment_config_text(const ExperimentConfig& c) {
    using detail::fmt_double;
    std::ostringstream out;
    out << "[run]\nseed = " << c.seed << "\nout = " << c.out << "\n\n";
    out << "[corpus]\nsize = " << c.corpus_size << "\nwidth = " << c.width << "\nheight = " << c.height << "\n\n";
    out << "[tokenizer]\n";
    for (const auto& [k, v] : to_kv(c.codec)) out << k << " = " << v << "\n";
    out << "steps = " << c.tokenizer_train.steps << "\nbatch = " << c.tokenizer_train.batch
        << "\npeak_lr = " << fmt_double(c.tokenizer_train.peak_lr) << "\nwarmup = " << c.tokenizer_train.warmup
        << "\ndecay_rate = " << fmt_double(c.tokenizer_train.decay_rate) << "\n\n";
    out << "[ar]\n";
    for (const auto& [k, v] : to_kv(c.ar)) out << k << " = " << v << "\n";
    out << "max_steps = " << c.ar_train.max_steps << "\nbatch = " << c.ar_train.batch
        << "\npeak_lr = " << fmt_double(c.ar_train.peak_lr) << "\nwarmup = " << c.ar_train.warmup
        << "\ntarget_loss = " << fmt_double(c.ar_train.target_loss) << "\npairs = " << c.ar_pairs << "\n\n";
    out << "[generate]\nmode = " << (c.generate.mode == SampleMode::greedy ? "greedy" : "topk") << "\nk = " << c.generate.k
        << "\ntemperature = " << fmt_double(c.generate.temperature) << "\n\n";
    out << "[ablate]\nsteps = " << c.ablate_steps << "\nvariants = " << detail::join_list(c.ablate_variants) << "\n";
    return out.str();
}

}  // namespace textbin
