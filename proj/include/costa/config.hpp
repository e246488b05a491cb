#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "costa/common.hpp"
#include "costa/encoder.hpp"
#include "costa/spans.hpp"

namespace costa {

// Experiment-wide settings, all overridable by CLI flags (flags win). The
// file format is flat TOML-style: [section] headers, key = value lines, #
// comments. Unknown sections or keys are rejected.
struct ExperimentConfig {
    uint64_t seed = 42;
    int threads = 1;

    struct Corpus {
        int min_freq = 1;
        int max_len = 512;
        std::string stopwords;  // path; empty = built-in English list
    } corpus;

    struct Sampler {
        double alpha = 4.0;
        double beta = 2.0;
        int spans_per_granularity = 5;
        std::string granularities = "word,phrase,sentence,paragraph";
    } sampler;

    struct Encoder {
        int layers = 2;
        int heads = 2;
        int hidden = 32;
        int ffn = 64;
        int max_len = 512;
    } encoder;

    struct Loss {
        double tau = 0.1;
        double lambda = 0.1;
        double mask_prob = 0.15;
        bool cosine = false;
        bool exclude_own_group = false;
    } loss;

    struct Pretrain {
        int batch_size = 8;
        int epochs = 6;
        int64_t steps = 0;
        double lr = 5e-5;
        double warmup = 0.1;
        int64_t checkpoint_interval = 0;
        std::string projector = "nonlinear";
        bool resample_spans = false;
        bool clean_span_pass = false;
    } pretrain;

    struct Finetune {
        double lr = 5e-6;
        int epochs = 3;
        int batch_size = 8;
        int negatives = 7;
        int query_max_len = 32;
        int doc_max_len = 128;
        bool in_batch = true;
        std::string projector = "none";
    } finetune;

    struct Retrieval {
        int topk = 1000;
    } retrieval;

    static ExperimentConfig load(const std::string& path);
};

inline std::vector<Granularity> parse_granularity_list(const std::string& list) {
    std::vector<Granularity> out;
    std::string cur;
    auto push = [&] {
        if (cur.empty()) return;
        const Granularity g = parse_granularity(cur);
        for (Granularity seen : out)
            if (seen == g) throw Error("BadGranularity", "granularity '" + cur + "' listed twice");
        out.push_back(g);
        cur.clear();
    };
    for (char c : list) {
        if (c == ',')
            push();
        else if (!std::isspace(static_cast<unsigned char>(c)))
            cur.push_back(c);
    }
    push();
    if (out.empty()) throw Error("BadGranularity", "granularity list is empty");
    return out;
}

namespace detail {

inline std::string config_trim(const std::string& s) {
    size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

inline std::string strip_quotes(const std::string& s) {
    if (s.size() >= 2 && ((s.front() == '"' && s.back() == '"') || (s.front() == '\'' && s.back() == '\'')))
        return s.substr(1, s.size() - 2);
    return s;
}

template <class T>
T config_number(const std::string& value, const std::string& where) {
    try {
        size_t used = 0;
        if constexpr (std::is_floating_point_v<T>) {
            const double v = std::stod(value, &used);
            if (used != value.size()) throw std::invalid_argument(value);
            return static_cast<T>(v);
        } else {
            const long long v = std::stoll(value, &used);
            if (used != value.size()) throw std::invalid_argument(value);
            return static_cast<T>(v);
        }
    } catch (const std::exception&) {
        throw Error("BadConfigValue", where + ": '" + value + "' is not a number");
    }
}

inline bool config_bool(const std::string& value, const std::string& where) {
    if (value == "true") return true;
    if (value == "false") return false;
    throw Error("BadConfigValue", where + ": expected true or false, got '" + value + "'");
}

}  // namespace detail

inline ExperimentConfig ExperimentConfig::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("IoError", "cannot read config file '" + path + "'");
    ExperimentConfig cfg;
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        // strip comments (no # inside quoted strings supported)
        bool quoted = false;
        for (size_t i = 0; i < line.size(); ++i) {
            if (line[i] == '"' || line[i] == '\'') quoted = !quoted;
            if (line[i] == '#' && !quoted) {
                line.resize(i);
                break;
            }
        }
        line = detail::config_trim(line);
        if (line.empty()) continue;
        const std::string where = "line " + std::to_string(lineno);
        if (line.front() == '[') {
            if (line.back() != ']') throw Error("BadConfigFile", where + ": unterminated section header");
            section = detail::config_trim(line.substr(1, line.size() - 2));
            if (section != "corpus" && section != "sampler" && section != "encoder" &&
                section != "loss" && section != "pretrain" && section != "finetune" &&
                section != "retrieval")
                throw Error("UnknownConfigKey", where + ": unknown section [" + section + "]");
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw Error("BadConfigFile", where + ": expected key = value");
        const std::string key = detail::config_trim(line.substr(0, eq));
        const std::string value = detail::strip_quotes(detail::config_trim(line.substr(eq + 1)));
        const std::string full = section.empty() ? key : section + "." + key;

        auto num_i = [&](auto& slot) { slot = detail::config_number<std::decay_t<decltype(slot)>>(value, where); };
        auto boolean = [&](bool& slot) { slot = detail::config_bool(value, where); };

        if (full == "seed")
            cfg.seed = detail::config_number<uint64_t>(value, where);
        else if (full == "threads")
            num_i(cfg.threads);
        else if (full == "corpus.min_freq")
            num_i(cfg.corpus.min_freq);
        else if (full == "corpus.max_len")
            num_i(cfg.corpus.max_len);
        else if (full == "corpus.stopwords")
            cfg.corpus.stopwords = value;
        else if (full == "sampler.alpha")
            num_i(cfg.sampler.alpha);
        else if (full == "sampler.beta")
            num_i(cfg.sampler.beta);
        else if (full == "sampler.spans_per_granularity")
            num_i(cfg.sampler.spans_per_granularity);
        else if (full == "sampler.granularities")
            cfg.sampler.granularities = value;
        else if (full == "encoder.layers")
            num_i(cfg.encoder.layers);
        else if (full == "encoder.heads")
            num_i(cfg.encoder.heads);
        else if (full == "encoder.hidden")
            num_i(cfg.encoder.hidden);
        else if (full == "encoder.ffn")
            num_i(cfg.encoder.ffn);
        else if (full == "encoder.max_len")
            num_i(cfg.encoder.max_len);
        else if (full == "loss.tau")
            num_i(cfg.loss.tau);
        else if (full == "loss.lambda")
            num_i(cfg.loss.lambda);
        else if (full == "loss.mask_prob")
            num_i(cfg.loss.mask_prob);
        else if (full == "loss.cosine")
            boolean(cfg.loss.cosine);
        else if (full == "loss.exclude_own_group")
            boolean(cfg.loss.exclude_own_group);
        else if (full == "pretrain.batch_size")
            num_i(cfg.pretrain.batch_size);
        else if (full == "pretrain.epochs")
            num_i(cfg.pretrain.epochs);
        else if (full == "pretrain.steps")
            num_i(cfg.pretrain.steps);
        else if (full == "pretrain.lr")
            num_i(cfg.pretrain.lr);
        else if (full == "pretrain.warmup")
            num_i(cfg.pretrain.warmup);
        else if (full == "pretrain.checkpoint_interval")
            num_i(cfg.pretrain.checkpoint_interval);
        else if (full == "pretrain.projector")
            cfg.pretrain.projector = value;
        else if (full == "pretrain.resample_spans")
            boolean(cfg.pretrain.resample_spans);
        else if (full == "pretrain.clean_span_pass")
            boolean(cfg.pretrain.clean_span_pass);
        else if (full == "finetune.lr")
            num_i(cfg.finetune.lr);
        else if (full == "finetune.epochs")
            num_i(cfg.finetune.epochs);
        else if (full == "finetune.batch_size")
            num_i(cfg.finetune.batch_size);
        else if (full == "finetune.negatives")
            num_i(cfg.finetune.negatives);
        else if (full == "finetune.query_max_len")
            num_i(cfg.finetune.query_max_len);
        else if (full == "finetune.doc_max_len")
            num_i(cfg.finetune.doc_max_len);
        else if (full == "finetune.in_batch")
            boolean(cfg.finetune.in_batch);
        else if (full == "finetune.projector")
            cfg.finetune.projector = value;
        else if (full == "retrieval.topk")
            num_i(cfg.retrieval.topk);
        else
            throw Error("UnknownConfigKey", where + ": unknown key '" + full + "'");
    }
    // Fail fast on malformed enums.
    parse_projector(cfg.pretrain.projector);
    parse_projector(cfg.finetune.projector);
    parse_granularity_list(cfg.sampler.granularities);
    return cfg;
}

}  // namespace costa
