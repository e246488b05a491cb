#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "costa/common.hpp"
#include "costa/corpus.hpp"
#include "costa/rng.hpp"

namespace costa {

enum class Granularity : int { Word = 0, Phrase = 1, Sentence = 2, Paragraph = 3 };

inline const char* granularity_name(Granularity g) {
    switch (g) {
        case Granularity::Word: return "word";
        case Granularity::Phrase: return "phrase";
        case Granularity::Sentence: return "sentence";
        case Granularity::Paragraph: return "paragraph";
    }
    return "?";
}

inline Granularity parse_granularity(const std::string& s) {
    if (s == "word") return Granularity::Word;
    if (s == "phrase") return Granularity::Phrase;
    if (s == "sentence") return Granularity::Sentence;
    if (s == "paragraph") return Granularity::Paragraph;
    throw Error("BadGranularity", "unknown granularity '" + s + "'");
}

struct LengthRange {
    int min_len = 1;
    int max_len = 1;
};

// Half-open token range [start, end) within one document.
struct Span {
    std::string doc_id;
    Granularity granularity = Granularity::Word;
    int32_t start = 0;
    int32_t end = 0;

    int32_t length() const { return end - start; }

    friend bool operator==(const Span&, const Span&) = default;
};

struct SamplerConfig {
    double alpha = 4.0;
    double beta = 2.0;
    int spans_per_granularity = 5;  // T
    uint64_t seed = 42;
    uint64_t round = 0;  // bumped when resampling (per-epoch mode)
    std::vector<Granularity> granularities = {Granularity::Word, Granularity::Phrase,
                                              Granularity::Sentence, Granularity::Paragraph};
    std::array<LengthRange, 4> ranges = {LengthRange{1, 1}, LengthRange{4, 16}, LengthRange{16, 64},
                                         LengthRange{64, 128}};
    std::unordered_set<int32_t> stopword_ids;

    const LengthRange& range_of(Granularity g) const { return ranges[static_cast<size_t>(g)]; }
};

// p in [0,1] mapped onto [min_len, max_len], rounded half up and clamped.
inline int length_from_unit(const LengthRange& r, double p) {
    const double raw = p * (r.max_len - r.min_len) + r.min_len;
    const int len = static_cast<int>(std::floor(raw + 0.5));
    return std::clamp(len, r.min_len, r.max_len);
}

// Beta-distributed span length. Degenerate ranges consume no draws.
inline int sample_length(const LengthRange& r, double alpha, double beta, Rng& rng) {
    if (r.min_len == r.max_len) return r.min_len;
    return length_from_unit(r, rng.beta(alpha, beta));
}

// Uniform start over {0, ..., n-len}.
inline int sample_start(int n, int len, Rng& rng) {
    return static_cast<int>(rng.below(static_cast<uint64_t>(n - len + 1)));
}

// Samples T spans per granularity for one document. Word-level spans pick a
// single non-stopword token (any token if the document is all stopwords);
// other levels draw a Beta length, clamped to the whole document when the
// document is shorter, so every group has exactly T spans per granularity.
// The RNG stream is derived from (seed, doc id, round), so sampling is
// order-independent across documents.
inline std::vector<Span> sample_group(const Document& doc, const SamplerConfig& cfg) {
    const int n = doc.size();
    if (n < 2) throw Error("DocumentTooShort", "document '" + doc.id + "' has fewer than 2 tokens");
    Rng rng = Rng::derive(cfg.seed, "spans", fnv1a64(doc.id), cfg.round);

    std::vector<int> word_candidates;
    std::vector<Span> spans;
    spans.reserve(cfg.granularities.size() * static_cast<size_t>(cfg.spans_per_granularity));
    for (Granularity g : cfg.granularities) {
        for (int t = 0; t < cfg.spans_per_granularity; ++t) {
            Span s;
            s.doc_id = doc.id;
            s.granularity = g;
            if (g == Granularity::Word) {
                if (word_candidates.empty()) {
                    for (int i = 0; i < n; ++i)
                        if (!cfg.stopword_ids.count(doc.tokens[static_cast<size_t>(i)]))
                            word_candidates.push_back(i);
                    if (word_candidates.empty())
                        for (int i = 0; i < n; ++i) word_candidates.push_back(i);
                }
                s.start = word_candidates[rng.below(word_candidates.size())];
                s.end = s.start + 1;
            } else {
                const int len = sample_length(cfg.range_of(g), cfg.alpha, cfg.beta, rng);
                if (len >= n) {
                    s.start = 0;
                    s.end = n;
                } else {
                    s.start = sample_start(n, len, rng);
                    s.end = s.start + len;
                }
            }
            spans.push_back(std::move(s));
        }
    }
    return spans;
}

inline void sort_spans(std::vector<Span>& spans) {
    std::sort(spans.begin(), spans.end(), [](const Span& a, const Span& b) {
        if (a.doc_id != b.doc_id) return a.doc_id < b.doc_id;
        if (a.granularity != b.granularity) return a.granularity < b.granularity;
        if (a.start != b.start) return a.start < b.start;
        return a.end < b.end;
    });
}

// TSV: doc_id <TAB> granularity <TAB> start <TAB> end, sorted.
inline void write_spans(const std::string& path, std::vector<Span> spans) {
    sort_spans(spans);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("IoError", "cannot write span file '" + path + "'");
    for (const auto& s : spans)
        out << s.doc_id << '\t' << granularity_name(s.granularity) << '\t' << s.start << '\t' << s.end
            << '\n';
}

// Reads a span file, validating every span against the corpus lengths.
inline std::vector<Span> read_spans(const std::string& path,
                                    const std::map<std::string, int32_t>& doc_lengths) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("IoError", "cannot read span file '" + path + "'");
    std::vector<Span> spans;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::array<std::string, 4> cols;
        size_t pos = 0;
        for (int c = 0; c < 4; ++c) {
            const size_t tab = line.find('\t', pos);
            if (c < 3 && tab == std::string::npos)
                throw Error("BadSpanFile", "line " + std::to_string(lineno) + ": expected 4 columns");
            cols[static_cast<size_t>(c)] = line.substr(pos, tab == std::string::npos ? tab : tab - pos);
            pos = tab + 1;
        }
        Span s;
        s.doc_id = cols[0];
        s.granularity = parse_granularity(cols[1]);
        try {
            s.start = static_cast<int32_t>(std::stol(cols[2]));
            s.end = static_cast<int32_t>(std::stol(cols[3]));
        } catch (const std::exception&) {
            throw Error("BadSpanFile", "line " + std::to_string(lineno) + ": non-numeric span indices");
        }
        const auto it = doc_lengths.find(s.doc_id);
        if (it == doc_lengths.end())
            throw Error("UnknownDocId",
                        "line " + std::to_string(lineno) + ": document '" + s.doc_id + "' not in corpus");
        if (s.start < 0 || s.start >= s.end || s.end > it->second)
            throw Error("SpanOutOfRange", "line " + std::to_string(lineno) + ": span [" +
                                              std::to_string(s.start) + "," + std::to_string(s.end) +
                                              ") invalid for document '" + s.doc_id + "' of length " +
                                              std::to_string(it->second));
        spans.push_back(std::move(s));
    }
    return spans;
}

}  // namespace costa
