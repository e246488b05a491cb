#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "costa/common.hpp"

namespace costa {

// Tokenized text. Token ids index a Vocabulary; [CLS] is *not* part of the
// token sequence, the encoder prepends it.
struct Document {
    std::string id;
    std::vector<int32_t> tokens;

    int32_t size() const { return static_cast<int32_t>(tokens.size()); }
};

struct RawDoc {
    std::string id;
    std::string text;
};

// Whitespace/punctuation word splitter with ASCII lowercasing. Bytes >= 0x80
// are kept as token characters so non-ASCII words survive as opaque tokens.
inline std::vector<std::string> split_words(std::string_view text) {
    std::vector<std::string> words;
    std::string cur;
    for (char ch : text) {
        const auto c = static_cast<unsigned char>(ch);
        if (std::isalnum(c) || c >= 0x80) {
            cur.push_back(static_cast<char>(std::tolower(c)));
        } else if (!cur.empty()) {
            words.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) words.push_back(std::move(cur));
    return words;
}

class Vocabulary {
public:
    static constexpr int32_t kPad = 0;
    static constexpr int32_t kCls = 1;
    static constexpr int32_t kMask = 2;
    static constexpr int32_t kUnk = 3;
    static constexpr int32_t kNumReserved = 4;

    Vocabulary() : id_to_token_{"[PAD]", "[CLS]", "[MASK]", "[UNK]"} {
        for (int32_t i = 0; i < kNumReserved; ++i) token_to_id_[id_to_token_[i]] = i;
    }

    int32_t size() const { return static_cast<int32_t>(id_to_token_.size()); }

    int32_t id_of(const std::string& token) const {
        auto it = token_to_id_.find(token);
        return it == token_to_id_.end() ? kUnk : it->second;
    }

    const std::string& token_of(int32_t id) const { return id_to_token_.at(static_cast<size_t>(id)); }

    bool contains(const std::string& token) const { return token_to_id_.count(token) > 0; }

    // Id assignment is frequency-desc with lexicographic tiebreak, so the
    // vocabulary is a pure function of the corpus and min_freq.
    static Vocabulary build(const std::vector<std::string>& texts, int min_freq) {
        if (texts.empty()) throw Error("EmptyCorpus", "cannot build a vocabulary from zero documents");
        std::unordered_map<std::string, int64_t> counts;
        for (const auto& text : texts)
            for (auto& w : split_words(text)) counts[w] += 1;

        std::vector<std::pair<std::string, int64_t>> kept;
        kept.reserve(counts.size());
        for (auto& [tok, c] : counts)
            if (c >= min_freq) kept.emplace_back(tok, c);
        std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
            if (a.second != b.second) return a.second > b.second;
            return a.first < b.first;
        });

        Vocabulary v;
        for (auto& [tok, c] : kept) {
            (void)c;
            v.token_to_id_[tok] = v.size();
            v.id_to_token_.push_back(tok);
        }
        return v;
    }

    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw Error("IoError", "cannot write vocabulary file '" + path + "'");
        for (int32_t i = 0; i < size(); ++i) out << id_to_token_[static_cast<size_t>(i)] << '\t' << i << '\n';
    }

    static Vocabulary load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw Error("IoError", "cannot read vocabulary file '" + path + "'");
        Vocabulary v;
        v.id_to_token_.clear();
        v.token_to_id_.clear();
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (line.empty()) continue;
            const auto tab = line.find('\t');
            if (tab == std::string::npos)
                throw Error("BadVocabFile", "line " + std::to_string(lineno) + ": expected token<TAB>id");
            const std::string tok = line.substr(0, tab);
            const int32_t id = static_cast<int32_t>(std::stol(line.substr(tab + 1)));
            if (id != static_cast<int32_t>(v.id_to_token_.size()))
                throw Error("BadVocabFile", "line " + std::to_string(lineno) + ": ids must be dense and sorted");
            if (v.token_to_id_.count(tok))
                throw Error("BadVocabFile", "line " + std::to_string(lineno) + ": duplicate token '" + tok + "'");
            v.token_to_id_[tok] = id;
            v.id_to_token_.push_back(tok);
        }
        static const char* kReserved[] = {"[PAD]", "[CLS]", "[MASK]", "[UNK]"};
        if (v.size() < kNumReserved)
            throw Error("BadVocabFile", "vocabulary is missing reserved entries");
        for (int32_t i = 0; i < kNumReserved; ++i)
            if (v.id_to_token_[static_cast<size_t>(i)] != kReserved[i])
                throw Error("BadVocabFile", "reserved id " + std::to_string(i) + " must be " + kReserved[i]);
        return v;
    }

private:
    std::vector<std::string> id_to_token_;
    std::unordered_map<std::string, int32_t> token_to_id_;
};

inline Document tokenize(const std::string& id, const std::string& text, const Vocabulary& vocab) {
    auto words = split_words(text);
    if (words.empty())
        throw Error("EmptyDocument", "document '" + id + "' has no tokens after normalization");
    Document doc;
    doc.id = id;
    doc.tokens.reserve(words.size());
    for (auto& w : words) doc.tokens.push_back(vocab.id_of(w));
    return doc;
}

// Splits into non-overlapping chunks of at most max_len-1 tokens (one slot is
// reserved for [CLS]). A document that already fits is returned unchanged;
// otherwise chunk ids are suffixed "#k".
inline std::vector<Document> chunk(const Document& doc, int max_len) {
    if (max_len < 2) throw Error("BadMaxLen", "max_len must be at least 2");
    const int cap = max_len - 1;
    const int n = doc.size();
    if (n <= cap) return {doc};
    std::vector<Document> chunks;
    for (int k = 0, start = 0; start < n; ++k, start += cap) {
        Document c;
        c.id = doc.id + "#" + std::to_string(k);
        const int end = std::min(start + cap, n);
        c.tokens.assign(doc.tokens.begin() + start, doc.tokens.begin() + end);
        chunks.push_back(std::move(c));
    }
    return chunks;
}

class Stopwords {
public:
    Stopwords() = default;

    bool contains(std::string word) const {
        for (auto& c : word) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        return words_.count(word) > 0;
    }

    size_t size() const { return words_.size(); }

    void add(std::string word) {
        for (auto& c : word) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        words_.insert(std::move(word));
    }

    static Stopwords load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw Error("IoError", "cannot read stopword file '" + path + "'");
        Stopwords s;
        std::string line;
        while (std::getline(in, line)) {
            while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
            if (!line.empty()) s.add(line);
        }
        return s;
    }

    // Standard English function words.
    static Stopwords default_english() {
        static const char* kWords[] = {
            "a", "about", "above", "after", "again", "against", "all", "am", "an", "and", "any",
            "are", "as", "at", "be", "because", "been", "before", "being", "below", "between",
            "both", "but", "by", "can", "could", "did", "do", "does", "doing", "down", "during",
            "each", "few", "for", "from", "further", "had", "has", "have", "having", "he", "her",
            "here", "hers", "herself", "him", "himself", "his", "how", "i", "if", "in", "into",
            "is", "it", "its", "itself", "just", "me", "more", "most", "my", "myself", "no",
            "nor", "not", "now", "of", "off", "on", "once", "only", "or", "other", "our", "ours",
            "ourselves", "out", "over", "own", "same", "she", "should", "so", "some", "such",
            "than", "that", "the", "their", "theirs", "them", "themselves", "then", "there",
            "these", "they", "this", "those", "through", "to", "too", "under", "until", "up",
            "very", "was", "we", "were", "what", "when", "where", "which", "while", "who",
            "whom", "why", "will", "with", "would", "you", "your", "yours", "yourself",
            "yourselves"};
        Stopwords s;
        for (const char* w : kWords) s.add(w);
        return s;
    }

    // Token ids whose surface form is a stopword; what the span sampler needs.
    std::unordered_set<int32_t> ids_in(const Vocabulary& vocab) const {
        std::unordered_set<int32_t> ids;
        for (int32_t i = Vocabulary::kNumReserved; i < vocab.size(); ++i)
            if (contains(vocab.token_of(i))) ids.insert(i);
        return ids;
    }

private:
    std::unordered_set<std::string> words_;
};

// JSON-lines corpus: one {"id": ..., "text": ...} object per line.
inline std::vector<RawDoc> read_jsonl(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("IoError", "cannot read corpus file '" + path + "'");
    std::vector<RawDoc> docs;
    std::string line;
    int lineno = 0;
    std::unordered_set<std::string> seen;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw Error("BadJsonl", "line " + std::to_string(lineno) + ": " + e.what());
        }
        if (!j.is_object() || !j.contains("id") || !j.contains("text") || !j["id"].is_string() ||
            !j["text"].is_string())
            throw Error("BadJsonl",
                        "line " + std::to_string(lineno) + ": expected {\"id\": string, \"text\": string}");
        RawDoc d{j["id"].get<std::string>(), j["text"].get<std::string>()};
        if (!seen.insert(d.id).second)
            throw Error("DuplicateDocId", "line " + std::to_string(lineno) + ": duplicate id '" + d.id + "'");
        docs.push_back(std::move(d));
    }
    return docs;
}

inline void write_jsonl(const std::string& path, const std::vector<RawDoc>& docs) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("IoError", "cannot write corpus file '" + path + "'");
    for (const auto& d : docs) {
        nlohmann::json j;
        j["id"] = d.id;
        j["text"] = d.text;
        out << j.dump() << '\n';
    }
}

// Tokenize + chunk a raw corpus; the unit everything downstream consumes.
inline std::vector<Document> tokenize_corpus(const std::vector<RawDoc>& raw, const Vocabulary& vocab,
                                             int max_len) {
    std::vector<Document> docs;
    for (const auto& r : raw) {
        for (auto& c : chunk(tokenize(r.id, r.text, vocab), max_len)) docs.push_back(std::move(c));
    }
    return docs;
}

}  // namespace costa
