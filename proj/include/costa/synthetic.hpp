#pragma once

#include <cstdint>
#include <cstdio>
#include <set>
#include <string>
#include <vector>

#include "costa/corpus.hpp"
#include "costa/evaluation.hpp"
#include "costa/retrieval.hpp"
#include "costa/rng.hpp"

namespace costa {

// Deterministic topic-separable corpus: each topic owns a disjoint
// vocabulary, documents mix topic words with a few English function words,
// and queries are short samples from one topic. Linear separability makes
// retrieval correctness checkable without real data.
struct ToyConfig {
    int topics = 10;
    int docs_per_topic = 10;
    int words_per_topic = 30;
    int doc_len_min = 60;
    int doc_len_max = 100;
    double stopword_rate = 0.15;
    int train_queries = 20;
    int test_queries = 20;
    int query_len_min = 3;
    int query_len_max = 6;
    int negatives = 7;
    uint64_t seed = 7;
};

struct ToyData {
    std::vector<RawDoc> docs;
    std::vector<RawDoc> train_queries;
    std::vector<RawDoc> test_queries;
    Qrels train_qrels;
    Qrels test_qrels;
    std::vector<TrainingTriple> triples;  // provided negatives for the warm-up stage
    std::vector<int> doc_topic;           // topic of docs[i]
};

namespace detail {

inline std::string toy_word(int topic, int w) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "t%dw%d", topic, w);
    return buf;
}

inline std::string padded_id(const char* prefix, int i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%s%04d", prefix, i);
    return buf;
}

}  // namespace detail

inline ToyData make_toy(const ToyConfig& cfg) {
    static const char* kFillers[] = {"the", "of", "and", "a", "in", "to", "is"};
    constexpr int kNumFillers = 7;

    ToyData data;
    Rng rng = Rng::derive(cfg.seed, "toy");

    const int n_docs = cfg.topics * cfg.docs_per_topic;
    for (int i = 0; i < n_docs; ++i) {
        const int topic = i / cfg.docs_per_topic;
        data.doc_topic.push_back(topic);
        const int len = cfg.doc_len_min +
                        static_cast<int>(rng.below(static_cast<uint64_t>(cfg.doc_len_max - cfg.doc_len_min + 1)));
        std::string text;
        for (int t = 0; t < len; ++t) {
            if (rng.next_double() < cfg.stopword_rate)
                text += kFillers[rng.below(kNumFillers)];
            else
                text += detail::toy_word(topic, static_cast<int>(rng.below(
                                                    static_cast<uint64_t>(cfg.words_per_topic))));
            text += ' ';
        }
        data.docs.push_back({detail::padded_id("d", i), text});
    }

    auto make_queries = [&](const char* prefix, int count, std::vector<RawDoc>& out, Qrels& qrels) {
        for (int i = 0; i < count; ++i) {
            const int topic = i % cfg.topics;
            const int len = cfg.query_len_min +
                            static_cast<int>(rng.below(
                                static_cast<uint64_t>(cfg.query_len_max - cfg.query_len_min + 1)));
            std::string text;
            for (int t = 0; t < len; ++t) {
                text += detail::toy_word(topic, static_cast<int>(rng.below(
                                                    static_cast<uint64_t>(cfg.words_per_topic))));
                text += ' ';
            }
            const std::string qid = detail::padded_id(prefix, i);
            out.push_back({qid, text});
            for (int d = 0; d < n_docs; ++d)
                if (data.doc_topic[static_cast<size_t>(d)] == topic)
                    qrels.add(qid, data.docs[static_cast<size_t>(d)].id, 1);
        }
    };
    make_queries("tq", cfg.train_queries, data.train_queries, data.train_qrels);
    make_queries("eq", cfg.test_queries, data.test_queries, data.test_qrels);

    // Warm-up triples: a random in-topic positive, negatives drawn from
    // other topics (the provided-negatives stand-in).
    for (int i = 0; i < cfg.train_queries; ++i) {
        const int topic = i % cfg.topics;
        TrainingTriple t;
        t.qid = data.train_queries[static_cast<size_t>(i)].id;
        const int pos_local = static_cast<int>(rng.below(static_cast<uint64_t>(cfg.docs_per_topic)));
        t.pos = data.docs[static_cast<size_t>(topic * cfg.docs_per_topic + pos_local)].id;
        const int wanted = std::min(cfg.negatives, n_docs - cfg.docs_per_topic);
        std::set<std::string> taken;
        while (static_cast<int>(t.negs.size()) < wanted) {
            const int d = static_cast<int>(rng.below(static_cast<uint64_t>(n_docs)));
            if (data.doc_topic[static_cast<size_t>(d)] == topic) continue;
            const std::string& id = data.docs[static_cast<size_t>(d)].id;
            if (taken.insert(id).second) t.negs.push_back(id);
        }
        data.triples.push_back(std::move(t));
    }
    return data;
}

}  // namespace costa
