#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "costa/common.hpp"

namespace costa {

// Graded relevance judgments: (query id, doc id) -> rel. Unjudged documents
// count as non-relevant (TREC convention).
struct Qrels {
    std::map<std::string, std::map<std::string, int>> judgments;

    int rel(const std::string& qid, const std::string& doc_id) const {
        auto q = judgments.find(qid);
        if (q == judgments.end()) return 0;
        auto d = q->second.find(doc_id);
        return d == q->second.end() ? 0 : d->second;
    }

    bool has_relevant(const std::string& qid) const {
        auto q = judgments.find(qid);
        if (q == judgments.end()) return false;
        for (const auto& [doc, r] : q->second)
            if (r >= 1) return true;
        return false;
    }

    void add(const std::string& qid, const std::string& doc_id, int r) {
        if (!judgments[qid].emplace(doc_id, r).second)
            throw Error("DuplicateJudgment", "(" + qid + ", " + doc_id + ") judged twice");
    }

    // Whitespace-separated: qid 0 docid rel
    static Qrels load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw Error("IoError", "cannot read qrels file '" + path + "'");
        Qrels q;
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (line.empty()) continue;
            std::istringstream ss(line);
            std::string qid, iter, doc;
            int r;
            if (!(ss >> qid >> iter >> doc >> r) || r < 0)
                throw Error("BadQrels", "line " + std::to_string(lineno) + ": expected 'qid 0 docid rel'");
            if (q.judgments[qid].count(doc))
                throw Error("DuplicateJudgment",
                            "line " + std::to_string(lineno) + ": (" + qid + ", " + doc + ") judged twice");
            q.judgments[qid][doc] = r;
        }
        return q;
    }

    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw Error("IoError", "cannot write qrels file '" + path + "'");
        for (const auto& [qid, docs] : judgments)
            for (const auto& [doc, r] : docs) out << qid << " 0 " << doc << ' ' << r << '\n';
    }
};

struct RunEntry {
    std::string doc_id;
    double score;
};

// Per query: ranked result list in file order. The evaluator never re-sorts;
// the stored order is authoritative.
using Run = std::map<std::string, std::vector<RunEntry>>;

// TREC format: qid Q0 docid rank score tag
inline Run load_run(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("IoError", "cannot read run file '" + path + "'");
    Run run;
    std::map<std::string, std::map<std::string, int>> seen;
    std::map<std::string, int> last_rank;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string qid, q0, doc, tag;
        int rank;
        double score;
        if (!(ss >> qid >> q0 >> doc >> rank >> score >> tag))
            throw Error("BadRunFile",
                        "line " + std::to_string(lineno) + ": expected 'qid Q0 docid rank score tag'");
        if (!seen[qid].emplace(doc, lineno).second)
            throw Error("DuplicateRunDoc", "line " + std::to_string(lineno) + ": document '" + doc +
                                               "' repeated for query '" + qid + "'");
        auto& list = run[qid];
        if (!list.empty()) {
            if (score > list.back().score)
                throw Error("BadRunFile", "line " + std::to_string(lineno) +
                                              ": scores must be non-increasing within a query");
            if (rank <= last_rank[qid])
                throw Error("BadRunFile",
                            "line " + std::to_string(lineno) + ": ranks must ascend within a query");
        }
        last_rank[qid] = rank;
        list.push_back({doc, score});
    }
    return run;
}

inline void write_run(std::ostream& out, const Run& run, const std::string& tag) {
    for (const auto& [qid, entries] : run) {
        int rank = 1;
        for (const auto& e : entries) {
            char score[64];
            std::snprintf(score, sizeof(score), "%.6f", e.score);
            out << qid << " Q0 " << e.doc_id << ' ' << rank++ << ' ' << score << ' ' << tag << '\n';
        }
    }
}

inline void write_run(const std::string& path, const Run& run, const std::string& tag) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("IoError", "cannot write run file '" + path + "'");
    write_run(out, run, tag);
}

namespace detail {

// Queries eligible for evaluation: present in the run and carrying at least
// one relevant judgment. Everything else is reported through `skipped`.
inline std::vector<std::string> evaluated_queries(const Run& run, const Qrels& qrels,
                                                  std::vector<std::string>* skipped) {
    std::vector<std::string> out;
    for (const auto& [qid, entries] : run) {
        (void)entries;
        if (qrels.has_relevant(qid))
            out.push_back(qid);
        else if (skipped)
            skipped->push_back(qid);
    }
    return out;
}

}  // namespace detail

// Mean reciprocal rank of the first relevant document within the top k.
inline double mrr_at_k(const Run& run, const Qrels& qrels, int k,
                       std::vector<std::string>* skipped = nullptr) {
    if (k < 1) throw Error("BadCutoff", "k must be at least 1");
    auto queries = detail::evaluated_queries(run, qrels, skipped);
    if (queries.empty()) return 0.0;
    double sum = 0;
    for (const auto& qid : queries) {
        const auto& entries = run.at(qid);
        const size_t limit = std::min(entries.size(), static_cast<size_t>(k));
        for (size_t i = 0; i < limit; ++i) {
            if (qrels.rel(qid, entries[i].doc_id) >= 1) {
                sum += 1.0 / static_cast<double>(i + 1);
                break;
            }
        }
    }
    return sum / static_cast<double>(queries.size());
}

// NDCG with exponential gains (2^rel - 1), trec_eval's default.
inline double ndcg_at_k(const Run& run, const Qrels& qrels, int k,
                        std::vector<std::string>* skipped = nullptr) {
    if (k < 1) throw Error("BadCutoff", "k must be at least 1");
    auto queries = detail::evaluated_queries(run, qrels, skipped);
    if (queries.empty()) return 0.0;
    double sum = 0;
    for (const auto& qid : queries) {
        const auto& entries = run.at(qid);
        const size_t limit = std::min(entries.size(), static_cast<size_t>(k));
        double dcg = 0;
        for (size_t i = 0; i < limit; ++i) {
            const int r = qrels.rel(qid, entries[i].doc_id);
            if (r > 0) dcg += (std::exp2(r) - 1.0) / std::log2(static_cast<double>(i + 2));
        }
        std::vector<int> gains;
        for (const auto& [doc, r] : qrels.judgments.at(qid))
            if (r > 0) gains.push_back(r);
        std::sort(gains.begin(), gains.end(), std::greater<>());
        double idcg = 0;
        for (size_t i = 0; i < std::min(gains.size(), static_cast<size_t>(k)); ++i)
            idcg += (std::exp2(gains[i]) - 1.0) / std::log2(static_cast<double>(i + 2));
        sum += dcg / idcg;
    }
    return sum / static_cast<double>(queries.size());
}

// Fraction of relevant documents retrieved within the top k.
inline double recall_at_k(const Run& run, const Qrels& qrels, int k,
                          std::vector<std::string>* skipped = nullptr) {
    if (k < 1) throw Error("BadCutoff", "k must be at least 1");
    auto queries = detail::evaluated_queries(run, qrels, skipped);
    if (queries.empty()) return 0.0;
    double sum = 0;
    for (const auto& qid : queries) {
        const auto& entries = run.at(qid);
        const size_t limit = std::min(entries.size(), static_cast<size_t>(k));
        int64_t hit = 0, total = 0;
        for (const auto& [doc, r] : qrels.judgments.at(qid))
            if (r >= 1) ++total;
        for (size_t i = 0; i < limit; ++i)
            if (qrels.rel(qid, entries[i].doc_id) >= 1) ++hit;
        sum += static_cast<double>(hit) / static_cast<double>(total);
    }
    return sum / static_cast<double>(queries.size());
}

}  // namespace costa
