#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "costa/batch.hpp"
#include "costa/checkpoint.hpp"
#include "costa/corpus.hpp"
#include "costa/evaluation.hpp"
#include "costa/optimizer.hpp"

namespace costa {

struct TrainingTriple {
    std::string qid;
    std::string pos;
    std::vector<std::string> negs;

    friend bool operator==(const TrainingTriple&, const TrainingTriple&) = default;
};

// TSV: qid <TAB> pos_docid <TAB> neg1,neg2,...
inline std::vector<TrainingTriple> read_triples(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("IoError", "cannot read triples file '" + path + "'");
    std::vector<TrainingTriple> triples;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto t1 = line.find('\t');
        const auto t2 = t1 == std::string::npos ? t1 : line.find('\t', t1 + 1);
        if (t2 == std::string::npos)
            throw Error("BadTriplesFile", "line " + std::to_string(lineno) + ": expected 3 columns");
        TrainingTriple t;
        t.qid = line.substr(0, t1);
        t.pos = line.substr(t1 + 1, t2 - t1 - 1);
        std::string negs = line.substr(t2 + 1);
        std::stringstream ss(negs);
        std::string neg;
        while (std::getline(ss, neg, ','))
            if (!neg.empty()) t.negs.push_back(neg);
        if (t.negs.empty())
            throw Error("BadTriplesFile", "line " + std::to_string(lineno) + ": no negatives");
        for (const auto& n : t.negs)
            if (n == t.pos)
                throw Error("BadTriplesFile", "line " + std::to_string(lineno) + ": positive '" +
                                                  t.pos + "' listed as negative");
        triples.push_back(std::move(t));
    }
    return triples;
}

inline void write_triples(const std::string& path, const std::vector<TrainingTriple>& triples) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("IoError", "cannot write triples file '" + path + "'");
    for (const auto& t : triples) {
        out << t.qid << '\t' << t.pos << '\t';
        for (size_t i = 0; i < t.negs.size(); ++i) out << (i ? "," : "") << t.negs[i];
        out << '\n';
    }
}

// Bi-encoder embedding of one text: forward pass, then h_0 (optionally
// projected). Inputs longer than max_len-1 tokens are truncated, never
// rejected.
template <class Real>
std::vector<Real> encode_text(std::span<const int32_t> tokens, const ParamStore<Real>& params,
                              int max_len, Projector projector) {
    const int limit = std::min(max_len, params.config.max_len) - 1;
    if (static_cast<int>(tokens.size()) > limit) {
        log_warn("input truncated from " + std::to_string(tokens.size()) + " to " +
                 std::to_string(limit) + " tokens");
        tokens = tokens.first(static_cast<size_t>(limit));
    }
    auto acts = forward<Real>(tokens, params);
    return project(acts.hidden.row(0), params, projector);
}

// Exact-search index: every document embedding plus the fingerprint of the
// encoder that produced it.
struct DenseIndex {
    std::vector<std::string> ids;
    Tensor<float> vectors;  // n x dim
    uint64_t fingerprint = 0;

    int64_t size() const { return static_cast<int64_t>(ids.size()); }
    int64_t dim() const { return vectors.cols(); }

    void save(const std::string& path) const {
        nlohmann::json manifest;
        manifest["format_version"] = container::kFormatVersion;
        manifest["kind"] = "dense_index";
        manifest["dim"] = dim();
        manifest["count"] = size();
        manifest["fingerprint"] = to_hex(fingerprint);
        manifest["ids"] = ids;
        container::write(path, manifest, vectors.data);
    }

    static DenseIndex load(const std::string& path) {
        auto c = container::read(path);
        if (c.manifest.value("kind", "") != "dense_index")
            throw Error("BadIndex", "'" + path + "' is not a dense index");
        DenseIndex idx;
        idx.ids = c.manifest.at("ids").get<std::vector<std::string>>();
        idx.fingerprint = from_hex(c.manifest.at("fingerprint").get<std::string>());
        const int64_t dim = c.manifest.at("dim").get<int64_t>();
        const int64_t count = c.manifest.at("count").get<int64_t>();
        if (count != static_cast<int64_t>(idx.ids.size()) ||
            static_cast<int64_t>(c.payload.size()) != count * dim)
            throw Error("TruncatedFile", "'" + path + "' payload does not match its manifest");
        idx.vectors.shape = {count, dim};
        idx.vectors.data = std::move(c.payload);
        return idx;
    }
};

inline void ensure_fingerprint(const ParamStore<float>& params, const DenseIndex& index) {
    if (fingerprint(params) != index.fingerprint)
        throw Error("FingerprintMismatch",
                    "index was built by a different encoder checkpoint; rebuild the index");
}

inline DenseIndex build_index(const std::vector<Document>& docs, const ParamStore<float>& params,
                              int max_len, Projector projector, int threads = 1) {
    DenseIndex index;
    const int64_t H = params.config.hidden;
    index.vectors = Tensor<float>({static_cast<int64_t>(docs.size()), H});
    index.ids.resize(docs.size());
    parallel_for(static_cast<int64_t>(docs.size()), threads, [&](int64_t i) {
        const auto& doc = docs[static_cast<size_t>(i)];
        auto z = encode_text<float>(doc.tokens, params, max_len, projector);
        index.ids[static_cast<size_t>(i)] = doc.id;
        for (int64_t j = 0; j < H; ++j) index.vectors.at(i, j) = z[static_cast<size_t>(j)];
    });
    index.fingerprint = fingerprint(params);
    return index;
}

struct SearchHit {
    std::string doc_id;
    double score;
};

// Exact top-k by dot product, descending; ties broken by ascending doc id.
// k beyond the corpus size returns the full ranking.
inline std::vector<SearchHit> search_topk(std::span<const float> query, const DenseIndex& index, int k) {
    if (k < 1) throw Error("BadCutoff", "k must be at least 1");
    if (static_cast<int64_t>(query.size()) != index.dim())
        throw Error("DimensionMismatch", "query dimension does not match the index");
    const int64_t n = index.size();
    std::vector<double> scores(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i)
        scores[static_cast<size_t>(i)] = dot(query.data(), index.vectors.row(i), index.dim());
    std::vector<int64_t> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    auto better = [&](int64_t a, int64_t b) {
        if (scores[static_cast<size_t>(a)] != scores[static_cast<size_t>(b)])
            return scores[static_cast<size_t>(a)] > scores[static_cast<size_t>(b)];
        return index.ids[static_cast<size_t>(a)] < index.ids[static_cast<size_t>(b)];
    };
    const int64_t kk = std::min<int64_t>(k, n);
    std::partial_sort(order.begin(), order.begin() + kk, order.end(), better);
    std::vector<SearchHit> hits;
    hits.reserve(static_cast<size_t>(kk));
    for (int64_t i = 0; i < kk; ++i)
        hits.push_back({index.ids[static_cast<size_t>(order[static_cast<size_t>(i)])],
                        scores[static_cast<size_t>(order[static_cast<size_t>(i)])]});
    return hits;
}

// Numerically stable softmax cross-entropy over one candidate list.
inline std::pair<double, std::vector<double>> softmax_ce(const std::vector<double>& logits,
                                                         size_t target) {
    double maxl = -std::numeric_limits<double>::infinity();
    for (double l : logits) maxl = std::max(maxl, l);
    double denom = 0;
    for (double l : logits) denom += std::exp(l - maxl);
    const double log_denom = maxl + std::log(denom);
    std::vector<double> dlogits(logits.size());
    for (size_t i = 0; i < logits.size(); ++i)
        dlogits[i] = std::exp(logits[i] - log_denom) - (i == target ? 1.0 : 0.0);
    return {log_denom - logits[target], std::move(dlogits)};
}

// One fine-tuning batch with texts already resolved into slots.
struct FinetuneBatch {
    std::vector<std::vector<int32_t>> query_tokens;
    std::vector<std::vector<int32_t>> doc_tokens;
    struct Item {
        int query = 0;
        int pos = 0;
        std::vector<int> negs;
    };
    std::vector<Item> items;
};

struct FinetuneLossOptions {
    int query_max_len = 32;
    int doc_max_len = 128;
    bool in_batch_negatives = true;
    Projector projector = Projector::None;
    int threads = 1;
};

template <class Real>
struct FinetuneLossResult {
    double loss = 0;
    NamedTensors<Real> grads;
};

// Mean softmax cross-entropy of each query against [its positive; its own
// negatives; optionally every other document in the batch], scored by dot
// product of the shared encoder's embeddings. Per-text gradients are reduced
// in slot order (queries, then documents), so results do not depend on the
// thread count.
template <class Real>
FinetuneLossResult<Real> finetune_loss(const ParamStore<Real>& params, const FinetuneBatch& batch,
                                       const FinetuneLossOptions& opt, bool with_grads) {
    if (batch.items.empty()) throw Error("EmptyBatch", "fine-tuning batch has no items");
    const int64_t nq = static_cast<int64_t>(batch.query_tokens.size());
    const int64_t nd = static_cast<int64_t>(batch.doc_tokens.size());
    const int64_t H = params.config.hidden;

    struct Encoded {
        Activations<Real> acts;
        std::vector<Real> z;
    };
    std::vector<Encoded> enc(static_cast<size_t>(nq + nd));
    parallel_for(nq + nd, opt.threads, [&](int64_t i) {
        const auto& tokens =
            i < nq ? batch.query_tokens[static_cast<size_t>(i)] : batch.doc_tokens[static_cast<size_t>(i - nq)];
        const int max_len = i < nq ? opt.query_max_len : opt.doc_max_len;
        const int limit = std::min(max_len, params.config.max_len) - 1;
        std::span<const int32_t> view(tokens);
        if (static_cast<int>(view.size()) > limit) view = view.first(static_cast<size_t>(limit));
        auto& e = enc[static_cast<size_t>(i)];
        e.acts = forward<Real>(view, params);
        e.z = project(e.acts.hidden.row(0), params, opt.projector);
    });

    const double inv_b = 1.0 / static_cast<double>(batch.items.size());
    double loss = 0;
    std::vector<std::vector<double>> dz(static_cast<size_t>(nq + nd),
                                        std::vector<double>(static_cast<size_t>(H), 0.0));
    for (const auto& item : batch.items) {
        std::vector<int> cand;
        if (opt.in_batch_negatives) {
            cand.resize(static_cast<size_t>(nd));
            std::iota(cand.begin(), cand.end(), 0);
        } else {
            cand.push_back(item.pos);
            for (int n : item.negs) cand.push_back(n);
        }
        size_t target = 0;
        std::vector<double> logits(cand.size());
        const auto& qz = enc[static_cast<size_t>(item.query)].z;
        for (size_t c = 0; c < cand.size(); ++c) {
            if (cand[c] == item.pos) target = c;
            logits[c] = dot(qz.data(), enc[static_cast<size_t>(nq + cand[c])].z.data(), H);
        }
        auto [ce, dlogits] = softmax_ce(logits, target);
        loss += inv_b * ce;
        if (!with_grads) continue;
        for (size_t c = 0; c < cand.size(); ++c) {
            const double g = inv_b * dlogits[c];
            if (g == 0.0) continue;
            const auto& dz_vec = enc[static_cast<size_t>(nq + cand[c])].z;
            for (int64_t h = 0; h < H; ++h) {
                dz[static_cast<size_t>(item.query)][static_cast<size_t>(h)] +=
                    g * static_cast<double>(dz_vec[static_cast<size_t>(h)]);
                dz[static_cast<size_t>(nq + cand[c])][static_cast<size_t>(h)] +=
                    g * static_cast<double>(qz[static_cast<size_t>(h)]);
            }
        }
    }

    FinetuneLossResult<Real> out;
    out.loss = loss;
    if (!with_grads) return out;

    std::vector<NamedTensors<Real>> text_grads(static_cast<size_t>(nq + nd));
    parallel_for(nq + nd, opt.threads, [&](int64_t i) {
        NamedTensors<Real> grads = params.zero_grads();
        auto& e = enc[static_cast<size_t>(i)];
        std::vector<Real> dz_real(static_cast<size_t>(H));
        for (int64_t h = 0; h < H; ++h)
            dz_real[static_cast<size_t>(h)] =
                static_cast<Real>(dz[static_cast<size_t>(i)][static_cast<size_t>(h)]);
        Tensor<Real> dhidden({e.acts.hidden.rows(), H});
        project_backward(e.acts.hidden.row(0), e.z, dz_real.data(), params, opt.projector, grads,
                         dhidden.row(0));
        backward(e.acts, params, dhidden, grads);
        text_grads[static_cast<size_t>(i)] = std::move(grads);
    });
    out.grads = std::move(text_grads[0]);
    for (int64_t i = 1; i < nq + nd; ++i) accumulate(out.grads, text_grads[static_cast<size_t>(i)]);
    return out;
}

struct FinetuneConfig {
    double lr = 5e-6;
    int epochs = 3;
    int batch_size = 8;
    uint64_t seed = 42;
    double warmup_fraction = 0.1;
    int query_max_len = 32;
    int doc_max_len = 128;
    bool in_batch_negatives = true;
    Projector projector = Projector::None;
    int threads = 1;
};

struct FinetuneStepLog {
    int64_t step;
    double lr;
    double loss;
};

// Bi-encoder fine-tuning over training triples; query and document towers
// share the encoder.
class Finetuner {
public:
    Finetuner(std::map<std::string, std::vector<int32_t>> docs,
              std::map<std::string, std::vector<int32_t>> queries, std::vector<TrainingTriple> triples,
              FinetuneConfig cfg, ParamStore<float> params)
        : docs_(std::move(docs)),
          queries_(std::move(queries)),
          triples_(std::move(triples)),
          cfg_(cfg),
          params_(std::move(params)),
          adam_(AdamState<float>::init(params_)) {
        if (triples_.empty()) throw Error("EmptyTriples", "no training triples");
        for (const auto& t : triples_) {
            if (!queries_.count(t.qid)) throw Error("UnknownQueryId", "query '" + t.qid + "'");
            if (!docs_.count(t.pos)) throw Error("UnknownDocId", "document '" + t.pos + "'");
            for (const auto& n : t.negs)
                if (!docs_.count(n)) throw Error("UnknownDocId", "document '" + n + "'");
        }
    }

    int64_t steps_per_epoch() const {
        const auto n = static_cast<int64_t>(triples_.size());
        return (n + cfg_.batch_size - 1) / cfg_.batch_size;
    }
    int64_t total_steps() const { return steps_per_epoch() * cfg_.epochs; }
    bool done() const { return step_ >= total_steps(); }
    int64_t step_count() const { return step_; }

    const ParamStore<float>& params() const { return params_; }

    FinetuneStepLog step() {
        if (done()) throw Error("TrainingComplete", "all fine-tuning steps already taken");
        const int64_t spe = steps_per_epoch();
        const int64_t epoch = step_ / spe;
        const int64_t idx = step_ % spe;
        if (epoch != order_epoch_) {
            order_.resize(triples_.size());
            std::iota(order_.begin(), order_.end(), 0);
            Rng rng = Rng::derive(cfg_.seed, "ft-shuffle", static_cast<uint64_t>(epoch));
            for (size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[rng.below(i)]);
            order_epoch_ = epoch;
        }
        const int64_t begin = idx * cfg_.batch_size;
        const int64_t end =
            std::min<int64_t>(begin + cfg_.batch_size, static_cast<int64_t>(triples_.size()));

        // Unique texts in first-appearance order.
        FinetuneBatch batch;
        std::map<std::string, int> q_slot, d_slot;
        for (int64_t i = begin; i < end; ++i) {
            const auto& t = triples_[static_cast<size_t>(order_[static_cast<size_t>(i)])];
            auto q = q_slot.emplace(t.qid, static_cast<int>(batch.query_tokens.size()));
            if (q.second) batch.query_tokens.push_back(queries_.at(t.qid));
            auto slot_of = [&](const std::string& id) {
                auto d = d_slot.emplace(id, static_cast<int>(batch.doc_tokens.size()));
                if (d.second) batch.doc_tokens.push_back(docs_.at(id));
                return d.first->second;
            };
            FinetuneBatch::Item item;
            item.query = q.first->second;
            item.pos = slot_of(t.pos);
            for (const auto& n : t.negs) item.negs.push_back(slot_of(n));
            batch.items.push_back(std::move(item));
        }

        FinetuneLossOptions opt;
        opt.query_max_len = cfg_.query_max_len;
        opt.doc_max_len = cfg_.doc_max_len;
        opt.in_batch_negatives = cfg_.in_batch_negatives;
        opt.projector = cfg_.projector;
        opt.threads = cfg_.threads;
        auto res = finetune_loss(params_, batch, opt, true);
        if (!std::isfinite(res.loss)) throw Error("NonFiniteLoss", "step " + std::to_string(step_ + 1));

        LrSchedule schedule{cfg_.lr, total_steps(), cfg_.warmup_fraction};
        const double lr = schedule.at(step_ + 1);
        adam_step(params_, res.grads, adam_, lr);
        ++step_;
        return {step_, lr, res.loss};
    }

private:
    std::map<std::string, std::vector<int32_t>> docs_;
    std::map<std::string, std::vector<int32_t>> queries_;
    std::vector<TrainingTriple> triples_;
    FinetuneConfig cfg_;
    ParamStore<float> params_;
    AdamState<float> adam_;
    int64_t step_ = 0;
    int64_t order_epoch_ = -1;
    std::vector<int64_t> order_;
};

// Warm-up negatives without a trained retriever: rank documents by shared
// token types with the query (ties by ascending doc id) and take the top
// non-relevant ones. A first-stage stand-in for externally provided
// negatives, behind the same triples interface.
inline std::vector<TrainingTriple> lexical_overlap_negatives(
    const std::map<std::string, std::vector<int32_t>>& queries,
    const std::map<std::string, std::string>& positives, const std::vector<Document>& docs,
    const Qrels& qrels, int negatives) {
    std::vector<TrainingTriple> out;
    for (const auto& [qid, tokens] : queries) {
        auto pos_it = positives.find(qid);
        if (pos_it == positives.end()) continue;
        std::set<int32_t> query_types(tokens.begin(), tokens.end());
        std::vector<std::pair<int64_t, const std::string*>> ranked;
        for (const auto& d : docs) {
            std::set<int32_t> doc_types(d.tokens.begin(), d.tokens.end());
            int64_t overlap = 0;
            for (int32_t t : query_types) overlap += doc_types.count(t);
            ranked.emplace_back(overlap, &d.id);
        }
        std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
            if (a.first != b.first) return a.first > b.first;
            return *a.second < *b.second;
        });
        TrainingTriple t;
        t.qid = qid;
        t.pos = pos_it->second;
        for (const auto& [overlap, id] : ranked) {
            if (static_cast<int>(t.negs.size()) >= negatives) break;
            if (qrels.rel(qid, *id) == 0 && *id != t.pos) t.negs.push_back(*id);
        }
        if (t.negs.empty()) {
            log_warn("query '" + qid + "': no non-relevant documents, skipped");
            continue;
        }
        out.push_back(std::move(t));
    }
    return out;
}

struct MineOptions {
    int topk = 1000;
    int negatives = 7;
    uint64_t seed = 42;
    uint64_t iteration = 1;
    int query_max_len = 32;
    Projector projector = Projector::None;
};

struct MineResult {
    std::vector<TrainingTriple> triples;
    int64_t fallback_queries = 0;  // queries with no usable retrieved negative
    int64_t padded_queries = 0;    // queries topped up with random negatives
};

// Static hard-negative mining: for each query, sample `negatives` documents
// from the top-k retrieved non-relevant ones. Queries whose top-k contains
// no non-relevant document fall back to random negatives.
inline MineResult mine_hard_negatives(const std::map<std::string, std::vector<int32_t>>& queries,
                                      const std::map<std::string, std::string>& positives,
                                      const DenseIndex& index, const ParamStore<float>& params,
                                      const Qrels& qrels, const MineOptions& opt) {
    ensure_fingerprint(params, index);
    MineResult out;
    for (const auto& [qid, tokens] : queries) {
        auto pos_it = positives.find(qid);
        if (pos_it == positives.end()) continue;
        auto emb = encode_text<float>(tokens, params, opt.query_max_len, opt.projector);
        auto hits = search_topk(emb, index, opt.topk);
        std::vector<std::string> cand;
        for (const auto& h : hits)
            if (qrels.rel(qid, h.doc_id) == 0 && h.doc_id != pos_it->second) cand.push_back(h.doc_id);

        Rng rng = Rng::derive(opt.seed, "mine", opt.iteration, fnv1a64(qid));
        std::vector<std::string> negs;
        if (static_cast<int>(cand.size()) >= opt.negatives) {
            // Sample without replacement, keep retrieval order.
            std::vector<size_t> pick(cand.size());
            std::iota(pick.begin(), pick.end(), 0);
            for (int i = 0; i < opt.negatives; ++i)
                std::swap(pick[static_cast<size_t>(i)],
                          pick[static_cast<size_t>(i) + rng.below(pick.size() - static_cast<size_t>(i))]);
            pick.resize(static_cast<size_t>(opt.negatives));
            std::sort(pick.begin(), pick.end());
            for (size_t p : pick) negs.push_back(cand[p]);
        } else {
            negs = cand;
            if (cand.empty()) {
                ++out.fallback_queries;
                log_warn("query '" + qid + "': no non-relevant document retrieved, using random negatives");
            } else {
                ++out.padded_queries;
            }
            std::set<std::string> taken(negs.begin(), negs.end());
            std::vector<std::string> pool;
            for (const auto& id : index.ids)
                if (qrels.rel(qid, id) == 0 && id != pos_it->second && !taken.count(id)) pool.push_back(id);
            while (static_cast<int>(negs.size()) < opt.negatives && !pool.empty()) {
                const size_t i = rng.below(pool.size());
                negs.push_back(pool[i]);
                pool.erase(pool.begin() + static_cast<int64_t>(i));
            }
        }
        if (negs.empty()) {
            log_warn("query '" + qid + "': no negatives available at all, skipped");
            continue;
        }
        out.triples.push_back({qid, pos_it->second, std::move(negs)});
    }
    return out;
}

}  // namespace costa
