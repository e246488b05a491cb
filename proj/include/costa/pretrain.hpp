#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "costa/batch.hpp"
#include "costa/corpus.hpp"
#include "costa/losses.hpp"
#include "costa/optimizer.hpp"
#include "costa/spans.hpp"

namespace costa {

struct TrainConfig {
    int batch_size = 8;
    int epochs = 6;
    int64_t max_steps = 0;  // when > 0, overrides epochs as the step budget
    double tau = 0.1;
    double lambda = 0.1;
    double lr = 5e-5;
    double warmup_fraction = 0.1;
    uint64_t seed = 42;
    Projector projector = Projector::Nonlinear;
    bool clean_span_pass = false;  // pool spans from a second, uncorrupted pass
    bool cosine = false;
    bool exclude_own_group = false;
    MaskConfig mask;
    int threads = 1;
    // Set to resample spans at the start of every epoch (round = epoch);
    // by default spans are fixed once, before training.
    std::optional<SamplerConfig> resampler;
};

struct StepLog {
    int64_t step;
    double lr;
    double gwc;
    double mlm;
    double total;
};

inline std::string loss_log_header() { return "step\tlr\tgwc\tmlm\ttotal"; }

inline std::string format_step_log(const StepLog& log) {
    char buf[192];
    std::snprintf(buf, sizeof(buf), "%lld\t%.17g\t%.17g\t%.17g\t%.17g",
                  static_cast<long long>(log.step), log.lr, log.gwc, log.mlm, log.total);
    return buf;
}

// Seeded epoch shuffle (Fisher-Yates).
inline std::vector<int64_t> pack_epoch_order(int64_t n_docs, uint64_t seed, int64_t epoch) {
    std::vector<int64_t> order(static_cast<size_t>(n_docs));
    std::iota(order.begin(), order.end(), 0);
    Rng rng = Rng::derive(seed, "shuffle", static_cast<uint64_t>(epoch));
    for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    return order;
}

// Batches are consecutive slices of the epoch order; a trailing batch of one
// document is dropped (the contrastive loss needs at least one other group).
inline int64_t steps_in_epoch(int64_t n_docs, int64_t batch_size) {
    const int64_t full = n_docs / batch_size;
    const int64_t rem = n_docs % batch_size;
    return full + (rem >= 2 ? 1 : 0);
}

struct PrepareResult {
    std::vector<Span> spans;
    int64_t docs_sampled = 0;
    int64_t docs_skipped = 0;
    // (granularity, length) -> count
    std::map<std::pair<Granularity, int32_t>, int64_t> length_histogram;
};

// Samples spans for a whole corpus; documents shorter than two tokens are
// skipped with a warning.
inline PrepareResult prepare_spans(const std::vector<Document>& docs, const SamplerConfig& cfg) {
    PrepareResult out;
    for (const auto& doc : docs) {
        if (doc.size() < 2) {
            ++out.docs_skipped;
            log_warn("document '" + doc.id + "' has fewer than 2 tokens, skipped for span sampling");
            continue;
        }
        ++out.docs_sampled;
        for (auto& s : sample_group(doc, cfg)) {
            ++out.length_histogram[{s.granularity, s.length()}];
            out.spans.push_back(std::move(s));
        }
    }
    return out;
}

inline void write_span_stats(const std::string& path, const PrepareResult& result) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("IoError", "cannot write span stats file '" + path + "'");
    out << "granularity\tlength\tcount\n";
    for (const auto& [key, count] : result.length_histogram)
        out << granularity_name(key.first) << '\t' << key.second << '\t' << count << '\n';
}

// Drives joint GWC+MLM optimization over a prepared corpus. All randomness
// (epoch order, MLM corruption, optional span resampling) is derived from
// (seed, epoch, doc id), so training resumes mid-run bit-exactly from just
// the step counter.
class Pretrainer {
public:
    Pretrainer(std::vector<Document> docs, const std::vector<Span>& spans, TrainConfig cfg,
               ParamStore<float> params, AdamState<float> adam, Rng rng, int64_t start_step = 0)
        : cfg_(cfg), params_(std::move(params)), adam_(std::move(adam)), rng_(rng), step_(start_step) {
        std::map<std::string, std::vector<std::pair<int32_t, int32_t>>> by_doc;
        for (const auto& s : spans) by_doc[s.doc_id].emplace_back(s.start, s.end);
        int64_t without_spans = 0;
        for (auto& d : docs) {
            auto it = by_doc.find(d.id);
            if (it == by_doc.end()) {
                ++without_spans;
                continue;
            }
            spans_.push_back(it->second);
            docs_.push_back(std::move(d));
        }
        if (without_spans > 0)
            log_warn(std::to_string(without_spans) + " document(s) without spans excluded from training");
        if (docs_.size() < 2) throw Error("CorpusTooSmall", "need at least 2 documents with spans");
        const size_t per_group = spans_[0].size();
        for (const auto& s : spans_)
            if (s.size() != per_group)
                throw Error("UnevenSpanCounts", "documents carry differing span counts");
        if (static_cast<int64_t>(docs_.size()) % cfg_.batch_size == 1)
            log_warn("one document per epoch is dropped (final batch would have a single group)");
    }

    static Pretrainer fresh(std::vector<Document> docs, const std::vector<Span>& spans,
                            const TrainConfig& cfg, EncoderConfig enc) {
        Rng rng = Rng::derive(cfg.seed, "init");
        auto params = ParamStore<float>::random_init(enc, rng);
        auto adam = AdamState<float>::init(params);
        return Pretrainer(std::move(docs), spans, cfg, std::move(params), std::move(adam), rng, 0);
    }

    int64_t steps_per_epoch() const {
        return steps_in_epoch(static_cast<int64_t>(docs_.size()), cfg_.batch_size);
    }

    int64_t total_steps() const {
        const int64_t by_epochs = steps_per_epoch() * cfg_.epochs;
        return cfg_.max_steps > 0 ? cfg_.max_steps : by_epochs;
    }

    bool done() const { return step_ >= total_steps(); }
    int64_t step_count() const { return step_; }

    const ParamStore<float>& params() const { return params_; }
    const AdamState<float>& adam() const { return adam_; }
    const Rng& rng() const { return rng_; }
    const std::vector<Document>& docs() const { return docs_; }

    std::vector<Span> current_spans() const {
        std::vector<Span> out;
        for (size_t d = 0; d < docs_.size(); ++d) {
            for (size_t s = 0; s < spans_[d].size(); ++s) {
                Span sp;
                sp.doc_id = docs_[d].id;
                sp.start = spans_[d][s].first;
                sp.end = spans_[d][s].second;
                out.push_back(std::move(sp));
            }
        }
        return out;
    }

    StepLog step() {
        if (done()) throw Error("TrainingComplete", "all training steps already taken");
        const int64_t spe = steps_per_epoch();
        const int64_t epoch = step_ / spe;
        const int64_t idx = step_ % spe;
        if (cfg_.resampler && epoch != resample_epoch_) {
            SamplerConfig sc = *cfg_.resampler;
            sc.round = static_cast<uint64_t>(epoch);
            for (size_t d = 0; d < docs_.size(); ++d) {
                auto group = sample_group(docs_[d], sc);
                spans_[d].clear();
                for (const auto& s : group) spans_[d].emplace_back(s.start, s.end);
            }
            resample_epoch_ = epoch;
        }
        if (epoch != order_epoch_) {
            order_ = pack_epoch_order(static_cast<int64_t>(docs_.size()), cfg_.seed, epoch);
            order_epoch_ = epoch;
        }

        const int64_t begin = idx * cfg_.batch_size;
        const int64_t end =
            std::min<int64_t>(begin + cfg_.batch_size, static_cast<int64_t>(docs_.size()));
        std::vector<BatchDoc> batch;
        std::string batch_ids;
        for (int64_t i = begin; i < end; ++i) {
            const auto& doc = docs_[static_cast<size_t>(order_[static_cast<size_t>(i)])];
            batch_ids += (batch_ids.empty() ? "" : ",") + doc.id;
            Rng mask_rng = Rng::derive(cfg_.seed, "mlm", static_cast<uint64_t>(epoch), fnv1a64(doc.id));
            auto masked = mask_tokens(doc.tokens, cfg_.mask, params_.config.vocab, mask_rng);
            BatchDoc bd;
            bd.tokens = std::move(masked.corrupted);
            if (cfg_.clean_span_pass) bd.clean_tokens = doc.tokens;
            bd.spans = spans_[static_cast<size_t>(order_[static_cast<size_t>(i)])];
            for (size_t p = 0; p < masked.positions.size(); ++p) {
                bd.mlm_positions.push_back(masked.positions[p] + 1);
                bd.mlm_targets.push_back(masked.targets[p]);
            }
            batch.push_back(std::move(bd));
        }

        BatchLossOptions opt;
        opt.tau = cfg_.tau;
        opt.lambda = cfg_.lambda;
        opt.projector = cfg_.projector;
        opt.cosine = cfg_.cosine;
        opt.exclude_own_group = cfg_.exclude_own_group;
        opt.threads = cfg_.threads;
        auto res = batch_loss(params_, batch, opt, true);
        if (!std::isfinite(res.total))
            throw Error("NonFiniteLoss",
                        "step " + std::to_string(step_ + 1) + ", batch [" + batch_ids + "]");

        LrSchedule schedule{cfg_.lr, total_steps(), cfg_.warmup_fraction};
        const double lr = schedule.at(step_ + 1);
        adam_step(params_, res.grads, adam_, lr);
        ++step_;
        return {step_, lr, res.gwc, res.mlm, res.total};
    }

private:
    TrainConfig cfg_;
    std::vector<Document> docs_;
    std::vector<std::vector<std::pair<int32_t, int32_t>>> spans_;
    ParamStore<float> params_;
    AdamState<float> adam_;
    Rng rng_;
    int64_t step_ = 0;
    int64_t order_epoch_ = -1;
    int64_t resample_epoch_ = -1;
    std::vector<int64_t> order_;
};

// Fraction of documents whose projected whole-text representation has its
// corpus-wide nearest span (by dot product) inside the document's own group.
// Uses clean forward passes; ties resolve to the earliest span.
inline double group_nn_accuracy(const ParamStore<float>& params, const std::vector<Document>& docs,
                                const std::vector<Span>& spans, Projector projector, int threads = 1) {
    std::map<std::string, std::vector<std::pair<int32_t, int32_t>>> by_doc;
    for (const auto& s : spans) by_doc[s.doc_id].emplace_back(s.start, s.end);
    std::vector<const Document*> usable;
    for (const auto& d : docs)
        if (by_doc.count(d.id)) usable.push_back(&d);
    if (usable.empty()) throw Error("CorpusTooSmall", "no documents with spans");

    const int64_t n = static_cast<int64_t>(usable.size());
    const int64_t H = params.config.hidden;
    std::vector<std::vector<float>> anchors(static_cast<size_t>(n));
    std::vector<std::vector<std::vector<float>>> pooled(static_cast<size_t>(n));
    parallel_for(n, threads, [&](int64_t i) {
        const Document& doc = *usable[static_cast<size_t>(i)];
        auto acts = forward<float>(doc.tokens, params);
        anchors[static_cast<size_t>(i)] = project(acts.hidden.row(0), params, projector);
        for (const auto& [start, end] : by_doc.at(doc.id))
            pooled[static_cast<size_t>(i)].push_back(avg_pool(acts, start, end));
    });

    int64_t own = 0;
    for (int64_t i = 0; i < n; ++i) {
        double best = -std::numeric_limits<double>::infinity();
        int64_t best_doc = -1;
        for (int64_t d = 0; d < n; ++d) {
            for (const auto& span_rep : pooled[static_cast<size_t>(d)]) {
                const double s = dot(anchors[static_cast<size_t>(i)].data(), span_rep.data(), H);
                if (s > best) {
                    best = s;
                    best_doc = d;
                }
            }
        }
        if (best_doc == i) ++own;
    }
    return static_cast<double>(own) / static_cast<double>(n);
}

}  // namespace costa
