#pragma once

#include <atomic>
#include <cstdint>
#include <exception>
#include <mutex>
#include <thread>
#include <utility>
#include <vector>

#include "costa/encoder.hpp"
#include "costa/losses.hpp"

namespace costa {

// Runs f(0..n-1); f(i) must only write state owned by item i. Work is
// claimed from a shared counter, so any thread count computes the same
// per-item results; callers reduce them in a fixed order afterwards.
template <class F>
void parallel_for(int64_t n, int threads, F&& f) {
    if (threads <= 1 || n <= 1) {
        for (int64_t i = 0; i < n; ++i) f(i);
        return;
    }
    std::atomic<int64_t> next{0};
    std::mutex err_mutex;
    std::exception_ptr first_error;
    auto worker = [&] {
        for (;;) {
            const int64_t i = next.fetch_add(1);
            if (i >= n) return;
            try {
                f(i);
            } catch (...) {
                std::lock_guard lock(err_mutex);
                if (!first_error) first_error = std::current_exception();
                return;
            }
        }
    };
    std::vector<std::thread> pool;
    const int use = static_cast<int>(std::min<int64_t>(threads, n));
    pool.reserve(static_cast<size_t>(use));
    for (int t = 0; t < use; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
    if (first_error) std::rethrow_exception(first_error);
}

// One document of a contrastive training batch. `tokens` is what the encoder
// sees (already corrupted for MLM); `clean_tokens`, when non-empty, feeds a
// second uncorrupted pass that the anchor/span representations are read from.
struct BatchDoc {
    std::vector<int32_t> tokens;
    std::vector<int32_t> clean_tokens;
    std::vector<std::pair<int32_t, int32_t>> spans;  // token-space [start, end)
    std::vector<int32_t> mlm_positions;              // activation rows (1-based)
    std::vector<int32_t> mlm_targets;
};

struct BatchLossOptions {
    double tau = 0.1;
    double lambda = 0.1;
    Projector projector = Projector::Nonlinear;
    bool cosine = false;
    bool exclude_own_group = false;
    int threads = 1;
};

template <class Real>
struct BatchLossResult {
    double gwc = 0;
    double mlm = 0;
    double total = 0;
    NamedTensors<Real> grads;
};

// Joint loss over one batch: group-wise contrastive loss over projected
// anchors plus pooled (unprojected) span representations, and MLM averaged
// over every masked position in the batch. Gradients are accumulated per
// document and reduced in document order, so the result is bitwise identical
// for any thread count.
template <class Real>
BatchLossResult<Real> batch_loss(const ParamStore<Real>& params, const std::vector<BatchDoc>& docs,
                                 const BatchLossOptions& opt, bool with_grads) {
    const int64_t n_docs = static_cast<int64_t>(docs.size());
    const int64_t H = params.config.hidden;
    if (n_docs < 2) throw Error("BatchTooSmall", "a contrastive batch needs at least 2 documents");
    const int64_t spans_per = static_cast<int64_t>(docs[0].spans.size());
    for (const auto& d : docs)
        if (static_cast<int64_t>(d.spans.size()) != spans_per)
            throw Error("UnevenSpanCounts", "all documents in a batch must carry the same span count");
    if (spans_per < 1) throw Error("BadGroupShape", "documents carry no spans");

    struct PerDoc {
        Activations<Real> acts;        // corrupted-input pass
        Activations<Real> rep_acts;    // pass representations are read from
        bool has_clean = false;
        std::vector<Real> anchor;      // projected
        Tensor<Real> mlm_logits;
    };
    std::vector<PerDoc> per(static_cast<size_t>(n_docs));

    GroupReps<Real> reps;
    reps.spans_per_group = static_cast<int>(spans_per);
    reps.anchors = Tensor<Real>({n_docs, H});
    reps.spans = Tensor<Real>({n_docs * spans_per, H});

    parallel_for(n_docs, opt.threads, [&](int64_t i) {
        const BatchDoc& doc = docs[static_cast<size_t>(i)];
        PerDoc& pd = per[static_cast<size_t>(i)];
        pd.acts = forward<Real>(doc.tokens, params);
        pd.has_clean = !doc.clean_tokens.empty();
        const Activations<Real>& rep_acts = pd.has_clean
                                                ? (pd.rep_acts = forward<Real>(doc.clean_tokens, params))
                                                : pd.acts;
        pd.anchor = project(rep_acts.hidden.row(0), params, opt.projector);
        for (int64_t j = 0; j < H; ++j) reps.anchors.at(i, j) = pd.anchor[static_cast<size_t>(j)];
        for (int64_t s = 0; s < spans_per; ++s) {
            const auto& sp = doc.spans[static_cast<size_t>(s)];
            auto pooled = avg_pool(rep_acts, sp.first, sp.second);
            for (int64_t j = 0; j < H; ++j) reps.spans.at(i * spans_per + s, j) = pooled[static_cast<size_t>(j)];
        }
        if (!doc.mlm_positions.empty()) pd.mlm_logits = mlm_logits(pd.acts, params, doc.mlm_positions);
    });

    GwcOptions gwc_opt;
    gwc_opt.tau = opt.tau;
    gwc_opt.cosine = opt.cosine;
    gwc_opt.exclude_own_group = opt.exclude_own_group;
    auto gwc = gwc_loss(reps, gwc_opt);

    // Batch MLM: mean over all masked positions across the batch.
    int64_t total_positions = 0;
    for (const auto& d : docs) total_positions += static_cast<int64_t>(d.mlm_positions.size());
    double mlm = 0;
    Tensor<Real> all_dlogits;
    if (total_positions > 0) {
        const int64_t V = params.config.vocab;
        Tensor<Real> all_logits({total_positions, V});
        std::vector<int32_t> all_targets;
        all_targets.reserve(static_cast<size_t>(total_positions));
        int64_t row = 0;
        for (int64_t i = 0; i < n_docs; ++i) {
            const BatchDoc& doc = docs[static_cast<size_t>(i)];
            for (size_t p = 0; p < doc.mlm_positions.size(); ++p, ++row)
                for (int64_t v = 0; v < V; ++v)
                    all_logits.at(row, v) = per[static_cast<size_t>(i)].mlm_logits.at(static_cast<int64_t>(p), v);
            all_targets.insert(all_targets.end(), doc.mlm_targets.begin(), doc.mlm_targets.end());
        }
        auto res = mlm_loss(all_logits, all_targets);
        mlm = res.loss;
        all_dlogits = std::move(res.dlogits);
    }

    BatchLossResult<Real> out;
    out.gwc = gwc.loss;
    out.mlm = mlm;
    out.total = total_loss(gwc.loss, mlm, opt.lambda);
    if (!with_grads) return out;

    // Row offsets of each document's MLM positions in the concatenated block.
    std::vector<int64_t> mlm_offset(static_cast<size_t>(n_docs), 0);
    for (int64_t i = 1; i < n_docs; ++i)
        mlm_offset[static_cast<size_t>(i)] =
            mlm_offset[static_cast<size_t>(i - 1)] +
            static_cast<int64_t>(docs[static_cast<size_t>(i - 1)].mlm_positions.size());

    std::vector<NamedTensors<Real>> doc_grads(static_cast<size_t>(n_docs));
    parallel_for(n_docs, opt.threads, [&](int64_t i) {
        const BatchDoc& doc = docs[static_cast<size_t>(i)];
        PerDoc& pd = per[static_cast<size_t>(i)];
        NamedTensors<Real> grads = params.zero_grads();

        const Activations<Real>& rep_acts = pd.has_clean ? pd.rep_acts : pd.acts;
        Tensor<Real> drep_hidden({rep_acts.hidden.rows(), H});

        // lambda-scaled contrastive gradients into the representation pass.
        std::vector<Real> danchor(static_cast<size_t>(H));
        for (int64_t j = 0; j < H; ++j)
            danchor[static_cast<size_t>(j)] = static_cast<Real>(opt.lambda) * gwc.danchors.at(i, j);
        project_backward(rep_acts.hidden.row(0), pd.anchor, danchor.data(), params, opt.projector, grads,
                         drep_hidden.row(0));
        std::vector<Real> dspan(static_cast<size_t>(H));
        for (int64_t s = 0; s < spans_per; ++s) {
            for (int64_t j = 0; j < H; ++j)
                dspan[static_cast<size_t>(j)] =
                    static_cast<Real>(opt.lambda) * gwc.dspans.at(i * spans_per + s, j);
            const auto& sp = doc.spans[static_cast<size_t>(s)];
            avg_pool_backward(sp.first, sp.second, dspan.data(), drep_hidden);
        }

        if (pd.has_clean) {
            // Contrastive gradients flow through the clean pass, MLM through
            // the corrupted one.
            backward(pd.rep_acts, params, drep_hidden, grads);
            if (!doc.mlm_positions.empty()) {
                Tensor<Real> dhidden({pd.acts.hidden.rows(), H});
                Tensor<Real> dlogits({static_cast<int64_t>(doc.mlm_positions.size()),
                                      params.config.vocab});
                for (int64_t p = 0; p < dlogits.rows(); ++p)
                    for (int64_t v = 0; v < dlogits.cols(); ++v)
                        dlogits.at(p, v) = all_dlogits.at(mlm_offset[static_cast<size_t>(i)] + p, v);
                mlm_logits_backward(pd.acts, params, doc.mlm_positions, dlogits, grads, dhidden);
                backward(pd.acts, params, dhidden, grads);
            }
        } else {
            if (!doc.mlm_positions.empty()) {
                Tensor<Real> dlogits({static_cast<int64_t>(doc.mlm_positions.size()),
                                      params.config.vocab});
                for (int64_t p = 0; p < dlogits.rows(); ++p)
                    for (int64_t v = 0; v < dlogits.cols(); ++v)
                        dlogits.at(p, v) = all_dlogits.at(mlm_offset[static_cast<size_t>(i)] + p, v);
                mlm_logits_backward(pd.acts, params, doc.mlm_positions, dlogits, grads, drep_hidden);
            }
            backward(pd.acts, params, drep_hidden, grads);
        }
        doc_grads[static_cast<size_t>(i)] = std::move(grads);
    });

    out.grads = std::move(doc_grads[0]);
    for (int64_t i = 1; i < n_docs; ++i) accumulate(out.grads, doc_grads[static_cast<size_t>(i)]);
    return out;
}

}  // namespace costa
