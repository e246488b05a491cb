#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "costa/common.hpp"
#include "costa/corpus.hpp"
#include "costa/rng.hpp"
#include "costa/tensor.hpp"

namespace costa {

// One contrastive batch: N projected whole-text representations (the
// anchors) and N*S pooled span representations (S spans per group). Span row
// g*S + s belongs to group g.
template <class Real>
struct GroupReps {
    Tensor<Real> anchors;  // N x H
    Tensor<Real> spans;    // (N*S) x H
    int spans_per_group = 0;

    int64_t groups() const { return anchors.rows(); }
    int64_t total() const { return anchors.rows() + spans.rows(); }
};

struct GwcOptions {
    double tau = 0.1;
    bool cosine = false;             // normalize before the dot product
    bool exclude_own_group = false;  // drop the anchor's other spans from the denominator
};

template <class Real>
struct GwcResult {
    double loss = 0;
    Tensor<Real> danchors;
    Tensor<Real> dspans;
};

// Group-wise contrastive loss. Anchors are only the whole-text
// representations; each anchor's positives are its own S spans, and the
// denominator runs over every representation in the batch except the anchor
// itself. Accumulation is in double regardless of Real; log-sum-exp uses
// max subtraction.
template <class Real>
GwcResult<Real> gwc_loss(const GroupReps<Real>& reps, const GwcOptions& opt = {}) {
    const int64_t n_groups = reps.groups();
    const int64_t S = reps.spans_per_group;
    const int64_t H = reps.anchors.cols();
    const int64_t M = reps.total();
    if (opt.tau <= 0) throw Error("BadTemperature", "tau must be positive");
    if (S < 1 || reps.spans.rows() != n_groups * S)
        throw Error("BadGroupShape", "spans tensor does not hold spans_per_group rows per group");
    if (M < 2) throw Error("BadGroupShape", "need at least two representations");
    if (!reps.anchors.finite() || !reps.spans.finite())
        throw Error("NonFiniteInput", "representations contain non-finite values");

    // Flatten to double rows: reps 0..N-1 are anchors, then spans.
    std::vector<std::vector<double>> rep(static_cast<size_t>(M));
    for (int64_t i = 0; i < n_groups; ++i) {
        rep[static_cast<size_t>(i)].assign(reps.anchors.row(i), reps.anchors.row(i) + H);
    }
    for (int64_t r = 0; r < reps.spans.rows(); ++r)
        rep[static_cast<size_t>(n_groups + r)].assign(reps.spans.row(r), reps.spans.row(r) + H);

    std::vector<double> norms;
    std::vector<std::vector<double>> raw;
    if (opt.cosine) {
        norms.resize(static_cast<size_t>(M));
        raw = rep;
        for (int64_t r = 0; r < M; ++r) {
            double n2 = 0;
            for (double v : rep[static_cast<size_t>(r)]) n2 += v * v;
            const double norm = std::sqrt(n2);
            if (norm == 0) throw Error("ZeroVector", "cosine similarity of a zero vector");
            norms[static_cast<size_t>(r)] = norm;
            for (double& v : rep[static_cast<size_t>(r)]) v /= norm;
        }
    }

    std::vector<std::vector<double>> drep(static_cast<size_t>(M),
                                          std::vector<double>(static_cast<size_t>(H), 0.0));
    const double inv_s = 1.0 / static_cast<double>(S);
    double loss = 0;

    std::vector<double> logit(static_cast<size_t>(M));
    std::vector<double> dlogit(static_cast<size_t>(M));
    for (int64_t i = 0; i < n_groups; ++i) {
        const auto& zi = rep[static_cast<size_t>(i)];
        double maxl = -std::numeric_limits<double>::infinity();
        for (int64_t j = 0; j < M; ++j) {
            if (j == i) continue;
            double s = 0;
            const auto& zj = rep[static_cast<size_t>(j)];
            for (int64_t h = 0; h < H; ++h)
                s += zi[static_cast<size_t>(h)] * zj[static_cast<size_t>(h)];
            logit[static_cast<size_t>(j)] = s / opt.tau;
            maxl = std::max(maxl, logit[static_cast<size_t>(j)]);
        }
        std::fill(dlogit.begin(), dlogit.end(), 0.0);
        const int64_t pos_begin = n_groups + i * S;

        if (!opt.exclude_own_group) {
            double denom = 0;
            for (int64_t j = 0; j < M; ++j)
                if (j != i) denom += std::exp(logit[static_cast<size_t>(j)] - maxl);
            const double log_denom = maxl + std::log(denom);
            for (int64_t p = pos_begin; p < pos_begin + S; ++p) {
                loss += inv_s * (log_denom - logit[static_cast<size_t>(p)]);
                dlogit[static_cast<size_t>(p)] -= inv_s;
            }
            for (int64_t j = 0; j < M; ++j) {
                if (j == i) continue;
                dlogit[static_cast<size_t>(j)] +=
                    std::exp(logit[static_cast<size_t>(j)] - log_denom);
            }
        } else {
            // Per-positive denominator: the positive itself plus every
            // representation outside the anchor's group.
            double base = 0;
            for (int64_t j = 0; j < M; ++j) {
                if (j == i || (j >= pos_begin && j < pos_begin + S)) continue;
                base += std::exp(logit[static_cast<size_t>(j)] - maxl);
            }
            std::vector<double> inv_denom(static_cast<size_t>(S));
            for (int64_t s = 0; s < S; ++s) {
                const int64_t p = pos_begin + s;
                const double ep = std::exp(logit[static_cast<size_t>(p)] - maxl);
                const double denom = base + ep;
                inv_denom[static_cast<size_t>(s)] = 1.0 / denom;
                loss += inv_s * (maxl + std::log(denom) - logit[static_cast<size_t>(p)]);
                dlogit[static_cast<size_t>(p)] += inv_s * (ep / denom - 1.0);
            }
            for (int64_t j = 0; j < M; ++j) {
                if (j == i || (j >= pos_begin && j < pos_begin + S)) continue;
                const double ej = std::exp(logit[static_cast<size_t>(j)] - maxl);
                double g = 0;
                for (int64_t s = 0; s < S; ++s) g += inv_denom[static_cast<size_t>(s)];
                dlogit[static_cast<size_t>(j)] += inv_s * ej * g;
            }
        }

        // dl/dz through the dot products.
        auto& dzi = drep[static_cast<size_t>(i)];
        for (int64_t j = 0; j < M; ++j) {
            const double g = dlogit[static_cast<size_t>(j)] / opt.tau;
            if (g == 0.0 || j == i) continue;
            const auto& zj = rep[static_cast<size_t>(j)];
            auto& dzj = drep[static_cast<size_t>(j)];
            for (int64_t h = 0; h < H; ++h) {
                dzi[static_cast<size_t>(h)] += g * zj[static_cast<size_t>(h)];
                dzj[static_cast<size_t>(h)] += g * zi[static_cast<size_t>(h)];
            }
        }
    }

    if (opt.cosine) {
        // Chain through the normalization: dz = (dzhat - zhat (zhat . dzhat)) / ||z||.
        for (int64_t r = 0; r < M; ++r) {
            const auto& zh = rep[static_cast<size_t>(r)];
            auto& d = drep[static_cast<size_t>(r)];
            double inner = 0;
            for (int64_t h = 0; h < H; ++h)
                inner += zh[static_cast<size_t>(h)] * d[static_cast<size_t>(h)];
            for (int64_t h = 0; h < H; ++h)
                d[static_cast<size_t>(h)] = (d[static_cast<size_t>(h)] -
                                             zh[static_cast<size_t>(h)] * inner) /
                                            norms[static_cast<size_t>(r)];
        }
    }

    GwcResult<Real> out;
    out.loss = loss;
    out.danchors = Tensor<Real>({n_groups, H});
    out.dspans = Tensor<Real>({n_groups * S, H});
    for (int64_t i = 0; i < n_groups; ++i)
        for (int64_t h = 0; h < H; ++h)
            out.danchors.at(i, h) = static_cast<Real>(drep[static_cast<size_t>(i)][static_cast<size_t>(h)]);
    for (int64_t r = 0; r < n_groups * S; ++r)
        for (int64_t h = 0; h < H; ++h)
            out.dspans.at(r, h) =
                static_cast<Real>(drep[static_cast<size_t>(n_groups + r)][static_cast<size_t>(h)]);
    return out;
}

struct MaskConfig {
    double mask_prob = 0.15;
    double mask_ratio = 0.8;    // replaced by [MASK]
    double random_ratio = 0.1;  // replaced by a random non-reserved token
    bool force_at_least_one = true;
};

struct MaskedTokens {
    std::vector<int32_t> corrupted;
    std::vector<int32_t> positions;  // token indices (0-based, no [CLS])
    std::vector<int32_t> targets;    // original ids at those positions
};

// BERT-style corruption. Every position draws one uniform for selection;
// each selected position then draws its replacement in index order, so the
// stream is reproducible.
inline MaskedTokens mask_tokens(std::span<const int32_t> tokens, const MaskConfig& cfg,
                                int32_t vocab_size, Rng& rng) {
    MaskedTokens out;
    out.corrupted.assign(tokens.begin(), tokens.end());
    const size_t n = tokens.size();
    std::vector<char> selected(n, 0);
    for (size_t i = 0; i < n; ++i) selected[i] = rng.next_double() < cfg.mask_prob;
    if (cfg.force_at_least_one && n > 0) {
        bool any = false;
        for (char s : selected) any = any || s;
        if (!any) selected[rng.below(n)] = 1;
    }
    for (size_t i = 0; i < n; ++i) {
        if (!selected[i]) continue;
        out.positions.push_back(static_cast<int32_t>(i));
        out.targets.push_back(tokens[i]);
        const double r = rng.next_double();
        if (r < cfg.mask_ratio) {
            out.corrupted[i] = Vocabulary::kMask;
        } else if (r < cfg.mask_ratio + cfg.random_ratio) {
            if (vocab_size > Vocabulary::kNumReserved)
                out.corrupted[i] = Vocabulary::kNumReserved +
                                   static_cast<int32_t>(rng.below(
                                       static_cast<uint64_t>(vocab_size - Vocabulary::kNumReserved)));
        }  // else: keep the original token
    }
    return out;
}

template <class Real>
struct MlmResult {
    double loss = 0;
    Tensor<Real> dlogits;
};

// Mean softmax cross-entropy over the masked positions.
template <class Real>
MlmResult<Real> mlm_loss(const Tensor<Real>& logits, const std::vector<int32_t>& targets) {
    const int64_t P = logits.rows(), V = logits.cols();
    if (P == 0 || static_cast<int64_t>(targets.size()) != P)
        throw Error("EmptyTargets", "mlm_loss needs one target per logit row");
    MlmResult<Real> out;
    out.dlogits = Tensor<Real>({P, V});
    const double inv_p = 1.0 / static_cast<double>(P);
    for (int64_t p = 0; p < P; ++p) {
        const Real* lp = logits.row(p);
        const int32_t target = targets[static_cast<size_t>(p)];
        if (target < 0 || target >= V) throw Error("BadTarget", "target id outside the vocabulary");
        double maxl = -std::numeric_limits<double>::infinity();
        for (int64_t v = 0; v < V; ++v) maxl = std::max(maxl, static_cast<double>(lp[v]));
        double denom = 0;
        for (int64_t v = 0; v < V; ++v) denom += std::exp(static_cast<double>(lp[v]) - maxl);
        const double log_denom = maxl + std::log(denom);
        out.loss += inv_p * (log_denom - static_cast<double>(lp[target]));
        Real* dlp = out.dlogits.row(p);
        for (int64_t v = 0; v < V; ++v) {
            const double soft = std::exp(static_cast<double>(lp[v]) - log_denom);
            dlp[v] = static_cast<Real>((soft - (v == target ? 1.0 : 0.0)) * inv_p);
        }
    }
    return out;
}

inline double total_loss(double gwc, double mlm, double lambda) { return lambda * gwc + mlm; }

}  // namespace costa
