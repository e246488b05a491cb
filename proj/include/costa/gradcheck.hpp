#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "costa/batch.hpp"
#include "costa/encoder.hpp"
#include "costa/losses.hpp"
#include "costa/rng.hpp"

namespace costa {

struct GradCheckOptions {
    uint64_t seed = 7;
    int configs = 20;
    double lambda = 0.1;
    double tau = 0.1;
    double step = 1e-5;  // finite-difference half-step
};

struct GradCheckCaseReport {
    EncoderConfig config;
    int batch = 0;
    int params_checked = 0;
    double max_rel_error = 0;
    std::string worst_tensor;
};

struct GradCheckReport {
    double max_rel_error = 0;
    std::string worst_tensor;
    std::vector<GradCheckCaseReport> cases;

    bool pass(double threshold = 1e-4) const { return max_rel_error <= threshold; }
};

// Relative error with a floor so vanishing gradients (where central
// differences are pure roundoff) cannot dominate: |a-f| / max(|a|,|f|,1e-3).
inline double grad_rel_error(double analytic, double fd) {
    const double denom = std::max({std::abs(analytic), std::abs(fd), 1e-3});
    return std::abs(analytic - fd) / denom;
}

// Compares analytic gradients of the joint training loss against central
// finite differences, everything in double precision, on randomly drawn tiny
// configurations.
inline GradCheckReport run_gradcheck(const GradCheckOptions& opt = {}) {
    GradCheckReport report;
    for (int case_idx = 0; case_idx < opt.configs; ++case_idx) {
        Rng rng = Rng::derive(opt.seed, "gradcheck", static_cast<uint64_t>(case_idx));

        EncoderConfig cfg;
        cfg.layers = 1 + static_cast<int>(rng.below(2));
        cfg.hidden = rng.below(2) == 0 ? 4 : 8;
        cfg.heads = 1 + static_cast<int>(rng.below(2));
        cfg.ffn = 2 * cfg.hidden;
        cfg.vocab = 12 + static_cast<int>(rng.below(8));
        cfg.max_len = 16;

        auto params = ParamStore<double>::random_init(cfg, rng);
        // Larger-than-init weights so every block operates away from the
        // near-linear regime.
        for (auto& [name, t] : params.tensors)
            if (name.ends_with(".w") || name.starts_with("embed."))
                for (auto& v : t.data) v *= 10.0;

        const int batch = 2 + static_cast<int>(rng.below(3));
        const int spans_per = 1 + static_cast<int>(rng.below(3));
        std::vector<BatchDoc> docs;
        MaskConfig mask;
        mask.mask_prob = 0.25;
        for (int d = 0; d < batch; ++d) {
            const int n = 4 + static_cast<int>(rng.below(9));  // 4..12 tokens
            std::vector<int32_t> clean(static_cast<size_t>(n));
            for (auto& t : clean)
                t = Vocabulary::kNumReserved +
                    static_cast<int32_t>(rng.below(static_cast<uint64_t>(cfg.vocab - Vocabulary::kNumReserved)));
            auto corrupted = mask_tokens(clean, mask, cfg.vocab, rng);
            BatchDoc doc;
            doc.tokens = corrupted.corrupted;
            for (size_t p = 0; p < corrupted.positions.size(); ++p) {
                doc.mlm_positions.push_back(corrupted.positions[p] + 1);
                doc.mlm_targets.push_back(corrupted.targets[p]);
            }
            for (int s = 0; s < spans_per; ++s) {
                const int len = 1 + static_cast<int>(rng.below(static_cast<uint64_t>(std::min(n, 4))));
                const int start = static_cast<int>(rng.below(static_cast<uint64_t>(n - len + 1)));
                doc.spans.emplace_back(start, start + len);
            }
            docs.push_back(std::move(doc));
        }

        BatchLossOptions loss_opt;
        loss_opt.tau = opt.tau;
        loss_opt.lambda = opt.lambda;
        loss_opt.projector = Projector::Nonlinear;
        auto analytic = batch_loss(params, docs, loss_opt, true);

        GradCheckCaseReport cr;
        cr.config = cfg;
        cr.batch = batch;
        for (auto& [name, tensor] : params.tensors) {
            for (size_t i = 0; i < tensor.data.size(); ++i) {
                const double orig = tensor.data[i];
                tensor.data[i] = orig + opt.step;
                const double up = batch_loss(params, docs, loss_opt, false).total;
                tensor.data[i] = orig - opt.step;
                const double down = batch_loss(params, docs, loss_opt, false).total;
                tensor.data[i] = orig;
                const double fd = (up - down) / (2 * opt.step);
                const double err = grad_rel_error(analytic.grads.at(name).data[i], fd);
                ++cr.params_checked;
                if (err > cr.max_rel_error) {
                    cr.max_rel_error = err;
                    cr.worst_tensor = name;
                }
            }
        }
        if (cr.max_rel_error > report.max_rel_error) {
            report.max_rel_error = cr.max_rel_error;
            report.worst_tensor = cr.worst_tensor;
        }
        report.cases.push_back(std::move(cr));
    }
    return report;
}

}  // namespace costa
