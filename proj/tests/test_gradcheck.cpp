#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "costa/gradcheck.hpp"

using namespace costa;

// Full-budget sweep (>= 20 configurations) lives in the acceptance suite;
// this keeps a quick smoke over a few configurations.
TEST_CASE("analytic gradients match finite differences on random tiny configs") {
    GradCheckOptions opt;
    opt.configs = 4;
    opt.seed = 11;
    auto report = run_gradcheck(opt);
    REQUIRE(report.cases.size() == 4);
    for (const auto& c : report.cases) {
        CAPTURE(c.worst_tensor);
        CHECK(c.max_rel_error <= 1e-4);
        CHECK(c.params_checked > 250);
    }
    CHECK(report.pass());
}

TEST_CASE("gradcheck exercises the clean-span-pass and ablation variants") {
    // Same harness maths, but drive batch_loss directly through the
    // non-default paths: separate clean pass, linear / no projector.
    Rng rng(123);
    EncoderConfig cfg;
    cfg.layers = 1;
    cfg.hidden = 4;
    cfg.heads = 1;
    cfg.ffn = 8;
    cfg.vocab = 12;
    cfg.max_len = 16;
    auto params = ParamStore<double>::random_init(cfg, rng);

    std::vector<BatchDoc> docs;
    for (int d = 0; d < 2; ++d) {
        BatchDoc doc;
        for (int i = 0; i < 6; ++i)
            doc.clean_tokens.push_back(4 + static_cast<int32_t>(rng.below(8)));
        doc.tokens = doc.clean_tokens;
        doc.tokens[1] = Vocabulary::kMask;
        doc.mlm_positions = {2};
        doc.mlm_targets = {doc.clean_tokens[1]};
        doc.spans = {{0, 3}, {2, 6}};
        docs.push_back(std::move(doc));
    }

    for (Projector projector : {Projector::Nonlinear, Projector::Linear, Projector::None}) {
        BatchLossOptions opt;
        opt.projector = projector;
        opt.tau = 0.5;
        auto analytic = batch_loss(params, docs, opt, true);
        double max_err = 0;
        const double h = 1e-5;
        for (auto& [name, tensor] : params.tensors) {
            for (size_t i = 0; i < tensor.data.size(); ++i) {
                const double orig = tensor.data[i];
                tensor.data[i] = orig + h;
                const double up = batch_loss(params, docs, opt, false).total;
                tensor.data[i] = orig - h;
                const double down = batch_loss(params, docs, opt, false).total;
                tensor.data[i] = orig;
                max_err = std::max(max_err,
                                   grad_rel_error(analytic.grads.at(name).data[i], (up - down) / (2 * h)));
            }
        }
        CAPTURE(projector_name(projector));
        CHECK(max_err <= 1e-4);
    }
}

TEST_CASE("batch loss validates its inputs") {
    Rng rng(5);
    EncoderConfig cfg;
    cfg.layers = 1;
    cfg.hidden = 4;
    cfg.heads = 1;
    cfg.ffn = 8;
    cfg.vocab = 8;
    cfg.max_len = 16;
    auto params = ParamStore<double>::random_init(cfg, rng);

    BatchDoc doc;
    doc.tokens = {4, 5, 6};
    doc.spans = {{0, 2}};
    CHECK_THROWS_WITH_AS(batch_loss(params, {doc}, {}, false), doctest::Contains("BatchTooSmall"),
                         Error);
    BatchDoc other = doc;
    other.spans.push_back({1, 3});
    CHECK_THROWS_WITH_AS(batch_loss(params, {doc, other}, {}, false),
                         doctest::Contains("UnevenSpanCounts"), Error);
}

TEST_CASE("multi-threaded batch loss is bitwise identical to single-threaded") {
    Rng rng(9);
    EncoderConfig cfg;
    cfg.layers = 2;
    cfg.hidden = 8;
    cfg.heads = 2;
    cfg.ffn = 16;
    cfg.vocab = 16;
    cfg.max_len = 32;
    auto params = ParamStore<float>::random_init(cfg, rng);

    std::vector<BatchDoc> docs;
    for (int d = 0; d < 6; ++d) {
        BatchDoc doc;
        for (int i = 0; i < 10; ++i) doc.tokens.push_back(4 + static_cast<int32_t>(rng.below(12)));
        doc.mlm_positions = {1, 4};
        doc.mlm_targets = {5, 6};
        doc.spans = {{0, 4}, {3, 9}};
        docs.push_back(std::move(doc));
    }

    BatchLossOptions a;
    a.threads = 1;
    BatchLossOptions b = a;
    b.threads = 4;
    auto ra = batch_loss(params, docs, a, true);
    auto rb = batch_loss(params, docs, b, true);
    CHECK(ra.total == rb.total);
    for (const auto& [name, t] : ra.grads) CHECK(t.data == rb.grads.at(name).data);
}
