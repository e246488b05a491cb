#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <string>

#include "costa/config.hpp"

using namespace costa;

namespace {

std::string write_config(const std::string& body) {
    const auto path = (std::filesystem::temp_directory_path() / "costa_config_test.toml").string();
    std::ofstream out(path);
    out << body;
    return path;
}

}  // namespace

TEST_CASE("defaults carry the published hyperparameters") {
    ExperimentConfig cfg;
    CHECK(cfg.loss.tau == 0.1);
    CHECK(cfg.loss.lambda == 0.1);
    CHECK(cfg.loss.mask_prob == 0.15);
    CHECK(cfg.pretrain.lr == 5e-5);
    CHECK(cfg.pretrain.warmup == 0.1);
    CHECK(cfg.pretrain.epochs == 6);
    CHECK(cfg.finetune.lr == 5e-6);
    CHECK(cfg.finetune.negatives == 7);
    CHECK(cfg.finetune.query_max_len == 32);
    CHECK(cfg.finetune.doc_max_len == 128);
    CHECK(cfg.sampler.alpha == 4.0);
    CHECK(cfg.sampler.beta == 2.0);
    CHECK(cfg.sampler.spans_per_granularity == 5);
    CHECK(cfg.corpus.max_len == 512);
}

TEST_CASE("config files override defaults, with comments and quoting") {
    const auto path = write_config(
        "# experiment\n"
        "seed = 99\n"
        "threads = 2\n"
        "[sampler]\n"
        "alpha = 2.5      # skew\n"
        "granularities = \"phrase,sentence\"\n"
        "[pretrain]\n"
        "lr = 0.001\n"
        "projector = 'linear'\n"
        "resample_spans = true\n"
        "[finetune]\n"
        "in_batch = false\n");
    auto cfg = ExperimentConfig::load(path);
    CHECK(cfg.seed == 99);
    CHECK(cfg.threads == 2);
    CHECK(cfg.sampler.alpha == 2.5);
    CHECK(cfg.sampler.granularities == "phrase,sentence");
    CHECK(cfg.pretrain.lr == 0.001);
    CHECK(cfg.pretrain.projector == "linear");
    CHECK(cfg.pretrain.resample_spans);
    CHECK_FALSE(cfg.finetune.in_batch);
    // untouched values keep their defaults
    CHECK(cfg.loss.tau == 0.1);
    std::filesystem::remove(path);
}

TEST_CASE("unknown keys and sections are rejected with a line number") {
    auto path = write_config("[pretrain]\nlearning_rate = 1\n");
    CHECK_THROWS_WITH_AS(ExperimentConfig::load(path), doctest::Contains("line 2"), Error);
    path = write_config("[optimizer]\n");
    CHECK_THROWS_WITH_AS(ExperimentConfig::load(path), doctest::Contains("UnknownConfigKey"), Error);
    path = write_config("[loss]\ntau = warm\n");
    CHECK_THROWS_WITH_AS(ExperimentConfig::load(path), doctest::Contains("BadConfigValue"), Error);
    path = write_config("[pretrain]\nprojector = rotary\n");
    CHECK_THROWS_AS(ExperimentConfig::load(path), Error);
    std::filesystem::remove(path);
}

TEST_CASE("granularity lists parse and validate") {
    auto all = parse_granularity_list("word,phrase,sentence,paragraph");
    CHECK(all.size() == 4);
    auto some = parse_granularity_list(" phrase , paragraph ");
    REQUIRE(some.size() == 2);
    CHECK(some[0] == Granularity::Phrase);
    CHECK(some[1] == Granularity::Paragraph);
    CHECK_THROWS_AS(parse_granularity_list("word,word"), Error);
    CHECK_THROWS_AS(parse_granularity_list("syllable"), Error);
    CHECK_THROWS_AS(parse_granularity_list(""), Error);
}
