#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "costa/rng.hpp"
#include "costa/spans.hpp"

using namespace costa;

namespace {

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / ("costa_spans_" + name)).string();
}

// Regularized incomplete beta for integer parameters: I_p(a,b) equals the
// binomial tail sum; for Beta(4,2), I_p = 5p^4 - 4p^5. Independent of the
// Marsaglia-Tsang sampling path.
double beta42_cdf(double p) {
    p = std::clamp(p, 0.0, 1.0);
    return 5.0 * std::pow(p, 4) - 4.0 * std::pow(p, 5);
}

// CDF of the discretized phrase length: round(4 + 12p) <= l iff p < (l-3.5)/12.
double phrase_length_cdf(int len) { return beta42_cdf((len - 3.5) / 12.0); }

Document make_doc(const std::string& id, int n, int32_t fill = Vocabulary::kUnk) {
    Document d;
    d.id = id;
    d.tokens.assign(static_cast<size_t>(n), fill);
    return d;
}

}  // namespace

TEST_CASE("length transform: midpoint and boundary unit draws") {
    const LengthRange phrase{4, 16};
    CHECK(length_from_unit(phrase, 0.5) == 10);
    CHECK(length_from_unit(phrase, 0.0) == 4);
    CHECK(length_from_unit(phrase, 1.0) == 16);
}

TEST_CASE("phrase lengths: Monte Carlo mean matches the Beta(4,2) mean") {
    // Beta(4,2) has mean 2/3, so lengths center on 4 + 12 * 2/3 = 12.
    const LengthRange phrase{4, 16};
    Rng rng(123);
    const int n = 1'000'000;
    double sum = 0;
    int lo = 1000, hi = 0;
    for (int i = 0; i < n; ++i) {
        const int len = sample_length(phrase, 4.0, 2.0, rng);
        sum += len;
        lo = std::min(lo, len);
        hi = std::max(hi, len);
    }
    CHECK(sum / n == doctest::Approx(12.0).epsilon(0).scale(0).epsilon(0.1 / 12.0));
    CHECK(lo >= 4);
    CHECK(hi <= 16);
}

TEST_CASE("phrase lengths: Kolmogorov-Smirnov against the inverse-CDF oracle") {
    const LengthRange phrase{4, 16};
    Rng rng(321);
    const int n = 100'000;
    std::vector<int> counts(17, 0);
    for (int i = 0; i < n; ++i) counts[static_cast<size_t>(sample_length(phrase, 4.0, 2.0, rng))]++;
    double cum = 0, d_stat = 0;
    for (int len = 4; len <= 16; ++len) {
        cum += counts[static_cast<size_t>(len)];
        d_stat = std::max(d_stat, std::abs(cum / n - phrase_length_cdf(len)));
    }
    // KS critical value at alpha=0.01: 1.6276/sqrt(n) (conservative for a
    // discrete distribution).
    CHECK(d_stat < 1.6276 / std::sqrt(static_cast<double>(n)));
}

TEST_CASE("start positions are uniform over {0..n-len}") {
    Rng rng(99);
    const int n = 100, len = 10;
    const int draws = 1'000'000;
    std::vector<int> counts(static_cast<size_t>(n - len + 1), 0);
    for (int i = 0; i < draws; ++i) {
        const int s = sample_start(n, len, rng);
        REQUIRE(s >= 0);
        REQUIRE(s <= n - len);
        counts[static_cast<size_t>(s)]++;
    }
    // Each bin within 5 sigma of the binomial expectation.
    const double p = 1.0 / (n - len + 1);
    const double mean = draws * p;
    const double sigma = std::sqrt(draws * p * (1 - p));
    for (int c : counts) CHECK(std::abs(c - mean) < 5 * sigma);

    // Chi-square uniformity at alpha=0.01 over 1e5 draws; critical value for
    // df=90 from the Wilson-Hilferty approximation.
    std::fill(counts.begin(), counts.end(), 0);
    const int draws2 = 100'000;
    for (int i = 0; i < draws2; ++i) counts[static_cast<size_t>(sample_start(n, len, rng))]++;
    const double expect = static_cast<double>(draws2) / (n - len + 1);
    double chi2 = 0;
    for (int c : counts) chi2 += (c - expect) * (c - expect) / expect;
    CHECK(chi2 < 124.116);
}

TEST_CASE("start sampling degenerate cases") {
    Rng rng(5);
    for (int i = 0; i < 100; ++i) CHECK(sample_start(10, 10, rng) == 0);
    bool saw0 = false, saw1 = false;
    for (int i = 0; i < 200; ++i) {
        const int s = sample_start(5, 4, rng);
        CHECK(s >= 0);
        CHECK(s <= 1);
        saw0 = saw0 || s == 0;
        saw1 = saw1 || s == 1;
    }
    CHECK(saw0);
    CHECK(saw1);
}

TEST_CASE("sample_group yields 4T spans with valid bounds") {
    SamplerConfig cfg;
    cfg.seed = 17;
    auto doc = make_doc("d0", 200);
    auto spans = sample_group(doc, cfg);
    CHECK(spans.size() == 20);  // 4 granularities x T=5
    for (const auto& s : spans) {
        CHECK(s.start >= 0);
        CHECK(s.start < s.end);
        CHECK(s.end <= doc.size());
        const auto& r = cfg.range_of(s.granularity);
        CHECK(s.length() >= std::min(r.min_len, doc.size()));
        CHECK(s.length() <= r.max_len);
    }
}

TEST_CASE("short documents clamp long granularities to the whole document") {
    SamplerConfig cfg;
    cfg.seed = 3;
    auto doc = make_doc("tiny", 3);
    auto spans = sample_group(doc, cfg);
    CHECK(spans.size() == 20);
    for (const auto& s : spans) {
        if (s.granularity == Granularity::Paragraph || s.granularity == Granularity::Sentence) {
            CHECK(s.start == 0);
            CHECK(s.end == 3);
        }
    }
}

TEST_CASE("duplicate spans are kept") {
    SamplerConfig cfg;
    cfg.seed = 1;
    // n=4 with phrase min length 4: every phrase span clamps to [0,4).
    auto doc = make_doc("dup", 4);
    auto spans = sample_group(doc, cfg);
    int phrase_whole = 0;
    for (const auto& s : spans)
        if (s.granularity == Granularity::Phrase && s.start == 0 && s.end == 4) ++phrase_whole;
    CHECK(phrase_whole == cfg.spans_per_granularity);
}

TEST_CASE("word spans avoid stopwords when a non-stopword exists") {
    SamplerConfig cfg;
    cfg.seed = 23;
    cfg.stopword_ids = {7};
    Document doc;
    doc.id = "w";
    doc.tokens = {7, 7, 9, 7, 7, 7};
    for (int trial = 0; trial < 10; ++trial) {
        cfg.round = static_cast<uint64_t>(trial);
        for (const auto& s : sample_group(doc, cfg)) {
            if (s.granularity != Granularity::Word) continue;
            CHECK(s.length() == 1);
            CHECK(doc.tokens[static_cast<size_t>(s.start)] == 9);
        }
    }
}

TEST_CASE("all-stopword documents fall back to any token for word spans") {
    SamplerConfig cfg;
    cfg.seed = 29;
    cfg.stopword_ids = {7};
    Document doc;
    doc.id = "sw";
    doc.tokens = {7, 7, 7};
    auto spans = sample_group(doc, cfg);
    int words = 0;
    for (const auto& s : spans)
        if (s.granularity == Granularity::Word) {
            ++words;
            CHECK(s.length() == 1);
        }
    CHECK(words == cfg.spans_per_granularity);
}

TEST_CASE("sampling is reproducible and order-independent across documents") {
    SamplerConfig cfg;
    cfg.seed = 1234;
    auto d1 = make_doc("a", 150);
    auto d2 = make_doc("b", 90);
    auto s1 = sample_group(d1, cfg);
    auto s2 = sample_group(d2, cfg);
    // Resampling in any order reproduces the same spans.
    CHECK(sample_group(d2, cfg) == s2);
    CHECK(sample_group(d1, cfg) == s1);
    cfg.round = 1;
    CHECK(sample_group(d1, cfg) != s1);
}

TEST_CASE("span files round-trip losslessly") {
    SamplerConfig cfg;
    cfg.seed = 55;
    std::vector<Span> all;
    std::map<std::string, int32_t> lengths;
    for (int d = 0; d < 5; ++d) {
        auto doc = make_doc("doc" + std::to_string(d), 100 + 17 * d);
        lengths[doc.id] = doc.size();
        for (auto& s : sample_group(doc, cfg)) all.push_back(std::move(s));
    }
    const auto path = temp_path("spans.tsv");
    write_spans(path, all);
    auto back = read_spans(path, lengths);
    sort_spans(all);
    CHECK(back == all);

    // Same seed reproduces the file byte-for-byte.
    const auto path2 = temp_path("spans2.tsv");
    write_spans(path2, all);
    std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
    std::string b1{std::istreambuf_iterator<char>(f1), {}};
    std::string b2{std::istreambuf_iterator<char>(f2), {}};
    CHECK(b1 == b2);
    CHECK(!b1.empty());
    std::filesystem::remove(path);
    std::filesystem::remove(path2);
}

TEST_CASE("span file validation names the offending line") {
    const auto path = temp_path("bad_spans.tsv");
    std::map<std::string, int32_t> lengths{{"d", 50}};
    {
        std::ofstream out(path);
        out << "d\tphrase\t0\t10\n";
        out << "d\tphrase\t40\t99\n";  // end > n
    }
    CHECK_THROWS_WITH_AS(read_spans(path, lengths), doctest::Contains("line 2"), Error);
    {
        std::ofstream out(path);
        out << "unknown\tword\t0\t1\n";
    }
    CHECK_THROWS_WITH_AS(read_spans(path, lengths), doctest::Contains("UnknownDocId"), Error);
    std::filesystem::remove(path);
}

TEST_CASE("empty span file reads as an empty list") {
    const auto path = temp_path("empty.tsv");
    { std::ofstream out(path); }
    CHECK(read_spans(path, {}).empty());
    std::filesystem::remove(path);
}

TEST_CASE("rng: bounded draws, normal moments, derived stream independence") {
    Rng rng(2024);
    for (int i = 0; i < 1000; ++i) CHECK(rng.below(7) < 7);

    const int n = 100'000;
    double sum = 0, sq = 0;
    for (int i = 0; i < n; ++i) {
        const double x = rng.normal();
        sum += x;
        sq += x * x;
    }
    const double mean = sum / n;
    CHECK(std::abs(mean) < 0.02);
    CHECK(std::abs(sq / n - mean * mean - 1.0) < 0.03);

    auto a = Rng::derive(1, "x", 0);
    auto b = Rng::derive(1, "x", 1);
    auto c = Rng::derive(1, "y", 0);
    CHECK(a.next_u64() != b.next_u64());
    CHECK(a.next_u64() != c.next_u64());

    auto st = rng.state();
    const uint64_t before = rng.next_u64();
    rng.set_state(st);
    CHECK(rng.next_u64() == before);
}

TEST_CASE("beta draws stay inside the unit interval") {
    Rng rng(77);
    for (int i = 0; i < 10'000; ++i) {
        const double b = rng.beta(4.0, 2.0);
        CHECK(b >= 0.0);
        CHECK(b <= 1.0);
    }
    // alpha < 1 branch
    for (int i = 0; i < 1000; ++i) {
        const double b = rng.beta(0.5, 0.5);
        CHECK(b >= 0.0);
        CHECK(b <= 1.0);
    }
}
