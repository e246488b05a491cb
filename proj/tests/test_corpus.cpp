#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "costa/corpus.hpp"
#include "costa/rng.hpp"

using namespace costa;

namespace {

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / ("costa_corpus_" + name)).string();
}

Vocabulary vocab_of(const std::vector<std::string>& words) {
    std::string text;
    for (const auto& w : words) text += w + " ";
    return Vocabulary::build({text}, 1);
}

}  // namespace

TEST_CASE("tokenize maps words to ids, lowercased, punctuation-split") {
    auto v = vocab_of({"the", "cat", "sat"});
    auto doc = tokenize("d1", "The cat sat.", v);
    REQUIRE(doc.tokens.size() == 3);
    CHECK(doc.tokens[0] == v.id_of("the"));
    CHECK(doc.tokens[1] == v.id_of("cat"));
    CHECK(doc.tokens[2] == v.id_of("sat"));
    CHECK(doc.id == "d1");
}

TEST_CASE("tokenize rejects empty-after-normalization input") {
    auto v = vocab_of({"cat"});
    CHECK_THROWS_WITH_AS(tokenize("d", "", v), doctest::Contains("EmptyDocument"), Error);
    CHECK_THROWS_AS(tokenize("d", " ... !!", v), Error);
}

TEST_CASE("tokenize maps out-of-vocabulary words to [UNK]") {
    auto v = vocab_of({"cat"});
    auto doc = tokenize("d", "Cat zzzqx", v);
    REQUIRE(doc.tokens.size() == 2);
    CHECK(doc.tokens[0] == v.id_of("cat"));
    CHECK(doc.tokens[1] == Vocabulary::kUnk);
}

TEST_CASE("build_vocab applies the min_freq threshold") {
    auto v = Vocabulary::build({"a a b"}, 2);
    CHECK(v.contains("a"));
    CHECK_FALSE(v.contains("b"));
}

TEST_CASE("build_vocab id assignment is deterministic") {
    auto v1 = Vocabulary::build({"x y", "y x"}, 1);
    auto v2 = Vocabulary::build({"x y", "y x"}, 1);
    CHECK(v1.id_of("x") == v2.id_of("x"));
    CHECK(v1.id_of("y") == v2.id_of("y"));
    // equal frequency: lexicographic tiebreak
    CHECK(v1.id_of("x") < v1.id_of("y"));
}

TEST_CASE("build_vocab rejects an empty corpus") {
    CHECK_THROWS_WITH_AS(Vocabulary::build({}, 1), doctest::Contains("EmptyCorpus"), Error);
}

TEST_CASE("chunk splits 1000 tokens at max_len 512 into 511 + 489") {
    Document d;
    d.id = "big";
    for (int i = 0; i < 1000; ++i) d.tokens.push_back(Vocabulary::kUnk);
    auto chunks = chunk(d, 512);
    REQUIRE(chunks.size() == 2);
    CHECK(chunks[0].tokens.size() == 511);
    CHECK(chunks[1].tokens.size() == 489);
    CHECK(chunks[0].id == "big#0");
    CHECK(chunks[1].id == "big#1");
}

TEST_CASE("chunk leaves short documents untouched") {
    Document d;
    d.id = "small";
    d.tokens.assign(10, Vocabulary::kUnk);
    auto chunks = chunk(d, 512);
    REQUIRE(chunks.size() == 1);
    CHECK(chunks[0].id == "small");
    CHECK(chunks[0].tokens == d.tokens);

    d.tokens.assign(511, Vocabulary::kUnk);
    CHECK(chunk(d, 512).size() == 1);
    d.tokens.assign(512, Vocabulary::kUnk);
    CHECK(chunk(d, 512).size() == 2);
}

TEST_CASE("chunking preserves token count and order") {
    Rng rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        Document d;
        d.id = "t";
        const int n = 1 + static_cast<int>(rng.below(3000));
        for (int i = 0; i < n; ++i) d.tokens.push_back(static_cast<int32_t>(rng.below(50)));
        const int max_len = 2 + static_cast<int>(rng.below(600));
        std::vector<int32_t> glued;
        for (const auto& c : chunk(d, max_len)) {
            CHECK(c.tokens.size() <= static_cast<size_t>(max_len - 1));
            glued.insert(glued.end(), c.tokens.begin(), c.tokens.end());
        }
        CHECK(glued == d.tokens);
    }
}

TEST_CASE("round-trip: decode then re-tokenize is the identity for in-vocab text") {
    auto v = Vocabulary::build({"alpha beta gamma delta epsilon zeta"}, 1);
    Rng rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<int32_t> ids;
        std::string text;
        const int n = 1 + static_cast<int>(rng.below(30));
        for (int i = 0; i < n; ++i) {
            const auto id = static_cast<int32_t>(Vocabulary::kNumReserved +
                                                 rng.below(static_cast<uint64_t>(v.size()) - 4));
            ids.push_back(id);
            text += v.token_of(id) + " ";
        }
        CHECK(tokenize("d", text, v).tokens == ids);
    }
}

TEST_CASE("vocabulary file round-trips and validates") {
    auto v = Vocabulary::build({"one two two three three three"}, 1);
    const auto path = temp_path("vocab.tsv");
    v.save(path);
    auto loaded = Vocabulary::load(path);
    CHECK(loaded.size() == v.size());
    CHECK(loaded.id_of("three") == v.id_of("three"));
    CHECK(loaded.token_of(0) == "[PAD]");
    CHECK(loaded.token_of(1) == "[CLS]");
    CHECK(loaded.token_of(2) == "[MASK]");
    CHECK(loaded.token_of(3) == "[UNK]");
    std::filesystem::remove(path);
}

TEST_CASE("vocabulary load rejects malformed files") {
    const auto path = temp_path("vocab_bad.tsv");
    {
        std::ofstream out(path);
        out << "[PAD]\t0\nno_tab_here\n";
    }
    CHECK_THROWS_AS(Vocabulary::load(path), Error);
    {
        std::ofstream out(path);
        out << "oops\t0\n";
    }
    CHECK_THROWS_WITH_AS(Vocabulary::load(path), doctest::Contains("BadVocabFile"), Error);
    std::filesystem::remove(path);
}

TEST_CASE("stopword membership is case-insensitive") {
    auto sw = Stopwords::default_english();
    CHECK(sw.contains("the"));
    CHECK(sw.contains("The"));
    CHECK(sw.contains("THE"));
    CHECK_FALSE(sw.contains("cat"));
    CHECK(sw.size() > 100);
}

TEST_CASE("jsonl corpus round-trips and validates") {
    const auto path = temp_path("corpus.jsonl");
    std::vector<RawDoc> docs = {{"a", "first doc"}, {"b", "second doc with ümlauts"}};
    write_jsonl(path, docs);
    auto back = read_jsonl(path);
    REQUIRE(back.size() == 2);
    CHECK(back[0].id == "a");
    CHECK(back[1].text == docs[1].text);

    {
        std::ofstream out(path);
        out << "{\"id\": \"a\", \"text\": \"x\"}\n{\"id\": \"a\", \"text\": \"y\"}\n";
    }
    CHECK_THROWS_WITH_AS(read_jsonl(path), doctest::Contains("DuplicateDocId"), Error);
    {
        std::ofstream out(path);
        out << "not json\n";
    }
    CHECK_THROWS_WITH_AS(read_jsonl(path), doctest::Contains("BadJsonl"), Error);
    std::filesystem::remove(path);
}
