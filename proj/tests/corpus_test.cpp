#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <random>
#include <set>

#include "doctest.h"
#include "ftleak/corpus.hpp"

using namespace ftleak;

namespace {

std::vector<TokenSequence> numbered(int n) {
    // distinct single-char texts are enough for split bookkeeping tests
    std::vector<TokenSequence> out;
    for (int i = 0; i < n; ++i) {
        TokenSequence s;
        s.tokens = {4 + (i % 7)};
        s.source_id = "s" + std::to_string(i);
        out.push_back(std::move(s));
    }
    return out;
}

std::set<std::string> ids(const std::vector<TokenSequence>& seqs) {
    std::set<std::string> out;
    for (const auto& s : seqs) out.insert(s.source_id);
    return out;
}

bool disjoint(const std::set<std::string>& a, const std::set<std::string>& b) {
    for (const auto& x : a)
        if (b.count(x)) return false;
    return true;
}

std::string random_text(std::mt19937_64& rng, const std::string& alphabet, int max_len) {
    std::uniform_int_distribution<int> len(1, max_len);
    std::uniform_int_distribution<std::size_t> pos(0, alphabet.size() - 1);
    std::string t;
    const int n = len(rng);
    for (int i = 0; i < n; ++i) t += alphabet[pos(rng)];
    return t;
}

}  // namespace

TEST_CASE("char tokenize/detokenize round-trips in-vocab text") {
    std::mt19937_64 rng(5);
    const std::string alphabet = "abc xyz019.";
    std::vector<std::string> corpus;
    for (int i = 0; i < 20; ++i) corpus.push_back(random_text(rng, alphabet, 60));
    auto v = build_vocab(corpus, Vocab::Kind::chars);
    for (const auto& t : corpus) CHECK(v.detokenize(v.tokenize(t)) == t);
}

TEST_CASE("word tokenize/detokenize round-trips modulo whitespace normalization") {
    std::vector<std::string> corpus = {"the cat  sat", "a cat ran", "the   dog sat"};
    auto v = build_vocab(corpus, Vocab::Kind::words);
    CHECK(v.detokenize(v.tokenize("the cat  sat")) == "the cat sat");
    CHECK(v.detokenize(v.tokenize("a dog ran")) == "a dog ran");
}

TEST_CASE("utf-8 multi-byte characters stay single units") {
    auto units = split_utf8("a\xC3\xA9m");  // 'a', U+00E9, 'm'
    REQUIRE(units.size() == 3);
    CHECK(units[1] == "\xC3\xA9");
    auto v = build_vocab({"a\xC3\xA9m"}, Vocab::Kind::chars);
    CHECK(v.detokenize(v.tokenize("a\xC3\xA9m")) == "a\xC3\xA9m");
}

TEST_CASE("out-of-vocab units map to unk; specials never appear for raw text") {
    auto v = build_vocab({"abc"}, Vocab::Kind::chars);
    auto toks = v.tokenize("abz");
    REQUIRE(toks.size() == 3);
    CHECK(toks[2] == Vocab::kUnk);
    for (TokenId t : v.tokenize("abc")) CHECK(!v.is_special(t));
}

TEST_CASE("vocab construction is deterministic and ordered") {
    auto v1 = build_vocab({"cab", "bad"}, Vocab::Kind::chars);
    auto v2 = build_vocab({"bad", "cab"}, Vocab::Kind::chars);
    CHECK(v1.symbols == v2.symbols);
    CHECK(v1.symbols[0] == "<pad>");
    // unit region sorted by code point
    for (std::size_t i = 5; i < v1.symbols.size(); ++i) CHECK(v1.symbols[i - 1] < v1.symbols[i]);
    CHECK_THROWS_AS(build_vocab({"", ""}, Vocab::Kind::chars), std::invalid_argument);
}

TEST_CASE("splits have the requested sizes, members inside ft, everything else disjoint") {
    auto corpus = numbered(120);
    auto s = make_splits(corpus, 40, 15, 20, 25, 10, 99);
    CHECK(s.finetune.size() == 40);
    CHECK(s.challenge.members.size() == 15);
    CHECK(s.challenge.nonmembers.size() == 20);
    CHECK(s.aux.sequences.size() == 25);
    CHECK(s.validation.size() == 10);
    CHECK(s.holdout.size() == 120 - 40 - 20 - 25 - 10);

    auto ft = ids(s.finetune);
    auto mem = ids(s.challenge.members);
    auto nonmem = ids(s.challenge.nonmembers);
    auto aux = ids(s.aux.sequences);
    auto val = ids(s.validation);
    auto hold = ids(s.holdout);

    for (const auto& m : mem) CHECK(ft.count(m) == 1);
    CHECK(disjoint(ft, nonmem));
    CHECK(disjoint(ft, aux));
    CHECK(disjoint(ft, val));
    CHECK(disjoint(ft, hold));
    CHECK(disjoint(nonmem, aux));
    CHECK(disjoint(nonmem, val));
    CHECK(disjoint(nonmem, hold));
    CHECK(disjoint(aux, val));
    CHECK(disjoint(aux, hold));
    CHECK(disjoint(val, hold));
}

TEST_CASE("splitting is seed-deterministic and seed-sensitive") {
    auto corpus = numbered(60);
    auto a = make_splits(corpus, 20, 10, 10, 10, 10, 7);
    auto b = make_splits(corpus, 20, 10, 10, 10, 10, 7);
    auto c = make_splits(corpus, 20, 10, 10, 10, 10, 8);
    CHECK(ids(a.finetune) == ids(b.finetune));
    CHECK(ids(a.validation) == ids(b.validation));
    CHECK(ids(a.finetune) != ids(c.finetune));
}

TEST_CASE("undersized corpora are rejected with a sized message") {
    auto corpus = numbered(30);
    CHECK_THROWS_WITH_AS(make_splits(corpus, 20, 5, 10, 10, 10, 1),
                         "corpus too small: have 30, need 50", std::invalid_argument);
    CHECK_THROWS_AS(make_splits(corpus, 10, 15, 5, 5, 5, 1), std::invalid_argument);
}

TEST_CASE("canary injection keeps originals and hits the exact multiplicity") {
    auto ft = numbered(25);
    auto v = build_vocab({"pin code"}, Vocab::Kind::chars);
    std::vector<CanaryRecord> canaries = {{"pin code", 3}, {"pin pin", 2}};
    auto out = inject_canaries(ft, canaries, v, 42);
    CHECK(out.size() == 25 + 3 + 2);
    int c0 = 0, c1 = 0;
    for (const auto& s : out) {
        if (s.source_id.rfind("canary0#", 0) == 0) ++c0;
        if (s.source_id.rfind("canary1#", 0) == 0) ++c1;
    }
    CHECK(c0 == 3);
    CHECK(c1 == 2);
    for (const auto& orig : ft)
        CHECK(std::count_if(out.begin(), out.end(),
                            [&](const TokenSequence& s) { return s.source_id == orig.source_id; }) == 1);
    // same seed, same placement
    auto out2 = inject_canaries(ft, canaries, v, 42);
    CHECK(out == out2);
}

TEST_CASE("prefix/suffix split concatenates back and respects the length rule") {
    TokenSequence s;
    for (int i = 0; i < 37; ++i) s.tokens.push_back(4 + i % 5);
    s.source_id = "x";
    for (double f : {0.01, 0.2, 0.5, 0.97}) {
        auto p = split_prefix_suffix(s, f);
        std::vector<TokenId> joined = p.prefix.tokens;
        joined.insert(joined.end(), p.suffix.tokens.begin(), p.suffix.tokens.end());
        CHECK(joined == s.tokens);
        CHECK(p.prefix.tokens.size() >= 1);
        CHECK(p.suffix.tokens.size() >= 1);
        const auto expect = std::max<std::size_t>(
            1, static_cast<std::size_t>(std::floor(f * static_cast<double>(s.tokens.size()))));
        CHECK(p.prefix.tokens.size() == std::min<std::size_t>(expect, s.tokens.size() - 1));
    }
    TokenSequence tiny;
    tiny.tokens = {4};
    CHECK_THROWS_AS(split_prefix_suffix(tiny, 0.5), std::invalid_argument);
    CHECK_THROWS_AS(split_prefix_suffix(s, 0.0), std::invalid_argument);
    CHECK_THROWS_AS(split_prefix_suffix(s, 1.0), std::invalid_argument);
}

TEST_CASE("synthetic texts honor length bounds, determinism, and the pii field") {
    auto news = synth_texts(200, 3, TemplateFamily::news_like);
    auto news2 = synth_texts(200, 3, TemplateFamily::news_like);
    CHECK(news == news2);
    CHECK(news != synth_texts(200, 4, TemplateFamily::news_like));
    for (const auto& t : news) {
        CHECK(t.size() >= 30);
        CHECK(t.size() <= 120);
    }
    auto pii = synth_texts(200, 3, TemplateFamily::pii_like);
    for (const auto& t : pii) {
        int run = 0, best = 0;
        for (char c : t) {
            run = (c >= '0' && c <= '9') ? run + 1 : 0;
            best = std::max(best, run);
        }
        CHECK(best >= 10);  // each pii text carries a phone-like field
    }
}

TEST_CASE("synthetic canaries are short, distinct, and repetition-tagged") {
    auto cs = synth_canaries(20, 3, 11);
    std::set<std::string> texts;
    for (const auto& c : cs) {
        CHECK(c.text.size() <= 64);
        CHECK(c.repetitions == 3);
        texts.insert(c.text);
    }
    CHECK(texts.size() == 20);
}

TEST_CASE("corpus files round-trip and skip comments") {
    const std::string path = "corpus_test_tmp.txt";
    save_corpus_file(path, {"# header", "first line", "# comment", "second line"});
    auto lines = load_corpus_file(path);
    CHECK(lines == std::vector<std::string>{"first line", "second line"});
    std::remove(path.c_str());
    save_corpus_file(path, {"alpha", "beta"});
    auto lines2 = load_corpus_file(path);
    CHECK(lines2 == std::vector<std::string>{"alpha", "beta"});
    std::remove(path.c_str());
}
