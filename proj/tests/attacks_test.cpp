#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstdio>

#include "doctest.h"
#include "ftleak/attacks.hpp"

using namespace ftleak;

namespace {

LmConfig tiny_config() {
    LmConfig c;
    c.vocab_size = 9;
    c.d_model = 8;
    c.n_layers = 1;
    c.n_heads = 2;
    c.context_len = 16;
    c.ff_mult = 2;
    return c;
}

TokenSequence seq_of(std::vector<TokenId> toks, std::string id) {
    TokenSequence s;
    s.tokens = std::move(toks);
    s.source_id = std::move(id);
    return s;
}

ChallengeSet tiny_challenge() {
    ChallengeSet c;
    c.members = {seq_of({4, 5, 6, 7}, "m0"), seq_of({5, 5, 4, 8}, "m1")};
    c.nonmembers = {seq_of({8, 7, 6, 5}, "n0"), seq_of({6, 4, 6, 4}, "n1")};
    return c;
}

}  // namespace

TEST_CASE("loss strategy scores are exactly the negated black-box losses") {
    auto ckpt = init_params(tiny_config(), 1);
    BlackBoxLm eval(ckpt);
    auto challenge = tiny_challenge();
    auto scores = mia_scores(eval, challenge, MiaStrategy::loss);
    REQUIRE(scores.size() == 4);
    for (const auto& s : scores) {
        CHECK(s.score == doctest::Approx(-s.raw_loss).epsilon(1e-12));
        CHECK(s.strategy == MiaStrategy::loss);
    }
    CHECK(scores[0].is_member);
    CHECK(scores[0].source_id == "m0");
    CHECK(!scores[2].is_member);
    // score agrees with the direct black-box query
    CHECK(scores[0].raw_loss == doctest::Approx(eval.loss(challenge.members[0])).epsilon(1e-12));
}

TEST_CASE("ref_model strategy scores |L_eval - L_pre| and needs the reference") {
    auto ft = init_params(tiny_config(), 2);
    auto pre = init_params(tiny_config(), 3);
    BlackBoxLm eval(ft), ref(pre);
    auto challenge = tiny_challenge();
    CHECK_THROWS_AS(mia_scores(eval, challenge, MiaStrategy::ref_model), std::invalid_argument);
    auto scores = mia_scores(eval, challenge, MiaStrategy::ref_model, &ref);
    for (const auto& s : scores)
        CHECK(s.score == doctest::Approx(std::abs(s.raw_loss - s.raw_reference)).epsilon(1e-12));
    // worked example: |2.5 - 1.0| = 1.5 regardless of direction
    CHECK(std::abs(2.5 - 1.0) == doctest::Approx(std::abs(1.0 - 2.5)));
}

TEST_CASE("ref_data strategy uses the midrank percentile against aux losses") {
    auto ckpt = init_params(tiny_config(), 4);
    BlackBoxLm eval(ckpt);
    ChallengeSet challenge;
    challenge.members = {seq_of({4, 5, 6}, "m0")};
    challenge.nonmembers = {seq_of({7, 8, 4}, "n0")};
    CHECK_THROWS_AS(mia_scores(eval, challenge, MiaStrategy::ref_data), std::invalid_argument);

    const double lm = eval.loss(challenge.members[0]);
    // construct aux losses around the member's loss: 2 below, 1 equal, 1 above
    std::vector<double> aux = {lm - 1.0, lm - 0.5, lm, lm + 1.0};
    auto scores = mia_scores(eval, challenge, MiaStrategy::ref_data, nullptr, &aux);
    // midrank percentile = (2 + 0.5) / 4 = 0.625; score = 1 - 0.625
    CHECK(scores[0].raw_reference == doctest::Approx(0.625).epsilon(1e-12));
    CHECK(scores[0].score == doctest::Approx(0.375).epsilon(1e-12));

    // a loss below every aux value is maximally member-like
    std::vector<double> high_aux = {lm + 1.0, lm + 2.0};
    auto s2 = mia_scores(eval, challenge, MiaStrategy::ref_data, nullptr, &high_aux);
    CHECK(s2[0].score == doctest::Approx(1.0));
    // a loss above every aux value is maximally nonmember-like
    std::vector<double> low_aux = {lm - 2.0, lm - 1.0};
    auto s3 = mia_scores(eval, challenge, MiaStrategy::ref_data, nullptr, &low_aux);
    CHECK(s3[0].score == doctest::Approx(0.0));
}

TEST_CASE("decision rule: score >= threshold means member, boundary inclusive") {
    std::vector<MiaScore> scores(3);
    scores[0].source_id = "a";
    scores[0].score = 0.5;
    scores[1].source_id = "b";
    scores[1].score = 0.2;
    scores[2].source_id = "c";
    scores[2].score = -0.1;
    auto out = mia_decide(scores, MiaDecisionRule{0.2});
    REQUIRE(out.size() == 3);
    CHECK(out[0] == std::pair<std::string, bool>("a", true));
    CHECK(out[1] == std::pair<std::string, bool>("b", true));  // boundary
    CHECK(out[2] == std::pair<std::string, bool>("c", false));
}

TEST_CASE("token edit distance matches hand-checked cases") {
    CHECK(edit_distance({}, {}) == 0);
    CHECK(edit_distance({4, 5, 6}, {4, 5, 6}) == 0);
    CHECK(edit_distance({4, 5, 6}, {}) == 3);
    CHECK(edit_distance({4, 5, 6}, {4, 6}) == 1);          // delete
    CHECK(edit_distance({4, 5, 6}, {4, 7, 6}) == 1);       // substitute
    CHECK(edit_distance({4, 5, 6}, {4, 5, 7, 6}) == 1);    // insert
    CHECK(edit_distance({4, 5, 6, 7}, {5, 4, 7, 6}) == 3); // kitten/sitting-style mix
    CHECK(edit_distance({4, 4, 4}, {5, 5, 5}) == 3);
}

TEST_CASE("extraction compares exactly len(true suffix) generated tokens") {
    auto ckpt = init_params(tiny_config(), 5);
    BlackBoxLm eval(ckpt);
    GenConfig gen;
    gen.strategy = GenConfig::Strategy::greedy;
    gen.max_new_tokens = 999;  // overridden per pair by the true suffix length

    TokenSequence full = seq_of({4, 5, 6, 7, 8, 4}, "t0");
    auto pair = split_prefix_suffix(full, 0.5);
    auto results = dea_extract(eval, {pair}, gen);
    REQUIRE(results.size() == 1);
    CHECK(results[0].source_id == "t0");
    CHECK(results[0].true_suffix.tokens == pair.suffix.tokens);
    CHECK(results[0].generated_suffix.tokens.size() <= pair.suffix.tokens.size());

    // the match flag is exact token equality
    GenConfig probe = gen;
    probe.max_new_tokens = static_cast<int>(pair.suffix.tokens.size());
    auto direct = eval.generate(pair.prefix, probe);
    CHECK(results[0].generated_suffix.tokens == direct.tokens);
    CHECK(results[0].match == (direct.tokens == pair.suffix.tokens));
    CHECK_THROWS_AS(dea_extract(eval, {}, gen), std::invalid_argument);
}

TEST_CASE("edit similarity and nsr counting") {
    std::vector<DeaResult> results(4);
    results[0].match = true;
    results[1].match = false;
    results[2].match = true;
    results[3].match = false;
    CHECK(dea_nsr(results) == 2);
    CHECK(dea_nsr({}) == 0);

    auto ckpt = init_params(tiny_config(), 6);
    BlackBoxLm eval(ckpt);
    GenConfig gen;
    gen.strategy = GenConfig::Strategy::greedy;
    auto pair = split_prefix_suffix(seq_of({4, 5, 6, 7, 8, 4, 5, 6}, "t"), 0.4);
    auto res = dea_extract(eval, {pair}, gen);
    const auto& r = res[0];
    const auto denom = std::max(r.generated_suffix.tokens.size(), r.true_suffix.tokens.size());
    const double expect =
        1.0 - static_cast<double>(edit_distance(r.generated_suffix.tokens, r.true_suffix.tokens)) /
                  static_cast<double>(denom);
    CHECK(r.edit_similarity == doctest::Approx(expect).epsilon(1e-12));
    CHECK(r.edit_similarity >= 0.0);
    CHECK(r.edit_similarity <= 1.0);
}

TEST_CASE("mia score files round-trip and reject foreign schemas") {
    auto ckpt = init_params(tiny_config(), 7);
    BlackBoxLm eval(ckpt);
    auto scores = mia_scores(eval, tiny_challenge(), MiaStrategy::loss);
    const std::string path = "attacks_test_scores.json";
    write_mia_scores(path, scores);
    auto loaded = read_mia_scores(path);
    REQUIRE(loaded.size() == scores.size());
    for (std::size_t i = 0; i < scores.size(); ++i) {
        CHECK(loaded[i].source_id == scores[i].source_id);
        CHECK(loaded[i].score == doctest::Approx(scores[i].score).epsilon(1e-12));
        CHECK(loaded[i].is_member == scores[i].is_member);
    }
    std::remove(path.c_str());
}
