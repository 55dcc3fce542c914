#include "ftleak/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace ftleak {

inline constexpr int kAttackSchemaVersion = 1;

std::string mia_strategy_name(MiaStrategy s) {
    switch (s) {
        case MiaStrategy::loss: return "loss";
        case MiaStrategy::ref_model: return "ref_model";
        case MiaStrategy::ref_data: return "ref_data";
    }
    throw std::logic_error("bad mia strategy");
}

MiaStrategy mia_strategy_from_name(const std::string& name) {
    if (name == "loss") return MiaStrategy::loss;
    if (name == "ref_model") return MiaStrategy::ref_model;
    if (name == "ref_data") return MiaStrategy::ref_data;
    throw std::invalid_argument("unknown mia strategy: " + name);
}

namespace {

double percentile_rank(double value, const std::vector<double>& reference) {
    double below = 0.0;
    for (double r : reference) {
        if (r < value) below += 1.0;
        else if (r == value) below += 0.5;
    }
    return below / static_cast<double>(reference.size());
}

MiaScore score_one(const BlackBoxLm& eval, const TokenSequence& seq, MiaStrategy strategy,
                   const BlackBoxLm* pre, const std::vector<double>* aux_losses, bool is_member) {
    MiaScore s;
    s.source_id = seq.source_id;
    s.strategy = strategy;
    s.is_member = is_member;
    s.raw_loss = eval.loss(seq);
    switch (strategy) {
        case MiaStrategy::loss:
            s.score = -s.raw_loss;
            break;
        case MiaStrategy::ref_model:
            s.raw_reference = pre->loss(seq);
            s.score = std::abs(s.raw_loss - s.raw_reference);
            break;
        case MiaStrategy::ref_data:
            s.raw_reference = percentile_rank(s.raw_loss, *aux_losses);
            s.score = 1.0 - s.raw_reference;
            break;
    }
    if (!std::isfinite(s.score)) throw std::runtime_error("non-finite mia score for " + s.source_id);
    return s;
}

}  // namespace

std::vector<MiaScore> mia_scores(const BlackBoxLm& eval, const ChallengeSet& challenge,
                                 MiaStrategy strategy, const BlackBoxLm* pre,
                                 const std::vector<double>* aux_losses) {
    if (strategy == MiaStrategy::ref_model && pre == nullptr)
        throw std::invalid_argument("ref_model strategy requires the pre-trained reference model");
    if (strategy == MiaStrategy::ref_data && (aux_losses == nullptr || aux_losses->empty()))
        throw std::invalid_argument("ref_data strategy requires auxiliary losses");

    std::vector<MiaScore> out;
    out.reserve(challenge.members.size() + challenge.nonmembers.size());
    for (const auto& seq : challenge.members)
        out.push_back(score_one(eval, seq, strategy, pre, aux_losses, true));
    for (const auto& seq : challenge.nonmembers)
        out.push_back(score_one(eval, seq, strategy, pre, aux_losses, false));
    return out;
}

std::vector<std::pair<std::string, bool>> mia_decide(const std::vector<MiaScore>& scores,
                                                     const MiaDecisionRule& rule) {
    std::vector<std::pair<std::string, bool>> out;
    out.reserve(scores.size());
    for (const auto& s : scores) out.emplace_back(s.source_id, s.score >= rule.threshold);
    return out;
}

int edit_distance(const std::vector<TokenId>& a, const std::vector<TokenId>& b) {
    const std::size_t n = a.size(), m = b.size();
    std::vector<int> prev(m + 1), cur(m + 1);
    for (std::size_t j = 0; j <= m; ++j) prev[j] = static_cast<int>(j);
    for (std::size_t i = 1; i <= n; ++i) {
        cur[0] = static_cast<int>(i);
        for (std::size_t j = 1; j <= m; ++j) {
            const int sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
        }
        std::swap(prev, cur);
    }
    return prev[m];
}

std::vector<DeaResult> dea_extract(const BlackBoxLm& eval,
                                   const std::vector<PrefixSuffixPair>& pairs,
                                   const GenConfig& gencfg) {
    if (pairs.empty()) throw std::invalid_argument("dea_extract: no prefix/suffix pairs");
    gencfg.validate();

    std::vector<DeaResult> out;
    out.reserve(pairs.size());
    for (const auto& pair : pairs) {
        DeaResult r;
        r.source_id = pair.full_source_id;
        r.true_suffix = pair.suffix;
        GenConfig cfg = gencfg;
        cfg.max_new_tokens = static_cast<int>(pair.suffix.tokens.size());
        try {
            r.generated_suffix = eval.generate(pair.prefix, cfg);
        } catch (const std::exception& e) {
            throw std::runtime_error("dea_extract failed for " + pair.full_source_id + ": " +
                                     e.what());
        }
        r.match = r.generated_suffix.tokens == r.true_suffix.tokens;
        const int dist = edit_distance(r.generated_suffix.tokens, r.true_suffix.tokens);
        const auto denom = std::max(r.generated_suffix.tokens.size(), r.true_suffix.tokens.size());
        r.edit_similarity = denom == 0 ? 1.0 : 1.0 - static_cast<double>(dist) / static_cast<double>(denom);
        out.push_back(std::move(r));
    }
    return out;
}

int dea_nsr(const std::vector<DeaResult>& results) {
    int n = 0;
    for (const auto& r : results) n += r.match ? 1 : 0;
    return n;
}

void write_mia_scores(const std::string& path, const std::vector<MiaScore>& scores) {
    nlohmann::json j;
    j["schema_version"] = kAttackSchemaVersion;
    auto& arr = j["scores"] = nlohmann::json::array();
    for (const auto& s : scores)
        arr.push_back({{"source_id", s.source_id},
                       {"score", s.score},
                       {"strategy", mia_strategy_name(s.strategy)},
                       {"raw_loss", s.raw_loss},
                       {"raw_reference", s.raw_reference},
                       {"is_member", s.is_member}});
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write mia scores: " + path);
    out << j.dump(2) << '\n';
}

std::vector<MiaScore> read_mia_scores(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open mia scores: " + path);
    nlohmann::json j;
    in >> j;
    if (j.at("schema_version").get<int>() != kAttackSchemaVersion)
        throw std::runtime_error("mia score schema version mismatch in " + path);
    std::vector<MiaScore> out;
    for (const auto& e : j.at("scores")) {
        MiaScore s;
        s.source_id = e.at("source_id").get<std::string>();
        s.score = e.at("score").get<double>();
        s.strategy = mia_strategy_from_name(e.at("strategy").get<std::string>());
        s.raw_loss = e.at("raw_loss").get<double>();
        s.raw_reference = e.at("raw_reference").get<double>();
        s.is_member = e.at("is_member").get<bool>();
        out.push_back(std::move(s));
    }
    return out;
}

void write_dea_results(const std::string& path, const std::vector<DeaResult>& results) {
    nlohmann::json j;
    j["schema_version"] = kAttackSchemaVersion;
    auto& arr = j["results"] = nlohmann::json::array();
    for (const auto& r : results)
        arr.push_back({{"source_id", r.source_id},
                       {"generated", r.generated_suffix.tokens},
                       {"true", r.true_suffix.tokens},
                       {"match", r.match},
                       {"edit_similarity", r.edit_similarity}});
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write dea results: " + path);
    out << j.dump(2) << '\n';
}

std::vector<DeaResult> read_dea_results(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open dea results: " + path);
    nlohmann::json j;
    in >> j;
    if (j.at("schema_version").get<int>() != kAttackSchemaVersion)
        throw std::runtime_error("dea result schema version mismatch in " + path);
    std::vector<DeaResult> out;
    for (const auto& e : j.at("results")) {
        DeaResult r;
        r.source_id = e.at("source_id").get<std::string>();
        r.generated_suffix.tokens = e.at("generated").get<std::vector<TokenId>>();
        r.true_suffix.tokens = e.at("true").get<std::vector<TokenId>>();
        r.match = e.at("match").get<bool>();
        r.edit_similarity = e.at("edit_similarity").get<double>();
        out.push_back(std::move(r));
    }
    return out;
}

}  // namespace ftleak
