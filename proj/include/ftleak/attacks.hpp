#pragma once

#include <string>
#include <vector>

#include "ftleak/corpus.hpp"
#include "ftleak/tinylm.hpp"

namespace ftleak {

// Black-box query surface: attacks only ever see loss values and generated
// tokens, never checkpoint tensors.
class BlackBoxLm {
  public:
    explicit BlackBoxLm(const LmCheckpoint& ckpt) : ckpt_(&ckpt) {}
    double loss(const TokenSequence& seq) const { return sequence_nll(*ckpt_, seq); }
    TokenSequence generate(const TokenSequence& prefix, const GenConfig& cfg) const {
        return ftleak::generate(*ckpt_, prefix, cfg);
    }

  private:
    const LmCheckpoint* ckpt_;
};

enum class MiaStrategy { loss, ref_model, ref_data };
std::string mia_strategy_name(MiaStrategy s);
MiaStrategy mia_strategy_from_name(const std::string& name);

struct MiaScore {
    std::string source_id;
    double score = 0.0;  // higher => more member-like, every strategy
    MiaStrategy strategy = MiaStrategy::loss;
    double raw_loss = 0.0;        // loss under the evaluated model
    double raw_reference = 0.0;   // pre-model loss or percentile rank, by strategy
    bool is_member = false;       // evaluation label, carried for metrics
};

// loss:      score = -L(eval, x)
// ref_model: score = |L(eval, x) - L(pre, x)|      (needs `pre`)
// ref_data:  score = 1 - percentile-rank of L(eval, x) in aux_losses (midrank)
std::vector<MiaScore> mia_scores(const BlackBoxLm& eval, const ChallengeSet& challenge,
                                 MiaStrategy strategy, const BlackBoxLm* pre = nullptr,
                                 const std::vector<double>* aux_losses = nullptr);

struct MiaDecisionRule {
    double threshold = 0.0;  // score >= threshold => member
};

std::vector<std::pair<std::string, bool>> mia_decide(const std::vector<MiaScore>& scores,
                                                     const MiaDecisionRule& rule);

struct DeaResult {
    std::string source_id;
    TokenSequence generated_suffix;
    TokenSequence true_suffix;
    bool match = false;          // token-exact over the full true suffix
    double edit_similarity = 0;  // diagnostic, 1 - normalized edit distance
};

// Prompts with each prefix and generates exactly len(true_suffix) new tokens.
std::vector<DeaResult> dea_extract(const BlackBoxLm& eval,
                                   const std::vector<PrefixSuffixPair>& pairs,
                                   const GenConfig& gencfg);

// Number of successful reconstructions.
int dea_nsr(const std::vector<DeaResult>& results);

// Token-level Levenshtein distance (also the test oracle for perturbations).
int edit_distance(const std::vector<TokenId>& a, const std::vector<TokenId>& b);

void write_mia_scores(const std::string& path, const std::vector<MiaScore>& scores);
std::vector<MiaScore> read_mia_scores(const std::string& path);
void write_dea_results(const std::string& path, const std::vector<DeaResult>& results);
std::vector<DeaResult> read_dea_results(const std::string& path);

}  // namespace ftleak
