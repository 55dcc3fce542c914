#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ftleak/corpus.hpp"
#include "ftleak/tinylm.hpp"
#include "ftleak/train.hpp"

namespace ftleak {

struct PerturbSpec {
    enum class Kind { chars, words };
    Kind kind = Kind::chars;
    double level = 0.1;  // fraction of units edited; 0 = identity
    std::uint64_t seed = 0;
};

struct SuffixNoiseSpec {
    enum class Kind { random_words, autoregressive };
    Kind kind = Kind::random_words;
    int len_min = 15;
    int len_max = 20;
    std::uint64_t seed = 0;
};

struct UtilityAnchor {
    std::vector<TokenSequence> anchor_set;  // plain-text utility probe
    double bound = 0.0;                     // mean-nll units
};

struct UnlearnConfig {
    double unlearn_rate = 1e-6;
    int batch_size = 32;
    int max_epochs = 5;
    UtilityAnchor anchor;
    int check_every = 1;  // anchor checks, in optimizer steps
    std::uint64_t seed = 0;
};

struct NoisyChallengeSet {
    std::vector<TokenSequence> sequences;
    std::map<std::string, std::string> provenance;  // noisy source_id -> original source_id
};

// Applies k = max(1, round(level*len)) seeded char edits (insert/delete/swap);
// requires a character-level vocab.
TokenSequence perturb_chars(const TokenSequence& seq, const PerturbSpec& spec, const Vocab& vocab);

// k = max(1, round(level*word_count)) seeded word edits (insert/delete/replace),
// replacement words drawn from `word_pool`.
TokenSequence perturb_words(const TokenSequence& seq, const PerturbSpec& spec, const Vocab& vocab,
                            const std::vector<std::string>& word_pool);

NoisyChallengeSet perturb_challenge(const std::vector<TokenSequence>& challenge,
                                    const PerturbSpec& spec, const Vocab& vocab,
                                    const std::vector<std::string>& word_pool);

// Each output = prefix ++ noisy suffix; |suffix| uniform in [len_min, len_max].
// random_words draws tokens i.i.d. from `token_pool`; autoregressive decodes
// greedily from the pre-trained checkpoint.
NoisyChallengeSet make_noisy_suffixes(const std::vector<PrefixSuffixPair>& prefixes,
                                      const SuffixNoiseSpec& spec,
                                      const std::vector<TokenId>& token_pool,
                                      const LmCheckpoint* ckpt_pre);

struct UnlearnAudit {
    long steps = 0;
    std::vector<double> epoch_loss;    // noisy-set mean nll, index 0 = before any step
    std::vector<double> anchor_loss;   // every anchor check
    int reverts = 0;
    double final_anchor_loss = 0.0;
    double bound = 0.0;
};

struct UnlearnResult {
    LmCheckpoint ckpt;  // role = adv
    UnlearnAudit audit;
};

// Gradient-ascent unlearning over the noisy set (plus optional extra set),
// constrained so the anchor-set loss never exceeds anchor.bound: every
// check_every steps the anchor loss is evaluated; on violation the last
// compliant snapshot is restored and the run stops.
UnlearnResult bounded_unlearn(const LmCheckpoint& ckpt_pre,
                              const std::vector<TokenSequence>& noisy_set,
                              const std::vector<TokenSequence>* extra_set,
                              const UnlearnConfig& cfg);

// Benchmark poison: plain loss minimization on the whole challenge set.
TrainResult overfit_poison(const LmCheckpoint& ckpt_pre,
                           const std::vector<TokenSequence>& challenge_set,
                           const OptimConfig& cfg);

void write_unlearn_audit(const std::string& path, const UnlearnAudit& audit);

}  // namespace ftleak
