#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

namespace ftleak {

using TokenId = int;

struct TokenSequence {
    std::vector<TokenId> tokens;
    std::string source_id;
    bool operator==(const TokenSequence&) const = default;
};

// Character-level by default. Word-level splits on runs of whitespace and
// rejoins with single spaces on detokenize.
struct Vocab {
    enum class Kind { chars, words };
    static constexpr TokenId kPad = 0;
    static constexpr TokenId kBos = 1;
    static constexpr TokenId kEos = 2;
    static constexpr TokenId kUnk = 3;

    Kind kind = Kind::chars;
    std::vector<std::string> symbols;                // id -> symbol, specials first
    std::unordered_map<std::string, TokenId> id_of;  // symbol -> id

    int size() const { return static_cast<int>(symbols.size()); }
    bool is_special(TokenId id) const { return id >= 0 && id < 4; }

    // Out-of-vocab units map to UNK; in-vocab text round-trips exactly.
    std::vector<TokenId> tokenize(const std::string& text) const;
    std::string detokenize(const std::vector<TokenId>& tokens) const;
};

// Deterministic: specials first, then unit symbols sorted by code point.
Vocab build_vocab(const std::vector<std::string>& raw_texts, Vocab::Kind kind = Vocab::Kind::chars);

// Splits a UTF-8 string into code-point units.
std::vector<std::string> split_utf8(const std::string& text);

struct ChallengeSet {
    std::vector<TokenSequence> members;
    std::vector<TokenSequence> nonmembers;
};

struct AuxiliarySet {
    std::vector<TokenSequence> sequences;
};

struct CorpusSplits {
    std::vector<TokenSequence> finetune;
    ChallengeSet challenge;
    AuxiliarySet aux;
    std::vector<TokenSequence> validation;
    // Leftover pool, disjoint from every split above. Used for pretraining
    // and for the utility-anchor set.
    std::vector<TokenSequence> holdout;
};

// Members are a subset of the fine-tune set; nonmembers, aux, validation and
// holdout are pairwise disjoint from it and from each other.
CorpusSplits make_splits(const std::vector<TokenSequence>& corpus, int n_ft, int n_member,
                         int n_nonmember, int n_aux, int n_val, std::uint64_t seed);

struct CanaryRecord {
    std::string text;
    int repetitions = 1;
};

// Each canary appears exactly `repetitions` times at seeded positions; all
// original sequences are retained.
std::vector<TokenSequence> inject_canaries(const std::vector<TokenSequence>& ft_set,
                                           const std::vector<CanaryRecord>& canaries,
                                           const Vocab& vocab, std::uint64_t seed);

struct PrefixSuffixPair {
    TokenSequence prefix;
    TokenSequence suffix;
    std::string full_source_id;
};

// Prefix length = max(1, floor(prefix_fraction * len)).
PrefixSuffixPair split_prefix_suffix(const TokenSequence& seq, double prefix_fraction);

enum class TemplateFamily { news_like, pii_like };

// Seeded template generators; every text is 30-120 characters. pii_like
// texts embed high-entropy digit/letter fields (phone-, address-, password-shaped).
std::vector<std::string> synth_texts(int n, std::uint64_t seed, TemplateFamily family);
std::vector<TokenSequence> synth_corpus(int n, std::uint64_t seed, TemplateFamily family,
                                        const Vocab& vocab);

// Short PII-like canary texts (name + digit code + alnum key), <= 64 chars.
std::vector<CanaryRecord> synth_canaries(int n, int repetitions, std::uint64_t seed);

// UTF-8, one sequence per line; lines beginning '#' ignored.
std::vector<std::string> load_corpus_file(const std::string& path);
void save_corpus_file(const std::string& path, const std::vector<std::string>& lines);

// JSON manifest {split_name: [source_id, ...]}.
void save_split_manifest(const std::string& path, const CorpusSplits& splits);

}  // namespace ftleak
