#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ftleak/corpus.hpp"
#include "json.hpp"

namespace ftleak {

struct LmConfig {
    int vocab_size = 0;
    int d_model = 64;
    int n_layers = 2;
    int n_heads = 2;
    int context_len = 64;
    int ff_mult = 4;

    void validate() const;  // throws std::invalid_argument
    bool operator==(const LmConfig&) const = default;
};

void to_json(nlohmann::json& j, const LmConfig& c);
void from_json(const nlohmann::json& j, LmConfig& c);

enum class Role { pre, adv, ft, ft_adv };
std::string role_name(Role role);
Role role_from_name(const std::string& name);

struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;
    std::int64_t numel() const;
};

// Ordered map: iteration order is the parameter order everywhere (init,
// optimizer state, serialization), which keeps runs deterministic.
using ParamMap = std::map<std::string, Tensor>;

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct LmCheckpoint {
    LmConfig config;
    ParamMap params;
    Role role = Role::pre;
    std::vector<nlohmann::json> lineage;
    std::uint32_t format_version = kCheckpointVersion;
};

// Pre-norm decoder-only transformer, learned positional embeddings,
// weight-tied output head. Weight init std = 0.1/sqrt(d_model), biases zero.
LmCheckpoint init_params(const LmConfig& config, std::uint64_t seed);

// Throws if any tensor holds a NaN/Inf.
void check_finite(const LmCheckpoint& ckpt, const std::string& context = "");

// Next-token probability rows, one per input position. len(tokens) must be
// in [1, context_len].
std::vector<std::vector<double>> forward(const LmCheckpoint& ckpt,
                                         const std::vector<TokenId>& tokens);

// Final-layer hidden states (after the last norm), one row per position.
std::vector<std::vector<double>> hidden_states(const LmCheckpoint& ckpt,
                                               const std::vector<TokenId>& tokens);

// Mean per-token negative log-likelihood. Sequences longer than context_len
// are evaluated on their first context_len tokens.
double sequence_nll(const LmCheckpoint& ckpt, const TokenSequence& seq);

struct GradResult {
    ParamMap grads;       // shapes mirror ckpt.params
    double mean_nll = 0;  // mean over the batch of sequence_nll
};

// Gradient of the mean batch nll; deterministic for a fixed batch order.
GradResult grad(const LmCheckpoint& ckpt, const std::vector<TokenSequence>& batch);

// exp(mean over sequences of sequence_nll).
double perplexity(const LmCheckpoint& ckpt, const std::vector<TokenSequence>& dataset);

struct GenConfig {
    enum class Strategy { greedy, beam, contrastive };
    Strategy strategy = Strategy::beam;
    int beam_width = 5;
    double alpha = 0.5;  // contrastive degeneration penalty
    int top_k = 5;       // contrastive candidate pool
    int max_new_tokens = 32;

    void validate() const;
};

std::string strategy_name(GenConfig::Strategy s);
GenConfig::Strategy strategy_from_name(const std::string& name);

// Returns new tokens only. EOS truncates (and is not part of the output).
// Ties in every decoder break toward the smallest token id.
TokenSequence generate(const LmCheckpoint& ckpt, const TokenSequence& prefix,
                       const GenConfig& cfg);

// Checkpoint file: "TLMC" magic, u32 version, u64 header length, JSON header
// (config, role, lineage, tensor directory), little-endian f32 payloads.
void save_checkpoint(const LmCheckpoint& ckpt, const std::string& path);
LmCheckpoint load_checkpoint(const std::string& path);

}  // namespace ftleak
