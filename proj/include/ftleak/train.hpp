#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ftleak/tinylm.hpp"

namespace ftleak {

struct OptimConfig {
    double learning_rate = 2e-5;  // Full-FT default
    int batch_size = 32;
    int max_epochs = 5;
    int early_stop_patience = 1;
    std::uint64_t seed = 0;

    void validate() const;
};

struct AdapterConfig {
    int rank = 4;
    // suffix filter over parameter names; attention projections by default
    std::vector<std::string> target_suffixes = {"attn.wq", "attn.wk", "attn.wv", "attn.wo"};
    double scale = 1.0;
    double learning_rate_override = 0.0;  // 0 = use OptimConfig (LoRA default 2e-4 via config)

    void validate(const LmConfig& model) const;
};

struct DpConfig {
    double clip_norm = 1.0;         // C; non-finite disables clipping
    double noise_multiplier = 0.0;  // sigma
    std::string budget_label = "eps=inf";
};

struct TrainLogEntry {
    int epoch = 0;
    double train_nll = 0.0;
    double val_ppl = 0.0;
    double lr = 0.0;
    long wall_ms = 0;
};

struct TrainResult {
    LmCheckpoint ckpt;
    std::vector<TrainLogEntry> log;
    int epochs_run = 0;
};

enum class TrainPurpose { pretrain, finetune };

// Adam over all parameters; early stop on validation PPL with restore-best.
// Role: pretrain keeps `pre`; finetune maps pre->ft, adv->ft_adv.
TrainResult train_full(const LmCheckpoint& ckpt, const std::vector<TokenSequence>& dataset,
                       const std::vector<TokenSequence>& val_set, const OptimConfig& cfg,
                       TrainPurpose purpose = TrainPurpose::finetune);

// Only low-rank adapter factors receive updates; base weights stay frozen.
// The returned checkpoint has the adapters merged into the target matrices.
TrainResult train_lowrank(const LmCheckpoint& ckpt, const AdapterConfig& adapter,
                          const std::vector<TokenSequence>& dataset,
                          const std::vector<TokenSequence>& val_set, const OptimConfig& cfg);

// DP-SGD: per-example clipping to L2 norm <= C, Gaussian noise N(0,(sigma*C)^2)
// per coordinate on the summed gradient, then averaged; optimizer is Adam.
TrainResult train_dp(const LmCheckpoint& ckpt, const std::vector<TokenSequence>& dataset,
                     const std::vector<TokenSequence>& val_set, const OptimConfig& cfg,
                     const DpConfig& dp);

// JSON-lines, one record per epoch.
void write_train_log(const std::string& path, const std::vector<TrainLogEntry>& log);

}  // namespace ftleak
