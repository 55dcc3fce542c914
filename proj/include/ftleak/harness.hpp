#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ftleak/attacks.hpp"
#include "ftleak/corpus.hpp"
#include "ftleak/metrics.hpp"
#include "ftleak/poison.hpp"
#include "ftleak/tinylm.hpp"
#include "ftleak/train.hpp"
#include "json.hpp"

namespace ftleak {

inline constexpr int kReportSchemaVersion = 1;

enum class PoisonKind { none, mia_char, mia_word, dea_rand, dea_gen, benchmark_overfit };
std::string poison_kind_name(PoisonKind k);
PoisonKind poison_kind_from_name(const std::string& name);

enum class FinetuneMethod { full, lowrank, dp };
std::string finetune_method_name(FinetuneMethod m);
FinetuneMethod finetune_method_from_name(const std::string& name);

struct CorpusSpec {
    std::string kind = "synth";  // synth | file
    TemplateFamily family = TemplateFamily::news_like;
    std::string path;  // for kind=file
    int n = 2000;
    Vocab::Kind vocab = Vocab::Kind::chars;
};

struct SplitSpec {
    int n_ft = 200;
    int n_member = 100;
    int n_nonmember = 100;
    int n_aux = 300;
    int n_val = 100;
    int n_anchor = 300;  // carved from the holdout pool for the utility anchor
};

struct CanarySpec {
    int count = 0;
    int repetitions = 3;
};

struct PoisonSpec {
    PoisonKind kind = PoisonKind::none;
    double level = 0.1;  // perturbation level for mia_char / mia_word
    int suffix_len_min = 15;
    int suffix_len_max = 20;
    double unlearn_rate = 1e-6;
    int unlearn_batch_size = 32;
    int unlearn_max_epochs = 5;
    int check_every = 1;
    double bound_factor = 1.10;  // bound = factor * anchor loss at poisoning start
    bool include_aux = false;    // unlearn D_aux alongside the noisy challenge
    double prefix_fraction = 0.2;  // prefix kept when noising suffixes (dea_* kinds)
    OptimConfig overfit;         // for benchmark_overfit
};

struct AttackSpec {
    std::vector<MiaStrategy> mia_strategies = {MiaStrategy::loss, MiaStrategy::ref_model,
                                               MiaStrategy::ref_data};
    bool dea = false;
    double prefix_fraction = 0.2;
    int n_dea_targets = 50;  // used when no canaries are configured
    GenConfig gen;
};

struct MetricSpec {
    std::vector<double> fpr_targets = {0.01, 0.001};
    int hist_bins = 20;
    double hist_lo = 0.0;
    double hist_hi = 8.0;
};

struct ExperimentConfig {
    std::string label = "run";
    std::uint64_t master_seed = 1;
    CorpusSpec corpus;
    SplitSpec splits;
    CanarySpec canaries;
    LmConfig model;  // vocab_size filled from the built vocab
    OptimConfig pretrain;
    FinetuneMethod finetune_method = FinetuneMethod::full;
    OptimConfig finetune;
    AdapterConfig adapter;
    DpConfig dp;
    PoisonSpec poison;
    AttackSpec attack;
    MetricSpec metrics;

    void validate() const;
};

ExperimentConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const ExperimentConfig& cfg);
ExperimentConfig load_config(const std::string& path);

enum class Stage { corpus, pretrain, poison, finetune, attack, metrics };

struct RunReport {
    int schema_version = kReportSchemaVersion;
    std::string label;
    std::string config_hash;
    nlohmann::json artifacts;   // stage -> file path(s)
    nlohmann::json metrics;     // val_ppl, per-strategy mia metrics, nsr, loss stats
    nlohmann::json seeds;       // per-stage derived seeds
    nlohmann::json timings_ms;  // kept out of the report file (separate sidecar)
};

// Runs corpus -> pretrain -> poison -> finetune -> attack -> metrics, caching
// each stage under out_dir by content hash. Stages up to `stop_after`.
RunReport run_experiment(const ExperimentConfig& cfg, const std::string& out_dir,
                         Stage stop_after = Stage::metrics);

struct SuiteResult {
    std::vector<RunReport> reports;
    std::vector<std::pair<std::string, std::string>> failures;  // label -> error
    std::string csv_path;
};

// Suite file: {"base": {...}|"path", "runs": [{"label":..., <merge-patch>}...]}.
SuiteResult run_suite(const std::string& suite_path, const std::string& out_dir, int workers = 1);

// Aligned text table over reports plus a CSV bundle of the persisted
// ROC / histogram series. Throws on schema-version mismatch.
std::string render_report(const std::vector<RunReport>& reports);

RunReport load_report(const std::string& path);
std::string report_path(const std::string& out_dir, const std::string& label);

// Counter-based per-stage seed derivation from the master seed.
std::uint64_t stage_seed(std::uint64_t master_seed, Stage stage);

}  // namespace ftleak
