#include "ftleak/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <future>
#include <iomanip>
#include <limits>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <stdexcept>

#include "ftleak/util.hpp"

namespace fs = std::filesystem;

namespace ftleak {

namespace {

// Bump when a change invalidates previously cached stage artifacts.
constexpr const char* kCodeVersion = "1";

std::mutex& stage_lock_registry_mutex() {
    static std::mutex m;
    return m;
}

std::mutex& stage_lock(const std::string& key) {
    static std::map<std::string, std::mutex> locks;
    std::lock_guard<std::mutex> g(stage_lock_registry_mutex());
    return locks[key];
}

std::uint64_t content_hash(const std::vector<TokenSequence>& seqs, std::uint64_t h = 0xcbf29ce484222325ull) {
    for (const auto& s : seqs) {
        h = fnv1a64(s.source_id, h);
        h = fnv1a64(std::string_view(reinterpret_cast<const char*>(s.tokens.data()),
                                     s.tokens.size() * sizeof(TokenId)),
                    h);
    }
    return h;
}

nlohmann::json seqs_to_json(const std::vector<TokenSequence>& seqs) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& s : seqs) arr.push_back({{"id", s.source_id}, {"t", s.tokens}});
    return arr;
}

std::vector<TokenSequence> seqs_from_json(const nlohmann::json& arr) {
    std::vector<TokenSequence> out;
    for (const auto& e : arr) {
        TokenSequence s;
        s.source_id = e.at("id").get<std::string>();
        s.tokens = e.at("t").get<std::vector<TokenId>>();
        out.push_back(std::move(s));
    }
    return out;
}

// Everything the downstream stages need from the data-preparation stage.
struct CorpusBundle {
    Vocab vocab;
    std::vector<TokenSequence> finetune;  // canaries already injected
    ChallengeSet challenge;
    AuxiliarySet aux;
    std::vector<TokenSequence> validation;
    std::vector<TokenSequence> anchor;
    std::vector<TokenSequence> pretrain_pool;
    std::vector<TokenSequence> dea_targets;  // canary sequences (or ft subset)
    std::vector<std::string> word_pool;
};

void save_bundle(const std::string& path, const CorpusBundle& b) {
    nlohmann::json j;
    j["schema_version"] = 1;
    j["vocab"] = {{"kind", b.vocab.kind == Vocab::Kind::chars ? "chars" : "words"},
                  {"symbols", b.vocab.symbols}};
    j["finetune"] = seqs_to_json(b.finetune);
    j["members"] = seqs_to_json(b.challenge.members);
    j["nonmembers"] = seqs_to_json(b.challenge.nonmembers);
    j["aux"] = seqs_to_json(b.aux.sequences);
    j["validation"] = seqs_to_json(b.validation);
    j["anchor"] = seqs_to_json(b.anchor);
    j["pretrain_pool"] = seqs_to_json(b.pretrain_pool);
    j["dea_targets"] = seqs_to_json(b.dea_targets);
    j["word_pool"] = b.word_pool;
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write corpus bundle: " + path);
    out << j.dump() << '\n';
}

CorpusBundle load_bundle(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open corpus bundle: " + path);
    nlohmann::json j;
    in >> j;
    CorpusBundle b;
    b.vocab.kind =
        j.at("vocab").at("kind").get<std::string>() == "chars" ? Vocab::Kind::chars : Vocab::Kind::words;
    b.vocab.symbols = j.at("vocab").at("symbols").get<std::vector<std::string>>();
    for (int i = 0; i < b.vocab.size(); ++i)
        b.vocab.id_of[b.vocab.symbols[static_cast<std::size_t>(i)]] = i;
    b.finetune = seqs_from_json(j.at("finetune"));
    b.challenge.members = seqs_from_json(j.at("members"));
    b.challenge.nonmembers = seqs_from_json(j.at("nonmembers"));
    b.aux.sequences = seqs_from_json(j.at("aux"));
    b.validation = seqs_from_json(j.at("validation"));
    b.anchor = seqs_from_json(j.at("anchor"));
    b.pretrain_pool = seqs_from_json(j.at("pretrain_pool"));
    b.dea_targets = seqs_from_json(j.at("dea_targets"));
    b.word_pool = j.at("word_pool").get<std::vector<std::string>>();
    return b;
}

nlohmann::json optim_to_json(const OptimConfig& c) {
    return {{"learning_rate", c.learning_rate},
            {"batch_size", c.batch_size},
            {"max_epochs", c.max_epochs},
            {"early_stop_patience", c.early_stop_patience}};
}

OptimConfig optim_from_json(const nlohmann::json& j, OptimConfig base) {
    base.learning_rate = j.value("learning_rate", base.learning_rate);
    base.batch_size = j.value("batch_size", base.batch_size);
    base.max_epochs = j.value("max_epochs", base.max_epochs);
    base.early_stop_patience = j.value("early_stop_patience", base.early_stop_patience);
    return base;
}

std::string fmt_fpr(double target) {
    std::ostringstream os;
    os << "tpr_at_" << std::setprecision(6) << target;
    return os.str();
}

// reports reference artifacts by file name so they are byte-identical
// across output directories
std::string rel_name(const std::string& path) { return fs::path(path).filename().string(); }

long ms_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() -
                                                                 t0)
        .count();
}

}  // namespace

std::string poison_kind_name(PoisonKind k) {
    switch (k) {
        case PoisonKind::none: return "none";
        case PoisonKind::mia_char: return "mia_char";
        case PoisonKind::mia_word: return "mia_word";
        case PoisonKind::dea_rand: return "dea_rand";
        case PoisonKind::dea_gen: return "dea_gen";
        case PoisonKind::benchmark_overfit: return "benchmark_overfit";
    }
    throw std::logic_error("bad poison kind");
}

PoisonKind poison_kind_from_name(const std::string& name) {
    for (PoisonKind k : {PoisonKind::none, PoisonKind::mia_char, PoisonKind::mia_word,
                         PoisonKind::dea_rand, PoisonKind::dea_gen, PoisonKind::benchmark_overfit})
        if (poison_kind_name(k) == name) return k;
    throw std::invalid_argument("unknown poison kind: " + name);
}

std::string finetune_method_name(FinetuneMethod m) {
    switch (m) {
        case FinetuneMethod::full: return "full";
        case FinetuneMethod::lowrank: return "lowrank";
        case FinetuneMethod::dp: return "dp";
    }
    throw std::logic_error("bad finetune method");
}

FinetuneMethod finetune_method_from_name(const std::string& name) {
    if (name == "full") return FinetuneMethod::full;
    if (name == "lowrank") return FinetuneMethod::lowrank;
    if (name == "dp") return FinetuneMethod::dp;
    throw std::invalid_argument("unknown finetune method: " + name);
}

void ExperimentConfig::validate() const {
    if (label.empty()) throw std::invalid_argument("config label must not be empty");
    if (corpus.kind != "synth" && corpus.kind != "file")
        throw std::invalid_argument("corpus.kind must be synth or file");
    if (corpus.kind == "file" && !fs::exists(corpus.path))
        throw std::invalid_argument("corpus file does not exist: " + corpus.path);
    if (corpus.kind == "synth" && corpus.n <= 0)
        throw std::invalid_argument("corpus.n must be positive");
    pretrain.validate();
    finetune.validate();
    attack.gen.validate();
    if (!(attack.prefix_fraction > 0.0 && attack.prefix_fraction < 1.0))
        throw std::invalid_argument("attack.prefix_fraction must be in (0,1)");
    if (!(poison.prefix_fraction > 0.0 && poison.prefix_fraction < 1.0))
        throw std::invalid_argument("poison.prefix_fraction must be in (0,1)");
    const bool dea_poison =
        poison.kind == PoisonKind::dea_rand || poison.kind == PoisonKind::dea_gen;
    if (dea_poison && !attack.dea)
        throw std::invalid_argument("dea_* poison requires the DEA attack to be enabled");
    if (poison.kind == PoisonKind::mia_char && corpus.vocab != Vocab::Kind::chars)
        throw std::invalid_argument("mia_char poison requires char tokenization");
}

ExperimentConfig config_from_json(const nlohmann::json& j) {
    ExperimentConfig c;
    c.label = j.value("label", c.label);
    c.master_seed = j.value("master_seed", c.master_seed);
    if (j.contains("corpus")) {
        const auto& jc = j.at("corpus");
        c.corpus.kind = jc.value("kind", c.corpus.kind);
        if (jc.contains("family"))
            c.corpus.family = jc.at("family").get<std::string>() == "pii_like"
                                  ? TemplateFamily::pii_like
                                  : TemplateFamily::news_like;
        c.corpus.path = jc.value("path", c.corpus.path);
        c.corpus.n = jc.value("n", c.corpus.n);
        if (jc.contains("vocab"))
            c.corpus.vocab = jc.at("vocab").get<std::string>() == "words" ? Vocab::Kind::words
                                                                          : Vocab::Kind::chars;
    }
    if (j.contains("splits")) {
        const auto& js = j.at("splits");
        c.splits.n_ft = js.value("n_ft", c.splits.n_ft);
        c.splits.n_member = js.value("n_member", c.splits.n_member);
        c.splits.n_nonmember = js.value("n_nonmember", c.splits.n_nonmember);
        c.splits.n_aux = js.value("n_aux", c.splits.n_aux);
        c.splits.n_val = js.value("n_val", c.splits.n_val);
        c.splits.n_anchor = js.value("n_anchor", c.splits.n_anchor);
    }
    if (j.contains("canaries")) {
        c.canaries.count = j.at("canaries").value("count", c.canaries.count);
        c.canaries.repetitions = j.at("canaries").value("repetitions", c.canaries.repetitions);
    }
    if (j.contains("model")) c.model = j.at("model").get<LmConfig>();
    if (j.contains("pretrain")) c.pretrain = optim_from_json(j.at("pretrain"), c.pretrain);
    if (j.contains("finetune")) {
        const auto& jf = j.at("finetune");
        if (jf.contains("method")) c.finetune_method = finetune_method_from_name(jf.at("method"));
        if (jf.contains("optim")) c.finetune = optim_from_json(jf.at("optim"), c.finetune);
        if (jf.contains("adapter")) {
            const auto& ja = jf.at("adapter");
            c.adapter.rank = ja.value("rank", c.adapter.rank);
            c.adapter.scale = ja.value("scale", c.adapter.scale);
            c.adapter.learning_rate_override =
                ja.value("learning_rate_override", c.adapter.learning_rate_override);
        }
        if (jf.contains("dp")) {
            const auto& jd = jf.at("dp");
            if (jd.contains("clip_norm")) {
                if (jd.at("clip_norm").is_string())
                    c.dp.clip_norm = std::numeric_limits<double>::infinity();
                else
                    c.dp.clip_norm = jd.at("clip_norm").get<double>();
            }
            c.dp.noise_multiplier = jd.value("noise_multiplier", c.dp.noise_multiplier);
            c.dp.budget_label = jd.value("budget_label", c.dp.budget_label);
        }
    }
    if (j.contains("poison")) {
        const auto& jp = j.at("poison");
        if (jp.contains("kind")) c.poison.kind = poison_kind_from_name(jp.at("kind"));
        c.poison.level = jp.value("level", c.poison.level);
        c.poison.suffix_len_min = jp.value("suffix_len_min", c.poison.suffix_len_min);
        c.poison.suffix_len_max = jp.value("suffix_len_max", c.poison.suffix_len_max);
        if (jp.contains("unlearn")) {
            const auto& ju = jp.at("unlearn");
            c.poison.unlearn_rate = ju.value("rate", c.poison.unlearn_rate);
            c.poison.unlearn_batch_size = ju.value("batch_size", c.poison.unlearn_batch_size);
            c.poison.unlearn_max_epochs = ju.value("max_epochs", c.poison.unlearn_max_epochs);
            c.poison.check_every = ju.value("check_every", c.poison.check_every);
            c.poison.bound_factor = ju.value("bound_factor", c.poison.bound_factor);
        }
        c.poison.include_aux = jp.value("include_aux", c.poison.include_aux);
        c.poison.prefix_fraction = jp.value("prefix_fraction", c.poison.prefix_fraction);
        if (jp.contains("overfit")) c.poison.overfit = optim_from_json(jp.at("overfit"), c.poison.overfit);
    }
    if (j.contains("attack")) {
        const auto& ja = j.at("attack");
        if (ja.contains("mia_strategies")) {
            c.attack.mia_strategies.clear();
            for (const auto& s : ja.at("mia_strategies"))
                c.attack.mia_strategies.push_back(mia_strategy_from_name(s));
        }
        c.attack.dea = ja.value("dea", c.attack.dea);
        c.attack.prefix_fraction = ja.value("prefix_fraction", c.attack.prefix_fraction);
        c.attack.n_dea_targets = ja.value("n_dea_targets", c.attack.n_dea_targets);
        if (ja.contains("gen")) {
            const auto& jg = ja.at("gen");
            if (jg.contains("strategy"))
                c.attack.gen.strategy = strategy_from_name(jg.at("strategy"));
            c.attack.gen.beam_width = jg.value("beam_width", c.attack.gen.beam_width);
            c.attack.gen.alpha = jg.value("alpha", c.attack.gen.alpha);
            c.attack.gen.top_k = jg.value("top_k", c.attack.gen.top_k);
            c.attack.gen.max_new_tokens = jg.value("max_new_tokens", c.attack.gen.max_new_tokens);
        }
    }
    if (j.contains("metrics")) {
        const auto& jm = j.at("metrics");
        if (jm.contains("fpr_targets"))
            c.metrics.fpr_targets = jm.at("fpr_targets").get<std::vector<double>>();
        c.metrics.hist_bins = jm.value("hist_bins", c.metrics.hist_bins);
        c.metrics.hist_lo = jm.value("hist_lo", c.metrics.hist_lo);
        c.metrics.hist_hi = jm.value("hist_hi", c.metrics.hist_hi);
    }
    return c;
}

nlohmann::json config_to_json(const ExperimentConfig& c) {
    nlohmann::json j;
    j["label"] = c.label;
    j["master_seed"] = c.master_seed;
    j["corpus"] = {{"kind", c.corpus.kind},
                   {"family", c.corpus.family == TemplateFamily::pii_like ? "pii_like" : "news_like"},
                   {"path", c.corpus.path},
                   {"n", c.corpus.n},
                   {"vocab", c.corpus.vocab == Vocab::Kind::words ? "words" : "chars"}};
    j["splits"] = {{"n_ft", c.splits.n_ft},       {"n_member", c.splits.n_member},
                   {"n_nonmember", c.splits.n_nonmember}, {"n_aux", c.splits.n_aux},
                   {"n_val", c.splits.n_val},     {"n_anchor", c.splits.n_anchor}};
    j["canaries"] = {{"count", c.canaries.count}, {"repetitions", c.canaries.repetitions}};
    j["model"] = c.model;
    j["pretrain"] = optim_to_json(c.pretrain);
    nlohmann::json dp;
    if (std::isfinite(c.dp.clip_norm))
        dp["clip_norm"] = c.dp.clip_norm;
    else
        dp["clip_norm"] = "inf";
    dp["noise_multiplier"] = c.dp.noise_multiplier;
    dp["budget_label"] = c.dp.budget_label;
    j["finetune"] = {{"method", finetune_method_name(c.finetune_method)},
                     {"optim", optim_to_json(c.finetune)},
                     {"adapter",
                      {{"rank", c.adapter.rank},
                       {"scale", c.adapter.scale},
                       {"learning_rate_override", c.adapter.learning_rate_override}}},
                     {"dp", dp}};
    j["poison"] = {{"kind", poison_kind_name(c.poison.kind)},
                   {"level", c.poison.level},
                   {"suffix_len_min", c.poison.suffix_len_min},
                   {"suffix_len_max", c.poison.suffix_len_max},
                   {"unlearn",
                    {{"rate", c.poison.unlearn_rate},
                     {"batch_size", c.poison.unlearn_batch_size},
                     {"max_epochs", c.poison.unlearn_max_epochs},
                     {"check_every", c.poison.check_every},
                     {"bound_factor", c.poison.bound_factor}}},
                   {"include_aux", c.poison.include_aux},
                   {"prefix_fraction", c.poison.prefix_fraction},
                   {"overfit", optim_to_json(c.poison.overfit)}};
    nlohmann::json strategies = nlohmann::json::array();
    for (auto s : c.attack.mia_strategies) strategies.push_back(mia_strategy_name(s));
    j["attack"] = {{"mia_strategies", strategies},
                   {"dea", c.attack.dea},
                   {"prefix_fraction", c.attack.prefix_fraction},
                   {"n_dea_targets", c.attack.n_dea_targets},
                   {"gen",
                    {{"strategy", strategy_name(c.attack.gen.strategy)},
                     {"beam_width", c.attack.gen.beam_width},
                     {"alpha", c.attack.gen.alpha},
                     {"top_k", c.attack.gen.top_k},
                     {"max_new_tokens", c.attack.gen.max_new_tokens}}}};
    j["metrics"] = {{"fpr_targets", c.metrics.fpr_targets},
                    {"hist_bins", c.metrics.hist_bins},
                    {"hist_lo", c.metrics.hist_lo},
                    {"hist_hi", c.metrics.hist_hi}};
    return j;
}

ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config: " + path);
    nlohmann::json j;
    in >> j;
    return config_from_json(j);
}

std::uint64_t stage_seed(std::uint64_t master_seed, Stage stage) {
    return splitmix64(master_seed * 0x10001ull + static_cast<std::uint64_t>(stage));
}

namespace {

CorpusBundle build_bundle(const ExperimentConfig& cfg) {
    const std::uint64_t seed = stage_seed(cfg.master_seed, Stage::corpus);

    std::vector<std::string> texts;
    if (cfg.corpus.kind == "synth")
        texts = synth_texts(cfg.corpus.n, seed, cfg.corpus.family);
    else
        texts = load_corpus_file(cfg.corpus.path);

    std::vector<CanaryRecord> canaries;
    if (cfg.canaries.count > 0)
        canaries = synth_canaries(cfg.canaries.count, cfg.canaries.repetitions, seed);

    std::vector<std::string> vocab_texts = texts;
    for (const auto& c : canaries) vocab_texts.push_back(c.text);

    CorpusBundle b;
    b.vocab = build_vocab(vocab_texts, cfg.corpus.vocab);

    std::vector<TokenSequence> corpus;
    corpus.reserve(texts.size());
    for (std::size_t i = 0; i < texts.size(); ++i) {
        TokenSequence s;
        s.tokens = b.vocab.tokenize(texts[i]);
        s.source_id = "seq" + std::to_string(i);
        corpus.push_back(std::move(s));
    }

    auto splits = make_splits(corpus, cfg.splits.n_ft, cfg.splits.n_member, cfg.splits.n_nonmember,
                              cfg.splits.n_aux, cfg.splits.n_val, splitmix64(seed ^ 1));
    if (static_cast<int>(splits.holdout.size()) < cfg.splits.n_anchor)
        throw std::invalid_argument("holdout pool too small for the anchor set");

    b.challenge = splits.challenge;
    b.aux = splits.aux;
    b.validation = splits.validation;
    b.anchor.assign(splits.holdout.begin(), splits.holdout.begin() + cfg.splits.n_anchor);
    b.pretrain_pool.assign(splits.holdout.begin() + cfg.splits.n_anchor, splits.holdout.end());
    if (b.pretrain_pool.empty()) throw std::invalid_argument("empty pretraining pool");

    b.finetune = inject_canaries(splits.finetune, canaries, b.vocab, splitmix64(seed ^ 2));

    if (!canaries.empty()) {
        for (std::size_t i = 0; i < canaries.size(); ++i) {
            TokenSequence s;
            s.tokens = b.vocab.tokenize(canaries[i].text);
            s.source_id = "canary" + std::to_string(i);
            b.dea_targets.push_back(std::move(s));
        }
    } else {
        const int n = std::min<int>(cfg.attack.n_dea_targets,
                                    static_cast<int>(splits.finetune.size()));
        b.dea_targets.assign(splits.finetune.begin(), splits.finetune.begin() + n);
    }

    // word pool for word perturbation and random-word suffixes
    std::set<std::string> words;
    for (const auto& t : texts) {
        std::istringstream in(t);
        std::string w;
        while (in >> w) words.insert(w);
    }
    b.word_pool.assign(words.begin(), words.end());
    return b;
}

std::vector<PrefixSuffixPair> dea_pairs_of(const CorpusBundle& b, double fraction) {
    std::vector<PrefixSuffixPair> pairs;
    pairs.reserve(b.dea_targets.size());
    for (const auto& s : b.dea_targets) pairs.push_back(split_prefix_suffix(s, fraction));
    return pairs;
}

struct StageArtifacts {
    std::string bundle_path, pre_path, adv_path, ft_path, attack_path;
    std::uint64_t bundle_hash = 0, pre_hash = 0, adv_hash = 0, ft_hash = 0, attack_hash = 0;
};

double poison_prefix_fraction(const ExperimentConfig& cfg) { return cfg.poison.prefix_fraction; }

}  // namespace

RunReport run_experiment(const ExperimentConfig& cfg, const std::string& out_dir,
                         Stage stop_after) {
    cfg.validate();
    fs::create_directories(out_dir);
    RunReport report;
    report.label = cfg.label;
    const nlohmann::json cfg_json = config_to_json(cfg);
    report.config_hash = hex64(fnv1a64(cfg_json.dump()));
    for (Stage st : {Stage::corpus, Stage::pretrain, Stage::poison, Stage::finetune, Stage::attack,
                     Stage::metrics})
        report.seeds[std::to_string(static_cast<int>(st))] = stage_seed(cfg.master_seed, st);

    StageArtifacts art;

    // ---- corpus stage ----
    auto t0 = std::chrono::steady_clock::now();
    {
        nlohmann::json key = {{"code", kCodeVersion},
                              {"corpus", cfg_json.at("corpus")},
                              {"splits", cfg_json.at("splits")},
                              {"canaries", cfg_json.at("canaries")},
                              {"n_dea_targets", cfg.attack.n_dea_targets},
                              {"seed", stage_seed(cfg.master_seed, Stage::corpus)}};
        art.bundle_hash = fnv1a64(key.dump());
        art.bundle_path = out_dir + "/corpus-" + hex64(art.bundle_hash) + ".json";
        std::lock_guard<std::mutex> g(stage_lock(art.bundle_path));
        if (!fs::exists(art.bundle_path)) save_bundle(art.bundle_path, build_bundle(cfg));
    }
    CorpusBundle bundle = load_bundle(art.bundle_path);
    report.artifacts["corpus"] = rel_name(art.bundle_path);
    report.timings_ms["corpus"] = ms_since(t0);
    if (stop_after == Stage::corpus) return report;

    LmConfig model = cfg.model;
    model.vocab_size = bundle.vocab.size();

    // ---- pretrain stage (canary/poison independent, shared across variants) ----
    t0 = std::chrono::steady_clock::now();
    {
        nlohmann::json key = {{"code", kCodeVersion},
                              {"model", model},
                              {"optim", cfg_json.at("pretrain")},
                              {"pool", content_hash(bundle.pretrain_pool)},
                              {"val", content_hash(bundle.validation)},
                              {"seed", stage_seed(cfg.master_seed, Stage::pretrain)}};
        art.pre_hash = fnv1a64(key.dump());
        art.pre_path = out_dir + "/pre-" + hex64(art.pre_hash) + ".tlmc";
        std::lock_guard<std::mutex> g(stage_lock(art.pre_path));
        if (!fs::exists(art.pre_path)) {
            OptimConfig oc = cfg.pretrain;
            oc.seed = stage_seed(cfg.master_seed, Stage::pretrain);
            auto init = init_params(model, oc.seed);
            auto res = train_full(init, bundle.pretrain_pool, bundle.validation, oc,
                                  TrainPurpose::pretrain);
            save_checkpoint(res.ckpt, art.pre_path);
            write_train_log(art.pre_path + ".log.jsonl", res.log);
        }
    }
    report.artifacts["pre_ckpt"] = rel_name(art.pre_path);
    report.timings_ms["pretrain"] = ms_since(t0);
    if (stop_after == Stage::pretrain) return report;

    // ---- poison stage ----
    t0 = std::chrono::steady_clock::now();
    if (cfg.poison.kind == PoisonKind::none) {
        art.adv_path = art.pre_path;
        art.adv_hash = art.pre_hash;
    } else {
        nlohmann::json key = {{"code", kCodeVersion},
                              {"pre", art.pre_hash},
                              {"poison", cfg_json.at("poison")},
                              {"prefix_fraction", poison_prefix_fraction(cfg)},
                              {"challenge", content_hash(bundle.challenge.members,
                                                         content_hash(bundle.challenge.nonmembers))},
                              {"aux", content_hash(bundle.aux.sequences)},
                              {"anchor", content_hash(bundle.anchor)},
                              {"dea_targets", content_hash(bundle.dea_targets)},
                              {"seed", stage_seed(cfg.master_seed, Stage::poison)}};
        art.adv_hash = fnv1a64(key.dump());
        art.adv_path = out_dir + "/adv-" + hex64(art.adv_hash) + ".tlmc";
        std::lock_guard<std::mutex> g(stage_lock(art.adv_path));
        if (!fs::exists(art.adv_path)) {
            const auto seed = stage_seed(cfg.master_seed, Stage::poison);
            LmCheckpoint pre = load_checkpoint(art.pre_path);

            if (cfg.poison.kind == PoisonKind::benchmark_overfit) {
                std::vector<TokenSequence> dc = bundle.challenge.members;
                dc.insert(dc.end(), bundle.challenge.nonmembers.begin(),
                          bundle.challenge.nonmembers.end());
                OptimConfig oc = cfg.poison.overfit;
                oc.seed = seed;
                auto res = overfit_poison(pre, dc, oc);
                save_checkpoint(res.ckpt, art.adv_path);
                write_train_log(art.adv_path + ".log.jsonl", res.log);
            } else {
                NoisyChallengeSet noisy;
                if (cfg.poison.kind == PoisonKind::mia_char ||
                    cfg.poison.kind == PoisonKind::mia_word) {
                    std::vector<TokenSequence> dc = bundle.challenge.members;
                    dc.insert(dc.end(), bundle.challenge.nonmembers.begin(),
                              bundle.challenge.nonmembers.end());
                    PerturbSpec spec;
                    spec.kind = cfg.poison.kind == PoisonKind::mia_char ? PerturbSpec::Kind::chars
                                                                        : PerturbSpec::Kind::words;
                    spec.level = cfg.poison.level;
                    spec.seed = seed;
                    noisy = perturb_challenge(dc, spec, bundle.vocab, bundle.word_pool);
                } else {
                    SuffixNoiseSpec spec;
                    spec.kind = cfg.poison.kind == PoisonKind::dea_rand
                                    ? SuffixNoiseSpec::Kind::random_words
                                    : SuffixNoiseSpec::Kind::autoregressive;
                    spec.len_min = cfg.poison.suffix_len_min;
                    spec.len_max = cfg.poison.suffix_len_max;
                    spec.seed = seed;
                    std::vector<TokenId> pool;
                    for (int id = 4; id < bundle.vocab.size(); ++id) pool.push_back(id);
                    noisy = make_noisy_suffixes(dea_pairs_of(bundle, poison_prefix_fraction(cfg)),
                                                spec, pool, &pre);
                }

                UnlearnConfig uc;
                uc.unlearn_rate = cfg.poison.unlearn_rate;
                uc.batch_size = cfg.poison.unlearn_batch_size;
                uc.max_epochs = cfg.poison.unlearn_max_epochs;
                uc.check_every = cfg.poison.check_every;
                uc.seed = splitmix64(seed ^ 7);
                uc.anchor.anchor_set = bundle.anchor;
                double anchor0 = 0.0;
                for (const auto& s : bundle.anchor) anchor0 += sequence_nll(pre, s);
                anchor0 /= static_cast<double>(bundle.anchor.size());
                uc.anchor.bound = cfg.poison.bound_factor * anchor0;

                auto res = bounded_unlearn(
                    pre, noisy.sequences,
                    cfg.poison.include_aux ? &bundle.aux.sequences : nullptr, uc);
                save_checkpoint(res.ckpt, art.adv_path);
                write_unlearn_audit(art.adv_path + ".audit.json", res.audit);
            }
        }
    }
    report.artifacts["adv_ckpt"] = rel_name(art.adv_path);
    report.timings_ms["poison"] = ms_since(t0);
    if (stop_after == Stage::poison) return report;

    // ---- finetune stage ----
    t0 = std::chrono::steady_clock::now();
    {
        nlohmann::json key = {{"code", kCodeVersion},
                              {"input", art.adv_hash},
                              {"finetune", cfg_json.at("finetune")},
                              {"data", content_hash(bundle.finetune)},
                              {"val", content_hash(bundle.validation)},
                              {"seed", stage_seed(cfg.master_seed, Stage::finetune)}};
        art.ft_hash = fnv1a64(key.dump());
        art.ft_path = out_dir + "/ft-" + hex64(art.ft_hash) + ".tlmc";
        std::lock_guard<std::mutex> g(stage_lock(art.ft_path));
        if (!fs::exists(art.ft_path)) {
            LmCheckpoint input = load_checkpoint(art.adv_path);
            OptimConfig oc = cfg.finetune;
            oc.seed = stage_seed(cfg.master_seed, Stage::finetune);
            TrainResult res;
            switch (cfg.finetune_method) {
                case FinetuneMethod::full:
                    res = train_full(input, bundle.finetune, bundle.validation, oc);
                    break;
                case FinetuneMethod::lowrank:
                    res = train_lowrank(input, cfg.adapter, bundle.finetune, bundle.validation, oc);
                    break;
                case FinetuneMethod::dp:
                    res = train_dp(input, bundle.finetune, bundle.validation, oc, cfg.dp);
                    break;
            }
            save_checkpoint(res.ckpt, art.ft_path);
            write_train_log(art.ft_path + ".log.jsonl", res.log);
        }
    }
    report.artifacts["ft_ckpt"] = rel_name(art.ft_path);
    report.timings_ms["finetune"] = ms_since(t0);
    if (stop_after == Stage::finetune) return report;

    // ---- attack stage ----
    t0 = std::chrono::steady_clock::now();
    {
        nlohmann::json key = {{"code", kCodeVersion},
                              {"ft", art.ft_hash},
                              {"ref", art.adv_hash},
                              {"attack", cfg_json.at("attack")},
                              {"challenge", content_hash(bundle.challenge.members,
                                                         content_hash(bundle.challenge.nonmembers))},
                              {"aux", content_hash(bundle.aux.sequences)},
                              {"dea_targets", content_hash(bundle.dea_targets)}};
        art.attack_hash = fnv1a64(key.dump());
        art.attack_path = out_dir + "/attack-" + hex64(art.attack_hash) + ".json";
        std::lock_guard<std::mutex> g(stage_lock(art.attack_path));
        if (!fs::exists(art.attack_path)) {
            // The attacker's reference is the checkpoint the victim started
            // from, i.e. the released (possibly poisoned) pretrained model.
            LmCheckpoint ft = load_checkpoint(art.ft_path);
            LmCheckpoint released = load_checkpoint(art.adv_path);
            BlackBoxLm eval(ft), ref(released);

            nlohmann::json out;
            out["schema_version"] = kReportSchemaVersion;
            out["ft_role"] = role_name(ft.role);

            std::vector<double> aux_losses;
            for (const auto& s : bundle.aux.sequences) aux_losses.push_back(eval.loss(s));
            out["aux_losses"] = aux_losses;

            for (MiaStrategy strategy : cfg.attack.mia_strategies) {
                auto scores = mia_scores(eval, bundle.challenge, strategy, &ref, &aux_losses);
                nlohmann::json arr = nlohmann::json::array();
                for (const auto& s : scores)
                    arr.push_back({{"source_id", s.source_id},
                                   {"score", s.score},
                                   {"raw_loss", s.raw_loss},
                                   {"raw_reference", s.raw_reference},
                                   {"is_member", s.is_member}});
                out["mia"][mia_strategy_name(strategy)] = arr;
            }

            // loss statistics for the histogram bundles and the overfitting gap
            auto losses_of = [&](const BlackBoxLm& m, const std::vector<TokenSequence>& seqs) {
                std::vector<double> v;
                v.reserve(seqs.size());
                for (const auto& s : seqs) v.push_back(m.loss(s));
                return v;
            };
            out["losses"] = {{"member_pre", losses_of(ref, bundle.challenge.members)},
                             {"nonmember_pre", losses_of(ref, bundle.challenge.nonmembers)},
                             {"member_ft", losses_of(eval, bundle.challenge.members)},
                             {"nonmember_ft", losses_of(eval, bundle.challenge.nonmembers)}};

            if (cfg.attack.dea) {
                auto pairs = dea_pairs_of(bundle, cfg.attack.prefix_fraction);
                auto results = dea_extract(eval, pairs, cfg.attack.gen);
                nlohmann::json arr = nlohmann::json::array();
                for (const auto& r : results)
                    arr.push_back({{"source_id", r.source_id},
                                   {"match", r.match},
                                   {"edit_similarity", r.edit_similarity},
                                   {"generated", r.generated_suffix.tokens},
                                   {"true", r.true_suffix.tokens}});
                out["dea"] = arr;
                out["nsr"] = dea_nsr(results);
            }

            std::ofstream os(art.attack_path);
            os << out.dump() << '\n';
        }
    }
    report.artifacts["attack"] = rel_name(art.attack_path);
    report.timings_ms["attack"] = ms_since(t0);
    if (stop_after == Stage::attack) return report;

    // ---- metrics stage (always recomputed; cheap) ----
    t0 = std::chrono::steady_clock::now();
    {
        nlohmann::json attack_out;
        {
            std::ifstream in(art.attack_path);
            in >> attack_out;
        }
        if (attack_out.at("schema_version").get<int>() != kReportSchemaVersion)
            throw std::runtime_error("attack artifact schema version mismatch");

        LmCheckpoint ft = load_checkpoint(art.ft_path);
        report.metrics["val_ppl"] = perplexity(ft, bundle.validation);
        report.metrics["ft_role"] = attack_out.at("ft_role");

        for (MiaStrategy strategy : cfg.attack.mia_strategies) {
            const auto& arr = attack_out.at("mia").at(mia_strategy_name(strategy));
            LabeledScores ls;
            for (const auto& e : arr)
                ls.entries.emplace_back(e.at("score").get<double>(), e.at("is_member").get<bool>());
            auto roc = roc_auc(ls);
            nlohmann::json m;
            m["auc"] = roc.auc;
            m["best_acc"] = best_accuracy(ls);
            for (double target : cfg.metrics.fpr_targets)
                m[fmt_fpr(target)] = tpr_at_fpr(ls, target);
            report.metrics["mia"][mia_strategy_name(strategy)] = m;

            const std::string roc_path =
                out_dir + "/" + cfg.label + "." + mia_strategy_name(strategy) + ".roc.csv";
            write_roc_csv(roc_path, roc.curve);
            report.artifacts["roc_" + mia_strategy_name(strategy)] = rel_name(roc_path);
        }

        auto mean_of = [](const std::vector<double>& v) {
            double acc = 0.0;
            for (double x : v) acc += x;
            return v.empty() ? 0.0 : acc / static_cast<double>(v.size());
        };
        const auto& jl = attack_out.at("losses");
        nlohmann::json stats;
        std::vector<std::pair<std::string, Histogram>> series;
        const std::string ft_role = attack_out.at("ft_role").get<std::string>();
        for (const auto& [key, role] :
             std::vector<std::pair<std::string, std::string>>{{"member_pre", "pre"},
                                                              {"nonmember_pre", "pre"},
                                                              {"member_ft", ft_role},
                                                              {"nonmember_ft", ft_role}}) {
            auto v = jl.at(key).get<std::vector<double>>();
            stats["mean_" + key] = mean_of(v);
            const std::string label =
                (key.rfind("member", 0) == 0 ? "member@" : "nonmember@") + role;
            series.emplace_back(label, loss_histogram(v, cfg.metrics.hist_bins,
                                                      cfg.metrics.hist_lo, cfg.metrics.hist_hi));
        }
        report.metrics["loss_stats"] = stats;
        const std::string hist_path = out_dir + "/" + cfg.label + ".hist.csv";
        write_histogram_csv(hist_path, series);
        report.artifacts["histograms"] = rel_name(hist_path);

        if (attack_out.contains("nsr")) report.metrics["nsr"] = attack_out.at("nsr");

        // persist report JSON (no wall-clock inside, byte-stable) + timings sidecar
        nlohmann::json rj = {{"schema_version", report.schema_version},
                             {"label", report.label},
                             {"config_hash", report.config_hash},
                             {"artifacts", report.artifacts},
                             {"seeds", report.seeds},
                             {"metrics", report.metrics}};
        {
            std::ofstream os(report_path(out_dir, cfg.label));
            os << rj.dump(2) << '\n';
        }
        report.timings_ms["metrics"] = ms_since(t0);
        {
            std::ofstream os(out_dir + "/" + cfg.label + ".timings.json");
            os << report.timings_ms.dump(2) << '\n';
        }

        // CSV row, Table-1 column order
        std::ofstream csv(out_dir + "/" + cfg.label + ".row.csv");
        csv << "label,strategy,val_ppl,best_acc,tpr_at_0.01,tpr_at_0.001,auc,nsr\n";
        for (MiaStrategy strategy : cfg.attack.mia_strategies) {
            const auto& m = report.metrics.at("mia").at(mia_strategy_name(strategy));
            csv << cfg.label << ',' << mia_strategy_name(strategy) << ','
                << report.metrics.at("val_ppl").get<double>() << ','
                << m.at("best_acc").get<double>() << ','
                << (m.contains("tpr_at_0.01") ? m.at("tpr_at_0.01").get<double>() : 0.0) << ','
                << (m.contains("tpr_at_0.001") ? m.at("tpr_at_0.001").get<double>() : 0.0) << ','
                << m.at("auc").get<double>() << ','
                << (report.metrics.contains("nsr") ? report.metrics.at("nsr").get<int>() : -1)
                << '\n';
        }
    }
    return report;
}

std::string report_path(const std::string& out_dir, const std::string& label) {
    return out_dir + "/" + label + ".report.json";
}

RunReport load_report(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open report: " + path);
    nlohmann::json j;
    in >> j;
    RunReport r;
    r.schema_version = j.at("schema_version").get<int>();
    if (r.schema_version != kReportSchemaVersion)
        throw std::runtime_error("report schema version mismatch in " + path);
    r.label = j.at("label").get<std::string>();
    r.config_hash = j.at("config_hash").get<std::string>();
    r.artifacts = j.at("artifacts");
    r.seeds = j.at("seeds");
    r.metrics = j.at("metrics");
    return r;
}

SuiteResult run_suite(const std::string& suite_path, const std::string& out_dir, int workers) {
    std::ifstream in(suite_path);
    if (!in) throw std::runtime_error("cannot open suite file: " + suite_path);
    nlohmann::json suite;
    in >> suite;

    nlohmann::json base;
    if (suite.contains("base")) {
        if (suite.at("base").is_string()) {
            std::ifstream bin(suite.at("base").get<std::string>());
            if (!bin) throw std::runtime_error("cannot open base config");
            bin >> base;
        } else {
            base = suite.at("base");
        }
    }
    if (!suite.contains("runs") || suite.at("runs").empty())
        throw std::invalid_argument("suite has no runs");

    std::vector<ExperimentConfig> configs;
    for (const auto& patch : suite.at("runs")) {
        nlohmann::json merged = base;
        merged.merge_patch(patch);
        configs.push_back(config_from_json(merged));
    }

    SuiteResult result;
    std::mutex mu;
    auto run_one = [&](const ExperimentConfig& cfg) {
        try {
            auto report = run_experiment(cfg, out_dir);
            std::lock_guard<std::mutex> g(mu);
            result.reports.push_back(std::move(report));
        } catch (const std::exception& e) {
            std::lock_guard<std::mutex> g(mu);
            result.failures.emplace_back(cfg.label, e.what());
        }
    };

    if (workers <= 1) {
        for (const auto& cfg : configs) run_one(cfg);
    } else {
        std::vector<std::future<void>> futs;
        std::size_t next = 0;
        std::mutex qmu;
        for (int w = 0; w < workers; ++w)
            futs.push_back(std::async(std::launch::async, [&] {
                for (;;) {
                    std::size_t i;
                    {
                        std::lock_guard<std::mutex> g(qmu);
                        if (next >= configs.size()) return;
                        i = next++;
                    }
                    run_one(configs[i]);
                }
            }));
        for (auto& f : futs) f.get();
    }

    // stable order regardless of scheduling
    std::sort(result.reports.begin(), result.reports.end(),
              [](const RunReport& a, const RunReport& b) { return a.label < b.label; });

    result.csv_path = out_dir + "/suite.csv";
    std::ofstream csv(result.csv_path);
    csv << "label,strategy,val_ppl,best_acc,tpr_at_0.01,tpr_at_0.001,auc,nsr\n";
    for (const auto& r : result.reports) {
        const double val_ppl = r.metrics.at("val_ppl").get<double>();
        const int nsr = r.metrics.contains("nsr") ? r.metrics.at("nsr").get<int>() : -1;
        for (const auto& [strategy, m] : r.metrics.at("mia").items())
            csv << r.label << ',' << strategy << ',' << val_ppl << ','
                << m.at("best_acc").get<double>() << ','
                << (m.contains("tpr_at_0.01") ? m.at("tpr_at_0.01").get<double>() : 0.0) << ','
                << (m.contains("tpr_at_0.001") ? m.at("tpr_at_0.001").get<double>() : 0.0) << ','
                << m.at("auc").get<double>() << ',' << nsr << '\n';
    }
    return result;
}

std::string render_report(const std::vector<RunReport>& reports) {
    if (reports.empty()) throw std::invalid_argument("render_report: no reports");
    for (const auto& r : reports)
        if (r.schema_version != kReportSchemaVersion)
            throw std::runtime_error("report schema version mismatch for " + r.label);

    std::ostringstream os;
    os << std::left << std::setw(28) << "label" << std::setw(12) << "strategy" << std::right
       << std::setw(10) << "Val-PPL" << std::setw(10) << "BestAcc" << std::setw(10) << "TPR@1%"
       << std::setw(10) << "TPR@0.1%" << std::setw(10) << "AUC" << std::setw(8) << "NSR" << '\n';
    os << std::string(98, '-') << '\n';
    os << std::fixed << std::setprecision(4);
    for (const auto& r : reports) {
        const double val_ppl = r.metrics.at("val_ppl").get<double>();
        const std::string nsr =
            r.metrics.contains("nsr") ? std::to_string(r.metrics.at("nsr").get<int>()) : "-";
        for (const auto& [strategy, m] : r.metrics.at("mia").items()) {
            os << std::left << std::setw(28) << r.label << std::setw(12) << strategy << std::right
               << std::setw(10) << val_ppl << std::setw(10) << m.at("best_acc").get<double>()
               << std::setw(10)
               << (m.contains("tpr_at_0.01") ? m.at("tpr_at_0.01").get<double>() : 0.0)
               << std::setw(10)
               << (m.contains("tpr_at_0.001") ? m.at("tpr_at_0.001").get<double>() : 0.0)
               << std::setw(10) << m.at("auc").get<double>() << std::setw(8) << nsr << '\n';
        }
    }
    return os.str();
}

}  // namespace ftleak
