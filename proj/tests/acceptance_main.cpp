// End-to-end acceptance gate: directional reproductions on the desk-scale
// pipeline plus exact oracle equivalences. Prints one [PASS]/[FAIL] line per
// criterion; exit status is the number of failures.
#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <vector>

#include "ftleak/harness.hpp"
#include "json.hpp"

using namespace ftleak;
namespace fs = std::filesystem;

namespace {

const std::vector<std::uint64_t> kSeeds = {1, 2, 3};

// ---------- desk-scale experiment definitions ----------

// Two victim families share the pretraining recipe (and therefore the cached
// pretrained checkpoint per seed) but fine-tune for different lengths: the
// membership-inference experiments use a moderate fine-tune, the extraction
// experiments a longer one that reaches the partial-memorization regime where
// canary recovery is informative.
ExperimentConfig desk(std::uint64_t seed, const std::string& tag) {
    ExperimentConfig cfg;
    cfg.label = "s" + std::to_string(seed) + "_" + tag;
    cfg.master_seed = seed;

    cfg.corpus.kind = "synth";
    cfg.corpus.family = TemplateFamily::pii_like;
    cfg.corpus.n = 2000;
    cfg.corpus.vocab = Vocab::Kind::chars;

    cfg.splits.n_ft = 200;
    cfg.splits.n_member = 100;
    cfg.splits.n_nonmember = 100;
    cfg.splits.n_aux = 300;
    cfg.splits.n_val = 100;
    cfg.splits.n_anchor = 300;

    cfg.canaries.count = 20;
    cfg.canaries.repetitions = 3;

    cfg.model.d_model = 64;
    cfg.model.n_layers = 2;
    cfg.model.n_heads = 2;
    cfg.model.context_len = 64;
    cfg.model.ff_mult = 4;

    cfg.pretrain.learning_rate = 1e-3;
    cfg.pretrain.batch_size = 8;
    cfg.pretrain.max_epochs = 30;
    cfg.pretrain.early_stop_patience = 30;

    cfg.finetune.learning_rate = 1e-3;
    cfg.finetune.batch_size = 16;

    cfg.poison.level = 0.1;
    cfg.poison.unlearn_batch_size = 32;
    cfg.poison.unlearn_max_epochs = 5;
    cfg.poison.check_every = 1;
    cfg.poison.bound_factor = 1.10;
    cfg.poison.overfit.learning_rate = 1e-3;
    cfg.poison.overfit.batch_size = 32;
    cfg.poison.overfit.max_epochs = 2;

    cfg.attack.dea = true;
    cfg.attack.prefix_fraction = 0.2;
    cfg.attack.gen.strategy = GenConfig::Strategy::beam;
    cfg.attack.gen.beam_width = 5;

    cfg.adapter.rank = 4;
    cfg.adapter.learning_rate_override = 0.0;

    cfg.dp.clip_norm = 1.0;
    cfg.dp.noise_multiplier = 32.0;
    cfg.dp.budget_label = "high-noise";
    return cfg;
}

ExperimentConfig mia_desk(std::uint64_t seed, const std::string& tag, PoisonKind kind,
                          double level = 0.1, double unlearn_rate = 1e-3) {
    auto cfg = desk(seed, tag);
    cfg.finetune.max_epochs = 14;
    cfg.finetune.early_stop_patience = 14;
    cfg.poison.kind = kind;
    cfg.poison.level = level;
    cfg.poison.unlearn_rate = unlearn_rate;
    return cfg;
}

ExperimentConfig dea_desk(std::uint64_t seed, const std::string& tag, PoisonKind kind) {
    auto cfg = desk(seed, tag);
    cfg.finetune.max_epochs = 25;
    cfg.finetune.early_stop_patience = 25;
    cfg.poison.kind = kind;
    cfg.poison.unlearn_rate = 3e-4;
    return cfg;
}

// ---------- report accessors ----------

double auc_of(const RunReport& r, const char* strategy = "ref_model") {
    return r.metrics.at("mia").at(strategy).at("auc").get<double>();
}
double ppl_of(const RunReport& r) { return r.metrics.at("val_ppl").get<double>(); }
int nsr_of(const RunReport& r) { return r.metrics.at("nsr").get<int>(); }
double member_loss_ft(const RunReport& r) {
    return r.metrics.at("loss_stats").at("mean_member_ft").get<double>();
}
double gap_ft(const RunReport& r) {
    return r.metrics.at("loss_stats").at("mean_nonmember_ft").get<double>() - member_loss_ft(r);
}

// ---------- criterion bookkeeping ----------

struct Gate {
    int failures = 0;

    void report(int id, const std::string& name, bool pass, const std::string& detail) {
        std::cout << (pass ? "[PASS] " : "[FAIL] ") << "criterion " << id << " (" << name << "): "
                  << detail << '\n';
        if (!pass) ++failures;
    }
};

std::string fmt(double x) {
    std::ostringstream os;
    os.precision(4);
    os << std::fixed << x;
    return os.str();
}

// ---------- oracle helpers (criteria 10-11) ----------

double pairwise_auc(const LabeledScores& s) {
    double wins = 0.0;
    long n_pos = 0, n_neg = 0;
    for (const auto& [sp, mp] : s.entries) (mp ? n_pos : n_neg) += 1;
    for (const auto& [sp, mp] : s.entries) {
        if (!mp) continue;
        for (const auto& [sn, mn] : s.entries) {
            if (mn) continue;
            wins += sp > sn ? 1.0 : (sp == sn ? 0.5 : 0.0);
        }
    }
    return wins / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

double enum_best_accuracy(const LabeledScores& s) {
    std::vector<double> th;
    for (const auto& [sc, m] : s.entries) th.push_back(sc);
    th.push_back(*std::max_element(th.begin(), th.end()) + 1.0);
    double best = 0.0;
    for (double t : th) {
        long ok = 0;
        for (const auto& [sc, m] : s.entries)
            if ((sc >= t) == m) ++ok;
        best = std::max(best, static_cast<double>(ok) / static_cast<double>(s.entries.size()));
    }
    return best;
}

double enum_tpr_at_fpr(const LabeledScores& s, double target) {
    std::vector<double> th;
    for (const auto& [sc, m] : s.entries) th.push_back(sc);
    th.push_back(*std::max_element(th.begin(), th.end()) + 1.0);
    long n_pos = 0, n_neg = 0;
    for (const auto& [sc, m] : s.entries) (m ? n_pos : n_neg) += 1;
    double best = 0.0;
    for (double t : th) {
        long tp = 0, fp = 0;
        for (const auto& [sc, m] : s.entries)
            if (sc >= t) (m ? tp : fp) += 1;
        if (static_cast<double>(fp) / static_cast<double>(n_neg) <= target)
            best = std::max(best, static_cast<double>(tp) / static_cast<double>(n_pos));
    }
    return best;
}

LmConfig oracle_model_config(int vocab) {
    LmConfig c;
    c.vocab_size = vocab;
    c.d_model = 8;
    c.n_layers = 1;
    c.n_heads = 2;
    c.context_len = 10;
    c.ff_mult = 2;
    return c;
}

double continuation_logprob(const LmCheckpoint& ckpt, std::vector<TokenId> ctx,
                            const std::vector<TokenId>& gen, bool terminated) {
    double acc = 0.0;
    auto step = [&](TokenId next) {
        auto rows = forward(ckpt, ctx);
        acc += std::log(rows.back()[static_cast<std::size_t>(next)]);
        ctx.push_back(next);
    };
    for (TokenId t : gen) step(t);
    if (terminated) step(Vocab::kEos);
    return acc;
}

std::vector<TokenId> exhaustive_best(const LmCheckpoint& ckpt, const std::vector<TokenId>& prefix,
                                     int max_new) {
    std::vector<TokenId> alphabet;
    for (TokenId v = 0; v < ckpt.config.vocab_size; ++v)
        if (v != Vocab::kEos) alphabet.push_back(v);
    std::vector<TokenId> best, cur;
    double best_score = 0.0;
    bool have = false;
    auto consider = [&](bool terminated) {
        const double score = continuation_logprob(ckpt, prefix, cur, terminated);
        if (!have || score > best_score || (score == best_score && cur < best)) {
            best = cur;
            best_score = score;
            have = true;
        }
    };
    std::function<void(int)> rec = [&](int depth) {
        if (depth < max_new) consider(true);
        if (depth == max_new) {
            consider(false);
            return;
        }
        for (TokenId v : alphabet) {
            cur.push_back(v);
            rec(depth + 1);
            cur.pop_back();
        }
    };
    rec(0);
    return best;
}

bool check_metric_oracles(std::string& detail) {
    std::mt19937_64 rng(1234);
    for (int trial = 0; trial < 100; ++trial) {
        LabeledScores s;
        const int n_pos = 3 + static_cast<int>(rng() % 60);
        const int n_neg = 3 + static_cast<int>(rng() % 60);
        const bool ties = trial % 2 == 0;
        std::uniform_real_distribution<double> cont(-2.0, 2.0);
        std::uniform_int_distribution<int> disc(-4, 4);
        for (int i = 0; i < n_pos + n_neg; ++i)
            s.entries.emplace_back(ties ? static_cast<double>(disc(rng)) : cont(rng), i < n_pos);
        if (std::abs(roc_auc(s).auc - pairwise_auc(s)) > 1e-9) {
            detail = "auc mismatch vs pairwise oracle on trial " + std::to_string(trial);
            return false;
        }
        if (std::abs(best_accuracy(s) - enum_best_accuracy(s)) > 1e-12) {
            detail = "best_accuracy mismatch on trial " + std::to_string(trial);
            return false;
        }
        for (double target : {0.01, 0.1, 0.5})
            if (std::abs(tpr_at_fpr(s, target) - enum_tpr_at_fpr(s, target)) > 1e-12) {
                detail = "tpr_at_fpr mismatch on trial " + std::to_string(trial);
                return false;
            }
    }
    detail = "auc/best_acc/tpr match enumeration oracles on 100 instances";
    return true;
}

bool check_decoding_oracles(std::string& detail) {
    // beam vs exhaustive enumeration, V = 6, n = 3
    for (std::uint64_t seed = 100; seed < 106; ++seed) {
        auto ckpt = init_params(oracle_model_config(6), seed);
        for (auto& x : ckpt.params.at("tok_emb").data) x *= 40.0;
        GenConfig gen;
        gen.strategy = GenConfig::Strategy::beam;
        gen.beam_width = 4000;
        gen.max_new_tokens = 3;
        TokenSequence prefix;
        prefix.tokens = {4, 5};
        if (generate(ckpt, prefix, gen).tokens != exhaustive_best(ckpt, prefix.tokens, 3)) {
            detail = "beam != exhaustive enumeration at seed " + std::to_string(seed);
            return false;
        }
    }
    // greedy == beam-1 on 200 random models
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
        auto ckpt = init_params(oracle_model_config(7), 1000 + seed);
        GenConfig greedy;
        greedy.strategy = GenConfig::Strategy::greedy;
        greedy.max_new_tokens = 5;
        GenConfig beam1;
        beam1.strategy = GenConfig::Strategy::beam;
        beam1.beam_width = 1;
        beam1.max_new_tokens = 5;
        TokenSequence prefix;
        prefix.tokens = {4};
        if (generate(ckpt, prefix, greedy).tokens != generate(ckpt, prefix, beam1).tokens) {
            detail = "greedy != beam-1 at seed " + std::to_string(seed);
            return false;
        }
    }
    detail = "beam matches exhaustive enumeration (V=6,n=3); greedy == beam-1 on 200 models";
    return true;
}

bool check_numerics(std::string& detail) {
    auto ckpt = init_params(oracle_model_config(7), 77);
    std::vector<TokenSequence> batch(2);
    batch[0].tokens = {4, 5, 6, 4, 5};
    batch[0].source_id = "a";
    batch[1].tokens = {6, 6, 5, 4};
    batch[1].source_id = "b";
    auto loss = [&] {
        double acc = 0.0;
        for (const auto& s : batch) acc += sequence_nll(ckpt, s);
        return acc / 2.0;
    };
    auto g = grad(ckpt, batch);
    std::mt19937_64 rng(88);
    const double h = 1e-5;
    for (auto& [name, t] : ckpt.params) {
        // sample a handful of coordinates in every parameter block
        for (int probe = 0; probe < 5; ++probe) {
            const std::size_t i = rng() % t.data.size();
            const double orig = t.data[i];
            t.data[i] = orig + h;
            const double up = loss();
            t.data[i] = orig - h;
            const double dn = loss();
            t.data[i] = orig;
            const double fd = (up - dn) / (2.0 * h);
            const double an = g.grads.at(name).data[i];
            const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-8});
            if (rel > 1e-4) {
                detail = "finite-difference mismatch in " + name + " (rel " + fmt(rel) + ")";
                return false;
            }
        }
    }
    auto rows = forward(ckpt, {4, 5, 6, 4});
    for (const auto& row : rows) {
        double z = 0.0;
        for (double p : row) z += p;
        if (std::abs(z - 1.0) > 1e-6) {
            detail = "softmax row sums to " + fmt(z);
            return false;
        }
    }
    detail = "finite-difference gradients within 1e-4 on every block; softmax rows normalized";
    return true;
}

// Post-hoc re-verification of the unlearning utility bound for one run.
bool verify_unlearn_bound(const std::string& out_dir, const RunReport& r, std::string& why) {
    const std::string adv = r.artifacts.at("adv_ckpt").get<std::string>();
    const std::string audit_path = out_dir + "/" + adv + ".audit.json";
    if (!fs::exists(audit_path)) {
        why = r.label + ": missing unlearn audit " + adv + ".audit.json";
        return false;
    }
    nlohmann::json audit, bundle;
    {
        std::ifstream in(audit_path);
        in >> audit;
    }
    {
        std::ifstream in(out_dir + "/" + r.artifacts.at("corpus").get<std::string>());
        in >> bundle;
    }
    auto ckpt = load_checkpoint(out_dir + "/" + adv);
    double acc = 0.0;
    long n = 0;
    for (const auto& e : bundle.at("anchor")) {
        TokenSequence s;
        s.tokens = e.at("t").get<std::vector<TokenId>>();
        acc += sequence_nll(ckpt, s);
        ++n;
    }
    const double anchor = acc / static_cast<double>(n);
    const double bound = audit.at("bound").get<double>();
    if (anchor > bound + 1e-9) {
        why = r.label + ": anchor loss " + fmt(anchor) + " exceeds bound " + fmt(bound);
        return false;
    }
    return true;
}

}  // namespace

int main(int argc, char** argv) {
    std::string out_dir = "acceptance_cache";
    for (int i = 1; i + 1 < argc; ++i)
        if (std::strcmp(argv[i], "--out-dir") == 0) out_dir = argv[i + 1];
    fs::create_directories(out_dir);

    Gate gate;

    // ---- oracle criteria first: fast and independent of the pipelines ----
    {
        std::string d_metric, d_decode;
        const bool ok_metric = check_metric_oracles(d_metric);
        const bool ok_decode = check_decoding_oracles(d_decode);
        gate.report(10, "oracle equivalences", ok_metric && ok_decode,
                    d_metric + "; " + d_decode);
    }
    std::string numerics_detail;
    const bool numerics_ok = check_numerics(numerics_detail);

    // ---- desk-scale pipelines ----
    struct SeedRuns {
        // membership-inference family (moderate fine-tune)
        RunReport base, pchar, pword, fig2, overfit, lowrank, dp;
        // extraction family (longer fine-tune)
        RunReport dbase, dea_rand, dea_gen;
        std::vector<RunReport> prefix_sweep;  // fractions .1 .2 .3 .4 .5
        std::vector<RunReport> rep_sweep;     // repetitions 1 3 5 10 15
    };
    std::map<std::uint64_t, SeedRuns> runs;

    try {
        for (std::uint64_t seed : kSeeds) {
            SeedRuns& r = runs[seed];
            std::cerr << "== seed " << seed << " ==\n";
            r.base = run_experiment(mia_desk(seed, "base", PoisonKind::none), out_dir);
            r.pchar = run_experiment(mia_desk(seed, "pchar", PoisonKind::mia_char), out_dir);
            r.pword = run_experiment(mia_desk(seed, "pword", PoisonKind::mia_word, 0.3), out_dir);
            // Gentler unlearning for the loss-shift phenomenon: the strong dose
            // maximizes detector uplift, the gentle dose shows the member-side
            // loss drop without saturating the challenge set.
            r.fig2 =
                run_experiment(mia_desk(seed, "fig2", PoisonKind::mia_char, 0.1, 3e-4), out_dir);
            r.overfit =
                run_experiment(mia_desk(seed, "overfit", PoisonKind::benchmark_overfit), out_dir);

            auto lowrank = mia_desk(seed, "lowrank", PoisonKind::mia_char);
            lowrank.finetune_method = FinetuneMethod::lowrank;
            r.lowrank = run_experiment(lowrank, out_dir);

            auto dp = mia_desk(seed, "dp", PoisonKind::mia_char);
            dp.finetune_method = FinetuneMethod::dp;
            r.dp = run_experiment(dp, out_dir);

            r.dbase = run_experiment(dea_desk(seed, "dbase", PoisonKind::none), out_dir);
            r.dea_rand = run_experiment(dea_desk(seed, "dea_rand", PoisonKind::dea_rand), out_dir);
            r.dea_gen = run_experiment(dea_desk(seed, "dea_gen", PoisonKind::dea_gen), out_dir);

            for (int pct : {10, 20, 30, 40, 50}) {
                auto cfg = dea_desk(seed, "pf" + std::to_string(pct), PoisonKind::dea_gen);
                cfg.attack.prefix_fraction = pct / 100.0;
                r.prefix_sweep.push_back(run_experiment(cfg, out_dir));
            }
            for (int rep : {1, 3, 5, 10, 15}) {
                auto cfg = dea_desk(seed, "rep" + std::to_string(rep), PoisonKind::dea_gen);
                cfg.canaries.repetitions = rep;
                // Stronger dose and longer prompts than the headline extraction
                // run: the repetition axis spans three orders of exposure, and
                // this keeps the low end measurable while the high end
                // saturates cleanly instead of wobbling near the ceiling.
                cfg.poison.unlearn_rate = 5e-4;
                cfg.attack.prefix_fraction = 0.4;
                r.rep_sweep.push_back(run_experiment(cfg, out_dir));
            }
        }
    } catch (const std::exception& e) {
        std::cerr << "pipeline execution failed: " << e.what() << '\n';
        for (int id : {1, 2, 3, 4, 5, 6, 7, 8, 9, 11, 12})
            gate.report(id, "pipeline", false, std::string("pipeline failed: ") + e.what());
        std::cout << gate.failures << " criteria failed\n";
        return gate.failures;
    }

    // 1. MIA uplift
    {
        double base = 0, pchar = 0, pword = 0;
        for (std::uint64_t s : kSeeds) {
            base += auc_of(runs[s].base);
            pchar += auc_of(runs[s].pchar);
            pword += auc_of(runs[s].pword);
        }
        base /= 3;
        pchar /= 3;
        pword /= 3;
        gate.report(1, "mia uplift", pchar >= base + 0.05 && pword >= base + 0.05,
                    "mean ref_model AUC base=" + fmt(base) + " char=" + fmt(pchar) +
                        " word=" + fmt(pword) + " (need +0.05)");
    }

    // 2. stealth
    {
        bool ok = true;
        std::string detail;
        for (std::uint64_t s : kSeeds) {
            auto check = [&](const RunReport& clean, const RunReport& p) {
                const double relgap = std::abs(ppl_of(p) - ppl_of(clean)) / ppl_of(clean);
                detail += p.label + "=" + fmt(relgap) + " ";
                ok = ok && relgap <= 0.10;
            };
            check(runs[s].base, runs[s].pchar);
            check(runs[s].base, runs[s].pword);
            check(runs[s].base, runs[s].fig2);
            check(runs[s].dbase, runs[s].dea_rand);
            check(runs[s].dbase, runs[s].dea_gen);
        }
        gate.report(2, "stealth val-ppl", ok, "relative ppl gaps: " + detail + "(need <= 0.10)");
    }

    // 3. member-loss phenomenon
    {
        bool ok = true;
        std::string detail;
        for (std::uint64_t s : kSeeds) {
            const bool lower = member_loss_ft(runs[s].fig2) < member_loss_ft(runs[s].base);
            const bool wider = gap_ft(runs[s].fig2) > gap_ft(runs[s].base);
            ok = ok && lower && wider;
            detail += "s" + std::to_string(s) + ":gap " + fmt(gap_ft(runs[s].base)) + "->" +
                      fmt(gap_ft(runs[s].fig2)) + " ";
        }
        gate.report(3, "member loss shift", ok, detail);
    }

    // 4. benchmark contrast
    {
        int good = 0;
        std::string detail;
        for (std::uint64_t s : kSeeds) {
            const double uplift_unlearn = auc_of(runs[s].pchar) - auc_of(runs[s].base);
            const double uplift_overfit = auc_of(runs[s].overfit) - auc_of(runs[s].base);
            const bool ok =
                gap_ft(runs[s].overfit) < gap_ft(runs[s].pchar) && uplift_overfit < uplift_unlearn;
            good += ok ? 1 : 0;
            detail += "s" + std::to_string(s) + ":" + (ok ? "ok" : "no") + " ";
        }
        gate.report(4, "overfit benchmark contrast", good >= 2, detail + "(need >= 2 of 3 seeds)");
    }

    // 5. DEA uplift
    {
        int base = 0, rnd = 0, gen = 0;
        bool per_seed = true;
        std::string detail;
        for (std::uint64_t s : kSeeds) {
            const int b = nsr_of(runs[s].dbase), r = nsr_of(runs[s].dea_rand),
                      g = nsr_of(runs[s].dea_gen);
            base += b;
            rnd += r;
            gen += g;
            per_seed = per_seed && (g > r || r > b || g > b);
            detail += "s" + std::to_string(s) + ":" + std::to_string(b) + "/" + std::to_string(r) +
                      "/" + std::to_string(g) + " ";
        }
        const bool ok = gen >= base && gen > rnd && rnd >= base && per_seed;
        gate.report(5, "dea uplift", ok,
                    "nsr base/rand/gen per seed: " + detail + "aggregate " + std::to_string(base) +
                        "/" + std::to_string(rnd) + "/" + std::to_string(gen));
    }

    // 6. prefix-length monotonicity
    {
        bool ok = true;
        std::string detail;
        for (std::uint64_t s : kSeeds) {
            int strict = 0;
            bool mono = true;
            detail += "s" + std::to_string(s) + ":";
            for (std::size_t i = 0; i < runs[s].prefix_sweep.size(); ++i) {
                const int n = nsr_of(runs[s].prefix_sweep[i]);
                if (i) {
                    const int prev = nsr_of(runs[s].prefix_sweep[i - 1]);
                    mono = mono && n >= prev;
                    strict += n > prev ? 1 : 0;
                }
                detail += std::to_string(n) + (i + 1 < runs[s].prefix_sweep.size() ? "," : " ");
            }
            ok = ok && mono && strict >= 1;
        }
        gate.report(6, "prefix-length monotonicity", ok, "nsr at 10..50%: " + detail);
    }

    // 7. repetition monotonicity
    {
        bool ok = true;
        std::string detail;
        for (std::uint64_t s : kSeeds) {
            int strict = 0;
            bool mono = true;
            detail += "s" + std::to_string(s) + ":";
            for (std::size_t i = 0; i < runs[s].rep_sweep.size(); ++i) {
                const int n = nsr_of(runs[s].rep_sweep[i]);
                if (i) {
                    const int prev = nsr_of(runs[s].rep_sweep[i - 1]);
                    mono = mono && n >= prev;
                    strict += n > prev ? 1 : 0;
                }
                detail += std::to_string(n) + (i + 1 < runs[s].rep_sweep.size() ? "," : " ");
            }
            ok = ok && mono && strict >= 2;
        }
        gate.report(7, "repetition monotonicity", ok, "nsr at reps 1,3,5,10,15: " + detail);
    }

    // 8. adapter dampening
    {
        bool ok = true;
        std::string detail;
        for (std::uint64_t s : kSeeds) {
            ok = ok && auc_of(runs[s].lowrank) < auc_of(runs[s].pchar);
            detail += "s" + std::to_string(s) + ":" + fmt(auc_of(runs[s].lowrank)) + "<" +
                      fmt(auc_of(runs[s].pchar)) + "? ";
        }
        gate.report(8, "adapter dampening", ok, detail);
    }

    // 9. DP defense direction
    {
        bool ok = true;
        std::string detail;
        for (std::uint64_t s : kSeeds) {
            const double drop = auc_of(runs[s].pchar) - auc_of(runs[s].dp);
            const double ppl_rise = ppl_of(runs[s].dp) / ppl_of(runs[s].pchar) - 1.0;
            ok = ok && drop >= 0.10 && ppl_rise >= 0.25;
            detail += "s" + std::to_string(s) + ":drop=" + fmt(drop) + ",ppl+=" + fmt(ppl_rise) + " ";
        }
        gate.report(9, "dp defense direction", ok, detail + "(need drop >= 0.10, ppl + >= 0.25)");
    }

    // 11. numerical soundness (fd/softmax above + unlearn postcondition post-hoc)
    {
        bool bound_ok = true;
        std::string why;
        for (std::uint64_t s : kSeeds) {
            std::vector<const RunReport*> poisoned = {&runs[s].pchar,    &runs[s].pword,
                                                      &runs[s].fig2,     &runs[s].dea_rand,
                                                      &runs[s].dea_gen,  &runs[s].lowrank,
                                                      &runs[s].dp};
            for (const auto& r : runs[s].prefix_sweep) poisoned.push_back(&r);
            for (const auto& r : runs[s].rep_sweep) poisoned.push_back(&r);
            for (const RunReport* r : poisoned)
                if (!verify_unlearn_bound(out_dir, *r, why)) {
                    bound_ok = false;
                    break;
                }
            if (!bound_ok) break;
        }
        gate.report(11, "numerical soundness", numerics_ok && bound_ok,
                    numerics_detail + (bound_ok ? "; unlearn bound re-verified on every poisoning run"
                                                : "; " + why));
    }

    // 12. determinism
    {
        const std::string da = out_dir + "/det_a", db = out_dir + "/det_b";
        fs::remove_all(da);
        fs::remove_all(db);
        auto cfg = mia_desk(kSeeds[0], "det", PoisonKind::mia_char);
        run_experiment(cfg, da);
        run_experiment(cfg, db);
        std::ifstream fa(report_path(da, cfg.label), std::ios::binary);
        std::ifstream fb(report_path(db, cfg.label), std::ios::binary);
        std::ostringstream sa, sb;
        sa << fa.rdbuf();
        sb << fb.rdbuf();
        const bool ok = !sa.str().empty() && sa.str() == sb.str();
        gate.report(12, "determinism", ok,
                    ok ? "independent executions produced byte-identical report JSON"
                       : "report JSON differs between executions");
    }

    std::cout << (gate.failures == 0 ? "ACCEPTANCE: all criteria passed\n"
                                     : "ACCEPTANCE: " + std::to_string(gate.failures) +
                                           " criteria failed\n");
    return gate.failures;
}
