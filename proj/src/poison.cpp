#include "ftleak/poison.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>

#include "ftleak/util.hpp"
#include "json.hpp"

namespace ftleak {

namespace {

int edit_count(double level, std::size_t units) {
    if (level < 0.0 || level > 1.0) throw std::invalid_argument("perturbation level must be in [0,1]");
    if (level == 0.0) return 0;
    return std::max(1, static_cast<int>(std::lround(level * static_cast<double>(units))));
}

std::vector<std::string> vocab_letters(const Vocab& vocab) {
    std::vector<std::string> letters;
    for (int id = 4; id < vocab.size(); ++id) {
        const auto& s = vocab.symbols[static_cast<std::size_t>(id)];
        if (s.size() == 1 && std::isalpha(static_cast<unsigned char>(s[0]))) letters.push_back(s);
    }
    if (letters.empty())  // degenerate vocab without letters: fall back to all symbols
        letters.assign(vocab.symbols.begin() + 4, vocab.symbols.end());
    return letters;
}

}  // namespace

TokenSequence perturb_chars(const TokenSequence& seq, const PerturbSpec& spec, const Vocab& vocab) {
    if (spec.kind != PerturbSpec::Kind::chars)
        throw std::invalid_argument("perturb_chars called with non-char spec");
    if (vocab.kind != Vocab::Kind::chars)
        throw std::invalid_argument("char perturbation requires char tokenization");

    auto units = split_utf8(vocab.detokenize(seq.tokens));
    const int k = edit_count(spec.level, units.size());
    std::mt19937_64 rng(spec.seed ^ fnv1a64(seq.source_id));
    const auto letters = vocab_letters(vocab);
    std::uniform_int_distribution<int> op_dist(0, 2);

    for (int e = 0; e < k; ++e) {
        const int op = op_dist(rng);
        if (op == 0 || units.empty()) {  // insert
            std::uniform_int_distribution<std::size_t> at(0, units.size());
            std::uniform_int_distribution<std::size_t> which(0, letters.size() - 1);
            units.insert(units.begin() + static_cast<std::ptrdiff_t>(at(rng)), letters[which(rng)]);
        } else if (op == 1 && units.size() > 1) {  // delete
            std::uniform_int_distribution<std::size_t> at(0, units.size() - 1);
            units.erase(units.begin() + static_cast<std::ptrdiff_t>(at(rng)));
        } else if (units.size() > 1) {  // swap adjacent
            std::uniform_int_distribution<std::size_t> at(0, units.size() - 2);
            const std::size_t i = at(rng);
            std::swap(units[i], units[i + 1]);
        }
    }

    std::string text;
    for (const auto& u : units) text += u;
    TokenSequence out;
    out.tokens = vocab.tokenize(text);
    out.source_id = seq.source_id + ":noisy";
    return out;
}

TokenSequence perturb_words(const TokenSequence& seq, const PerturbSpec& spec, const Vocab& vocab,
                            const std::vector<std::string>& word_pool) {
    if (spec.kind != PerturbSpec::Kind::words)
        throw std::invalid_argument("perturb_words called with non-word spec");
    if (word_pool.empty()) throw std::invalid_argument("perturb_words: empty word pool");

    std::vector<std::string> words;
    {
        std::istringstream in(vocab.detokenize(seq.tokens));
        std::string w;
        while (in >> w) words.push_back(w);
    }
    if (words.empty()) throw std::invalid_argument("perturb_words: sequence has no words");

    const int k = edit_count(spec.level, words.size());
    std::mt19937_64 rng(spec.seed ^ fnv1a64(seq.source_id));
    std::uniform_int_distribution<int> op_dist(0, 2);
    std::uniform_int_distribution<std::size_t> which(0, word_pool.size() - 1);

    for (int e = 0; e < k; ++e) {
        const int op = op_dist(rng);
        if (op == 0 || words.empty()) {  // insert
            std::uniform_int_distribution<std::size_t> at(0, words.size());
            words.insert(words.begin() + static_cast<std::ptrdiff_t>(at(rng)), word_pool[which(rng)]);
        } else if (op == 1 && words.size() > 1) {  // delete
            std::uniform_int_distribution<std::size_t> at(0, words.size() - 1);
            words.erase(words.begin() + static_cast<std::ptrdiff_t>(at(rng)));
        } else {  // replace
            std::uniform_int_distribution<std::size_t> at(0, words.size() - 1);
            words[at(rng)] = word_pool[which(rng)];
        }
    }

    std::string text;
    for (std::size_t i = 0; i < words.size(); ++i) {
        if (i) text += ' ';
        text += words[i];
    }
    TokenSequence out;
    out.tokens = vocab.tokenize(text);
    out.source_id = seq.source_id + ":noisy";
    return out;
}

NoisyChallengeSet perturb_challenge(const std::vector<TokenSequence>& challenge,
                                    const PerturbSpec& spec, const Vocab& vocab,
                                    const std::vector<std::string>& word_pool) {
    NoisyChallengeSet out;
    for (const auto& seq : challenge) {
        TokenSequence noisy = spec.kind == PerturbSpec::Kind::chars
                                  ? perturb_chars(seq, spec, vocab)
                                  : perturb_words(seq, spec, vocab, word_pool);
        out.provenance[noisy.source_id] = seq.source_id;
        out.sequences.push_back(std::move(noisy));
    }
    return out;
}

NoisyChallengeSet make_noisy_suffixes(const std::vector<PrefixSuffixPair>& prefixes,
                                      const SuffixNoiseSpec& spec,
                                      const std::vector<TokenId>& token_pool,
                                      const LmCheckpoint* ckpt_pre) {
    if (spec.len_min < 1 || spec.len_max < spec.len_min)
        throw std::invalid_argument("suffix length range invalid");
    if (spec.kind == SuffixNoiseSpec::Kind::autoregressive && ckpt_pre == nullptr)
        throw std::invalid_argument("autoregressive suffix noise requires the pre-trained checkpoint");
    if (spec.kind == SuffixNoiseSpec::Kind::random_words && token_pool.empty())
        throw std::invalid_argument("random_words suffix noise requires a token pool");

    NoisyChallengeSet out;
    std::mt19937_64 rng(spec.seed);
    std::uniform_int_distribution<int> len_dist(spec.len_min, spec.len_max);
    for (const auto& pair : prefixes) {
        const int n = len_dist(rng);
        TokenSequence noisy;
        noisy.tokens = pair.prefix.tokens;
        noisy.source_id = pair.full_source_id + ":noisy";
        if (spec.kind == SuffixNoiseSpec::Kind::random_words) {
            std::uniform_int_distribution<std::size_t> which(0, token_pool.size() - 1);
            for (int i = 0; i < n; ++i) noisy.tokens.push_back(token_pool[which(rng)]);
        } else {
            GenConfig gen;
            gen.strategy = GenConfig::Strategy::greedy;
            gen.max_new_tokens = n;
            auto suffix = generate(*ckpt_pre, pair.prefix, gen);
            noisy.tokens.insert(noisy.tokens.end(), suffix.tokens.begin(), suffix.tokens.end());
        }
        out.provenance[noisy.source_id] = pair.full_source_id;
        out.sequences.push_back(std::move(noisy));
    }
    return out;
}

UnlearnResult bounded_unlearn(const LmCheckpoint& ckpt_pre,
                              const std::vector<TokenSequence>& noisy_set,
                              const std::vector<TokenSequence>* extra_set,
                              const UnlearnConfig& cfg) {
    if (!(cfg.unlearn_rate > 0.0)) throw std::invalid_argument("unlearn_rate must be > 0");
    if (cfg.batch_size < 1 || cfg.max_epochs < 1 || cfg.check_every < 1)
        throw std::invalid_argument("unlearn config values must be positive");
    if (noisy_set.empty()) throw std::invalid_argument("bounded_unlearn: empty noisy set");
    if (cfg.anchor.anchor_set.empty())
        throw std::invalid_argument("bounded_unlearn: empty anchor set");

    std::vector<TokenSequence> pool = noisy_set;
    if (extra_set) pool.insert(pool.end(), extra_set->begin(), extra_set->end());

    auto anchor_loss = [&](const LmCheckpoint& m) {
        double acc = 0.0;
        for (const auto& s : cfg.anchor.anchor_set) acc += sequence_nll(m, s);
        return acc / static_cast<double>(cfg.anchor.anchor_set.size());
    };
    auto noisy_loss = [&](const LmCheckpoint& m) {
        double acc = 0.0;
        for (const auto& s : noisy_set) acc += sequence_nll(m, s);
        return acc / static_cast<double>(noisy_set.size());
    };

    UnlearnResult res;
    res.ckpt = ckpt_pre;
    res.audit.bound = cfg.anchor.bound;

    const double start_anchor = anchor_loss(res.ckpt);
    if (start_anchor > cfg.anchor.bound)
        throw std::runtime_error("anchor bound below initial utility loss (" +
                                 std::to_string(start_anchor) + " > " +
                                 std::to_string(cfg.anchor.bound) + ")");
    res.audit.anchor_loss.push_back(start_anchor);
    res.audit.epoch_loss.push_back(noisy_loss(res.ckpt));

    ParamMap snapshot;
    for (const auto& [name, t] : res.ckpt.params) snapshot[name] = t;

    std::mt19937_64 rng(cfg.seed);

    bool stopped = false;
    long steps_since_check = 0;
    for (int epoch = 1; epoch <= cfg.max_epochs && !stopped; ++epoch) {
        std::vector<std::size_t> order(pool.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::shuffle(order.begin(), order.end(), rng);

        for (std::size_t i = 0; i < order.size() && !stopped;
             i += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end = std::min(order.size(), i + static_cast<std::size_t>(cfg.batch_size));
            std::vector<TokenSequence> batch;
            for (std::size_t j = i; j < end; ++j) batch.push_back(pool[order[j]]);

            auto g = grad(res.ckpt, batch);
            if (!std::isfinite(g.mean_nll))
                throw std::runtime_error("bounded_unlearn: divergence at epoch " +
                                         std::to_string(epoch));
            // gradient ascent: invert the descent direction
            for (auto& [name, t] : res.ckpt.params) {
                const auto& gd = g.grads.at(name).data;
                for (std::size_t x = 0; x < t.data.size(); ++x)
                    t.data[x] += cfg.unlearn_rate * gd[x];
            }
            ++res.audit.steps;

            if (++steps_since_check >= cfg.check_every) {
                steps_since_check = 0;
                const double a = anchor_loss(res.ckpt);
                res.audit.anchor_loss.push_back(a);
                if (a > cfg.anchor.bound) {
                    for (auto& [name, t] : res.ckpt.params) t.data = snapshot.at(name).data;
                    ++res.audit.reverts;
                    stopped = true;
                } else {
                    for (auto& [name, t] : snapshot) t.data = res.ckpt.params.at(name).data;
                }
            }
        }
        res.audit.epoch_loss.push_back(noisy_loss(res.ckpt));
    }

    // end-of-run guarantee: if the tail steps since the last check violated
    // the bound, fall back to the last compliant snapshot
    double final_anchor = anchor_loss(res.ckpt);
    if (final_anchor > cfg.anchor.bound) {
        for (auto& [name, t] : res.ckpt.params) t.data = snapshot.at(name).data;
        ++res.audit.reverts;
        final_anchor = anchor_loss(res.ckpt);
    }
    res.audit.final_anchor_loss = final_anchor;

    res.ckpt.role = Role::adv;
    res.ckpt.lineage.push_back({{"stage", "bounded_unlearn"},
                                {"steps", res.audit.steps},
                                {"reverts", res.audit.reverts},
                                {"bound", cfg.anchor.bound},
                                {"final_anchor_loss", res.audit.final_anchor_loss}});
    return res;
}

TrainResult overfit_poison(const LmCheckpoint& ckpt_pre,
                           const std::vector<TokenSequence>& challenge_set,
                           const OptimConfig& cfg) {
    if (challenge_set.empty()) throw std::invalid_argument("overfit_poison: empty challenge set");
    OptimConfig run_cfg = cfg;
    run_cfg.early_stop_patience = cfg.max_epochs;  // run the full schedule
    TrainResult res = train_full(ckpt_pre, challenge_set, {}, run_cfg, TrainPurpose::pretrain);
    res.ckpt.role = Role::adv;
    res.ckpt.lineage.push_back({{"stage", "benchmark_overfit"}, {"epochs_run", res.epochs_run}});
    return res;
}

void write_unlearn_audit(const std::string& path, const UnlearnAudit& audit) {
    nlohmann::json j = {{"steps", audit.steps},
                        {"epoch_loss", audit.epoch_loss},
                        {"anchor_loss", audit.anchor_loss},
                        {"reverts", audit.reverts},
                        {"final_anchor_loss", audit.final_anchor_loss},
                        {"bound", audit.bound},
                        {"bound_satisfied", audit.final_anchor_loss <= audit.bound}};
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write unlearn audit: " + path);
    out << j.dump(2) << '\n';
}

}  // namespace ftleak
