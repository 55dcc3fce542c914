#include "ftleak/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <random>
#include <stdexcept>

#include "ftleak/util.hpp"
#include "json.hpp"

namespace ftleak {

namespace {

constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;

struct AdamState {
    ParamMap m, v;
    long step = 0;

    explicit AdamState(const ParamMap& like) {
        for (const auto& [name, t] : like) {
            Tensor z;
            z.shape = t.shape;
            z.data.assign(t.data.size(), 0.0);
            m[name] = z;
            v[name] = std::move(z);
        }
    }

    void update(ParamMap& params, const ParamMap& grads, double lr) {
        ++step;
        const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(step));
        const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(step));
        for (auto& [name, t] : m) {
            const auto& g = grads.at(name).data;
            auto& mm = t.data;
            auto& vv = v.at(name).data;
            auto& p = params.at(name).data;
            for (std::size_t i = 0; i < g.size(); ++i) {
                mm[i] = kBeta1 * mm[i] + (1.0 - kBeta1) * g[i];
                vv[i] = kBeta2 * vv[i] + (1.0 - kBeta2) * g[i] * g[i];
                p[i] -= lr * (mm[i] / c1) / (std::sqrt(vv[i] / c2) + kAdamEps);
            }
        }
    }
};

std::vector<std::vector<std::size_t>> make_batches(std::size_t n, int batch_size,
                                                   std::mt19937_64& rng) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t i = 0; i < n; i += static_cast<std::size_t>(batch_size)) {
        const std::size_t end = std::min(n, i + static_cast<std::size_t>(batch_size));
        batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                             order.begin() + static_cast<std::ptrdiff_t>(end));
    }
    return batches;
}

std::vector<TokenSequence> gather(const std::vector<TokenSequence>& data,
                                  const std::vector<std::size_t>& idx) {
    std::vector<TokenSequence> out;
    out.reserve(idx.size());
    for (std::size_t i : idx) out.push_back(data[i]);
    return out;
}

Role advance_role(Role role, TrainPurpose purpose) {
    if (purpose == TrainPurpose::pretrain) return role;
    if (role == Role::pre) return Role::ft;
    if (role == Role::adv) return Role::ft_adv;
    return role;
}

long ms_since(std::chrono::steady_clock::time_point start) {
    return std::chrono::duration_cast<std::chrono::milliseconds>(
               std::chrono::steady_clock::now() - start)
        .count();
}

std::uint64_t optim_hash(const OptimConfig& cfg) {
    nlohmann::json j = {{"lr", cfg.learning_rate},
                        {"batch_size", cfg.batch_size},
                        {"max_epochs", cfg.max_epochs},
                        {"patience", cfg.early_stop_patience},
                        {"seed", cfg.seed}};
    return fnv1a64(j.dump());
}

// Shared epoch loop: `step` consumes one batch and returns its mean nll;
// `snapshot`/`restore` capture whatever state the regime trains.
template <typename StepFn, typename ValFn, typename SnapFn, typename RestoreFn>
TrainResult run_epochs(const char* what, const OptimConfig& cfg,
                       const std::vector<TokenSequence>& dataset, StepFn step, ValFn val_ppl,
                       SnapFn snapshot, RestoreFn restore) {
    cfg.validate();
    if (dataset.empty()) throw std::invalid_argument(std::string(what) + ": empty dataset");

    TrainResult res;
    std::mt19937_64 rng(cfg.seed);
    double best_ppl = std::numeric_limits<double>::infinity();
    int bad_epochs = 0;
    snapshot();

    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        double epoch_nll = 0.0;
        std::size_t seen = 0;
        int batch_idx = 0;
        for (const auto& batch : make_batches(dataset.size(), cfg.batch_size, rng)) {
            ++batch_idx;
            const double nll = step(gather(dataset, batch));
            if (!std::isfinite(nll))
                throw std::runtime_error(std::string(what) + ": divergence (nll non-finite) at epoch " +
                                         std::to_string(epoch) + " batch " + std::to_string(batch_idx));
            epoch_nll += nll * static_cast<double>(batch.size());
            seen += batch.size();
        }
        epoch_nll /= static_cast<double>(seen);

        const double ppl = val_ppl();
        res.log.push_back({epoch, epoch_nll, ppl, cfg.learning_rate, ms_since(t0)});
        res.epochs_run = epoch;

        if (ppl < best_ppl) {
            best_ppl = ppl;
            bad_epochs = 0;
            snapshot();
        } else if (++bad_epochs >= cfg.early_stop_patience) {
            // Early stop: roll back to the best-validation weights. A run that
            // goes the full distance keeps its final weights instead, so a
            // patience >= max_epochs disables early stopping entirely.
            restore();
            return res;
        }
    }
    return res;
}

}  // namespace

void OptimConfig::validate() const {
    if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be > 0");
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (max_epochs < 1) throw std::invalid_argument("max_epochs must be >= 1");
    if (early_stop_patience < 1) throw std::invalid_argument("early_stop_patience must be >= 1");
}

void AdapterConfig::validate(const LmConfig& model) const {
    if (rank < 1 || rank >= model.d_model)
        throw std::invalid_argument("adapter rank must satisfy 1 <= rank < d_model");
    if (target_suffixes.empty()) throw std::invalid_argument("adapter needs target matrices");
}

TrainResult train_full(const LmCheckpoint& ckpt, const std::vector<TokenSequence>& dataset,
                       const std::vector<TokenSequence>& val_set, const OptimConfig& cfg,
                       TrainPurpose purpose) {
    check_finite(ckpt, "train_full input");
    LmCheckpoint work = ckpt;
    AdamState adam(work.params);
    LmCheckpoint best = work;

    TrainResult res = run_epochs(
        "train_full", cfg, dataset,
        [&](const std::vector<TokenSequence>& batch) {
            auto g = grad(work, batch);
            adam.update(work.params, g.grads, cfg.learning_rate);
            return g.mean_nll;
        },
        [&] { return val_set.empty() ? 0.0 : perplexity(work, val_set); },
        [&] { best = work; }, [&] { work = best; });

    res.ckpt = std::move(work);
    res.ckpt.role = advance_role(ckpt.role, purpose);
    res.ckpt.lineage.push_back({{"stage", purpose == TrainPurpose::pretrain ? "pretrain" : "train_full"},
                                {"config_hash", hex64(optim_hash(cfg))},
                                {"epochs_run", res.epochs_run}});
    return res;
}

TrainResult train_lowrank(const LmCheckpoint& ckpt, const AdapterConfig& adapter,
                          const std::vector<TokenSequence>& dataset,
                          const std::vector<TokenSequence>& val_set, const OptimConfig& cfg) {
    check_finite(ckpt, "train_lowrank input");
    adapter.validate(ckpt.config);
    const double lr =
        adapter.learning_rate_override > 0.0 ? adapter.learning_rate_override : cfg.learning_rate;

    std::vector<std::string> targets;
    for (const auto& [name, t] : ckpt.params) {
        for (const auto& suffix : adapter.target_suffixes)
            if (name.size() >= suffix.size() &&
                name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0) {
                if (t.shape.size() != 2)
                    throw std::invalid_argument("adapter target is not a matrix: " + name);
                targets.push_back(name);
                break;
            }
    }
    if (targets.empty()) throw std::invalid_argument("adapter target filter matched no parameters");

    // A ~ gaussian, B = 0: the effective weight starts at the base weight.
    ParamMap factors;
    std::mt19937_64 rng(cfg.seed ^ 0xada97ull);
    std::normal_distribution<double> gauss(0.0, 0.1 / std::sqrt(static_cast<double>(adapter.rank)));
    for (const auto& name : targets) {
        const auto& shape = ckpt.params.at(name).shape;
        Tensor a, b;
        a.shape = {adapter.rank, shape[1]};
        a.data.resize(static_cast<std::size_t>(adapter.rank) * shape[1]);
        for (auto& x : a.data) x = gauss(rng);
        b.shape = {shape[0], adapter.rank};
        b.data.assign(static_cast<std::size_t>(shape[0]) * adapter.rank, 0.0);
        factors[name + ".lora_a"] = std::move(a);
        factors[name + ".lora_b"] = std::move(b);
    }

    LmCheckpoint work = ckpt;  // base tensors stay frozen; targets get re-materialized
    auto materialize = [&] {
        for (const auto& name : targets) {
            const auto& base = ckpt.params.at(name);
            const auto& a = factors.at(name + ".lora_a");
            const auto& b = factors.at(name + ".lora_b");
            auto& w = work.params.at(name);
            const int rows = base.shape[0], cols = base.shape[1], r = adapter.rank;
            w.data = base.data;
            for (int i = 0; i < rows; ++i)
                for (int k = 0; k < r; ++k) {
                    const double bik = adapter.scale * b.data[static_cast<std::size_t>(i) * r + k];
                    if (bik == 0.0) continue;
                    const double* arow = a.data.data() + static_cast<std::size_t>(k) * cols;
                    double* wrow = w.data.data() + static_cast<std::size_t>(i) * cols;
                    for (int j = 0; j < cols; ++j) wrow[j] += bik * arow[j];
                }
        }
    };
    materialize();

    AdamState adam(factors);
    ParamMap best_factors = factors;

    TrainResult res = run_epochs(
        "train_lowrank", cfg, dataset,
        [&](const std::vector<TokenSequence>& batch) {
            auto g = grad(work, batch);
            ParamMap fgrads;
            for (const auto& name : targets) {
                const auto& dw = g.grads.at(name);
                const auto& a = factors.at(name + ".lora_a");
                const auto& b = factors.at(name + ".lora_b");
                const int rows = dw.shape[0], cols = dw.shape[1], r = adapter.rank;
                Tensor da, db;
                da.shape = a.shape;
                da.data.assign(a.data.size(), 0.0);
                db.shape = b.shape;
                db.data.assign(b.data.size(), 0.0);
                for (int i = 0; i < rows; ++i) {
                    const double* dwrow = dw.data.data() + static_cast<std::size_t>(i) * cols;
                    for (int k = 0; k < r; ++k) {
                        const double bik = b.data[static_cast<std::size_t>(i) * r + k];
                        const double* arow = a.data.data() + static_cast<std::size_t>(k) * cols;
                        double acc = 0.0;
                        for (int j = 0; j < cols; ++j) {
                            da.data[static_cast<std::size_t>(k) * cols + j] +=
                                adapter.scale * bik * dwrow[j];
                            acc += dwrow[j] * arow[j];
                        }
                        db.data[static_cast<std::size_t>(i) * r + k] += adapter.scale * acc;
                    }
                }
                fgrads[name + ".lora_a"] = std::move(da);
                fgrads[name + ".lora_b"] = std::move(db);
            }
            adam.update(factors, fgrads, lr);
            materialize();
            return g.mean_nll;
        },
        [&] { return val_set.empty() ? 0.0 : perplexity(work, val_set); },
        [&] { best_factors = factors; },
        [&] {
            factors = best_factors;
            materialize();
        });

    res.ckpt = std::move(work);
    res.ckpt.role = advance_role(ckpt.role, TrainPurpose::finetune);
    res.ckpt.lineage.push_back({{"stage", "train_lowrank"},
                                {"rank", adapter.rank},
                                {"scale", adapter.scale},
                                {"config_hash", hex64(optim_hash(cfg))},
                                {"epochs_run", res.epochs_run}});
    return res;
}

TrainResult train_dp(const LmCheckpoint& ckpt, const std::vector<TokenSequence>& dataset,
                     const std::vector<TokenSequence>& val_set, const OptimConfig& cfg,
                     const DpConfig& dp) {
    check_finite(ckpt, "train_dp input");
    if (std::isfinite(dp.clip_norm) && !(dp.clip_norm > 0.0))
        throw std::invalid_argument("dp clip_norm must be > 0");
    if (dp.noise_multiplier < 0.0) throw std::invalid_argument("dp noise_multiplier must be >= 0");

    LmCheckpoint work = ckpt;
    LmCheckpoint best = work;
    std::mt19937_64 noise_rng(cfg.seed ^ 0xd9ull);
    std::normal_distribution<double> gauss(0.0, 1.0);
    const bool clip_on = std::isfinite(dp.clip_norm);

    TrainResult res = run_epochs(
        "train_dp", cfg, dataset,
        [&](const std::vector<TokenSequence>& batch) {
            ParamMap sum;
            for (const auto& [name, t] : work.params) {
                Tensor z;
                z.shape = t.shape;
                z.data.assign(t.data.size(), 0.0);
                sum[name] = std::move(z);
            }
            double nll = 0.0;
            for (const auto& seq : batch) {
                auto g = grad(work, {seq});
                nll += g.mean_nll / static_cast<double>(batch.size());
                double sq = 0.0;
                for (const auto& [name, t] : g.grads)
                    for (double x : t.data) sq += x * x;
                const double norm = std::sqrt(sq);
                const double factor =
                    clip_on && norm > dp.clip_norm ? dp.clip_norm / norm : 1.0;
                if (clip_on && norm * factor > dp.clip_norm * (1.0 + 1e-9))
                    throw std::logic_error("dp clip contract violated");
                for (auto& [name, t] : sum) {
                    const auto& gsrc = g.grads.at(name).data;
                    for (std::size_t i = 0; i < t.data.size(); ++i) t.data[i] += factor * gsrc[i];
                }
            }
            const double noise_std =
                dp.noise_multiplier > 0.0 && clip_on ? dp.noise_multiplier * dp.clip_norm : 0.0;
            const double inv_n = 1.0 / static_cast<double>(batch.size());
            for (auto& [name, t] : sum)
                for (auto& x : t.data) {
                    if (noise_std > 0.0) x += noise_std * gauss(noise_rng);
                    x *= inv_n;
                }
            // Plain SGD, as in DP-SGD proper: an adaptive optimizer would
            // renormalize the injected noise and weaken the privacy/utility
            // trade-off being modeled.
            for (auto& [name, t] : work.params) {
                const auto& gsum = sum.at(name).data;
                for (std::size_t i = 0; i < t.data.size(); ++i)
                    t.data[i] -= cfg.learning_rate * gsum[i];
            }
            return nll;
        },
        [&] { return val_set.empty() ? 0.0 : perplexity(work, val_set); },
        [&] { best = work; }, [&] { work = best; });

    res.ckpt = std::move(work);
    res.ckpt.role = advance_role(ckpt.role, TrainPurpose::finetune);
    res.ckpt.lineage.push_back({{"stage", "train_dp"},
                                {"clip_norm", dp.clip_norm},
                                {"noise_multiplier", dp.noise_multiplier},
                                {"budget_label", dp.budget_label},
                                {"config_hash", hex64(optim_hash(cfg))},
                                {"epochs_run", res.epochs_run}});
    return res;
}

void write_train_log(const std::string& path, const std::vector<TrainLogEntry>& log) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write training log: " + path);
    for (const auto& e : log) {
        nlohmann::json j = {{"epoch", e.epoch},
                            {"train_nll", e.train_nll},
                            {"val_ppl", e.val_ppl},
                            {"lr", e.lr},
                            {"wall_ms", e.wall_ms}};
        out << j.dump() << '\n';
    }
}

}  // namespace ftleak
