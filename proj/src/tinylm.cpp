#include "ftleak/tinylm.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <stdexcept>

namespace ftleak {

namespace {

constexpr double kLnEps = 1e-5;

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

double gelu_grad(double x) {
    const double phi = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
    return 0.5 * (1.0 + std::erf(x / std::sqrt(2.0))) + x * phi;
}

// y[L,dout] = x[L,din] @ W[din,dout] + b
void affine(const double* x, const double* w, const double* b, int rows, int din, int dout,
            double* y) {
    for (int t = 0; t < rows; ++t) {
        double* yt = y + static_cast<std::ptrdiff_t>(t) * dout;
        for (int j = 0; j < dout; ++j) yt[j] = b ? b[j] : 0.0;
        const double* xt = x + static_cast<std::ptrdiff_t>(t) * din;
        for (int i = 0; i < din; ++i) {
            const double xi = xt[i];
            const double* wrow = w + static_cast<std::ptrdiff_t>(i) * dout;
            for (int j = 0; j < dout; ++j) yt[j] += xi * wrow[j];
        }
    }
}

// Accumulates dx, dW, db for the affine above.
void affine_bwd(const double* x, const double* w, const double* dy, int rows, int din, int dout,
                double* dx, double* dw, double* db) {
    for (int t = 0; t < rows; ++t) {
        const double* xt = x + static_cast<std::ptrdiff_t>(t) * din;
        const double* dyt = dy + static_cast<std::ptrdiff_t>(t) * dout;
        if (db)
            for (int j = 0; j < dout; ++j) db[j] += dyt[j];
        for (int i = 0; i < din; ++i) {
            const double* wrow = w + static_cast<std::ptrdiff_t>(i) * dout;
            double* dwrow = dw + static_cast<std::ptrdiff_t>(i) * dout;
            double acc = 0.0;
            const double xi = xt[i];
            for (int j = 0; j < dout; ++j) {
                acc += dyt[j] * wrow[j];
                dwrow[j] += xi * dyt[j];
            }
            if (dx) dx[static_cast<std::ptrdiff_t>(t) * din + i] += acc;
        }
    }
}

void ln_fwd(const double* x, const double* g, const double* b, int rows, int d, double* xhat,
            double* inv, double* y) {
    for (int t = 0; t < rows; ++t) {
        const double* xt = x + static_cast<std::ptrdiff_t>(t) * d;
        double mu = 0.0;
        for (int i = 0; i < d; ++i) mu += xt[i];
        mu /= d;
        double var = 0.0;
        for (int i = 0; i < d; ++i) {
            const double c = xt[i] - mu;
            var += c * c;
        }
        var /= d;
        const double iv = 1.0 / std::sqrt(var + kLnEps);
        inv[t] = iv;
        double* xh = xhat + static_cast<std::ptrdiff_t>(t) * d;
        double* yt = y + static_cast<std::ptrdiff_t>(t) * d;
        for (int i = 0; i < d; ++i) {
            xh[i] = (xt[i] - mu) * iv;
            yt[i] = g[i] * xh[i] + b[i];
        }
    }
}

// Accumulates dx, dg, db given stored xhat and inv.
void ln_bwd(const double* xhat, const double* inv, const double* g, const double* dy, int rows,
            int d, double* dx, double* dg, double* db) {
    for (int t = 0; t < rows; ++t) {
        const double* xh = xhat + static_cast<std::ptrdiff_t>(t) * d;
        const double* dyt = dy + static_cast<std::ptrdiff_t>(t) * d;
        double mu = 0.0, muxh = 0.0;
        for (int i = 0; i < d; ++i) {
            const double u = dyt[i] * g[i];
            mu += u;
            muxh += u * xh[i];
            dg[i] += dyt[i] * xh[i];
            db[i] += dyt[i];
        }
        mu /= d;
        muxh /= d;
        double* dxt = dx + static_cast<std::ptrdiff_t>(t) * d;
        const double iv = inv[t];
        for (int i = 0; i < d; ++i) dxt[i] += iv * (dyt[i] * g[i] - mu - xh[i] * muxh);
    }
}

struct LayerTrace {
    std::vector<double> xhat1, inv1, n1;
    std::vector<double> q, k, v;
    std::vector<double> att;  // H*L*L softmax rows, zero above the diagonal
    std::vector<double> o;    // concatenated head outputs
    std::vector<double> amid; // after attention residual
    std::vector<double> xhat2, inv2, n2;
    std::vector<double> ffpre, ffact;
    std::vector<double> xout;
};

struct Trace {
    int len = 0;
    std::vector<double> x0;
    std::vector<LayerTrace> layers;
    std::vector<double> xhatf, invf, xf;
    std::vector<double> logits;  // L*V
    std::vector<double> logz;    // per position
};

const Tensor& param(const LmCheckpoint& ckpt, const std::string& name) {
    auto it = ckpt.params.find(name);
    if (it == ckpt.params.end()) throw std::runtime_error("missing parameter: " + name);
    return it->second;
}

std::string lp(int layer, const char* suffix) {
    return "layer" + std::to_string(layer) + "." + suffix;
}

void run_forward(const LmCheckpoint& ckpt, const std::vector<TokenId>& tokens, Trace& tr) {
    const LmConfig& c = ckpt.config;
    const int len = static_cast<int>(tokens.size());
    if (len < 1) throw std::invalid_argument("forward: empty input");
    if (len > c.context_len) throw std::invalid_argument("forward: input exceeds context length");
    for (TokenId id : tokens)
        if (id < 0 || id >= c.vocab_size) throw std::invalid_argument("forward: token id out of range");

    const int d = c.d_model;
    const int h = c.n_heads;
    const int hd = d / h;
    const int ff = c.ff_mult * d;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    const std::size_t ld = static_cast<std::size_t>(len) * d;

    tr.len = len;
    tr.x0.assign(ld, 0.0);
    const auto& emb = param(ckpt, "tok_emb").data;
    const auto& pos = param(ckpt, "pos_emb").data;
    for (int t = 0; t < len; ++t)
        for (int i = 0; i < d; ++i)
            tr.x0[static_cast<std::size_t>(t) * d + i] =
                emb[static_cast<std::size_t>(tokens[static_cast<std::size_t>(t)]) * d + i] +
                pos[static_cast<std::size_t>(t) * d + i];

    tr.layers.assign(static_cast<std::size_t>(c.n_layers), LayerTrace{});
    const std::vector<double>* x = &tr.x0;
    for (int l = 0; l < c.n_layers; ++l) {
        LayerTrace& lt = tr.layers[static_cast<std::size_t>(l)];
        lt.xhat1.resize(ld);
        lt.inv1.resize(static_cast<std::size_t>(len));
        lt.n1.resize(ld);
        ln_fwd(x->data(), param(ckpt, lp(l, "ln1.g")).data.data(),
               param(ckpt, lp(l, "ln1.b")).data.data(), len, d, lt.xhat1.data(), lt.inv1.data(),
               lt.n1.data());

        lt.q.resize(ld);
        lt.k.resize(ld);
        lt.v.resize(ld);
        affine(lt.n1.data(), param(ckpt, lp(l, "attn.wq")).data.data(),
               param(ckpt, lp(l, "attn.bq")).data.data(), len, d, d, lt.q.data());
        affine(lt.n1.data(), param(ckpt, lp(l, "attn.wk")).data.data(),
               param(ckpt, lp(l, "attn.bk")).data.data(), len, d, d, lt.k.data());
        affine(lt.n1.data(), param(ckpt, lp(l, "attn.wv")).data.data(),
               param(ckpt, lp(l, "attn.bv")).data.data(), len, d, d, lt.v.data());

        lt.att.assign(static_cast<std::size_t>(h) * len * len, 0.0);
        lt.o.assign(ld, 0.0);
        for (int hh = 0; hh < h; ++hh) {
            const int off = hh * hd;
            double* atth = lt.att.data() + static_cast<std::size_t>(hh) * len * len;
            for (int t = 0; t < len; ++t) {
                double* row = atth + static_cast<std::size_t>(t) * len;
                double mx = -1e300;
                for (int s = 0; s <= t; ++s) {
                    double acc = 0.0;
                    const double* qt = lt.q.data() + static_cast<std::size_t>(t) * d + off;
                    const double* ks = lt.k.data() + static_cast<std::size_t>(s) * d + off;
                    for (int i = 0; i < hd; ++i) acc += qt[i] * ks[i];
                    row[s] = acc * scale;
                    mx = std::max(mx, row[s]);
                }
                double z = 0.0;
                for (int s = 0; s <= t; ++s) {
                    row[s] = std::exp(row[s] - mx);
                    z += row[s];
                }
                double* ot = lt.o.data() + static_cast<std::size_t>(t) * d + off;
                for (int s = 0; s <= t; ++s) {
                    row[s] /= z;
                    const double* vs = lt.v.data() + static_cast<std::size_t>(s) * d + off;
                    const double a = row[s];
                    for (int i = 0; i < hd; ++i) ot[i] += a * vs[i];
                }
            }
        }

        lt.amid.resize(ld);
        affine(lt.o.data(), param(ckpt, lp(l, "attn.wo")).data.data(),
               param(ckpt, lp(l, "attn.bo")).data.data(), len, d, d, lt.amid.data());
        for (std::size_t i = 0; i < ld; ++i) lt.amid[i] += (*x)[i];

        lt.xhat2.resize(ld);
        lt.inv2.resize(static_cast<std::size_t>(len));
        lt.n2.resize(ld);
        ln_fwd(lt.amid.data(), param(ckpt, lp(l, "ln2.g")).data.data(),
               param(ckpt, lp(l, "ln2.b")).data.data(), len, d, lt.xhat2.data(), lt.inv2.data(),
               lt.n2.data());

        lt.ffpre.resize(static_cast<std::size_t>(len) * ff);
        affine(lt.n2.data(), param(ckpt, lp(l, "ff.w1")).data.data(),
               param(ckpt, lp(l, "ff.b1")).data.data(), len, d, ff, lt.ffpre.data());
        lt.ffact.resize(lt.ffpre.size());
        for (std::size_t i = 0; i < lt.ffpre.size(); ++i) lt.ffact[i] = gelu(lt.ffpre[i]);

        lt.xout.resize(ld);
        affine(lt.ffact.data(), param(ckpt, lp(l, "ff.w2")).data.data(),
               param(ckpt, lp(l, "ff.b2")).data.data(), len, ff, d, lt.xout.data());
        for (std::size_t i = 0; i < ld; ++i) lt.xout[i] += lt.amid[i];
        x = &lt.xout;
    }

    tr.xhatf.resize(ld);
    tr.invf.resize(static_cast<std::size_t>(len));
    tr.xf.resize(ld);
    ln_fwd(x->data(), param(ckpt, "ln_f.g").data.data(), param(ckpt, "ln_f.b").data.data(), len, d,
           tr.xhatf.data(), tr.invf.data(), tr.xf.data());

    // weight-tied head: logits = xf @ tok_emb^T
    const int vsz = c.vocab_size;
    tr.logits.assign(static_cast<std::size_t>(len) * vsz, 0.0);
    tr.logz.resize(static_cast<std::size_t>(len));
    for (int t = 0; t < len; ++t) {
        const double* xt = tr.xf.data() + static_cast<std::size_t>(t) * d;
        double* lg = tr.logits.data() + static_cast<std::size_t>(t) * vsz;
        for (int vtok = 0; vtok < vsz; ++vtok) {
            const double* ev = emb.data() + static_cast<std::size_t>(vtok) * d;
            double acc = 0.0;
            for (int i = 0; i < d; ++i) acc += xt[i] * ev[i];
            lg[vtok] = acc;
        }
        double mx = lg[0];
        for (int vtok = 1; vtok < vsz; ++vtok) mx = std::max(mx, lg[vtok]);
        double z = 0.0;
        for (int vtok = 0; vtok < vsz; ++vtok) z += std::exp(lg[vtok] - mx);
        tr.logz[static_cast<std::size_t>(t)] = mx + std::log(z);
    }
}

Tensor zeros_like(const Tensor& t) {
    Tensor z;
    z.shape = t.shape;
    z.data.assign(t.data.size(), 0.0);
    return z;
}

// Backward of `weight * mean-nll(seq)` through a completed forward trace,
// accumulating into grads.
void run_backward(const LmCheckpoint& ckpt, const std::vector<TokenId>& tokens, const Trace& tr,
                  double weight, ParamMap& grads) {
    const LmConfig& c = ckpt.config;
    const int len = tr.len;
    const int d = c.d_model;
    const int h = c.n_heads;
    const int hd = d / h;
    const int ff = c.ff_mult * d;
    const int vsz = c.vocab_size;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    const std::size_t ld = static_cast<std::size_t>(len) * d;
    const int n_targets = len - 1;
    if (n_targets < 1) throw std::invalid_argument("backward: sequence has no prediction targets");

    const auto& emb = param(ckpt, "tok_emb").data;
    auto& demb = grads.at("tok_emb").data;

    // dlogits and head
    std::vector<double> dxf(ld, 0.0);
    {
        const double w = weight / n_targets;
        for (int t = 0; t < n_targets; ++t) {
            const TokenId target = tokens[static_cast<std::size_t>(t) + 1];
            const double* lg = tr.logits.data() + static_cast<std::size_t>(t) * vsz;
            const double logz = tr.logz[static_cast<std::size_t>(t)];
            const double* xt = tr.xf.data() + static_cast<std::size_t>(t) * d;
            double* dxt = dxf.data() + static_cast<std::size_t>(t) * d;
            for (int vtok = 0; vtok < vsz; ++vtok) {
                double dl = std::exp(lg[vtok] - logz);
                if (vtok == target) dl -= 1.0;
                dl *= w;
                if (dl == 0.0) continue;
                const double* ev = emb.data() + static_cast<std::size_t>(vtok) * d;
                double* dev = demb.data() + static_cast<std::size_t>(vtok) * d;
                for (int i = 0; i < d; ++i) {
                    dxt[i] += dl * ev[i];
                    dev[i] += dl * xt[i];
                }
            }
        }
    }

    // final layernorm
    std::vector<double> dx(ld, 0.0);
    ln_bwd(tr.xhatf.data(), tr.invf.data(), param(ckpt, "ln_f.g").data.data(), dxf.data(), len, d,
           dx.data(), grads.at("ln_f.g").data.data(), grads.at("ln_f.b").data.data());

    std::vector<double> da(ld), dn2(ld), dffact(static_cast<std::size_t>(len) * ff),
        dffpre(static_cast<std::size_t>(len) * ff), dn1(ld), dq(ld), dk(ld), dv(ld), do_(ld),
        dxin(ld);
    for (int l = c.n_layers - 1; l >= 0; --l) {
        const LayerTrace& lt = tr.layers[static_cast<std::size_t>(l)];

        // ff block: xout = amid + W2(gelu(W1 n2 + b1)) + b2
        std::fill(da.begin(), da.end(), 0.0);
        std::fill(dffact.begin(), dffact.end(), 0.0);
        affine_bwd(lt.ffact.data(), param(ckpt, lp(l, "ff.w2")).data.data(), dx.data(), len, ff, d,
                   dffact.data(), grads.at(lp(l, "ff.w2")).data.data(),
                   grads.at(lp(l, "ff.b2")).data.data());
        for (std::size_t i = 0; i < dffpre.size(); ++i)
            dffpre[i] = dffact[i] * gelu_grad(lt.ffpre[i]);
        std::fill(dn2.begin(), dn2.end(), 0.0);
        affine_bwd(lt.n2.data(), param(ckpt, lp(l, "ff.w1")).data.data(), dffpre.data(), len, d, ff,
                   dn2.data(), grads.at(lp(l, "ff.w1")).data.data(),
                   grads.at(lp(l, "ff.b1")).data.data());
        for (std::size_t i = 0; i < ld; ++i) da[i] = dx[i];  // residual path
        ln_bwd(lt.xhat2.data(), lt.inv2.data(), param(ckpt, lp(l, "ln2.g")).data.data(), dn2.data(),
               len, d, da.data(), grads.at(lp(l, "ln2.g")).data.data(),
               grads.at(lp(l, "ln2.b")).data.data());

        // attention block: amid = xin + Wo(attn(LN1(xin))) + bo
        std::fill(do_.begin(), do_.end(), 0.0);
        affine_bwd(lt.o.data(), param(ckpt, lp(l, "attn.wo")).data.data(), da.data(), len, d, d,
                   do_.data(), grads.at(lp(l, "attn.wo")).data.data(),
                   grads.at(lp(l, "attn.bo")).data.data());

        std::fill(dq.begin(), dq.end(), 0.0);
        std::fill(dk.begin(), dk.end(), 0.0);
        std::fill(dv.begin(), dv.end(), 0.0);
        std::vector<double> datt(static_cast<std::size_t>(len), 0.0);
        for (int hh = 0; hh < h; ++hh) {
            const int off = hh * hd;
            const double* atth = lt.att.data() + static_cast<std::size_t>(hh) * len * len;
            for (int t = 0; t < len; ++t) {
                const double* arow = atth + static_cast<std::size_t>(t) * len;
                const double* dot = do_.data() + static_cast<std::size_t>(t) * d + off;
                double dsum = 0.0;
                for (int s = 0; s <= t; ++s) {
                    const double* vs = lt.v.data() + static_cast<std::size_t>(s) * d + off;
                    double acc = 0.0;
                    for (int i = 0; i < hd; ++i) acc += dot[i] * vs[i];
                    datt[static_cast<std::size_t>(s)] = acc;
                    dsum += arow[s] * acc;
                    double* dvs = dv.data() + static_cast<std::size_t>(s) * d + off;
                    const double a = arow[s];
                    for (int i = 0; i < hd; ++i) dvs[i] += a * dot[i];
                }
                double* dqt = dq.data() + static_cast<std::size_t>(t) * d + off;
                for (int s = 0; s <= t; ++s) {
                    const double ds = arow[s] * (datt[static_cast<std::size_t>(s)] - dsum) * scale;
                    if (ds == 0.0) continue;
                    const double* ks = lt.k.data() + static_cast<std::size_t>(s) * d + off;
                    const double* qt = lt.q.data() + static_cast<std::size_t>(t) * d + off;
                    double* dks = dk.data() + static_cast<std::size_t>(s) * d + off;
                    for (int i = 0; i < hd; ++i) {
                        dqt[i] += ds * ks[i];
                        dks[i] += ds * qt[i];
                    }
                }
            }
        }

        std::fill(dn1.begin(), dn1.end(), 0.0);
        affine_bwd(lt.n1.data(), param(ckpt, lp(l, "attn.wq")).data.data(), dq.data(), len, d, d,
                   dn1.data(), grads.at(lp(l, "attn.wq")).data.data(),
                   grads.at(lp(l, "attn.bq")).data.data());
        affine_bwd(lt.n1.data(), param(ckpt, lp(l, "attn.wk")).data.data(), dk.data(), len, d, d,
                   dn1.data(), grads.at(lp(l, "attn.wk")).data.data(),
                   grads.at(lp(l, "attn.bk")).data.data());
        affine_bwd(lt.n1.data(), param(ckpt, lp(l, "attn.wv")).data.data(), dv.data(), len, d, d,
                   dn1.data(), grads.at(lp(l, "attn.wv")).data.data(),
                   grads.at(lp(l, "attn.bv")).data.data());

        std::fill(dxin.begin(), dxin.end(), 0.0);
        for (std::size_t i = 0; i < ld; ++i) dxin[i] = da[i];  // residual path
        ln_bwd(lt.xhat1.data(), lt.inv1.data(), param(ckpt, lp(l, "ln1.g")).data.data(), dn1.data(),
               len, d, dxin.data(), grads.at(lp(l, "ln1.g")).data.data(),
               grads.at(lp(l, "ln1.b")).data.data());
        dx = dxin;
    }

    // embeddings
    auto& dpos = grads.at("pos_emb").data;
    for (int t = 0; t < len; ++t) {
        const double* dxt = dx.data() + static_cast<std::size_t>(t) * d;
        double* de = demb.data() + static_cast<std::size_t>(tokens[static_cast<std::size_t>(t)]) * d;
        double* dp = dpos.data() + static_cast<std::size_t>(t) * d;
        for (int i = 0; i < d; ++i) {
            de[i] += dxt[i];
            dp[i] += dxt[i];
        }
    }
}

double nll_from_trace(const Trace& tr, const std::vector<TokenId>& tokens) {
    const int n_targets = tr.len - 1;
    double acc = 0.0;
    const int vsz = static_cast<int>(tr.logits.size() / static_cast<std::size_t>(tr.len));
    for (int t = 0; t < n_targets; ++t) {
        const TokenId target = tokens[static_cast<std::size_t>(t) + 1];
        acc += tr.logz[static_cast<std::size_t>(t)] -
               tr.logits[static_cast<std::size_t>(t) * vsz + target];
    }
    return acc / n_targets;
}

std::vector<TokenId> clip_to_context(const LmCheckpoint& ckpt, const std::vector<TokenId>& tokens) {
    if (static_cast<int>(tokens.size()) <= ckpt.config.context_len) return tokens;
    return {tokens.begin(), tokens.begin() + ckpt.config.context_len};
}

}  // namespace

void LmConfig::validate() const {
    if (vocab_size < 5) throw std::invalid_argument("vocab_size must be >= 5");
    if (d_model < 1 || n_layers < 1 || n_heads < 1 || ff_mult < 1)
        throw std::invalid_argument("model dimensions must be positive");
    if (d_model % n_heads != 0) throw std::invalid_argument("d_model must be divisible by n_heads");
    if (context_len < 2) throw std::invalid_argument("context_len must be >= 2");
}

void to_json(nlohmann::json& j, const LmConfig& c) {
    j = {{"vocab_size", c.vocab_size}, {"d_model", c.d_model},         {"n_layers", c.n_layers},
         {"n_heads", c.n_heads},       {"context_len", c.context_len}, {"ff_mult", c.ff_mult}};
}

void from_json(const nlohmann::json& j, LmConfig& c) {
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.d_model = j.value("d_model", c.d_model);
    c.n_layers = j.value("n_layers", c.n_layers);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.context_len = j.value("context_len", c.context_len);
    c.ff_mult = j.value("ff_mult", c.ff_mult);
}

std::string role_name(Role role) {
    switch (role) {
        case Role::pre: return "pre";
        case Role::adv: return "adv";
        case Role::ft: return "ft";
        case Role::ft_adv: return "ft_adv";
    }
    throw std::logic_error("bad role");
}

Role role_from_name(const std::string& name) {
    if (name == "pre") return Role::pre;
    if (name == "adv") return Role::adv;
    if (name == "ft") return Role::ft;
    if (name == "ft_adv") return Role::ft_adv;
    throw std::invalid_argument("unknown role: " + name);
}

std::int64_t Tensor::numel() const {
    std::int64_t n = 1;
    for (int s : shape) n *= s;
    return n;
}

LmCheckpoint init_params(const LmConfig& config, std::uint64_t seed) {
    config.validate();
    LmCheckpoint ckpt;
    ckpt.config = config;
    ckpt.role = Role::pre;

    std::mt19937_64 rng(seed);
    const double std_dev = 0.1 / std::sqrt(static_cast<double>(config.d_model));
    std::normal_distribution<double> gauss(0.0, std_dev);

    auto weight = [&](const std::string& name, int r, int cdim) {
        Tensor t;
        t.shape = {r, cdim};
        t.data.resize(static_cast<std::size_t>(r) * cdim);
        for (auto& x : t.data) x = gauss(rng);
        ckpt.params[name] = std::move(t);
    };
    auto fill = [&](const std::string& name, int n, double value) {
        Tensor t;
        t.shape = {n};
        t.data.assign(static_cast<std::size_t>(n), value);
        ckpt.params[name] = std::move(t);
    };

    const int d = config.d_model;
    const int ff = config.ff_mult * d;
    weight("tok_emb", config.vocab_size, d);
    weight("pos_emb", config.context_len, d);
    for (int l = 0; l < config.n_layers; ++l) {
        fill(lp(l, "ln1.g"), d, 1.0);
        fill(lp(l, "ln1.b"), d, 0.0);
        for (const char* m : {"attn.wq", "attn.wk", "attn.wv", "attn.wo"}) weight(lp(l, m), d, d);
        for (const char* b : {"attn.bq", "attn.bk", "attn.bv", "attn.bo"}) fill(lp(l, b), d, 0.0);
        fill(lp(l, "ln2.g"), d, 1.0);
        fill(lp(l, "ln2.b"), d, 0.0);
        weight(lp(l, "ff.w1"), d, ff);
        fill(lp(l, "ff.b1"), ff, 0.0);
        weight(lp(l, "ff.w2"), ff, d);
        fill(lp(l, "ff.b2"), d, 0.0);
    }
    fill("ln_f.g", d, 1.0);
    fill("ln_f.b", d, 0.0);

    ckpt.lineage.push_back({{"stage", "init"}, {"seed", seed}});
    return ckpt;
}

void check_finite(const LmCheckpoint& ckpt, const std::string& context) {
    for (const auto& [name, t] : ckpt.params)
        for (double x : t.data)
            if (!std::isfinite(x))
                throw std::runtime_error("non-finite value in tensor " + name +
                                         (context.empty() ? "" : " (" + context + ")"));
}

std::vector<std::vector<double>> forward(const LmCheckpoint& ckpt,
                                         const std::vector<TokenId>& tokens) {
    Trace tr;
    run_forward(ckpt, tokens, tr);
    const int vsz = ckpt.config.vocab_size;
    std::vector<std::vector<double>> rows(static_cast<std::size_t>(tr.len));
    for (int t = 0; t < tr.len; ++t) {
        auto& row = rows[static_cast<std::size_t>(t)];
        row.resize(static_cast<std::size_t>(vsz));
        for (int vtok = 0; vtok < vsz; ++vtok)
            row[static_cast<std::size_t>(vtok)] =
                std::exp(tr.logits[static_cast<std::size_t>(t) * vsz + vtok] -
                         tr.logz[static_cast<std::size_t>(t)]);
    }
    return rows;
}

std::vector<std::vector<double>> hidden_states(const LmCheckpoint& ckpt,
                                               const std::vector<TokenId>& tokens) {
    Trace tr;
    run_forward(ckpt, tokens, tr);
    const int d = ckpt.config.d_model;
    std::vector<std::vector<double>> rows(static_cast<std::size_t>(tr.len));
    for (int t = 0; t < tr.len; ++t)
        rows[static_cast<std::size_t>(t)].assign(tr.xf.begin() + static_cast<std::ptrdiff_t>(t) * d,
                                                 tr.xf.begin() + static_cast<std::ptrdiff_t>(t + 1) * d);
    return rows;
}

double sequence_nll(const LmCheckpoint& ckpt, const TokenSequence& seq) {
    auto tokens = clip_to_context(ckpt, seq.tokens);
    if (tokens.size() < 2) throw std::invalid_argument("sequence_nll: need at least 2 tokens");
    Trace tr;
    run_forward(ckpt, tokens, tr);
    return nll_from_trace(tr, tokens);
}

GradResult grad(const LmCheckpoint& ckpt, const std::vector<TokenSequence>& batch) {
    if (batch.empty()) throw std::invalid_argument("grad: empty batch");
    GradResult res;
    for (const auto& [name, t] : ckpt.params) res.grads[name] = zeros_like(t);
    const double w = 1.0 / static_cast<double>(batch.size());
    for (const auto& seq : batch) {
        auto tokens = clip_to_context(ckpt, seq.tokens);
        if (tokens.size() < 2) throw std::invalid_argument("grad: sequence too short");
        Trace tr;
        run_forward(ckpt, tokens, tr);
        res.mean_nll += w * nll_from_trace(tr, tokens);
        run_backward(ckpt, tokens, tr, w, res.grads);
    }
    return res;
}

double perplexity(const LmCheckpoint& ckpt, const std::vector<TokenSequence>& dataset) {
    if (dataset.empty()) throw std::invalid_argument("perplexity: empty dataset");
    double acc = 0.0;
    for (const auto& seq : dataset) acc += sequence_nll(ckpt, seq);
    return std::exp(acc / static_cast<double>(dataset.size()));
}

void GenConfig::validate() const {
    if (beam_width < 1) throw std::invalid_argument("beam_width must be >= 1");
    if (top_k < 1) throw std::invalid_argument("top_k must be >= 1");
    if (max_new_tokens < 1) throw std::invalid_argument("max_new_tokens must be >= 1");
    if (alpha < 0.0 || alpha > 1.0) throw std::invalid_argument("alpha must be in [0,1]");
}

std::string strategy_name(GenConfig::Strategy s) {
    switch (s) {
        case GenConfig::Strategy::greedy: return "greedy";
        case GenConfig::Strategy::beam: return "beam";
        case GenConfig::Strategy::contrastive: return "contrastive";
    }
    throw std::logic_error("bad strategy");
}

GenConfig::Strategy strategy_from_name(const std::string& name) {
    if (name == "greedy") return GenConfig::Strategy::greedy;
    if (name == "beam") return GenConfig::Strategy::beam;
    if (name == "contrastive") return GenConfig::Strategy::contrastive;
    throw std::invalid_argument("unknown generation strategy: " + name);
}

namespace {

std::vector<TokenId> window_of(const LmCheckpoint& ckpt, const std::vector<TokenId>& prefix,
                               const std::vector<TokenId>& gen) {
    std::vector<TokenId> all = prefix;
    all.insert(all.end(), gen.begin(), gen.end());
    const auto ctx = static_cast<std::size_t>(ckpt.config.context_len);
    if (all.size() > ctx) all.erase(all.begin(), all.end() - static_cast<std::ptrdiff_t>(ctx));
    return all;
}

// log-probabilities of the next token after `prefix ++ gen`
std::vector<double> next_logprobs(const LmCheckpoint& ckpt, const std::vector<TokenId>& prefix,
                                  const std::vector<TokenId>& gen) {
    Trace tr;
    run_forward(ckpt, window_of(ckpt, prefix, gen), tr);
    const int vsz = ckpt.config.vocab_size;
    std::vector<double> lp(static_cast<std::size_t>(vsz));
    const std::size_t base = static_cast<std::size_t>(tr.len - 1) * vsz;
    for (int vtok = 0; vtok < vsz; ++vtok)
        lp[static_cast<std::size_t>(vtok)] =
            tr.logits[base + static_cast<std::size_t>(vtok)] - tr.logz[static_cast<std::size_t>(tr.len - 1)];
    return lp;
}

TokenId argmax_smallest(const std::vector<double>& values) {
    TokenId best = 0;
    for (std::size_t i = 1; i < values.size(); ++i)
        if (values[i] > values[static_cast<std::size_t>(best)]) best = static_cast<TokenId>(i);
    return best;
}

std::vector<TokenId> generate_greedy(const LmCheckpoint& ckpt, const std::vector<TokenId>& prefix,
                                     int max_new) {
    std::vector<TokenId> out;
    for (int step = 0; step < max_new; ++step) {
        auto lp = next_logprobs(ckpt, prefix, out);
        const TokenId pick = argmax_smallest(lp);
        if (pick == Vocab::kEos) break;
        out.push_back(pick);
    }
    return out;
}

struct BeamState {
    std::vector<TokenId> out;
    double logp = 0.0;
    bool done = false;
};

bool beam_less(const BeamState& a, const BeamState& b) {
    if (a.logp != b.logp) return a.logp > b.logp;
    return a.out < b.out;  // tie: smallest token ids first
}

std::vector<TokenId> generate_beam(const LmCheckpoint& ckpt, const std::vector<TokenId>& prefix,
                                   const GenConfig& cfg) {
    std::vector<BeamState> beams{BeamState{}};
    for (int step = 0; step < cfg.max_new_tokens; ++step) {
        bool all_done = true;
        for (const auto& b : beams) all_done &= b.done;
        if (all_done) break;

        std::vector<BeamState> pool;
        for (const auto& b : beams) {
            if (b.done) {
                pool.push_back(b);
                continue;
            }
            auto lp = next_logprobs(ckpt, prefix, b.out);
            for (TokenId v = 0; v < static_cast<TokenId>(lp.size()); ++v) {
                BeamState nb = b;
                nb.logp += lp[static_cast<std::size_t>(v)];
                if (v == Vocab::kEos)
                    nb.done = true;
                else
                    nb.out.push_back(v);
                pool.push_back(std::move(nb));
            }
        }
        std::sort(pool.begin(), pool.end(), beam_less);
        if (static_cast<int>(pool.size()) > cfg.beam_width)
            pool.resize(static_cast<std::size_t>(cfg.beam_width));
        beams = std::move(pool);
    }
    std::sort(beams.begin(), beams.end(), beam_less);
    return beams.front().out;
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    return dot / (std::sqrt(na) * std::sqrt(nb) + 1e-12);
}

std::vector<TokenId> generate_contrastive(const LmCheckpoint& ckpt,
                                          const std::vector<TokenId>& prefix,
                                          const GenConfig& cfg) {
    std::vector<TokenId> out;
    for (int step = 0; step < cfg.max_new_tokens; ++step) {
        auto lp = next_logprobs(ckpt, prefix, out);
        // top_k token ids by probability, ties toward smaller ids
        std::vector<TokenId> order(lp.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<TokenId>(i);
        std::stable_sort(order.begin(), order.end(), [&](TokenId a, TokenId b) {
            return lp[static_cast<std::size_t>(a)] > lp[static_cast<std::size_t>(b)];
        });
        const int k = std::min<int>(cfg.top_k, static_cast<int>(order.size()));

        TokenId best = -1;
        double best_score = 0.0;
        for (int i = 0; i < k; ++i) {
            const TokenId v = order[static_cast<std::size_t>(i)];
            auto cand = out;
            cand.push_back(v);
            auto hs = hidden_states(ckpt, window_of(ckpt, prefix, cand));
            double degeneration = 0.0;
            for (std::size_t s = 0; s + 1 < hs.size(); ++s)
                degeneration = std::max(degeneration, cosine(hs.back(), hs[s]));
            const double score =
                (1.0 - cfg.alpha) * std::exp(lp[static_cast<std::size_t>(v)]) -
                cfg.alpha * degeneration;
            if (best < 0 || score > best_score || (score == best_score && v < best)) {
                best = v;
                best_score = score;
            }
        }
        if (best == Vocab::kEos) break;
        out.push_back(best);
    }
    return out;
}

}  // namespace

TokenSequence generate(const LmCheckpoint& ckpt, const TokenSequence& prefix,
                       const GenConfig& cfg) {
    cfg.validate();
    if (prefix.tokens.empty()) throw std::invalid_argument("generate: empty prefix");
    auto pfx = clip_to_context(ckpt, prefix.tokens);
    TokenSequence out;
    out.source_id = prefix.source_id;
    switch (cfg.strategy) {
        case GenConfig::Strategy::greedy:
            out.tokens = generate_greedy(ckpt, pfx, cfg.max_new_tokens);
            break;
        case GenConfig::Strategy::beam:
            out.tokens = generate_beam(ckpt, pfx, cfg);
            break;
        case GenConfig::Strategy::contrastive:
            out.tokens = generate_contrastive(ckpt, pfx, cfg);
            break;
    }
    return out;
}

namespace {

template <typename T>
void write_pod(std::ostream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

template <typename T>
T read_pod(std::istream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    if (!in) throw std::runtime_error("truncated checkpoint file");
    return v;
}

}  // namespace

void save_checkpoint(const LmCheckpoint& ckpt, const std::string& path) {
    check_finite(ckpt, "save_checkpoint");
    nlohmann::json header;
    header["config"] = ckpt.config;
    header["role"] = role_name(ckpt.role);
    header["lineage"] = ckpt.lineage;
    nlohmann::json dir = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& [name, t] : ckpt.params) {
        dir.push_back({{"name", name}, {"shape", t.shape}, {"offset", offset}});
        offset += static_cast<std::uint64_t>(t.numel()) * sizeof(float);
    }
    header["tensors"] = dir;
    const std::string hbytes = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
    out.write("TLMC", 4);
    write_pod(out, ckpt.format_version);
    write_pod(out, static_cast<std::uint64_t>(hbytes.size()));
    out.write(hbytes.data(), static_cast<std::streamsize>(hbytes.size()));
    for (const auto& [name, t] : ckpt.params) {
        std::vector<float> f(t.data.size());
        for (std::size_t i = 0; i < f.size(); ++i) f[i] = static_cast<float>(t.data[i]);
        out.write(reinterpret_cast<const char*>(f.data()),
                  static_cast<std::streamsize>(f.size() * sizeof(float)));
    }
    if (!out) throw std::runtime_error("checkpoint write failed: " + path);
}

LmCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "TLMC", 4) != 0)
        throw std::runtime_error("bad checkpoint magic: " + path);
    const auto version = read_pod<std::uint32_t>(in);
    if (version != kCheckpointVersion)
        throw std::runtime_error("unknown checkpoint version " + std::to_string(version));
    const auto hlen = read_pod<std::uint64_t>(in);
    std::string hbytes(hlen, '\0');
    in.read(hbytes.data(), static_cast<std::streamsize>(hlen));
    if (!in) throw std::runtime_error("truncated checkpoint header: " + path);
    const auto header = nlohmann::json::parse(hbytes);

    LmCheckpoint ckpt;
    ckpt.format_version = version;
    ckpt.config = header.at("config").get<LmConfig>();
    ckpt.role = role_from_name(header.at("role").get<std::string>());
    for (const auto& entry : header.at("lineage")) ckpt.lineage.push_back(entry);
    for (const auto& entry : header.at("tensors")) {
        Tensor t;
        t.shape = entry.at("shape").get<std::vector<int>>();
        std::vector<float> f(static_cast<std::size_t>(t.numel()));
        in.read(reinterpret_cast<char*>(f.data()),
                static_cast<std::streamsize>(f.size() * sizeof(float)));
        if (!in) throw std::runtime_error("truncated checkpoint payload: " + path);
        t.data.resize(f.size());
        for (std::size_t i = 0; i < f.size(); ++i) t.data[i] = static_cast<double>(f[i]);
        ckpt.params[entry.at("name").get<std::string>()] = std::move(t);
    }
    check_finite(ckpt, "load_checkpoint");
    return ckpt;
}

}  // namespace ftleak
