#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "matrix.hpp"
#include "rng.hpp"

namespace parse {

// Desk-scale decoder-only byte-level LM, LLaMA-shaped blocks (pre-norm,
// rotary positions, gated MLP) so the seven-projection pipeline applies.
struct ToyLMConfig {
    std::size_t n_blocks = 3;
    std::size_t d_model = 96;
    std::size_t n_heads = 4;
    std::size_t n_kv_heads = 4;  // 2 for the GQA variant
    std::size_t d_ff = 256;
    std::size_t vocab = 256;
    std::size_t max_seq = 256;
    std::uint64_t seed = 0;

    std::size_t head_dim() const { return d_model / n_heads; }
    std::size_t kv_dim() const { return n_kv_heads * head_dim(); }
    bool gqa() const { return n_kv_heads < n_heads; }

    void validate() const {
        if (d_model % n_heads != 0) throw std::invalid_argument("d_model % n_heads != 0");
        if (n_heads % n_kv_heads != 0) throw std::invalid_argument("n_heads % n_kv_heads != 0");
    }
};

inline constexpr double kRmsEps = 1e-5;
inline constexpr double kRopeBase = 10000.0;

// Everything except the seven factorizable projections.
struct LmCore {
    ToyLMConfig cfg;
    Matd embed;  // vocab x d
    Matd head;   // vocab x d
    std::vector<double> g_final;
    std::vector<std::vector<double>> g_attn, g_mlp;  // per block
};

struct DenseBlock {
    Matd wq, wk, wv, wo;        // (d,d) (kv,d) (kv,d) (d,d)
    Matd w_up, w_gate, w_down;  // (ff,d) (ff,d) (d,ff)
};

struct DenseModel {
    LmCore core;
    std::vector<DenseBlock> blocks;
};

inline const char* proj_names[7] = {"q", "k", "v", "o", "up", "gate", "down"};

inline std::string tensor_id(std::size_t block, const char* proj) {
    return "b" + std::to_string(block) + "." + proj;
}

// Per-call site projection implementation: dense weights, masked rank
// experts, or an execution plan all provide this surface.
class ProjectionProvider {
public:
    virtual ~ProjectionProvider() = default;
    virtual void qkv(std::size_t block, const Matd& hn, Matd& q, Matd& k, Matd& v) const = 0;
    virtual Matd o_proj(std::size_t block, const Matd& x) const = 0;
    virtual void upgate(std::size_t block, const Matd& hn, Matd& up, Matd& gate) const = 0;
    virtual Matd down_proj(std::size_t block, const Matd& x) const = 0;
};

class DenseProvider : public ProjectionProvider {
public:
    explicit DenseProvider(const DenseModel& m) : m_(m) {}
    void qkv(std::size_t b, const Matd& hn, Matd& q, Matd& k, Matd& v) const override {
        q = matmul(m_.blocks[b].wq, hn);
        k = matmul(m_.blocks[b].wk, hn);
        v = matmul(m_.blocks[b].wv, hn);
    }
    Matd o_proj(std::size_t b, const Matd& x) const override { return matmul(m_.blocks[b].wo, x); }
    void upgate(std::size_t b, const Matd& hn, Matd& up, Matd& gate) const override {
        up = matmul(m_.blocks[b].w_up, hn);
        gate = matmul(m_.blocks[b].w_gate, hn);
    }
    Matd down_proj(std::size_t b, const Matd& x) const override {
        return matmul(m_.blocks[b].w_down, x);
    }

private:
    const DenseModel& m_;
};

struct KVCacheState {
    std::size_t len = 0;
    // per block, row-major [len x kv_dim]
    std::vector<std::vector<double>> k, v;

    explicit KVCacheState(std::size_t n_blocks = 0) : k(n_blocks), v(n_blocks) {}
};

// Optional capture of projection inputs and block outputs during a forward.
struct Capture {
    bool proj_inputs = false;
    bool block_outputs = false;
    std::map<std::string, Matd>* inputs = nullptr;   // tensor_id -> n x T
    std::vector<Matd>* blocks = nullptr;             // per block, d x T
};

namespace lmops {

inline void rmsnorm_col(const double* x, const std::vector<double>& g, double* y,
                        std::size_t d) {
    double ms = 0;
    for (std::size_t i = 0; i < d; ++i) ms += x[i] * x[i];
    const double r = std::sqrt(ms / double(d) + kRmsEps);
    for (std::size_t i = 0; i < d; ++i) y[i] = g[i] * x[i] / r;
}

inline Matd rmsnorm(const Matd& h, const std::vector<double>& g) {
    Matd out(h.rows(), h.cols());
    std::vector<double> col(h.rows()), res(h.rows());
    for (std::size_t t = 0; t < h.cols(); ++t) {
        for (std::size_t i = 0; i < h.rows(); ++i) col[i] = h(i, t);
        rmsnorm_col(col.data(), g, res.data(), h.rows());
        for (std::size_t i = 0; i < h.rows(); ++i) out(i, t) = res[i];
    }
    return out;
}

// rotate adjacent pairs within each head; sign=-1 undoes it
inline void rope_inplace(Matd& x, std::size_t head_dim, std::size_t pos0, double sign = 1.0) {
    const std::size_t n_heads = x.rows() / head_dim;
    for (std::size_t t = 0; t < x.cols(); ++t) {
        const double p = double(pos0 + t);
        for (std::size_t h = 0; h < n_heads; ++h) {
            for (std::size_t j = 0; j + 1 < head_dim; j += 2) {
                const double theta = p * std::pow(kRopeBase, -double(j) / double(head_dim));
                const double c = std::cos(theta), s = sign * std::sin(theta);
                const std::size_t r0 = h * head_dim + j;
                const double x0 = x(r0, t), x1 = x(r0 + 1, t);
                x(r0, t) = c * x0 - s * x1;
                x(r0 + 1, t) = s * x0 + c * x1;
            }
        }
    }
}

inline void softmax_inplace(double* v, std::size_t n) {
    double mx = v[0];
    for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, v[i]);
    double s = 0;
    for (std::size_t i = 0; i < n; ++i) {
        v[i] = std::exp(v[i] - mx);
        s += v[i];
    }
    for (std::size_t i = 0; i < n; ++i) v[i] /= s;
}

// Causal attention of Q (d x T) against the cached keys/values of one block.
// New K/V columns must already be appended to the cache.
inline Matd attention(const ToyLMConfig& cfg, const Matd& q,
                      const std::vector<double>& kcache, const std::vector<double>& vcache,
                      std::size_t cache_len, std::size_t pos0) {
    const std::size_t hd = cfg.head_dim(), kv = cfg.kv_dim();
    const std::size_t group = cfg.n_heads / cfg.n_kv_heads;
    const double scale = 1.0 / std::sqrt(double(hd));
    const std::size_t t_new = q.cols();
    Matd out(cfg.d_model, t_new);
    std::vector<double> scores(cache_len);
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
        const std::size_t g = h / group;
        for (std::size_t t = 0; t < t_new; ++t) {
            const std::size_t limit = pos0 + t + 1;  // causal
            for (std::size_t tau = 0; tau < limit; ++tau) {
                double s = 0;
                const double* krow = kcache.data() + tau * kv + g * hd;
                for (std::size_t j = 0; j < hd; ++j) s += q(h * hd + j, t) * krow[j];
                scores[tau] = s * scale;
            }
            softmax_inplace(scores.data(), limit);
            for (std::size_t j = 0; j < hd; ++j) {
                double s = 0;
                for (std::size_t tau = 0; tau < limit; ++tau)
                    s += scores[tau] * vcache[tau * kv + g * hd + j];
                out(h * hd + j, t) = s;
            }
        }
    }
    return out;
}

}  // namespace lmops

// Causal forward over `tokens` starting at the cache's current position.
// Returns logits (vocab x T) and extends the cache in place.
inline Matd forward_lm(const LmCore& core, const ProjectionProvider& prov,
                       const std::vector<std::uint8_t>& tokens, KVCacheState& kvc,
                       const Capture* cap = nullptr) {
    const ToyLMConfig& cfg = core.cfg;
    const std::size_t t_new = tokens.size();
    if (t_new == 0) throw std::invalid_argument("empty prompt");
    const std::size_t pos0 = kvc.len;
    if (pos0 + t_new > cfg.max_seq) throw std::runtime_error("sequence exceeds max_seq");
    if (kvc.k.size() != cfg.n_blocks) {
        kvc.k.assign(cfg.n_blocks, {});
        kvc.v.assign(cfg.n_blocks, {});
    }

    Matd h(cfg.d_model, t_new);
    for (std::size_t t = 0; t < t_new; ++t)
        for (std::size_t i = 0; i < cfg.d_model; ++i) h(i, t) = core.embed(tokens[t], i);

    const std::size_t kv = cfg.kv_dim();
    for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
        Matd hn = lmops::rmsnorm(h, core.g_attn[b]);
        if (cap && cap->proj_inputs) {
            (*cap->inputs)[tensor_id(b, "q")] = hn;
            (*cap->inputs)[tensor_id(b, "k")] = hn;
            (*cap->inputs)[tensor_id(b, "v")] = hn;
        }
        Matd q, k, v;
        prov.qkv(b, hn, q, k, v);
        lmops::rope_inplace(q, cfg.head_dim(), pos0);
        lmops::rope_inplace(k, cfg.head_dim(), pos0);

        kvc.k[b].resize((pos0 + t_new) * kv);
        kvc.v[b].resize((pos0 + t_new) * kv);
        for (std::size_t t = 0; t < t_new; ++t)
            for (std::size_t j = 0; j < kv; ++j) {
                kvc.k[b][(pos0 + t) * kv + j] = k(j, t);
                kvc.v[b][(pos0 + t) * kv + j] = v(j, t);
            }

        Matd attn = lmops::attention(cfg, q, kvc.k[b], kvc.v[b], pos0 + t_new, pos0);
        if (cap && cap->proj_inputs) (*cap->inputs)[tensor_id(b, "o")] = attn;
        h = add(h, prov.o_proj(b, attn));

        Matd hn2 = lmops::rmsnorm(h, core.g_mlp[b]);
        if (cap && cap->proj_inputs) {
            (*cap->inputs)[tensor_id(b, "up")] = hn2;
            (*cap->inputs)[tensor_id(b, "gate")] = hn2;
        }
        Matd up, gate;
        prov.upgate(b, hn2, up, gate);
        Matd act(cfg.d_ff, t_new);
        for (std::size_t i = 0; i < cfg.d_ff; ++i)
            for (std::size_t t = 0; t < t_new; ++t) {
                const double g = gate(i, t);
                act(i, t) = up(i, t) * g / (1.0 + std::exp(-g));
            }
        if (cap && cap->proj_inputs) (*cap->inputs)[tensor_id(b, "down")] = act;
        h = add(h, prov.down_proj(b, act));
        if (cap && cap->block_outputs) cap->blocks->push_back(h);
    }
    kvc.len = pos0 + t_new;

    Matd fn = lmops::rmsnorm(h, core.g_final);
    return matmul(core.head, fn);
}

inline Matd prefill(const LmCore& core, const ProjectionProvider& prov,
                    const std::vector<std::uint8_t>& tokens, KVCacheState& kvc,
                    const Capture* cap = nullptr) {
    if (kvc.len != 0) throw std::invalid_argument("prefill: cache not empty");
    return forward_lm(core, prov, tokens, kvc, cap);
}

// One-token causal step; returns logits for the new position.
inline std::vector<double> decode_step(const LmCore& core, const ProjectionProvider& prov,
                                       KVCacheState& kvc, std::uint8_t token,
                                       const Capture* cap = nullptr) {
    Matd logits = forward_lm(core, prov, {token}, kvc, cap);
    return logits.col(0);
}

// Mean next-token cross entropy over a token window (first token unscored).
inline double window_cross_entropy(const LmCore& core, const ProjectionProvider& prov,
                                   const std::vector<std::uint8_t>& tokens) {
    KVCacheState kvc(core.cfg.n_blocks);
    Matd logits = forward_lm(core, prov, tokens, kvc);
    double ce = 0;
    std::vector<double> col(core.cfg.vocab);
    for (std::size_t t = 0; t + 1 < tokens.size(); ++t) {
        double mx = logits(0, t);
        for (std::size_t v = 1; v < core.cfg.vocab; ++v) mx = std::max(mx, logits(v, t));
        double z = 0;
        for (std::size_t v = 0; v < core.cfg.vocab; ++v) z += std::exp(logits(v, t) - mx);
        ce += mx + std::log(z) - logits(tokens[t + 1], t);
    }
    return ce / double(tokens.size() - 1);
}

// PPL of contiguous non-overlapping windows.
inline std::vector<double> window_ppl(const LmCore& core, const ProjectionProvider& prov,
                                      const std::vector<std::uint8_t>& tokens,
                                      std::size_t window) {
    if (tokens.size() < window) throw std::invalid_argument("window_ppl: too few tokens");
    std::vector<double> out;
    for (std::size_t s = 0; s + window <= tokens.size(); s += window) {
        std::vector<std::uint8_t> w(tokens.begin() + std::ptrdiff_t(s),
                                    tokens.begin() + std::ptrdiff_t(s + window));
        out.push_back(std::exp(window_cross_entropy(core, prov, w)));
    }
    return out;
}

// ------------------------------------------------------------------
// Training (dense only): exact reverse-mode gradients, Adam, deterministic.
// ------------------------------------------------------------------

namespace lmtrain {

struct BlockGrads {
    Matd wq, wk, wv, wo, w_up, w_gate, w_down;
    std::vector<double> g_attn, g_mlp;
};

struct Grads {
    Matd embed, head;
    std::vector<double> g_final;
    std::vector<BlockGrads> blocks;
};

inline Grads make_grads(const DenseModel& m) {
    Grads g;
    const auto& cfg = m.core.cfg;
    g.embed = Matd(cfg.vocab, cfg.d_model);
    g.head = Matd(cfg.vocab, cfg.d_model);
    g.g_final.assign(cfg.d_model, 0.0);
    g.blocks.resize(cfg.n_blocks);
    for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
        auto& gb = g.blocks[b];
        gb.wq = Matd(cfg.d_model, cfg.d_model);
        gb.wk = Matd(cfg.kv_dim(), cfg.d_model);
        gb.wv = Matd(cfg.kv_dim(), cfg.d_model);
        gb.wo = Matd(cfg.d_model, cfg.d_model);
        gb.w_up = Matd(cfg.d_ff, cfg.d_model);
        gb.w_gate = Matd(cfg.d_ff, cfg.d_model);
        gb.w_down = Matd(cfg.d_model, cfg.d_ff);
        gb.g_attn.assign(cfg.d_model, 0.0);
        gb.g_mlp.assign(cfg.d_model, 0.0);
    }
    return g;
}

// visit parameter/grad tensors pairwise, in a fixed order
template <typename F>
inline void for_each_param(DenseModel& m, Grads& g, F&& f) {
    f(m.core.embed.raw(), g.embed.raw());
    f(m.core.head.raw(), g.head.raw());
    f(m.core.g_final, g.g_final);
    for (std::size_t b = 0; b < m.blocks.size(); ++b) {
        f(m.blocks[b].wq.raw(), g.blocks[b].wq.raw());
        f(m.blocks[b].wk.raw(), g.blocks[b].wk.raw());
        f(m.blocks[b].wv.raw(), g.blocks[b].wv.raw());
        f(m.blocks[b].wo.raw(), g.blocks[b].wo.raw());
        f(m.blocks[b].w_up.raw(), g.blocks[b].w_up.raw());
        f(m.blocks[b].w_gate.raw(), g.blocks[b].w_gate.raw());
        f(m.blocks[b].w_down.raw(), g.blocks[b].w_down.raw());
        f(m.core.g_attn[b], g.blocks[b].g_attn);
        f(m.core.g_mlp[b], g.blocks[b].g_mlp);
    }
}

struct BlockTape {
    Matd h_in, hn1, q, k, v, attn, h_mid, hn2, up, gate, act;
    std::vector<Matd> probs;  // per head, T x T lower-triangular softmax rows
};

inline void rmsnorm_backward(const Matd& x, const std::vector<double>& g, const Matd& dy,
                             Matd& dx_accum, std::vector<double>& dg) {
    const std::size_t d = x.rows();
    for (std::size_t t = 0; t < x.cols(); ++t) {
        double ms = 0;
        for (std::size_t i = 0; i < d; ++i) ms += x(i, t) * x(i, t);
        const double r = std::sqrt(ms / double(d) + kRmsEps);
        double xu = 0;
        for (std::size_t i = 0; i < d; ++i) xu += x(i, t) * g[i] * dy(i, t);
        for (std::size_t i = 0; i < d; ++i) {
            dx_accum(i, t) += g[i] * dy(i, t) / r - x(i, t) * xu / (double(d) * r * r * r);
            dg[i] += dy(i, t) * x(i, t) / r;
        }
    }
}

// Forward + backward for one sequence; returns mean next-token CE and
// accumulates parameter gradients (scaled by `scale`).
inline double seq_loss_and_grad(DenseModel& m, const std::vector<std::uint8_t>& toks,
                                Grads& g, double scale) {
    const ToyLMConfig& cfg = m.core.cfg;
    const std::size_t t_len = toks.size(), d = cfg.d_model, hd = cfg.head_dim(),
                      kv = cfg.kv_dim();
    const std::size_t group = cfg.n_heads / cfg.n_kv_heads;
    const double ascale = 1.0 / std::sqrt(double(hd));

    Matd h(d, t_len);
    for (std::size_t t = 0; t < t_len; ++t)
        for (std::size_t i = 0; i < d; ++i) h(i, t) = m.core.embed(toks[t], i);

    std::vector<BlockTape> tapes(cfg.n_blocks);
    for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
        BlockTape& tp = tapes[b];
        tp.h_in = h;
        tp.hn1 = lmops::rmsnorm(h, m.core.g_attn[b]);
        tp.q = matmul(m.blocks[b].wq, tp.hn1);
        tp.k = matmul(m.blocks[b].wk, tp.hn1);
        tp.v = matmul(m.blocks[b].wv, tp.hn1);
        lmops::rope_inplace(tp.q, hd, 0);
        lmops::rope_inplace(tp.k, hd, 0);

        tp.attn = Matd(d, t_len);
        tp.probs.assign(cfg.n_heads, Matd(t_len, t_len));
        std::vector<double> sc(t_len);
        for (std::size_t head = 0; head < cfg.n_heads; ++head) {
            const std::size_t gh = head / group;
            for (std::size_t t = 0; t < t_len; ++t) {
                for (std::size_t tau = 0; tau <= t; ++tau) {
                    double s = 0;
                    for (std::size_t j = 0; j < hd; ++j)
                        s += tp.q(head * hd + j, t) * tp.k(gh * hd + j, tau);
                    sc[tau] = s * ascale;
                }
                lmops::softmax_inplace(sc.data(), t + 1);
                for (std::size_t tau = 0; tau <= t; ++tau) tp.probs[head](t, tau) = sc[tau];
                for (std::size_t j = 0; j < hd; ++j) {
                    double s = 0;
                    for (std::size_t tau = 0; tau <= t; ++tau)
                        s += sc[tau] * tp.v(gh * hd + j, tau);
                    tp.attn(head * hd + j, t) = s;
                }
            }
        }
        h = add(h, matmul(m.blocks[b].wo, tp.attn));
        tp.h_mid = h;
        tp.hn2 = lmops::rmsnorm(h, m.core.g_mlp[b]);
        tp.up = matmul(m.blocks[b].w_up, tp.hn2);
        tp.gate = matmul(m.blocks[b].w_gate, tp.hn2);
        tp.act = Matd(cfg.d_ff, t_len);
        for (std::size_t i = 0; i < cfg.d_ff; ++i)
            for (std::size_t t = 0; t < t_len; ++t) {
                const double gv = tp.gate(i, t);
                tp.act(i, t) = tp.up(i, t) * gv / (1.0 + std::exp(-gv));
            }
        h = add(h, matmul(m.blocks[b].w_down, tp.act));
    }

    Matd fn = lmops::rmsnorm(h, m.core.g_final);
    Matd logits = matmul(m.core.head, fn);

    // cross entropy, positions 0..T-2 predict the next token
    const std::size_t n_pred = t_len - 1;
    double loss = 0;
    Matd dlogits(cfg.vocab, t_len);
    for (std::size_t t = 0; t < n_pred; ++t) {
        double mx = logits(0, t);
        for (std::size_t v = 1; v < cfg.vocab; ++v) mx = std::max(mx, logits(v, t));
        double z = 0;
        for (std::size_t v = 0; v < cfg.vocab; ++v) z += std::exp(logits(v, t) - mx);
        loss += mx + std::log(z) - logits(toks[t + 1], t);
        for (std::size_t v = 0; v < cfg.vocab; ++v)
            dlogits(v, t) = std::exp(logits(v, t) - mx) / z / double(n_pred);
        dlogits(toks[t + 1], t) -= 1.0 / double(n_pred);
    }
    loss /= double(n_pred);
    for (double& v : dlogits.raw()) v *= scale;

    // backward
    Matd dfn = matmul_tn(m.core.head, dlogits);
    {
        Matd dhd = matmul_nt(dlogits, fn);
        for (std::size_t i = 0; i < dhd.raw().size(); ++i) g.head.raw()[i] += dhd.raw()[i];
    }
    Matd dh(d, t_len);
    rmsnorm_backward(h, m.core.g_final, dfn, dh, g.g_final);

    for (std::size_t bi = cfg.n_blocks; bi-- > 0;) {
        BlockTape& tp = tapes[bi];
        BlockGrads& gb = g.blocks[bi];
        const DenseBlock& blk = m.blocks[bi];

        // MLP: h = h_mid + Wdown act
        Matd dact = matmul_tn(blk.w_down, dh);
        {
            Matd dw = matmul_nt(dh, tp.act);
            for (std::size_t i = 0; i < dw.raw().size(); ++i) gb.w_down.raw()[i] += dw.raw()[i];
        }
        Matd dup(cfg.d_ff, t_len), dgate(cfg.d_ff, t_len);
        for (std::size_t i = 0; i < cfg.d_ff; ++i)
            for (std::size_t t = 0; t < t_len; ++t) {
                const double gv = tp.gate(i, t);
                const double sg = 1.0 / (1.0 + std::exp(-gv));
                dup(i, t) = dact(i, t) * gv * sg;
                dgate(i, t) = dact(i, t) * tp.up(i, t) * sg * (1.0 + gv * (1.0 - sg));
            }
        Matd dhn2 = add(matmul_tn(blk.w_up, dup), matmul_tn(blk.w_gate, dgate));
        {
            Matd dwu = matmul_nt(dup, tp.hn2);
            Matd dwg = matmul_nt(dgate, tp.hn2);
            for (std::size_t i = 0; i < dwu.raw().size(); ++i) {
                gb.w_up.raw()[i] += dwu.raw()[i];
                gb.w_gate.raw()[i] += dwg.raw()[i];
            }
        }
        // dh flows both through the residual and the norm
        rmsnorm_backward(tp.h_mid, m.core.g_mlp[bi], dhn2, dh, gb.g_mlp);

        // attention: h_mid = h_in + Wo attn
        Matd dattn = matmul_tn(blk.wo, dh);
        {
            Matd dwo = matmul_nt(dh, tp.attn);
            for (std::size_t i = 0; i < dwo.raw().size(); ++i) gb.wo.raw()[i] += dwo.raw()[i];
        }
        Matd dq(d, t_len), dk(kv, t_len), dv(kv, t_len);
        std::vector<double> dp(t_len), ds(t_len);
        for (std::size_t head = 0; head < cfg.n_heads; ++head) {
            const std::size_t gh = head / group;
            for (std::size_t t = 0; t < t_len; ++t) {
                double dot_pp = 0;
                for (std::size_t tau = 0; tau <= t; ++tau) {
                    double s = 0;
                    for (std::size_t j = 0; j < hd; ++j)
                        s += dattn(head * hd + j, t) * tp.v(gh * hd + j, tau);
                    dp[tau] = s;
                    dot_pp += s * tp.probs[head](t, tau);
                }
                for (std::size_t tau = 0; tau <= t; ++tau) {
                    const double p = tp.probs[head](t, tau);
                    ds[tau] = p * (dp[tau] - dot_pp);
                    for (std::size_t j = 0; j < hd; ++j)
                        dv(gh * hd + j, tau) += p * dattn(head * hd + j, t);
                }
                for (std::size_t tau = 0; tau <= t; ++tau) {
                    const double w = ds[tau] * ascale;
                    for (std::size_t j = 0; j < hd; ++j) {
                        dq(head * hd + j, t) += w * tp.k(gh * hd + j, tau);
                        dk(gh * hd + j, tau) += w * tp.q(head * hd + j, t);
                    }
                }
            }
        }
        lmops::rope_inplace(dq, hd, 0, -1.0);
        lmops::rope_inplace(dk, hd, 0, -1.0);

        Matd dhn1 = matmul_tn(blk.wq, dq);
        dhn1 = add(dhn1, matmul_tn(blk.wk, dk));
        dhn1 = add(dhn1, matmul_tn(blk.wv, dv));
        {
            Matd dwq = matmul_nt(dq, tp.hn1);
            Matd dwk = matmul_nt(dk, tp.hn1);
            Matd dwv = matmul_nt(dv, tp.hn1);
            for (std::size_t i = 0; i < dwq.raw().size(); ++i) gb.wq.raw()[i] += dwq.raw()[i];
            for (std::size_t i = 0; i < dwk.raw().size(); ++i) gb.wk.raw()[i] += dwk.raw()[i];
            for (std::size_t i = 0; i < dwv.raw().size(); ++i) gb.wv.raw()[i] += dwv.raw()[i];
        }
        rmsnorm_backward(tp.h_in, m.core.g_attn[bi], dhn1, dh, gb.g_attn);
    }

    // embedding rows
    for (std::size_t t = 0; t < t_len; ++t)
        for (std::size_t i = 0; i < d; ++i) g.embed(toks[t], i) += dh(i, t);
    return loss;
}

}  // namespace lmtrain

struct LmTrainConfig {
    std::size_t steps = 300;
    std::size_t batch_size = 8;
    std::size_t seq_len = 64;
    double learning_rate = 1e-3;
    double beta1 = 0.9, beta2 = 0.99, eps = 1e-8;
};

inline DenseModel init_dense_model(const ToyLMConfig& cfg) {
    cfg.validate();
    DenseModel m;
    m.core.cfg = cfg;
    Rng rng(cfg.seed ^ 0x70795f6c6dULL);
    auto randn = [&](Matd& w, double std) {
        for (double& v : w.raw()) v = std * rng.gaussian();
    };
    m.core.embed = Matd(cfg.vocab, cfg.d_model);
    m.core.head = Matd(cfg.vocab, cfg.d_model);
    randn(m.core.embed, 0.02);
    randn(m.core.head, 0.02);
    m.core.g_final.assign(cfg.d_model, 1.0);
    m.core.g_attn.assign(cfg.n_blocks, std::vector<double>(cfg.d_model, 1.0));
    m.core.g_mlp.assign(cfg.n_blocks, std::vector<double>(cfg.d_model, 1.0));
    m.blocks.resize(cfg.n_blocks);
    const double ws = 0.02;
    for (auto& b : m.blocks) {
        b.wq = Matd(cfg.d_model, cfg.d_model);
        b.wk = Matd(cfg.kv_dim(), cfg.d_model);
        b.wv = Matd(cfg.kv_dim(), cfg.d_model);
        b.wo = Matd(cfg.d_model, cfg.d_model);
        b.w_up = Matd(cfg.d_ff, cfg.d_model);
        b.w_gate = Matd(cfg.d_ff, cfg.d_model);
        b.w_down = Matd(cfg.d_model, cfg.d_ff);
        randn(b.wq, ws);
        randn(b.wk, ws);
        randn(b.wv, ws);
        randn(b.wo, ws);
        randn(b.w_up, ws);
        randn(b.w_gate, ws);
        randn(b.w_down, ws);
    }
    return m;
}

struct LmTrainResult {
    DenseModel model;
    std::vector<double> step_loss;
};

// Adam over all parameters; batches drawn deterministically from `corpus`.
inline LmTrainResult train_lm(const ToyLMConfig& cfg, const std::vector<std::uint8_t>& corpus,
                              const LmTrainConfig& tc) {
    if (corpus.size() < tc.batch_size * tc.seq_len + 1)
        throw std::invalid_argument("train_lm: insufficient data");
    LmTrainResult res;
    res.model = init_dense_model(cfg);
    DenseModel& m = res.model;
    lmtrain::Grads g = lmtrain::make_grads(m);
    lmtrain::Grads adam_m = lmtrain::make_grads(m);
    lmtrain::Grads adam_v = lmtrain::make_grads(m);
    Rng rng(cfg.seed ^ 0x747261696eULL);

    for (std::size_t step = 0; step < tc.steps; ++step) {
        lmtrain::for_each_param(m, g, [](auto&, auto& gr) {
            for (double& v : gr) v = 0;
        });
        double loss = 0;
        for (std::size_t bi = 0; bi < tc.batch_size; ++bi) {
            const std::size_t start = rng.below(corpus.size() - tc.seq_len);
            std::vector<std::uint8_t> toks(corpus.begin() + std::ptrdiff_t(start),
                                           corpus.begin() + std::ptrdiff_t(start + tc.seq_len));
            loss += lmtrain::seq_loss_and_grad(m, toks, g, 1.0 / double(tc.batch_size));
        }
        loss /= double(tc.batch_size);
        res.step_loss.push_back(loss);

        const double bc1 = 1.0 - std::pow(tc.beta1, double(step + 1));
        const double bc2 = 1.0 - std::pow(tc.beta2, double(step + 1));
        // moments live in adam_m/adam_v with identical tensor layout
        std::vector<std::vector<double>*> ps, gs, ms, vs;
        lmtrain::for_each_param(m, g, [&](auto& p, auto& gr) {
            ps.push_back(&p);
            gs.push_back(&gr);
        });
        lmtrain::for_each_param(m, adam_m, [&](auto&, auto& mm) { ms.push_back(&mm); });
        lmtrain::for_each_param(m, adam_v, [&](auto&, auto& vv) { vs.push_back(&vv); });
        for (std::size_t i = 0; i < ps.size(); ++i) {
            auto& p = *ps[i];
            auto& gr = *gs[i];
            auto& mm = *ms[i];
            auto& vv = *vs[i];
            for (std::size_t j = 0; j < p.size(); ++j) {
                mm[j] = tc.beta1 * mm[j] + (1 - tc.beta1) * gr[j];
                vv[j] = tc.beta2 * vv[j] + (1 - tc.beta2) * gr[j] * gr[j];
                p[j] -= tc.learning_rate * (mm[j] / bc1) / (std::sqrt(vv[j] / bc2) + tc.eps);
            }
        }
    }
    return res;
}

// Held-out mean cross entropy over non-overlapping windows of a stream.
inline double eval_cross_entropy(const LmCore& core, const ProjectionProvider& prov,
                                 const std::vector<std::uint8_t>& tokens, std::size_t window) {
    double total = 0;
    std::size_t n = 0;
    for (std::size_t s = 0; s + window <= tokens.size(); s += window) {
        std::vector<std::uint8_t> w(tokens.begin() + std::ptrdiff_t(s),
                                    tokens.begin() + std::ptrdiff_t(s + window));
        total += window_cross_entropy(core, prov, w);
        ++n;
    }
    if (n == 0) throw std::invalid_argument("eval_cross_entropy: too few tokens");
    return total / double(n);
}

}  // namespace parse
