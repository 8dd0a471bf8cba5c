#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "rank_experts.hpp"
#include "rng.hpp"

namespace parse {

// Linear gate over the materialized experts of one weight matrix.
struct RouterParams {
    Matd theta;                // r x n
    std::vector<double> bias;  // r
    double tau = 1.0;
    double eps = 1e-8;
};

struct RouterTrainConfig {
    double learning_rate = 2e-4;
    double weight_decay = 1e-3;
    double warmup_frac = 0.1;  // cosine schedule, 10% warmup
    std::size_t epochs = 5;
    std::size_t batch_size = 64;
    std::uint64_t seed = 0;
};

inline RouterParams make_router(std::size_t r, std::size_t n, double tau = 1.0,
                                double eps = 1e-8) {
    RouterParams p;
    p.theta = Matd(r, n);  // zero init: first selection is the static prefix
    p.bias.assign(r, 0.0);
    p.tau = tau;
    p.eps = eps;
    return p;
}

inline std::vector<double> score(const RouterParams& r, const std::vector<double>& h) {
    if (h.size() != r.theta.cols()) throw std::invalid_argument("score: bad input length");
    std::vector<double> z(r.theta.rows());
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = dot(r.theta.row(i), h.data(), h.size()) + r.bias[i];
    return z;
}

// Indices of the K largest logits; ties toward the lower index; sorted.
inline RankSelection select_topk(const std::vector<double>& logits, std::size_t k) {
    if (k == 0 || k > logits.size()) throw std::invalid_argument("select_topk: K out of range");
    std::vector<std::uint32_t> idx(logits.size());
    std::iota(idx.begin(), idx.end(), 0u);
    std::stable_sort(idx.begin(), idx.end(), [&](std::uint32_t a, std::uint32_t b) {
        return logits[a] > logits[b];
    });
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    RankSelection sel;
    sel.indices = std::move(idx);
    return sel;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// m_soft_i = K * sig(z_i/tau) / (sum_j sig(z_j/tau) + eps)
inline std::vector<double> soft_mask(const std::vector<double>& logits, std::size_t k,
                                     double tau, double eps) {
    std::vector<double> s(logits.size());
    double total = 0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        s[i] = sigmoid(logits[i] / tau);
        total += s[i];
    }
    const double denom = total + eps;
    for (double& v : s) v = double(k) * v / denom;
    return s;
}

// Mean of the columns of X: the router input for one sequence.
inline std::vector<double> mean_pool(const Matd& x) {
    std::vector<double> h(x.rows(), 0.0);
    for (std::size_t i = 0; i < x.rows(); ++i) {
        double s = 0;
        for (std::size_t t = 0; t < x.cols(); ++t) s += x(i, t);
        h[i] = s / double(x.cols());
    }
    return h;
}

struct RouterTape {
    std::vector<double> h;
    std::vector<double> logits;
    RankSelection selection;
    std::vector<double> m_soft;
    std::size_t k = 0;
};

// Hard top-K forward. The surrogate never touches the value path.
inline std::pair<Matd, RouterTape> ste_forward(const FactorizedLayer& layer,
                                               const RouterParams& r, const Matd& x,
                                               std::size_t k) {
    RouterTape tape;
    tape.h = mean_pool(x);
    tape.logits = score(r, tape.h);
    tape.selection = select_topk(tape.logits, k);
    tape.m_soft = soft_mask(tape.logits, k, r.tau, r.eps);
    tape.k = k;
    return {masked_forward(layer, tape.selection, x), tape};
}

// Chain g_m -> logits through the soft-mask Jacobian, then to theta via the
// pooled input. g_m_i is the gradient of the loss w.r.t. gate i.
inline void chain_soft_mask(const std::vector<double>& logits, const std::vector<double>& g_m,
                            std::size_t k, double tau, double eps,
                            std::vector<double>& g_logits) {
    const std::size_t r = logits.size();
    std::vector<double> s(r), sp(r);
    double total = 0;
    for (std::size_t i = 0; i < r; ++i) {
        s[i] = sigmoid(logits[i] / tau);
        sp[i] = s[i] * (1.0 - s[i]) / tau;
        total += s[i];
    }
    const double denom = total + eps;
    double gs = 0;  // sum_i g_m_i * s_i
    for (std::size_t i = 0; i < r; ++i) gs += g_m[i] * s[i];
    g_logits.resize(r);
    for (std::size_t j = 0; j < r; ++j)
        g_logits[j] = double(k) * sp[j] / denom * (g_m[j] - gs / denom);
}

struct RouterGrad {
    Matd theta;                // r x n
    std::vector<double> bias;  // r
};

enum class BackwardMode {
    ste,       // residual from the hard forward (training path, Eq.-8 style)
    surrogate  // residual from the soft combination (differentiable; used
               // against finite differences)
};

// Gradient of the reconstruction loss w.r.t. the gate parameters.
// g_m_i = 2 <residual, a_i b_i^T X>_F, chained through the soft mask.
inline RouterGrad router_backward(const RouterTape& tape, const FactorizedLayer& layer,
                                  const RouterParams& r, const Matd& x, const Matd& dense_out,
                                  BackwardMode mode = BackwardMode::ste) {
    const std::size_t nr = layer.r_store;
    const std::size_t t = x.cols();

    // per-expert low-rank intermediates z_e = b_e^T X
    Matd z(nr, t);
    for (std::size_t e = 0; e < nr; ++e)
        for (std::size_t c = 0; c < t; ++c) {
            double s = 0;
            for (std::size_t j = 0; j < layer.n; ++j) s += layer.B(j, e) * x(j, c);
            z(e, c) = s;
        }

    Matd approx(layer.m, t);
    if (mode == BackwardMode::ste) {
        for (std::uint32_t e : tape.selection.indices)
            for (std::size_t i = 0; i < layer.m; ++i) {
                const double a = layer.A(i, e);
                for (std::size_t c = 0; c < t; ++c) approx(i, c) += a * z(e, c);
            }
    } else {
        for (std::size_t e = 0; e < nr; ++e)
            for (std::size_t i = 0; i < layer.m; ++i) {
                const double a = layer.A(i, e) * tape.m_soft[e];
                for (std::size_t c = 0; c < t; ++c) approx(i, c) += a * z(e, c);
            }
    }
    Matd resid = sub(approx, dense_out);

    std::vector<double> g_m(nr, 0.0);
    for (std::size_t e = 0; e < nr; ++e) {
        double acc = 0;
        for (std::size_t i = 0; i < layer.m; ++i) {
            const double a = layer.A(i, e);
            if (a == 0) continue;
            for (std::size_t c = 0; c < t; ++c) acc += resid(i, c) * a * z(e, c);
        }
        g_m[e] = 2.0 * acc;
    }

    std::vector<double> g_logits;
    chain_soft_mask(tape.logits, g_m, tape.k, r.tau, r.eps, g_logits);

    RouterGrad g;
    g.theta = Matd(nr, layer.n);
    g.bias = g_logits;
    for (std::size_t i = 0; i < nr; ++i)
        for (std::size_t j = 0; j < layer.n; ++j) g.theta(i, j) = g_logits[i] * tape.h[j];
    return g;
}

// ------------------------------------------------------------------
// Per-matrix training on precomputed sequence statistics. Keeping only
// Z = B^T X, P = A^T Y, the pooled input and ||Y||^2 per sequence makes
// epochs cheap: losses and gate gradients reduce to small Gram products.
// ------------------------------------------------------------------

struct RouterSeqStats {
    std::vector<double> h;  // pooled router input, length n
    Matd z;                 // r x T, B^T X
    Matd p;                 // r x T, A^T Y
    double y_sq = 0;        // ||Y||_F^2
};

inline RouterSeqStats precompute_router_stats(const FactorizedLayer& layer, const Matd& x,
                                              const Matd& y) {
    RouterSeqStats st;
    st.h = mean_pool(x);
    st.z = matmul_tn(layer.B, x);
    st.p = matmul_tn(layer.A, y);
    st.y_sq = frob_norm_sq(y);
    return st;
}

inline Matd gram_aat(const FactorizedLayer& layer) { return matmul_tn(layer.A, layer.A); }

// ||A_sel Z_sel - Y||^2 via the Gram identity.
inline double selection_loss(const Matd& gram, const RouterSeqStats& st,
                             const RankSelection& sel) {
    double quad = 0, cross = 0;
    const std::size_t t = st.z.cols();
    for (std::uint32_t i : sel.indices) {
        cross += dot(st.p.row(i), st.z.row(i), t);
        for (std::uint32_t j : sel.indices) {
            const double zz = dot(st.z.row(i), st.z.row(j), t);
            quad += gram(i, j) * zz;
        }
    }
    return quad - 2.0 * cross + st.y_sq;
}

// g_m_i = 2<A_sel Z_sel - Y, a_i z_i> from the cached statistics.
inline void selection_gate_grad(const Matd& gram, const RouterSeqStats& st,
                                const RankSelection& sel, std::vector<double>& g_m) {
    const std::size_t r = gram.rows();
    const std::size_t t = st.z.cols();
    g_m.assign(r, 0.0);
    for (std::size_t i = 0; i < r; ++i) {
        double acc = -dot(st.p.row(i), st.z.row(i), t);
        for (std::uint32_t j : sel.indices) {
            const double g = gram(i, j);
            if (g == 0) continue;
            acc += g * dot(st.z.row(i), st.z.row(j), t);
        }
        g_m[i] = 2.0 * acc;
    }
}

// g_m at a weighted (soft) reconstruction: residual = sum_j w_j a_j z_j - Y.
inline void soft_gate_grad(const Matd& gram, const RouterSeqStats& st,
                           const std::vector<double>& w, std::vector<double>& g_m) {
    const std::size_t r = gram.rows();
    const std::size_t t = st.z.cols();
    g_m.assign(r, 0.0);
    for (std::size_t i = 0; i < r; ++i) {
        double acc = -dot(st.p.row(i), st.z.row(i), t);
        for (std::size_t j = 0; j < r; ++j) {
            const double gw = gram(i, j) * w[j];
            if (gw == 0) continue;
            acc += gw * dot(st.z.row(i), st.z.row(j), t);
        }
        g_m[i] = 2.0 * acc;
    }
}

struct AdamW {
    Matd m_theta, v_theta;
    std::vector<double> m_bias, v_bias;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    std::size_t step = 0;

    explicit AdamW(std::size_t r, std::size_t n)
        : m_theta(r, n), v_theta(r, n), m_bias(r, 0.0), v_bias(r, 0.0) {}

    void update(RouterParams& p, const RouterGrad& g, double lr, double wd) {
        ++step;
        const double bc1 = 1.0 - std::pow(beta1, double(step));
        const double bc2 = 1.0 - std::pow(beta2, double(step));
        auto& th = p.theta.raw();
        const auto& gt = g.theta.raw();
        auto& mt = m_theta.raw();
        auto& vt = v_theta.raw();
        for (std::size_t i = 0; i < th.size(); ++i) {
            mt[i] = beta1 * mt[i] + (1 - beta1) * gt[i];
            vt[i] = beta2 * vt[i] + (1 - beta2) * gt[i] * gt[i];
            th[i] -= lr * (mt[i] / bc1 / (std::sqrt(vt[i] / bc2) + eps) + wd * th[i]);
        }
        for (std::size_t i = 0; i < p.bias.size(); ++i) {
            m_bias[i] = beta1 * m_bias[i] + (1 - beta1) * g.bias[i];
            v_bias[i] = beta2 * v_bias[i] + (1 - beta2) * g.bias[i] * g.bias[i];
            // no decay on the bias
            p.bias[i] -= lr * (m_bias[i] / bc1 / (std::sqrt(v_bias[i] / bc2) + eps));
        }
    }
};

inline double cosine_lr(double base, std::size_t step, std::size_t total, double warmup_frac) {
    const double warm = std::max(1.0, warmup_frac * double(total));
    if (double(step) < warm) return base * double(step + 1) / warm;
    const double prog = (double(step) - warm) / std::max(1.0, double(total) - warm);
    return base * 0.5 * (1.0 + std::cos(3.141592653589793 * std::min(1.0, prog)));
}

struct RouterTrainResult {
    RouterParams params;
    std::vector<double> epoch_loss;   // mean L_rec per epoch, during updates
    std::vector<double> frozen_loss;  // mean L_rec per epoch, params frozen
};

// Train one matrix's gate on cached per-sequence statistics. Selection is
// made once per sequence from the pooled input; factors stay frozen.
inline RouterTrainResult train_router_matrix(const FactorizedLayer& layer,
                                             const std::vector<RouterSeqStats>& seqs,
                                             const RouterTrainConfig& cfg,
                                             double tau = 1.0, double eps = 1e-8) {
    if (seqs.empty()) throw std::invalid_argument("train_router: empty corpus");
    const std::size_t r = layer.r_store, n = layer.n, k = layer.K;
    RouterTrainResult out;
    out.params = make_router(r, n, tau, eps);
    Matd gram = gram_aat(layer);
    AdamW opt(r, n);

    const std::size_t batches_per_epoch = (seqs.size() + cfg.batch_size - 1) / cfg.batch_size;
    const std::size_t total_steps = cfg.epochs * batches_per_epoch;
    std::size_t step = 0;

    std::vector<std::size_t> order(seqs.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(cfg.seed);

    // full-pass mean hard loss with frozen params
    auto eval_pass = [&](const RouterParams& p) {
        double total = 0;
        for (const RouterSeqStats& st : seqs)
            total += selection_loss(gram, st, select_topk(score(p, st.h), k));
        return total / double(seqs.size());
    };
    // best-epoch checkpointing: zero init is the static prefix, so the
    // returned router is never worse than static on the training set
    RouterParams best = out.params;
    double best_loss = eval_pass(best);

    std::vector<double> g_m, g_logits;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        // deterministic Fisher-Yates
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[rng.below(i)]);

        double epoch_loss = 0;
        for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch_size) {
            const std::size_t b1 = std::min(order.size(), b0 + cfg.batch_size);
            RouterGrad g;
            g.theta = Matd(r, n);
            g.bias.assign(r, 0.0);
            for (std::size_t bi = b0; bi < b1; ++bi) {
                const RouterSeqStats& st = seqs[order[bi]];
                std::vector<double> logits = score(out.params, st.h);
                RankSelection sel = select_topk(logits, k);
                epoch_loss += selection_loss(gram, st, sel);
                // during lr warmup the residual is taken at the soft
                // reconstruction: near init the soft mask is almost uniform,
                // so each expert's gradient is proportional to its signed
                // energy and the gate learns a ranking before the hard
                // top-K path starts feeding on its own choices
                if (double(step) < cfg.warmup_frac * double(total_steps))
                    soft_gate_grad(gram, st, soft_mask(logits, k, tau, eps), g_m);
                else
                    selection_gate_grad(gram, st, sel, g_m);
                chain_soft_mask(logits, g_m, k, tau, eps, g_logits);
                for (std::size_t i = 0; i < r; ++i) {
                    const double gl = g_logits[i];
                    g.bias[i] += gl;
                    double* row = g.theta.row(i);
                    for (std::size_t j = 0; j < n; ++j) row[j] += gl * st.h[j];
                }
            }
            const double inv = 1.0 / double(b1 - b0);
            for (double& v : g.theta.raw()) v *= inv;
            for (double& v : g.bias) v *= inv;
            const double lr = cosine_lr(cfg.learning_rate, step, total_steps, cfg.warmup_frac);
            opt.update(out.params, g, lr, cfg.weight_decay);
            ++step;
        }
        out.epoch_loss.push_back(epoch_loss / double(seqs.size()));
        const double frozen_loss = eval_pass(out.params);
        out.frozen_loss.push_back(frozen_loss);
        if (frozen_loss < best_loss) {
            best_loss = frozen_loss;
            best = out.params;
        }
    }
    out.params = std::move(best);
    return out;
}

}  // namespace parse
