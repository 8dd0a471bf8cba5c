#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "numerics.hpp"

namespace parse {

struct WhiteningTransform {
    Matd S;             // n x n lower-triangular Cholesky factor of XX^T + jitter*I
    double jitter = 0;  // ridge actually applied
};

struct CompressionConfig {
    double ratio = 0.0;            // fraction of dense parameters removed
    bool whitening = true;         // off = vanilla SVD truncation
    double store_multiplier = 2.0; // r_store = min(r_max, ceil(store_multiplier*K))
    double jitter = -1.0;          // < 0 means default 1e-6*trace(XX^T)/n
};

// Absorbed factors for one weight matrix: columns of A are sigma_i*u_i,
// columns of B satisfy B^T x = V^T S^-1 x.
struct FactorizedLayer {
    std::string layer_id;
    std::size_t m = 0, n = 0;
    std::size_t r_store = 0;
    Matd A;                     // m x r_store
    Matd B;                     // n x r_store
    std::vector<double> sigma;  // r_store leading singular values of WS
    std::size_t K = 0;          // compute budget, K <= r_store
    bool whitened = true;
};

inline double default_jitter(const Matd& gram) {
    double tr = 0;
    for (std::size_t i = 0; i < gram.rows(); ++i) tr += gram(i, i);
    return 1e-6 * tr / double(gram.rows());
}

// Whitening factor S from the calibration Gram XX^T + jitter*I, plus the
// product W*S. Escalates the ridge x10 once if the Cholesky rejects.
inline std::pair<WhiteningTransform, Matd> whiten(const Matd& w, const Matd& x,
                                                  double jitter = -1.0) {
    if (x.rows() != w.cols()) throw std::invalid_argument("whiten: X rows != W cols");
    Matd gram = matmul_nt(x, x);
    if (jitter < 0) jitter = default_jitter(gram);

    auto attempt = [&](double j) {
        Matd p = gram;
        for (std::size_t i = 0; i < p.rows(); ++i) p(i, i) += j;
        return cholesky_lower(p);
    };

    WhiteningTransform wt;
    try {
        wt.S = attempt(jitter);
        wt.jitter = jitter;
    } catch (const std::runtime_error&) {
        const double esc = (jitter > 0 ? jitter * 10.0 : 10.0 * default_jitter(gram));
        try {
            wt.S = attempt(esc);
            wt.jitter = esc;
        } catch (const std::runtime_error&) {
            throw std::runtime_error("calibration covariance degenerate");
        }
    }
    return {wt, matmul(w, wt.S)};
}

// max-abs deviation of S^-1 (XX^T + jitter I) S^-T from identity,
// evaluated through triangular solves.
inline double whitening_identity_error(const WhiteningTransform& wt, const Matd& x) {
    Matd p = matmul_nt(x, x);
    for (std::size_t i = 0; i < p.rows(); ++i) p(i, i) += wt.jitter;
    Matd y = solve_lower_triangular(wt.S, p, false);           // S Y = P
    Matd z = solve_lower_triangular(wt.S, transpose(y), false); // S Z = Y^T
    Matd dev = sub(z, Matd::identity(p.rows()));
    return max_abs(dev);
}

inline std::size_t store_rank(std::size_t k, std::size_t r_max, double store_multiplier) {
    const auto want = static_cast<std::size_t>(std::ceil(store_multiplier * double(k)));
    return std::min(r_max, std::max(k, want));
}

// Slice a whitening transform + SVD of WS into the absorbed layer factors.
inline FactorizedLayer absorb_factors(const std::string& id, std::size_t m, std::size_t n,
                                      const WhiteningTransform* wt, const SvdResult& sv,
                                      std::size_t k, std::size_t r_store) {
    FactorizedLayer fl;
    fl.layer_id = id;
    fl.m = m;
    fl.n = n;
    fl.K = k;
    fl.r_store = r_store;
    fl.whitened = wt != nullptr;
    fl.A = Matd(m, r_store);
    fl.sigma.assign(sv.sigma.begin(), sv.sigma.begin() + std::ptrdiff_t(r_store));
    for (std::size_t j = 0; j < r_store; ++j)
        for (std::size_t i = 0; i < m; ++i) fl.A(i, j) = sv.U(i, j) * sv.sigma[j];

    Matd vr(n, r_store);
    for (std::size_t j = 0; j < r_store; ++j)
        for (std::size_t i = 0; i < n; ++i) vr(i, j) = sv.V(i, j);
    // B solves S^T B = V_r; never form S^-1 explicitly
    fl.B = wt ? solve_lower_triangular(wt->S, vr, true) : vr;
    return fl;
}

inline FactorizedLayer factorize_layer(const Matd& w, const Matd& x,
                                       const CompressionConfig& cfg, std::size_t k,
                                       const std::string& id = "layer") {
    const std::size_t m = w.rows(), n = w.cols();
    const std::size_t r_max = std::min(m, n);
    if (k > r_max) throw std::invalid_argument("factorize_layer: K > min(m,n)");

    if (cfg.whitening) {
        auto [wt, ws] = whiten(w, x, cfg.jitter);
        SvdResult sv = svd(ws);
        return absorb_factors(id, m, n, &wt, sv, k, store_rank(k, r_max, cfg.store_multiplier));
    }
    SvdResult sv = svd(w);
    return absorb_factors(id, m, n, nullptr, sv, k, store_rank(k, r_max, cfg.store_multiplier));
}

// Per-layer rank budgets under a global compute-parameter budget.
// Retain rank (l,i) iff sigma_{l,i}^2/(m_l+n_l) clears a threshold found so
// that sum K_l(m_l+n_l) fits (1-ratio)*sum m_l*n_l and the best excluded
// rank would not. Every layer keeps at least one rank.
inline std::vector<std::size_t> allocate_budgets(
    const std::vector<std::vector<double>>& spectra,
    const std::vector<std::pair<std::size_t, std::size_t>>& dims, double ratio,
    bool effective_rank_weighting = false) {
    if (ratio < 0 || ratio >= 1) throw std::invalid_argument("ratio must be in [0,1)");
    const std::size_t nl = spectra.size();
    if (dims.size() != nl) throw std::invalid_argument("spectra/dims length mismatch");

    double dense_params = 0;
    for (auto [m, n] : dims) dense_params += double(m) * double(n);
    const double budget = (1.0 - ratio) * dense_params;

    std::vector<double> layer_weight(nl, 1.0);
    if (effective_rank_weighting) {
        for (std::size_t l = 0; l < nl; ++l) {
            double tot = 0;
            for (double s : spectra[l]) tot += s * s;
            if (tot <= 0) continue;
            double ent = 0;
            for (double s : spectra[l]) {
                const double p = s * s / tot;
                if (p > 0) ent -= p * std::log(p);
            }
            layer_weight[l] = std::exp(ent) / double(spectra[l].size());
        }
    }

    std::vector<std::size_t> k(nl, 1);
    double used = 0;
    for (auto [m, n] : dims) used += double(m + n);
    if (used > budget) throw std::runtime_error("ratio too aggressive for K≥1 floor");

    struct Cand {
        double score;
        std::size_t layer, rank;
    };
    std::vector<Cand> cands;
    for (std::size_t l = 0; l < nl; ++l) {
        const double cost_unit = double(dims[l].first + dims[l].second);
        for (std::size_t i = 1; i < spectra[l].size(); ++i) {
            const double s = spectra[l][i];
            cands.push_back({layer_weight[l] * s * s / cost_unit, l, i});
        }
    }
    std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.layer != b.layer) return a.layer < b.layer;
        return a.rank < b.rank;
    });

    for (const Cand& c : cands) {
        const double cost = double(dims[c.layer].first + dims[c.layer].second);
        if (used + cost > budget) break;  // best excluded rank would exceed the budget
        used += cost;
        k[c.layer] += 1;
    }
    // ranks within a layer are a prefix by construction (scores non-increasing
    // per layer, ties broken by rank index)
    for (std::size_t l = 0; l < nl; ++l) k[l] = std::min(k[l], spectra[l].size());
    return k;
}

}  // namespace parse
