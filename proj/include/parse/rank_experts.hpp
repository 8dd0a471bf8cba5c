#pragma once

#include <algorithm>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "factorize.hpp"

namespace parse {

// Sorted set of expert indices of size K for one weight matrix.
struct RankSelection {
    std::vector<std::uint32_t> indices;  // strictly increasing

    std::size_t K() const { return indices.size(); }

    bool contains(std::uint32_t i) const {
        return std::binary_search(indices.begin(), indices.end(), i);
    }

    static RankSelection prefix(std::size_t k) {
        RankSelection s;
        s.indices.resize(k);
        std::iota(s.indices.begin(), s.indices.end(), 0u);
        return s;
    }
};

inline void check_selection(const FactorizedLayer& layer, const RankSelection& sel) {
    if (sel.indices.empty()) throw std::invalid_argument("selection must be non-empty");
    for (std::size_t i = 1; i < sel.indices.size(); ++i)
        if (sel.indices[i] <= sel.indices[i - 1])
            throw std::invalid_argument("selection indices not strictly increasing");
    if (sel.indices.back() >= layer.r_store)
        throw std::out_of_range("selection index beyond r_store");
}

// a_i * (b_i^T x)
inline std::vector<double> expert_output(const FactorizedLayer& layer, std::size_t i,
                                         const std::vector<double>& x) {
    if (i >= layer.r_store) throw std::out_of_range("expert index out of range");
    if (x.size() != layer.n) throw std::invalid_argument("expert_output: bad x length");
    double z = 0;
    for (std::size_t j = 0; j < layer.n; ++j) z += layer.B(j, i) * x[j];
    std::vector<double> out(layer.m);
    for (std::size_t j = 0; j < layer.m; ++j) out[j] = layer.A(j, i) * z;
    return out;
}

// Sum over selected experts, accumulated in ascending index order.
inline Matd masked_forward(const FactorizedLayer& layer, const RankSelection& sel,
                           const Matd& x) {
    check_selection(layer, sel);
    if (x.rows() != layer.n) throw std::invalid_argument("masked_forward: bad X shape");
    const std::size_t t = x.cols();
    Matd out(layer.m, t);
    std::vector<double> z(t);
    for (std::uint32_t e : sel.indices) {
        for (std::size_t c = 0; c < t; ++c) {
            double s = 0;
            for (std::size_t j = 0; j < layer.n; ++j) s += layer.B(j, e) * x(j, c);
            z[c] = s;
        }
        for (std::size_t i = 0; i < layer.m; ++i) {
            const double a = layer.A(i, e);
            double* row = out.row(i);
            for (std::size_t c = 0; c < t; ++c) row[c] += a * z[c];
        }
    }
    return out;
}

// || masked - dense ||_F^2
inline double reconstruction_loss(const FactorizedLayer& layer, const RankSelection& sel,
                                  const Matd& x, const Matd& dense_out) {
    Matd approx = masked_forward(layer, sel, x);
    if (approx.rows() != dense_out.rows() || approx.cols() != dense_out.cols())
        throw std::invalid_argument("reconstruction_loss: shape mismatch");
    return frob_norm_sq(sub(approx, dense_out));
}

// Per-expert energy score c_i = ||a_i||^2 * sum_t (b_i^T x_t)^2. With
// orthonormal U columns the output components are mutually orthogonal, so
// the top-K by energy is the exact argmin of the reconstruction loss.
inline std::vector<double> expert_energies(const FactorizedLayer& layer, const Matd& x) {
    std::vector<double> c(layer.r_store, 0.0);
    for (std::size_t e = 0; e < layer.r_store; ++e) {
        double an = 0;
        for (std::size_t i = 0; i < layer.m; ++i) an += layer.A(i, e) * layer.A(i, e);
        double zn = 0;
        for (std::size_t t = 0; t < x.cols(); ++t) {
            double z = 0;
            for (std::size_t j = 0; j < layer.n; ++j) z += layer.B(j, e) * x(j, t);
            zn += z * z;
        }
        c[e] = an * zn;
    }
    return c;
}

// Top-K experts by energy; ties toward the lower index.
inline RankSelection oracle_select(const FactorizedLayer& layer, const Matd& x,
                                   std::size_t k) {
    std::vector<double> c = expert_energies(layer, x);
    std::vector<std::uint32_t> idx(c.size());
    std::iota(idx.begin(), idx.end(), 0u);
    std::stable_sort(idx.begin(), idx.end(), [&](std::uint32_t a, std::uint32_t b) {
        return c[a] > c[b];
    });
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    RankSelection sel;
    sel.indices = std::move(idx);
    return sel;
}

}  // namespace parse
