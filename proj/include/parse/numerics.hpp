#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "matrix.hpp"

namespace parse {

struct SvdResult {
    Matd U;                     // m x r, orthonormal columns
    std::vector<double> sigma;  // r, non-increasing, >= 0
    Matd V;                     // n x r, orthonormal columns
};

namespace detail {

// One-sided Jacobi on the columns of A (m x n, m >= n). On return the
// columns of A are sigma_j * u_j and V holds the right singular vectors.
inline void jacobi_sweep_svd(Matd& a, Matd& v) {
    const std::size_t m = a.rows(), n = a.cols();
    const double tol = 1e-14;
    const int max_sweeps = 64;
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        bool rotated = false;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                double app = 0, aqq = 0, apq = 0;
                for (std::size_t i = 0; i < m; ++i) {
                    const double x = a(i, p), y = a(i, q);
                    app += x * x;
                    aqq += y * y;
                    apq += x * y;
                }
                if (std::abs(apq) <= tol * std::sqrt(app * aqq)) continue;
                rotated = true;
                const double zeta = (aqq - app) / (2.0 * apq);
                const double t = std::copysign(1.0, zeta) /
                                 (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (std::size_t i = 0; i < m; ++i) {
                    const double x = a(i, p), y = a(i, q);
                    a(i, p) = c * x - s * y;
                    a(i, q) = s * x + c * y;
                }
                for (std::size_t i = 0; i < n; ++i) {
                    const double x = v(i, p), y = v(i, q);
                    v(i, p) = c * x - s * y;
                    v(i, q) = s * x + c * y;
                }
            }
        }
        if (!rotated) return;
    }
    throw std::runtime_error("svd did not converge");
}

// Fill zero columns of U with unit vectors orthogonal to the nonzero ones.
inline void complete_orthonormal(Matd& u, std::size_t from) {
    const std::size_t m = u.rows(), r = u.cols();
    std::size_t filled = from;
    for (std::size_t basis = 0; basis < m && filled < r; ++basis) {
        std::vector<double> cand(m, 0.0);
        cand[basis] = 1.0;
        for (std::size_t j = 0; j < filled; ++j) {
            double d = 0;
            for (std::size_t i = 0; i < m; ++i) d += cand[i] * u(i, j);
            for (std::size_t i = 0; i < m; ++i) cand[i] -= d * u(i, j);
        }
        const double nrm = vec_norm(cand);
        if (nrm < 1e-6) continue;
        for (std::size_t i = 0; i < m; ++i) u(i, filled) = cand[i] / nrm;
        ++filled;
    }
}

}  // namespace detail

// Thin SVD, r = min(rows, cols). Columns of U are sign-fixed so the
// largest-magnitude entry of each u_i is positive.
inline SvdResult svd(const Matd& mat) {
    if (!mat.all_finite()) throw std::invalid_argument("non-finite matrix");
    if (mat.rows() == 0 || mat.cols() == 0) throw std::invalid_argument("empty matrix");

    const bool flipped = mat.rows() < mat.cols();
    Matd a = flipped ? transpose(mat) : mat;
    const std::size_t m = a.rows(), n = a.cols();

    Matd v = Matd::identity(n);
    detail::jacobi_sweep_svd(a, v);

    std::vector<double> sig(n);
    for (std::size_t j = 0; j < n; ++j) {
        double s = 0;
        for (std::size_t i = 0; i < m; ++i) s += a(i, j) * a(i, j);
        sig[j] = std::sqrt(s);
    }

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t i, std::size_t j) { return sig[i] > sig[j]; });

    Matd u(m, n), vperm(n, n);
    std::vector<double> sigma(n);
    std::size_t nonzero = 0;
    const double tiny = 1e-300;
    for (std::size_t k = 0; k < n; ++k) {
        const std::size_t j = order[k];
        sigma[k] = sig[j];
        if (sig[j] > tiny) {
            for (std::size_t i = 0; i < m; ++i) u(i, k) = a(i, j) / sig[j];
            nonzero = k + 1;
        }
        for (std::size_t i = 0; i < n; ++i) vperm(i, k) = v(i, j);
    }
    detail::complete_orthonormal(u, nonzero);

    // deterministic sign convention
    for (std::size_t k = 0; k < n; ++k) {
        std::size_t arg = 0;
        double best = 0;
        for (std::size_t i = 0; i < m; ++i) {
            if (std::abs(u(i, k)) > best) {
                best = std::abs(u(i, k));
                arg = i;
            }
        }
        if (u(arg, k) < 0) {
            for (std::size_t i = 0; i < m; ++i) u(i, k) = -u(i, k);
            for (std::size_t i = 0; i < n; ++i) vperm(i, k) = -vperm(i, k);
        }
    }

    SvdResult res;
    if (flipped) {
        res.U = vperm;
        res.V = u;
        // redo the sign fix against the new U
        const std::size_t rm = res.U.rows();
        for (std::size_t k = 0; k < res.U.cols(); ++k) {
            std::size_t arg = 0;
            double best = 0;
            for (std::size_t i = 0; i < rm; ++i) {
                if (std::abs(res.U(i, k)) > best) {
                    best = std::abs(res.U(i, k));
                    arg = i;
                }
            }
            if (res.U(arg, k) < 0) {
                for (std::size_t i = 0; i < rm; ++i) res.U(i, k) = -res.U(i, k);
                for (std::size_t i = 0; i < res.V.rows(); ++i) res.V(i, k) = -res.V(i, k);
            }
        }
    } else {
        res.U = std::move(u);
        res.V = std::move(vperm);
    }
    res.sigma = std::move(sigma);
    return res;
}

// Lower Cholesky factor of a symmetric positive-definite matrix.
inline Matd cholesky_lower(const Matd& p) {
    if (p.rows() != p.cols()) throw std::invalid_argument("cholesky: not square");
    const std::size_t n = p.rows();
    Matd l(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
            double s = p(i, j);
            for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
            if (i == j) {
                if (s <= 0) throw std::runtime_error("not positive definite");
                l(i, i) = std::sqrt(s);
            } else {
                l(i, j) = s / l(j, j);
            }
        }
    }
    return l;
}

// Solve L*Y = B (or L^T*Y = B when transpose) by substitution, column-wise.
inline Matd solve_lower_triangular(const Matd& l, const Matd& b, bool transpose = false) {
    const std::size_t n = l.rows();
    if (l.cols() != n || b.rows() != n)
        throw std::invalid_argument("solve_lower_triangular: shape mismatch");
    for (std::size_t i = 0; i < n; ++i)
        if (l(i, i) == 0) throw std::runtime_error("singular triangular factor");

    Matd y(n, b.cols());
    if (!transpose) {
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t c = 0; c < b.cols(); ++c) {
                double s = b(i, c);
                for (std::size_t k = 0; k < i; ++k) s -= l(i, k) * y(k, c);
                y(i, c) = s / l(i, i);
            }
        }
    } else {
        for (std::size_t ii = n; ii-- > 0;) {
            for (std::size_t c = 0; c < b.cols(); ++c) {
                double s = b(ii, c);
                for (std::size_t k = ii + 1; k < n; ++k) s -= l(k, ii) * y(k, c);
                y(ii, c) = s / l(ii, ii);
            }
        }
    }
    return y;
}

}  // namespace parse
