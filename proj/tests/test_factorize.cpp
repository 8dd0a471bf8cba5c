#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "parse/factorize.hpp"
#include "parse/rank_experts.hpp"
#include "parse/rng.hpp"

using namespace parse;

namespace {

Matd random_mat(std::size_t m, std::size_t n, std::uint64_t seed) {
    Matd a(m, n);
    Rng rng(seed);
    for (double& v : a.raw()) v = rng.gaussian();
    return a;
}

// X~ = [X, sqrt(jitter)*I]: the augmented calibration whose Gram is exactly
// XX^T + jitter*I, so the truncation-loss identity holds without slack.
Matd augmented(const Matd& x, double jitter) {
    Matd xa(x.rows(), x.cols() + x.rows());
    for (std::size_t i = 0; i < x.rows(); ++i) {
        for (std::size_t c = 0; c < x.cols(); ++c) xa(i, c) = x(i, c);
        xa(i, x.cols() + i) = std::sqrt(jitter);
    }
    return xa;
}

}  // namespace

TEST_CASE("whitening factor satisfies the identity check") {
    const Matd w = random_mat(6, 8, 11);
    const Matd x = random_mat(8, 50, 12);
    auto [wt, ws] = whiten(w, x);
    CHECK(wt.jitter > 0);
    CHECK(whitening_identity_error(wt, x) < 1e-8);
    CHECK(max_abs(sub(ws, matmul(w, wt.S))) == 0.0);
}

TEST_CASE("whiten escalates the ridge on a degenerate covariance") {
    const Matd w = random_mat(3, 4, 21);
    Matd x(4, 6);  // all-zero activations: Gram is singular without jitter
    auto [wt, ws] = whiten(w, x, 0.5);
    CHECK(wt.jitter == 0.5);  // jitter*I alone is already positive definite
    CHECK(whitening_identity_error(wt, x) < 1e-10);
}

TEST_CASE("whiten rejects mismatched shapes") {
    CHECK_THROWS_AS(whiten(random_mat(3, 4, 1), random_mat(5, 6, 2)),
                    std::invalid_argument);
}

TEST_CASE("full-rank absorbed factors reproduce the dense weight") {
    const Matd w = random_mat(7, 5, 31);
    const Matd x = random_mat(5, 40, 32);
    CompressionConfig cfg;
    cfg.store_multiplier = 100.0;  // force r_store = min(m,n)
    const FactorizedLayer fl = factorize_layer(w, x, cfg, 5, "mat");
    REQUIRE(fl.r_store == 5);
    CHECK(max_abs(sub(matmul_nt(fl.A, fl.B), w)) < 1e-9 * (1 + max_abs(w)));
    CHECK(fl.whitened);
    CHECK(fl.K == 5);
}

TEST_CASE("truncation loss on the augmented calibration equals the sigma tail") {
    const Matd w = random_mat(6, 6, 41);
    const Matd x = random_mat(6, 30, 42);
    CompressionConfig cfg;
    cfg.store_multiplier = 100.0;
    cfg.jitter = 1e-4;
    const FactorizedLayer fl = factorize_layer(w, x, cfg, 2, "mat");
    const Matd xa = augmented(x, cfg.jitter);
    const Matd dense = matmul(w, xa);
    for (std::size_t k = 1; k <= fl.r_store; ++k) {
        const double loss = reconstruction_loss(fl, RankSelection::prefix(k), xa, dense);
        double tail = 0;
        for (std::size_t i = k; i < fl.sigma.size(); ++i) tail += fl.sigma[i] * fl.sigma[i];
        CHECK(loss == doctest::Approx(tail).epsilon(1e-7));
    }
}

TEST_CASE("unwhitened factorization is plain truncated SVD of W") {
    const Matd w = random_mat(5, 9, 51);
    const Matd x = random_mat(9, 20, 52);
    CompressionConfig cfg;
    cfg.whitening = false;
    cfg.store_multiplier = 100.0;
    const FactorizedLayer fl = factorize_layer(w, x, cfg, 3, "mat");
    CHECK(!fl.whitened);
    const SvdResult sv = svd(w);
    for (std::size_t i = 0; i < fl.sigma.size(); ++i)
        CHECK(fl.sigma[i] == doctest::Approx(sv.sigma[i]).epsilon(1e-12));
    CHECK(max_abs(sub(matmul_nt(fl.A, fl.B), w)) < 1e-9 * (1 + max_abs(w)));
}

TEST_CASE("store_rank frozen examples") {
    CHECK(store_rank(3, 10, 2.0) == 6);
    CHECK(store_rank(3, 5, 2.0) == 5);    // capped at r_max
    CHECK(store_rank(2, 10, 1.0) == 2);
    CHECK(store_rank(1, 10, 2.5) == 3);   // ceil
    CHECK(store_rank(4, 10, 0.5) == 4);   // never below K
}

TEST_CASE("factorize_layer rejects K beyond min(m,n)") {
    CHECK_THROWS_AS(
        factorize_layer(random_mat(4, 6, 61), random_mat(6, 20, 62), CompressionConfig{}, 5),
        std::invalid_argument);
}

TEST_CASE("budget allocation matches a brute-force knapsack on equal-cost layers") {
    // equal (m+n) costs make the greedy threshold rule exactly optimal, so an
    // exhaustive search over budgets is a clean independent oracle
    Rng rng(71);
    for (int inst = 0; inst < 10; ++inst) {
        std::vector<std::vector<double>> spectra(3);
        std::vector<std::pair<std::size_t, std::size_t>> dims(3, {8, 8});
        for (auto& sp : spectra) {
            sp.resize(4);
            for (double& s : sp) s = rng.uniform() * 3.0;
            std::sort(sp.rbegin(), sp.rend());
        }
        const double ratio = 0.3 + 0.4 * rng.uniform();
        const auto k = allocate_budgets(spectra, dims, ratio);

        const double budget = (1.0 - ratio) * (3 * 64.0);
        double best_energy = -1;
        std::vector<std::size_t> best;
        for (std::size_t a = 1; a <= 4; ++a)
            for (std::size_t b = 1; b <= 4; ++b)
                for (std::size_t c = 1; c <= 4; ++c) {
                    const double cost = double(a + b + c) * 16.0;
                    if (cost > budget) continue;
                    double e = 0;
                    for (std::size_t i = 0; i < a; ++i) e += spectra[0][i] * spectra[0][i];
                    for (std::size_t i = 0; i < b; ++i) e += spectra[1][i] * spectra[1][i];
                    for (std::size_t i = 0; i < c; ++i) e += spectra[2][i] * spectra[2][i];
                    if (e > best_energy) {
                        best_energy = e;
                        best = {a, b, c};
                    }
                }
        double got_energy = 0;
        for (std::size_t l = 0; l < 3; ++l)
            for (std::size_t i = 0; i < k[l]; ++i) got_energy += spectra[l][i] * spectra[l][i];
        CHECK(got_energy == doctest::Approx(best_energy).epsilon(1e-12));
    }
}

TEST_CASE("budget allocation invariants on unequal-cost layers") {
    Rng rng(81);
    for (int inst = 0; inst < 10; ++inst) {
        const std::size_t nl = 2 + rng.below(3);
        std::vector<std::vector<double>> spectra(nl);
        std::vector<std::pair<std::size_t, std::size_t>> dims(nl);
        for (std::size_t l = 0; l < nl; ++l) {
            dims[l] = {4 + rng.below(12), 4 + rng.below(12)};
            spectra[l].resize(2 + rng.below(5));
            for (double& s : spectra[l]) s = rng.uniform() * 5.0;
            std::sort(spectra[l].rbegin(), spectra[l].rend());
        }
        const double ratio = 0.2 + 0.5 * rng.uniform();
        const auto k = allocate_budgets(spectra, dims, ratio);

        double dense = 0, used = 0;
        for (std::size_t l = 0; l < nl; ++l) {
            REQUIRE(k[l] >= 1);
            REQUIRE(k[l] <= spectra[l].size());
            dense += double(dims[l].first) * double(dims[l].second);
            used += double(k[l]) * double(dims[l].first + dims[l].second);
        }
        CHECK(used <= (1.0 - ratio) * dense + 1e-9);

        // threshold property: the cheapest admissible marginal σ²/(m+n) kept
        // dominates every rejected one, or the best rejected one would not fit
        double min_kept = 1e300, max_rej = -1, max_rej_cost = 0;
        for (std::size_t l = 0; l < nl; ++l) {
            const double cu = double(dims[l].first + dims[l].second);
            for (std::size_t i = 1; i < spectra[l].size(); ++i) {
                const double sc = spectra[l][i] * spectra[l][i] / cu;
                if (i < k[l]) min_kept = std::min(min_kept, sc);
                else if (sc > max_rej) {
                    max_rej = sc;
                    max_rej_cost = cu;
                }
            }
        }
        if (max_rej >= 0)
            CHECK((min_kept >= max_rej - 1e-12 ||
                   used + max_rej_cost > (1.0 - ratio) * dense));
    }
}

TEST_CASE("budget allocation rejects bad ratios") {
    std::vector<std::vector<double>> sp{{1.0, 0.5}};
    std::vector<std::pair<std::size_t, std::size_t>> dims{{4, 4}};
    CHECK_THROWS_AS(allocate_budgets(sp, dims, 1.0), std::invalid_argument);
    CHECK_THROWS_AS(allocate_budgets(sp, dims, -0.1), std::invalid_argument);
    // (m+n)=8 > (1-0.9)*16: even the K=1 floor cannot fit
    CHECK_THROWS_AS(allocate_budgets(sp, dims, 0.9), std::runtime_error);
}

TEST_CASE("effective-rank weighting favors flat spectra") {
    // layer 0 concentrated, layer 1 flat, identical total energy and dims
    std::vector<std::vector<double>> sp{{10.0, 0.1, 0.1, 0.1}, {5.0, 5.0, 5.0, 5.0}};
    std::vector<std::pair<std::size_t, std::size_t>> dims{{8, 8}, {8, 8}};
    const auto plain = allocate_budgets(sp, dims, 0.5, false);
    const auto weighted = allocate_budgets(sp, dims, 0.5, true);
    CHECK(weighted[1] >= plain[1]);
    CHECK(weighted[1] > weighted[0]);
}
