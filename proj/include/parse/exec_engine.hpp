#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "model.hpp"
#include "pattern_cache.hpp"

namespace parse {

// ---- launch planning ---------------------------------------------------

enum class LaunchKind { fused_B, batched_A, single };

inline const char* launch_kind_name(LaunchKind k) {
    switch (k) {
        case LaunchKind::fused_B: return "fused_B";
        case LaunchKind::batched_A: return "batched_A";
        case LaunchKind::single: return "single";
    }
    return "?";
}

struct LaunchDesc {
    LaunchKind kind;
    std::vector<std::string> tensor_ids;
    char side;  // 'B' or 'A'
};

struct ExecPlan {
    std::vector<LaunchDesc> launches;
    std::size_t launches_per_block = 0;
    std::size_t unfused_per_block = 14;  // 7 projections x 2
    bool gqa = false;
};

// Fusion rules: one fused B-side MatMul for {q,k,v} and one for {up,gate};
// one batched A-side per module (two on the attention side under GQA);
// o and down stay as single B/A pairs.
inline ExecPlan build_plan(const FactorizedModel& fm, bool gqa) {
    ExecPlan plan;
    plan.gqa = gqa;
    const std::size_t nb = fm.core.cfg.n_blocks;
    for (std::size_t b = 0; b < nb; ++b) {
        auto id = [&](const char* p) { return tensor_id(b, p); };
        plan.launches.push_back({LaunchKind::fused_B, {id("q"), id("k"), id("v")}, 'B'});
        if (gqa) {
            plan.launches.push_back({LaunchKind::batched_A, {id("q")}, 'A'});
            plan.launches.push_back({LaunchKind::batched_A, {id("k"), id("v")}, 'A'});
        } else {
            plan.launches.push_back({LaunchKind::batched_A, {id("q"), id("k"), id("v")}, 'A'});
        }
        plan.launches.push_back({LaunchKind::single, {id("o")}, 'B'});
        plan.launches.push_back({LaunchKind::single, {id("o")}, 'A'});
        plan.launches.push_back({LaunchKind::fused_B, {id("up"), id("gate")}, 'B'});
        plan.launches.push_back({LaunchKind::batched_A, {id("up"), id("gate")}, 'A'});
        plan.launches.push_back({LaunchKind::single, {id("down")}, 'B'});
        plan.launches.push_back({LaunchKind::single, {id("down")}, 'A'});
    }
    plan.launches_per_block = plan.launches.size() / nb;
    return plan;
}

// ---- aggregated memory layout ------------------------------------------

struct ColRange {
    std::size_t start = 0, len = 0;
};

// merge column accesses into maximal contiguous runs
inline std::vector<ColRange> maximal_runs(std::vector<std::size_t> cols) {
    std::sort(cols.begin(), cols.end());
    cols.erase(std::unique(cols.begin(), cols.end()), cols.end());
    std::vector<ColRange> runs;
    for (std::size_t c : cols) {
        if (!runs.empty() && runs.back().start + runs.back().len == c)
            runs.back().len += 1;
        else
            runs.push_back({c, 1});
    }
    return runs;
}

struct AccessTrace {
    std::vector<std::size_t> a_cols, b_cols;  // arena column indices touched
};

// Shared experts (selected by >= psi of the patterns) at the head of the
// column arena, ordered by descending sigma; each pattern's remaining
// experts duplicated into their own contiguous block.
template <typename T>
struct AggregatedLayer {
    std::size_t m = 0, n = 0, r_store = 0;
    std::vector<std::uint32_t> shared_ids;  // ascending expert index
    Mat<T> shared_A, shared_B;              // m x s, n x s; arena cols [0, s)
    struct Residual {
        std::vector<std::uint32_t> ids;  // ascending
        Mat<T> A, B;
        std::vector<std::uint8_t> use_shared;  // per shared col, pattern membership
        std::size_t arena_offset = 0;
    };
    std::vector<Residual> residuals;  // by pattern id
    double psi = 0.9;
};

template <typename T>
AggregatedLayer<T> aggregate_layout(const FactorizedLayer& layer,
                                    const std::vector<RankSelection>& patterns, double psi) {
    if (patterns.empty()) throw std::invalid_argument("aggregate_layout: no patterns");
    if (psi <= 0 || psi > 1) throw std::invalid_argument("aggregate_layout: psi out of range");
    std::vector<std::size_t> freq(layer.r_store, 0);
    for (const auto& p : patterns) {
        for (std::uint32_t e : p.indices) {
            if (e >= layer.r_store) throw std::out_of_range("pattern references expert >= r_store");
            freq[e] += 1;
        }
    }
    AggregatedLayer<T> agg;
    agg.m = layer.m;
    agg.n = layer.n;
    agg.r_store = layer.r_store;
    agg.psi = psi;
    for (std::size_t e = 0; e < layer.r_store; ++e)
        if (double(freq[e]) >= psi * double(patterns.size()))
            agg.shared_ids.push_back(std::uint32_t(e));
    // sigma is descending, so ascending index == descending sigma
    const std::size_t s = agg.shared_ids.size();
    agg.shared_A = Mat<T>(layer.m, s);
    agg.shared_B = Mat<T>(layer.n, s);
    for (std::size_t j = 0; j < s; ++j) {
        const std::uint32_t e = agg.shared_ids[j];
        for (std::size_t i = 0; i < layer.m; ++i) agg.shared_A(i, j) = T(layer.A(i, e));
        for (std::size_t i = 0; i < layer.n; ++i) agg.shared_B(i, j) = T(layer.B(i, e));
    }
    std::size_t arena = s;
    for (const auto& p : patterns) {
        typename AggregatedLayer<T>::Residual res;
        res.use_shared.assign(s, 0);
        for (std::uint32_t e : p.indices) {
            auto it = std::lower_bound(agg.shared_ids.begin(), agg.shared_ids.end(), e);
            if (it != agg.shared_ids.end() && *it == e)
                res.use_shared[std::size_t(it - agg.shared_ids.begin())] = 1;
            else
                res.ids.push_back(e);
        }
        res.A = Mat<T>(layer.m, res.ids.size());
        res.B = Mat<T>(layer.n, res.ids.size());
        for (std::size_t j = 0; j < res.ids.size(); ++j) {
            const std::uint32_t e = res.ids[j];
            for (std::size_t i = 0; i < layer.m; ++i) res.A(i, j) = T(layer.A(i, e));
            for (std::size_t i = 0; i < layer.n; ++i) res.B(i, j) = T(layer.B(i, e));
        }
        res.arena_offset = arena;
        arena += res.ids.size();
        agg.residuals.push_back(std::move(res));
    }
    return agg;
}

namespace detail {

// one expert's rank-1 contribution: out += a * (b^T x)
template <typename T>
inline void rank1_accumulate(const T* a_col, std::size_t a_stride, std::size_t m,
                             const T* b_col, std::size_t b_stride, std::size_t n,
                             const Mat<T>& x, Mat<T>& out) {
    const std::size_t t = x.cols();
    std::vector<T> z(t, T(0));
    for (std::size_t j = 0; j < n; ++j) {
        const T b = b_col[j * b_stride];
        if (b == T(0)) continue;
        const T* xr = x.row(j);
        for (std::size_t c = 0; c < t; ++c) z[c] += b * xr[c];
    }
    for (std::size_t i = 0; i < m; ++i) {
        const T a = a_col[i * a_stride];
        T* orow = out.row(i);
        for (std::size_t c = 0; c < t; ++c) orow[c] += a * z[c];
    }
}

}  // namespace detail

// Forward for one cached pattern over the aggregated layout: one shared
// block read plus one residual block read, contributions accumulated in
// ascending global expert order.
template <typename T>
Mat<T> aggregated_forward(const AggregatedLayer<T>& agg, std::size_t pattern_id,
                          const Mat<T>& x, AccessTrace* trace = nullptr) {
    if (pattern_id >= agg.residuals.size()) throw std::out_of_range("unknown pattern");
    if (x.rows() != agg.n) throw std::invalid_argument("aggregated_forward: bad X shape");
    const auto& res = agg.residuals[pattern_id];
    const std::size_t s = agg.shared_ids.size();

    // The shared block is fetched as one coalesced read; columns the pattern
    // does not use are masked out in-register, so the audit counts the whole
    // range [0, s) plus the pattern's own residual range.
    if (trace) {
        for (std::size_t j = 0; j < s; ++j) {
            trace->a_cols.push_back(j);
            trace->b_cols.push_back(j);
        }
        for (std::size_t j = 0; j < res.ids.size(); ++j) {
            trace->a_cols.push_back(res.arena_offset + j);
            trace->b_cols.push_back(res.arena_offset + j);
        }
    }

    // merge shared (used) and residual contributions by global expert index
    struct Src {
        std::uint32_t expert;
        bool shared;
        std::size_t col;
    };
    std::vector<Src> order;
    for (std::size_t j = 0; j < s; ++j)
        if (res.use_shared[j]) order.push_back({agg.shared_ids[j], true, j});
    for (std::size_t j = 0; j < res.ids.size(); ++j) order.push_back({res.ids[j], false, j});
    std::sort(order.begin(), order.end(),
              [](const Src& a, const Src& b) { return a.expert < b.expert; });

    Mat<T> out(agg.m, x.cols());
    for (const Src& srcv : order) {
        const Mat<T>& amat = srcv.shared ? agg.shared_A : res.A;
        const Mat<T>& bmat = srcv.shared ? agg.shared_B : res.B;
        detail::rank1_accumulate(amat.data() + srcv.col, amat.cols(), agg.m,
                                 bmat.data() + srcv.col, bmat.cols(), agg.n, x, out);
    }
    return out;
}

// Scattered baseline over the original column order: K strided gathers.
template <typename T>
Mat<T> scattered_forward(const Mat<T>& a_full, const Mat<T>& b_full, const RankSelection& sel,
                         const Mat<T>& x, AccessTrace* trace = nullptr) {
    Mat<T> out(a_full.rows(), x.cols());
    for (std::uint32_t e : sel.indices) {
        detail::rank1_accumulate(a_full.data() + e, a_full.cols(), a_full.rows(),
                                 b_full.data() + e, b_full.cols(), b_full.rows(), x, out);
        if (trace) {
            trace->a_cols.push_back(e);
            trace->b_cols.push_back(e);
        }
    }
    return out;
}

// ---- engine: per-tensor layouts + plan execution -----------------------

enum class ExecVariant { scattered_unfused, aggregated_only, fused_only, aggregated_fused };

inline const char* variant_name(ExecVariant v) {
    switch (v) {
        case ExecVariant::scattered_unfused: return "scattered-unfused";
        case ExecVariant::aggregated_only: return "aggregated-only";
        case ExecVariant::fused_only: return "fused-only";
        case ExecVariant::aggregated_fused: return "aggregated+fused";
    }
    return "?";
}

inline bool variant_aggregated(ExecVariant v) {
    return v == ExecVariant::aggregated_only || v == ExecVariant::aggregated_fused;
}
inline bool variant_fused(ExecVariant v) {
    return v == ExecVariant::fused_only || v == ExecVariant::aggregated_fused;
}

template <typename T>
struct ExecEngine {
    struct Tensor {
        Mat<T> a_full, b_full;
        AggregatedLayer<T> agg;
    };
    std::map<std::string, Tensor> tensors;
    std::vector<SelectionMap> patterns;  // pattern_id -> per-matrix selection
    double psi = 0.9;

    static ExecEngine build(const FactorizedModel& fm, std::vector<SelectionMap> pats,
                            double psi_val) {
        ExecEngine eng;
        eng.psi = psi_val;
        eng.patterns = std::move(pats);
        for (const auto& [id, layer] : fm.layers) {
            Tensor t;
            t.a_full = layer.A.template cast<T>();
            t.b_full = layer.B.template cast<T>();
            std::vector<RankSelection> sels;
            for (const auto& p : eng.patterns) sels.push_back(p.at(id));
            t.agg = aggregate_layout<T>(layer, sels, psi_val);
            eng.tensors[id] = std::move(t);
        }
        return eng;
    }

    Mat<T> forward(const std::string& id, std::size_t pattern_id, const Mat<T>& x,
                   ExecVariant v, AccessTrace* trace = nullptr) const {
        const Tensor& t = tensors.at(id);
        if (variant_aggregated(v)) return aggregated_forward(t.agg, pattern_id, x, trace);
        return scattered_forward(t.a_full, t.b_full, patterns.at(pattern_id).at(id), x, trace);
    }

    // duplicated residual columns beyond single-copy storage
    double storage_overhead() const {
        double dup = 0, base = 0;
        for (const auto& [id, t] : tensors) {
            base += double(t.a_full.cols()) * double(t.a_full.rows() + t.b_full.rows());
            for (const auto& r : t.agg.residuals)
                dup += double(r.ids.size()) * double(t.a_full.rows() + t.b_full.rows());
        }
        return dup / base;
    }
};

// Plan-driven projection provider (double precision) for full-LM serving.
class ExecProvider : public ProjectionProvider {
public:
    ExecProvider(const ExecEngine<double>& eng, std::size_t pattern_id, ExecVariant v)
        : eng_(eng), pattern_(pattern_id), variant_(v) {}

    Matd apply(std::size_t b, const char* p, const Matd& x) const {
        ++launches_;  // one planned descriptor replayed per projection side pair
        return eng_.forward(tensor_id(b, p), pattern_, x, variant_);
    }
    void qkv(std::size_t b, const Matd& hn, Matd& q, Matd& k, Matd& v) const override {
        q = apply(b, "q", hn);
        k = apply(b, "k", hn);
        v = apply(b, "v", hn);
    }
    Matd o_proj(std::size_t b, const Matd& x) const override { return apply(b, "o", x); }
    void upgate(std::size_t b, const Matd& hn, Matd& up, Matd& gate) const override {
        up = apply(b, "up", hn);
        gate = apply(b, "gate", hn);
    }
    Matd down_proj(std::size_t b, const Matd& x) const override { return apply(b, "down", x); }

private:
    const ExecEngine<double>& eng_;
    std::size_t pattern_;
    ExecVariant variant_;
    mutable std::size_t launches_ = 0;
};

// ---- micro-benchmark ---------------------------------------------------

struct BenchRow {
    std::string variant;
    double ratio;
    std::size_t batch, seq_len;
    std::string phase;
    double median_ms;
    std::size_t launches_per_block;
    double storage_ratio;
};

template <typename T>
inline double time_engine_pass(const ExecEngine<T>& eng, std::size_t pattern_id,
                               ExecVariant v, const std::map<std::string, Mat<T>>& inputs,
                               std::size_t repeats) {
    std::vector<double> times;
    volatile double sink = 0;
    for (std::size_t r = 0; r < repeats; ++r) {
        const auto t0 = std::chrono::steady_clock::now();
        for (const auto& [id, x] : inputs) {
            Mat<T> out = eng.forward(id, pattern_id, x, v);
            sink = sink + double(out(0, 0));
        }
        const auto t1 = std::chrono::steady_clock::now();
        times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    std::sort(times.begin(), times.end());
    return times[times.size() / 2];
}

}  // namespace parse
