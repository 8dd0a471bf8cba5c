#pragma once

#include <map>
#include <string>
#include <vector>

#include "corpus.hpp"
#include "factorize.hpp"
#include "rank_experts.hpp"
#include "router.hpp"
#include "toy_lm.hpp"

namespace parse {

using SelectionMap = std::map<std::string, RankSelection>;

// Seven factorized projections per block plus the dense remainder of the LM.
struct FactorizedModel {
    LmCore core;
    std::map<std::string, FactorizedLayer> layers;
    std::map<std::string, RouterParams> routers;  // empty until train-router
    CompressionConfig cfg;
    std::uint64_t seed = 0;

    std::vector<std::string> layer_ids() const {
        std::vector<std::string> ids;
        for (std::size_t b = 0; b < core.cfg.n_blocks; ++b)
            for (const char* p : proj_names) ids.push_back(tensor_id(b, p));
        return ids;
    }

    double dense_params() const {
        double s = 0;
        for (const auto& [id, l] : layers) s += double(l.m) * double(l.n);
        return s;
    }
    double compute_params() const {
        double s = 0;
        for (const auto& [id, l] : layers) s += double(l.K) * double(l.m + l.n);
        return s;
    }
    double storage_params() const {
        double s = 0;
        for (const auto& [id, l] : layers) s += double(l.r_store) * double(l.m + l.n);
        return s;
    }
};

// masked_forward over a fixed per-matrix selection; null map = static prefix K
class FactorizedProvider : public ProjectionProvider {
public:
    FactorizedProvider(const FactorizedModel& m, const SelectionMap* sel = nullptr)
        : m_(m), sel_(sel) {}

    const RankSelection& selection_for(const std::string& id) const {
        if (sel_) {
            auto it = sel_->find(id);
            if (it != sel_->end()) return it->second;
        }
        auto& cache = prefix_cache_[id];
        if (cache.indices.empty()) cache = RankSelection::prefix(m_.layers.at(id).K);
        return cache;
    }

    Matd apply(std::size_t b, const char* p, const Matd& x) const {
        const std::string id = tensor_id(b, p);
        return masked_forward(m_.layers.at(id), selection_for(id), x);
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
    const FactorizedModel& m_;
    const SelectionMap* sel_;
    mutable std::map<std::string, RankSelection> prefix_cache_;
};

// Online routing: each matrix picks its subset once, from the mean-pooled
// input it sees at prefill; decode steps reuse the frozen selection.
class RoutingProvider : public ProjectionProvider {
public:
    explicit RoutingProvider(const FactorizedModel& m) : m_(m) {
        if (m.routers.empty()) throw std::runtime_error("model has no trained routers");
    }

    Matd apply(std::size_t b, const char* p, const Matd& x) const {
        const std::string id = tensor_id(b, p);
        const FactorizedLayer& layer = m_.layers.at(id);
        auto it = selections_.find(id);
        if (it == selections_.end()) {
            const RouterParams& r = m_.routers.at(id);
            RankSelection sel = select_topk(score(r, mean_pool(x)), layer.K);
            it = selections_.emplace(id, std::move(sel)).first;
        }
        return masked_forward(layer, it->second, x);
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

    const SelectionMap& selections() const { return selections_; }
    void reset() { selections_.clear(); }

private:
    const FactorizedModel& m_;
    mutable SelectionMap selections_;
};

inline const Matd& dense_weight(const DenseModel& m, std::size_t b, const char* p) {
    const DenseBlock& blk = m.blocks[b];
    const std::string s = p;
    if (s == "q") return blk.wq;
    if (s == "k") return blk.wk;
    if (s == "v") return blk.wv;
    if (s == "o") return blk.wo;
    if (s == "up") return blk.w_up;
    if (s == "gate") return blk.w_gate;
    return blk.w_down;
}

// Run the dense model over calibration sequences, concatenating each
// projection's input columns.
inline std::map<std::string, Matd> capture_activations(
    const DenseModel& dense, const std::vector<std::vector<std::uint8_t>>& sequences) {
    std::map<std::string, std::vector<Matd>> parts;
    DenseProvider prov(dense);
    for (const auto& seq : sequences) {
        std::map<std::string, Matd> inputs;
        Capture cap;
        cap.proj_inputs = true;
        cap.inputs = &inputs;
        KVCacheState kvc(dense.core.cfg.n_blocks);
        forward_lm(dense.core, prov, seq, kvc, &cap);
        for (auto& [id, x] : inputs) parts[id].push_back(std::move(x));
    }
    std::map<std::string, Matd> out;
    for (auto& [id, mats] : parts) {
        std::size_t total = 0;
        for (const Matd& m : mats) total += m.cols();
        Matd x(mats.front().rows(), total);
        std::size_t off = 0;
        for (const Matd& m : mats) {
            for (std::size_t i = 0; i < m.rows(); ++i)
                for (std::size_t t = 0; t < m.cols(); ++t) x(i, off + t) = m(i, t);
            off += m.cols();
        }
        out[id] = std::move(x);
    }
    return out;
}

// Whiten -> SVD -> budget allocation -> absorbed factors, for all seven
// projections of every block. ratio 0 keeps the full rank everywhere.
inline FactorizedModel compress_model(const DenseModel& dense,
                                      const std::vector<std::vector<std::uint8_t>>& calib,
                                      const CompressionConfig& cfg) {
    if (calib.empty()) throw std::invalid_argument("compress_model: empty calibration corpus");
    FactorizedModel fm;
    fm.core = dense.core;
    fm.cfg = cfg;
    fm.seed = dense.core.cfg.seed;

    std::map<std::string, Matd> acts = capture_activations(dense, calib);

    struct Prepared {
        std::string id;
        std::size_t m, n;
        WhiteningTransform wt;
        bool whitened;
        SvdResult sv;
    };
    std::vector<Prepared> prep;
    std::vector<std::vector<double>> spectra;
    std::vector<std::pair<std::size_t, std::size_t>> dims;

    const ToyLMConfig& lc = dense.core.cfg;
    for (std::size_t b = 0; b < lc.n_blocks; ++b) {
        for (const char* p : proj_names) {
            const std::string id = tensor_id(b, p);
            const Matd& w = dense_weight(dense, b, p);
            Prepared pr;
            pr.id = id;
            pr.m = w.rows();
            pr.n = w.cols();
            if (cfg.whitening) {
                auto [wt, ws] = whiten(w, acts.at(id), cfg.jitter);
                pr.wt = std::move(wt);
                pr.whitened = true;
                pr.sv = svd(ws);
            } else {
                pr.whitened = false;
                pr.sv = svd(w);
            }
            spectra.push_back(pr.sv.sigma);
            dims.emplace_back(pr.m, pr.n);
            prep.push_back(std::move(pr));
        }
    }

    std::vector<std::size_t> budgets;
    if (cfg.ratio == 0.0) {
        for (const auto& pr : prep) budgets.push_back(std::min(pr.m, pr.n));
    } else {
        budgets = allocate_budgets(spectra, dims, cfg.ratio);
    }

    for (std::size_t i = 0; i < prep.size(); ++i) {
        const Prepared& pr = prep[i];
        const std::size_t r_max = std::min(pr.m, pr.n);
        const std::size_t rs = store_rank(budgets[i], r_max, cfg.store_multiplier);
        fm.layers[pr.id] = absorb_factors(pr.id, pr.m, pr.n,
                                          pr.whitened ? &pr.wt : nullptr, pr.sv,
                                          budgets[i], rs);
    }
    return fm;
}

// Leave-one-out LM-loss importance of single experts, measured on a
// full-rank factorized model.
inline std::vector<double> connection_sensitivity(const FactorizedModel& fm,
                                                  const std::string& id,
                                                  const std::vector<std::uint8_t>& eval_tokens,
                                                  std::size_t window) {
    const FactorizedLayer& layer = fm.layers.at(id);
    FactorizedProvider base(fm);
    const double base_ce = eval_cross_entropy(fm.core, base, eval_tokens, window);

    std::vector<double> imp(layer.r_store);
    for (std::size_t e = 0; e < layer.r_store; ++e) {
        SelectionMap sel;
        RankSelection without;
        for (std::size_t j = 0; j < layer.r_store; ++j)
            if (j != e) without.indices.push_back(std::uint32_t(j));
        sel[id] = std::move(without);
        FactorizedProvider prov(fm, &sel);
        imp[e] = eval_cross_entropy(fm.core, prov, eval_tokens, window) - base_ce;
    }
    return imp;
}

}  // namespace parse
