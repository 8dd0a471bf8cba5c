#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "model.hpp"

namespace parse {

struct PromptEmbedding {
    std::vector<double> vec;  // unit norm
    std::string source;
};

struct CacheEntry {
    PromptEmbedding embedding;
    SelectionMap pattern;
};

// Embedding-keyed store of per-matrix rank selections; exact linear-scan
// retrieval by cosine.
struct PatternCache {
    std::vector<CacheEntry> entries;
    double min_similarity = 0.0;
    std::size_t capacity = 0;
    std::size_t d_model = 0;
};

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw std::invalid_argument("cosine: length mismatch");
    double num = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        num += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    return num / (std::sqrt(na) * std::sqrt(nb));
}

// Mean-pooled block-1 output hidden state at prefill, L2-normalized.
inline PromptEmbedding embed_prompt(const LmCore& core, const ProjectionProvider& prov,
                                    const std::vector<std::uint8_t>& tokens,
                                    const std::string& source = "") {
    if (tokens.empty()) throw std::invalid_argument("embed_prompt: empty prompt");
    std::vector<Matd> blocks;
    Capture cap;
    cap.block_outputs = true;
    cap.blocks = &blocks;
    KVCacheState kvc(core.cfg.n_blocks);
    forward_lm(core, prov, tokens, kvc, &cap);
    std::vector<double> v = mean_pool(blocks.front());
    const double nrm = vec_norm(v);
    if (nrm < 1e-12) throw std::runtime_error("degenerate embedding");
    for (double& x : v) x /= nrm;
    return {std::move(v), source};
}

// Route one prompt: prefill with online routing, return its selections.
inline SelectionMap route_prompt(const FactorizedModel& fm,
                                 const std::vector<std::uint8_t>& tokens) {
    RoutingProvider prov(fm);
    KVCacheState kvc(fm.core.cfg.n_blocks);
    forward_lm(fm.core, prov, tokens, kvc);
    return prov.selections();
}

inline PatternCache build_cache(const FactorizedModel& fm,
                                const std::vector<std::vector<std::uint8_t>>& prompts,
                                double min_similarity = 0.0, std::size_t capacity = 0) {
    if (prompts.empty()) throw std::invalid_argument("build_cache: no prompts");
    PatternCache cache;
    cache.min_similarity = min_similarity;
    cache.capacity = capacity ? capacity : prompts.size();
    cache.d_model = fm.core.cfg.d_model;
    FactorizedProvider emb_prov(fm);  // embeddings come from the served model
    for (std::size_t i = 0; i < prompts.size(); ++i) {
        CacheEntry e;
        e.embedding = embed_prompt(fm.core, emb_prov, prompts[i], "prompt" + std::to_string(i));
        e.pattern = route_prompt(fm, prompts[i]);
        cache.entries.push_back(std::move(e));
        if (cache.entries.size() >= cache.capacity) break;
    }
    return cache;
}

struct RetrieveResult {
    const SelectionMap* pattern = nullptr;
    std::size_t entry = 0;
    double similarity = -2.0;
    bool hit = false;
};

// Nearest entry by cosine, exhaustive scan. hit=false signals fallback to
// online routing.
inline RetrieveResult retrieve(const PatternCache& cache, const PromptEmbedding& emb) {
    if (cache.entries.empty()) throw std::runtime_error("empty cache");
    RetrieveResult best;
    for (std::size_t i = 0; i < cache.entries.size(); ++i) {
        const double sim = cosine(cache.entries[i].embedding.vec, emb.vec);
        if (sim > best.similarity) {
            best.similarity = sim;
            best.entry = i;
        }
    }
    best.pattern = &cache.entries[best.entry].pattern;
    best.hit = best.similarity >= cache.min_similarity;
    return best;
}

// Miss-path insertion; refused once at capacity (no eviction).
inline bool cache_insert(PatternCache& cache, CacheEntry entry) {
    if (cache.entries.size() >= cache.capacity) return false;
    cache.entries.push_back(std::move(entry));
    return true;
}

// |a ∩ b| / K
inline double overlap(const RankSelection& a, const RankSelection& b) {
    if (a.K() != b.K()) throw std::invalid_argument("overlap: mismatched K");
    std::size_t inter = 0;
    std::size_t i = 0, j = 0;
    while (i < a.indices.size() && j < b.indices.size()) {
        if (a.indices[i] == b.indices[j]) {
            ++inter;
            ++i;
            ++j;
        } else if (a.indices[i] < b.indices[j]) {
            ++i;
        } else {
            ++j;
        }
    }
    return double(inter) / double(a.K());
}

inline double mean_pattern_overlap(const SelectionMap& a, const SelectionMap& b) {
    double s = 0;
    std::size_t n = 0;
    for (const auto& [id, sel] : a) {
        auto it = b.find(id);
        if (it == b.end()) continue;
        s += overlap(sel, it->second);
        ++n;
    }
    if (n == 0) throw std::invalid_argument("mean_pattern_overlap: disjoint patterns");
    return s / double(n);
}

// Spearman rank correlation, average ranks for ties.
inline double spearman(const std::vector<double>& xs, const std::vector<double>& ys) {
    if (xs.size() != ys.size()) throw std::invalid_argument("spearman: length mismatch");
    if (xs.size() < 3) throw std::invalid_argument("spearman: need >= 3 pairs");
    auto ranks = [](const std::vector<double>& v) {
        const std::size_t n = v.size();
        std::vector<std::size_t> idx(n);
        std::iota(idx.begin(), idx.end(), 0);
        std::stable_sort(idx.begin(), idx.end(),
                         [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
        std::vector<double> r(n);
        std::size_t i = 0;
        while (i < n) {
            std::size_t j = i;
            while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
            const double avg = 0.5 * (double(i) + double(j)) + 1.0;
            for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
            i = j + 1;
        }
        return r;
    };
    std::vector<double> rx = ranks(xs), ry = ranks(ys);
    const std::size_t n = xs.size();
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < n; ++i) {
        mx += rx[i];
        my += ry[i];
    }
    mx /= double(n);
    my /= double(n);
    double num = 0, vx = 0, vy = 0;
    for (std::size_t i = 0; i < n; ++i) {
        num += (rx[i] - mx) * (ry[i] - my);
        vx += (rx[i] - mx) * (rx[i] - mx);
        vy += (ry[i] - my) * (ry[i] - my);
    }
    if (vx == 0 || vy == 0) return 0.0;
    return num / std::sqrt(vx * vy);
}

// Greedy decode with the frozen prefill pattern; at each step, re-run the
// routers on that step's activations (measurement only, never served) and
// report the mean overlap with the frozen pattern.
struct DecodeOverlapResult {
    std::vector<std::uint8_t> generated;
    std::vector<double> overlap_curve;  // one value per decode step
};

inline DecodeOverlapResult decode_overlap_curve(const FactorizedModel& fm,
                                                const std::vector<std::uint8_t>& prompt,
                                                std::size_t steps,
                                                bool measure = true) {
    // prefill: online routing fixes the pattern
    RoutingProvider route_prov(fm);
    KVCacheState kvc(fm.core.cfg.n_blocks);
    Matd logits = forward_lm(fm.core, route_prov, prompt, kvc);
    SelectionMap frozen = route_prov.selections();

    // served path uses the frozen pattern from here on
    FactorizedProvider served(fm, &frozen);
    DecodeOverlapResult out;
    std::uint8_t next = 0;
    {
        const std::size_t last = prompt.size() - 1;
        double best = logits(0, last);
        for (std::size_t v = 1; v < fm.core.cfg.vocab; ++v)
            if (logits(v, last) > best) {
                best = logits(v, last);
                next = std::uint8_t(v);
            }
    }
    for (std::size_t step = 0; step < steps; ++step) {
        if (kvc.len >= fm.core.cfg.max_seq) break;
        // measurement fork: what would the routers pick on this step's input?
        if (measure) {
            std::map<std::string, Matd> inputs;
            Capture cap;
            cap.proj_inputs = true;
            cap.inputs = &inputs;
            KVCacheState probe = kvc;
            forward_lm(fm.core, served, {next}, probe, &cap);
            double s = 0;
            std::size_t n = 0;
            for (const auto& [id, x] : inputs) {
                const FactorizedLayer& layer = fm.layers.at(id);
                RankSelection sel = select_topk(score(fm.routers.at(id), mean_pool(x)), layer.K);
                s += overlap(sel, frozen.at(id));
                ++n;
            }
            out.overlap_curve.push_back(s / double(n));
        }
        std::vector<double> lg = decode_step(fm.core, served, kvc, next);
        out.generated.push_back(next);
        std::uint8_t arg = 0;
        double best = lg[0];
        for (std::size_t v = 1; v < lg.size(); ++v)
            if (lg[v] > best) {
                best = lg[v];
                arg = std::uint8_t(v);
            }
        next = arg;
    }
    return out;
}

// ---- cache serialization: cache.json + embeddings.f64 + patterns.u32 ----

namespace fs = std::filesystem;

inline void save_cache(const fs::path& dir, const PatternCache& cache) {
    fs::create_directories(dir);
    nlohmann::json j;
    j["entry_count"] = cache.entries.size();
    j["d_model"] = cache.d_model;
    j["min_similarity"] = cache.min_similarity;
    j["capacity"] = cache.capacity;
    std::vector<double> embs;
    std::vector<std::uint32_t> pats;
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& e : cache.entries) {
        embs.insert(embs.end(), e.embedding.vec.begin(), e.embedding.vec.end());
        nlohmann::json tensors = nlohmann::json::array();
        for (const auto& [id, sel] : e.pattern) {
            tensors.push_back({{"id", id}, {"K", sel.K()}, {"offset", pats.size()}});
            pats.insert(pats.end(), sel.indices.begin(), sel.indices.end());
        }
        entries.push_back({{"source", e.embedding.source}, {"tensors", tensors}});
    }
    j["entries"] = entries;
    std::ofstream(dir / "cache.json") << j.dump(2) << "\n";
    std::ofstream ef(dir / "embeddings.f64", std::ios::binary);
    ef.write(reinterpret_cast<const char*>(embs.data()), std::streamsize(embs.size() * 8));
    std::ofstream pf(dir / "patterns.u32", std::ios::binary);
    pf.write(reinterpret_cast<const char*>(pats.data()), std::streamsize(pats.size() * 4));
}

inline PatternCache load_cache(const fs::path& dir) {
    nlohmann::json j = nlohmann::json::parse(std::ifstream(dir / "cache.json"));
    PatternCache cache;
    cache.d_model = j.at("d_model");
    cache.min_similarity = j.at("min_similarity");
    cache.capacity = j.at("capacity");
    const std::size_t n = j.at("entry_count");

    std::ifstream ef(dir / "embeddings.f64", std::ios::binary);
    std::vector<double> embs(n * cache.d_model);
    ef.read(reinterpret_cast<char*>(embs.data()), std::streamsize(embs.size() * 8));
    std::ifstream pf(dir / "patterns.u32", std::ios::binary | std::ios::ate);
    std::vector<std::uint32_t> pats(std::size_t(pf.tellg()) / 4);
    pf.seekg(0);
    pf.read(reinterpret_cast<char*>(pats.data()), std::streamsize(pats.size() * 4));

    std::size_t ei = 0;
    for (const auto& entry : j.at("entries")) {
        CacheEntry e;
        e.embedding.source = entry.at("source");
        e.embedding.vec.assign(embs.begin() + std::ptrdiff_t(ei * cache.d_model),
                               embs.begin() + std::ptrdiff_t((ei + 1) * cache.d_model));
        for (const auto& t : entry.at("tensors")) {
            RankSelection sel;
            const std::size_t off = t.at("offset"), k = t.at("K");
            sel.indices.assign(pats.begin() + std::ptrdiff_t(off),
                               pats.begin() + std::ptrdiff_t(off + k));
            e.pattern[t.at("id")] = std::move(sel);
        }
        cache.entries.push_back(std::move(e));
        ++ei;
    }
    return cache;
}

}  // namespace parse
