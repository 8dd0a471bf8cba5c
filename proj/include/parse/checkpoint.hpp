#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "model.hpp"

namespace parse {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline constexpr int kFormatVersion = 1;

// ---- raw little-endian blobs, row-major ----

template <typename T>
inline void write_blob(const fs::path& path, const std::vector<T>& data) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f.write(reinterpret_cast<const char*>(data.data()),
            std::streamsize(data.size() * sizeof(T)));
}

template <typename T>
inline std::vector<T> read_blob(const fs::path& path, std::size_t count) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot read " + path.string());
    std::vector<T> data(count);
    f.read(reinterpret_cast<char*>(data.data()), std::streamsize(count * sizeof(T)));
    if (std::size_t(f.gcount()) != count * sizeof(T))
        throw std::runtime_error("short read: " + path.string());
    return data;
}

inline void write_mat(const fs::path& path, const Matd& m) { write_blob(path, m.raw()); }

inline Matd read_mat(const fs::path& path, std::size_t rows, std::size_t cols) {
    Matd m(rows, cols);
    m.raw() = read_blob<double>(path, rows * cols);
    return m;
}

inline json lm_config_json(const ToyLMConfig& c) {
    return json{{"n_blocks", c.n_blocks}, {"d_model", c.d_model},   {"n_heads", c.n_heads},
                {"n_kv_heads", c.n_kv_heads}, {"d_ff", c.d_ff},     {"vocab", c.vocab},
                {"max_seq", c.max_seq},   {"seed", c.seed}};
}

inline ToyLMConfig lm_config_from_json(const json& j) {
    ToyLMConfig c;
    c.n_blocks = j.at("n_blocks");
    c.d_model = j.at("d_model");
    c.n_heads = j.at("n_heads");
    c.n_kv_heads = j.at("n_kv_heads");
    c.d_ff = j.at("d_ff");
    c.vocab = j.at("vocab");
    c.max_seq = j.at("max_seq");
    c.seed = j.at("seed");
    return c;
}

inline void save_core(const fs::path& dir, const LmCore& core, json& manifest) {
    manifest["lm_config"] = lm_config_json(core.cfg);
    write_mat(dir / "embed.f64", core.embed);
    write_mat(dir / "head.f64", core.head);
    write_blob(dir / "norm_final.f64", core.g_final);
    for (std::size_t b = 0; b < core.cfg.n_blocks; ++b) {
        write_blob(dir / ("b" + std::to_string(b) + ".attn_norm.f64"), core.g_attn[b]);
        write_blob(dir / ("b" + std::to_string(b) + ".mlp_norm.f64"), core.g_mlp[b]);
    }
}

inline LmCore load_core(const fs::path& dir, const json& manifest) {
    LmCore core;
    core.cfg = lm_config_from_json(manifest.at("lm_config"));
    core.embed = read_mat(dir / "embed.f64", core.cfg.vocab, core.cfg.d_model);
    core.head = read_mat(dir / "head.f64", core.cfg.vocab, core.cfg.d_model);
    core.g_final = read_blob<double>(dir / "norm_final.f64", core.cfg.d_model);
    core.g_attn.resize(core.cfg.n_blocks);
    core.g_mlp.resize(core.cfg.n_blocks);
    for (std::size_t b = 0; b < core.cfg.n_blocks; ++b) {
        core.g_attn[b] =
            read_blob<double>(dir / ("b" + std::to_string(b) + ".attn_norm.f64"), core.cfg.d_model);
        core.g_mlp[b] =
            read_blob<double>(dir / ("b" + std::to_string(b) + ".mlp_norm.f64"), core.cfg.d_model);
    }
    return core;
}

// ---- dense checkpoint ----

inline void save_dense(const fs::path& dir, const DenseModel& m) {
    fs::create_directories(dir);
    json manifest;
    manifest["format_version"] = kFormatVersion;
    manifest["kind"] = "dense";
    save_core(dir, m.core, manifest);
    for (std::size_t b = 0; b < m.blocks.size(); ++b)
        for (const char* p : proj_names)
            write_mat(dir / (tensor_id(b, p) + ".f64"), dense_weight(m, b, p));
    std::ofstream(dir / "manifest.json") << manifest.dump(2) << "\n";
}

inline DenseModel load_dense(const fs::path& dir) {
    json manifest = json::parse(std::ifstream(dir / "manifest.json"));
    if (manifest.at("kind") != "dense") throw std::runtime_error("not a dense checkpoint");
    DenseModel m;
    m.core = load_core(dir, manifest);
    const ToyLMConfig& c = m.core.cfg;
    m.blocks.resize(c.n_blocks);
    for (std::size_t b = 0; b < c.n_blocks; ++b) {
        auto rd = [&](const char* p, std::size_t rows, std::size_t cols) {
            return read_mat(dir / (tensor_id(b, p) + ".f64"), rows, cols);
        };
        m.blocks[b].wq = rd("q", c.d_model, c.d_model);
        m.blocks[b].wk = rd("k", c.kv_dim(), c.d_model);
        m.blocks[b].wv = rd("v", c.kv_dim(), c.d_model);
        m.blocks[b].wo = rd("o", c.d_model, c.d_model);
        m.blocks[b].w_up = rd("up", c.d_ff, c.d_model);
        m.blocks[b].w_gate = rd("gate", c.d_ff, c.d_model);
        m.blocks[b].w_down = rd("down", c.d_model, c.d_ff);
    }
    return m;
}

// ---- factorized checkpoint (A/B factors, budgets, optional routers) ----

inline void save_factorized(const fs::path& dir, const FactorizedModel& m) {
    fs::create_directories(dir);
    json manifest;
    manifest["format_version"] = kFormatVersion;
    manifest["kind"] = "factorized";
    save_core(dir, m.core, manifest);
    manifest["compression"] = {{"ratio", m.cfg.ratio},
                               {"whitening", m.cfg.whitening},
                               {"store_multiplier", m.cfg.store_multiplier},
                               {"jitter", m.cfg.jitter}};
    manifest["seed"] = m.seed;
    json tensors = json::object();
    for (const auto& [id, l] : m.layers) {
        tensors[id] = {{"m", l.m},       {"n", l.n},           {"K", l.K},
                       {"r_store", l.r_store}, {"sigma", l.sigma}, {"whitened", l.whitened}};
        write_mat(dir / (id + ".A.f64"), l.A);
        write_mat(dir / (id + ".B.f64"), l.B);
    }
    manifest["tensors"] = tensors;
    json routers = json::object();
    for (const auto& [id, r] : m.routers) {
        routers[id] = {{"tau", r.tau}, {"eps", r.eps}, {"r", r.theta.rows()}, {"n", r.theta.cols()}};
        std::vector<double> blob = r.theta.raw();
        blob.insert(blob.end(), r.bias.begin(), r.bias.end());
        write_blob(dir / ("router_" + id + ".f64"), blob);
    }
    manifest["routers"] = routers;
    std::ofstream(dir / "manifest.json") << manifest.dump(2) << "\n";
}

inline FactorizedModel load_factorized(const fs::path& dir) {
    json manifest = json::parse(std::ifstream(dir / "manifest.json"));
    if (manifest.at("kind") != "factorized")
        throw std::runtime_error("not a factorized checkpoint");
    FactorizedModel m;
    m.core = load_core(dir, manifest);
    const json& comp = manifest.at("compression");
    m.cfg.ratio = comp.at("ratio");
    m.cfg.whitening = comp.at("whitening");
    m.cfg.store_multiplier = comp.at("store_multiplier");
    m.cfg.jitter = comp.at("jitter");
    m.seed = manifest.at("seed");
    for (const auto& [id, tj] : manifest.at("tensors").items()) {
        FactorizedLayer l;
        l.layer_id = id;
        l.m = tj.at("m");
        l.n = tj.at("n");
        l.K = tj.at("K");
        l.r_store = tj.at("r_store");
        l.sigma = tj.at("sigma").get<std::vector<double>>();
        l.whitened = tj.at("whitened");
        l.A = read_mat(dir / (id + ".A.f64"), l.m, l.r_store);
        l.B = read_mat(dir / (id + ".B.f64"), l.n, l.r_store);
        m.layers[id] = std::move(l);
    }
    for (const auto& [id, rj] : manifest.at("routers").items()) {
        RouterParams r;
        const std::size_t rr = rj.at("r"), nn = rj.at("n");
        r.tau = rj.at("tau");
        r.eps = rj.at("eps");
        std::vector<double> blob = read_blob<double>(dir / ("router_" + id + ".f64"), rr * nn + rr);
        r.theta = Matd(rr, nn);
        std::copy(blob.begin(), blob.begin() + std::ptrdiff_t(rr * nn), r.theta.raw().begin());
        r.bias.assign(blob.begin() + std::ptrdiff_t(rr * nn), blob.end());
        m.routers[id] = std::move(r);
    }
    return m;
}

}  // namespace parse
