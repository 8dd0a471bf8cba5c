#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "checkpoint.hpp"
#include "corpus.hpp"
#include "exec_engine.hpp"
#include "model.hpp"
#include "pattern_cache.hpp"

namespace parse {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct PrereqError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---- run configuration -------------------------------------------------

struct RunConfig {
    std::uint64_t seed = 1;
    fs::path out_dir = "out";
    ToyLMConfig lm;
    LmTrainConfig lm_train;
    CompressionConfig compress;
    RouterTrainConfig router;
    double tau = 1.0;
    double eps = 1e-8;
    std::vector<std::string> domains = {"markov_text", "arithmetic", "keyvalue", "uniform"};
    std::size_t train_tokens = 120000;
    std::size_t calib_sequences = 24;  // total, split across domains
    std::size_t calib_seq_len = 48;
    std::size_t router_sequences = 96;  // total, split across domains
    std::size_t router_seq_len = 48;
    std::size_t eval_tokens = 1536;
    std::size_t eval_window = 48;
    double cache_min_similarity = 0.80;
    std::size_t cache_prompts_per_domain = 8;
    std::size_t cache_prompt_len = 32;
    std::size_t sim_prompts_per_domain = 9;
    std::size_t decode_steps = 60;
    double psi = 0.9;
    std::vector<std::size_t> bench_batches = {1, 4};
    std::vector<std::size_t> bench_seqs = {16, 64};
    std::size_t bench_repeats = 5;
    std::size_t sensitivity_eval_tokens = 192;
};

namespace cfgdetail {

inline void check_keys(const json& j, std::initializer_list<const char*> allowed,
                       const std::string& scope) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const char* k : allowed)
            if (it.key() == k) ok = true;
        if (!ok) throw ConfigError("unknown config key: " + scope + it.key());
    }
}

template <typename T>
void get(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).template get<T>();
}

}  // namespace cfgdetail

inline RunConfig run_config_from_json(const json& j, const fs::path& base_dir) {
    using cfgdetail::check_keys;
    using cfgdetail::get;
    if (!j.is_object()) throw ConfigError("config root must be an object");
    check_keys(j,
               {"seed", "out_dir", "lm", "lm_train", "compress", "router", "corpus", "cache",
                "bench", "psi", "tau", "eps", "decode_steps"},
               "");
    RunConfig c;
    get(j, "seed", c.seed);
    std::string out = c.out_dir.string();
    get(j, "out_dir", out);
    c.out_dir = fs::absolute(base_dir / out);
    get(j, "psi", c.psi);
    get(j, "tau", c.tau);
    get(j, "eps", c.eps);
    get(j, "decode_steps", c.decode_steps);
    if (j.contains("lm")) {
        const json& l = j.at("lm");
        check_keys(l, {"vocab", "d_model", "n_blocks", "n_heads", "n_kv_heads", "d_ff", "max_seq"},
                   "lm.");
        get(l, "vocab", c.lm.vocab);
        get(l, "d_model", c.lm.d_model);
        get(l, "n_blocks", c.lm.n_blocks);
        get(l, "n_heads", c.lm.n_heads);
        get(l, "n_kv_heads", c.lm.n_kv_heads);
        get(l, "d_ff", c.lm.d_ff);
        get(l, "max_seq", c.lm.max_seq);
    }
    if (j.contains("lm_train")) {
        const json& l = j.at("lm_train");
        check_keys(l, {"steps", "batch_size", "seq_len", "learning_rate"}, "lm_train.");
        get(l, "steps", c.lm_train.steps);
        get(l, "batch_size", c.lm_train.batch_size);
        get(l, "seq_len", c.lm_train.seq_len);
        get(l, "learning_rate", c.lm_train.learning_rate);
    }
    if (j.contains("compress")) {
        const json& l = j.at("compress");
        check_keys(l, {"ratio", "whitening", "store_multiplier", "jitter"}, "compress.");
        get(l, "ratio", c.compress.ratio);
        get(l, "whitening", c.compress.whitening);
        get(l, "store_multiplier", c.compress.store_multiplier);
        get(l, "jitter", c.compress.jitter);
    }
    if (j.contains("router")) {
        const json& l = j.at("router");
        check_keys(l, {"learning_rate", "weight_decay", "warmup_frac", "epochs", "batch_size"},
                   "router.");
        get(l, "learning_rate", c.router.learning_rate);
        get(l, "weight_decay", c.router.weight_decay);
        get(l, "warmup_frac", c.router.warmup_frac);
        get(l, "epochs", c.router.epochs);
        get(l, "batch_size", c.router.batch_size);
    }
    if (j.contains("corpus")) {
        const json& l = j.at("corpus");
        check_keys(l,
                   {"domains", "train_tokens", "calib_sequences", "calib_seq_len",
                    "router_sequences", "router_seq_len", "eval_tokens", "eval_window"},
                   "corpus.");
        get(l, "domains", c.domains);
        get(l, "train_tokens", c.train_tokens);
        get(l, "calib_sequences", c.calib_sequences);
        get(l, "calib_seq_len", c.calib_seq_len);
        get(l, "router_sequences", c.router_sequences);
        get(l, "router_seq_len", c.router_seq_len);
        get(l, "eval_tokens", c.eval_tokens);
        get(l, "eval_window", c.eval_window);
    }
    if (j.contains("cache")) {
        const json& l = j.at("cache");
        check_keys(l, {"min_similarity", "prompts_per_domain", "prompt_len", "sim_prompts_per_domain"},
                   "cache.");
        get(l, "min_similarity", c.cache_min_similarity);
        get(l, "prompts_per_domain", c.cache_prompts_per_domain);
        get(l, "prompt_len", c.cache_prompt_len);
        get(l, "sim_prompts_per_domain", c.sim_prompts_per_domain);
    }
    if (j.contains("bench")) {
        const json& l = j.at("bench");
        check_keys(l, {"batches", "seq_lens", "repeats"}, "bench.");
        get(l, "batches", c.bench_batches);
        get(l, "seq_lens", c.bench_seqs);
        get(l, "repeats", c.bench_repeats);
    }
    for (const std::string& d : c.domains) domain_from_name(d);  // validate
    if (c.domains.empty()) throw ConfigError("corpus.domains must be non-empty");
    c.lm.seed = c.seed;
    c.router.seed = c.seed;
    return c;
}

inline RunConfig load_run_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file: " + path.string());
    json j;
    try {
        in >> j;
    } catch (const std::exception& e) {
        throw ConfigError(std::string("config parse error: ") + e.what());
    }
    return run_config_from_json(j, fs::absolute(path).parent_path());
}

// ---- deterministic seeds and corpora -----------------------------------

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
    Rng r(seed ^ salt);
    return r.next_u64();
}

namespace salt {
inline constexpr std::uint64_t train = 0x101;
inline constexpr std::uint64_t calib = 0x202;
inline constexpr std::uint64_t router = 0x303;
inline constexpr std::uint64_t eval = 0x404;
inline constexpr std::uint64_t cache = 0x505;
inline constexpr std::uint64_t sim = 0x606;
inline constexpr std::uint64_t decode = 0x707;
inline constexpr std::uint64_t bench = 0x808;
inline constexpr std::uint64_t stream = 0x909;
}  // namespace salt

inline DomainSpec domain_spec(const RunConfig& c, std::size_t di, std::uint64_t purpose,
                              std::size_t size) {
    DomainSpec s;
    s.kind = domain_from_name(c.domains[di]);
    s.seed = mix_seed(c.seed, purpose * 1315423911ULL + di);
    s.size = size;
    return s;
}

// interleaved per-domain chunks so one stream mixes all domains
inline std::vector<std::uint8_t> mixed_stream(const RunConfig& c, std::uint64_t purpose,
                                              std::size_t total, std::size_t chunk) {
    const std::size_t nd = c.domains.size();
    std::vector<std::vector<std::uint8_t>> per(nd);
    const std::size_t per_size = (total + nd - 1) / nd;
    for (std::size_t d = 0; d < nd; ++d) per[d] = generate(domain_spec(c, d, purpose, per_size));
    std::vector<std::uint8_t> out;
    out.reserve(total);
    std::size_t off = 0;
    while (out.size() < total) {
        for (std::size_t d = 0; d < nd && out.size() < total; ++d)
            for (std::size_t i = 0; i < chunk && off + i < per_size && out.size() < total; ++i)
                out.push_back(per[d][off + i]);
        off += chunk;
    }
    return out;
}

// n_total sequences split round-robin across domains
inline std::vector<std::vector<std::uint8_t>> mixed_sequences(const RunConfig& c,
                                                              std::uint64_t purpose,
                                                              std::size_t n_total,
                                                              std::size_t seq_len) {
    const std::size_t nd = c.domains.size();
    std::vector<std::vector<std::uint8_t>> out;
    for (std::size_t d = 0; d < nd; ++d) {
        const std::size_t n = n_total / nd + (d < n_total % nd ? 1 : 0);
        if (n == 0) continue;
        auto seqs = sample_calibration(domain_spec(c, d, purpose, 0), n, seq_len,
                                       mix_seed(c.seed, purpose + 17));
        for (auto& s : seqs) out.push_back(std::move(s));
    }
    return out;
}

inline std::vector<std::vector<std::uint8_t>> domain_sequences(const RunConfig& c, std::size_t di,
                                                               std::uint64_t purpose,
                                                               std::size_t n, std::size_t seq_len) {
    return sample_calibration(domain_spec(c, di, purpose, 0), n, seq_len,
                              mix_seed(c.seed, purpose + 17));
}

// ---- CSV output --------------------------------------------------------

inline std::string fmt_num(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.12g", v);
    return buf;
}

inline void write_csv(const fs::path& path, const std::string& header,
                      const std::vector<std::vector<std::string>>& rows,
                      const std::vector<std::string>& trailer = {}) {
    fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "# parse-csv v1\n" << header << "\n";
    for (const auto& r : rows) {
        for (std::size_t i = 0; i < r.size(); ++i) out << (i ? "," : "") << r[i];
        out << "\n";
    }
    for (const auto& t : trailer) out << "# " << t << "\n";
}

// ---- artifact loading with prerequisite errors -------------------------

inline fs::path dense_dir(const RunConfig& c) { return c.out_dir / "dense"; }
inline fs::path fact_dir(const RunConfig& c) { return c.out_dir / "factorized"; }
inline fs::path cache_dir(const RunConfig& c) { return c.out_dir / "cache"; }

inline DenseModel require_dense(const RunConfig& c) {
    if (!fs::exists(dense_dir(c) / "manifest.json"))
        throw PrereqError("missing dense checkpoint at " + dense_dir(c).string() +
                          " (run train-dense first)");
    return load_dense(dense_dir(c));
}

inline FactorizedModel require_factorized(const RunConfig& c, bool need_routers = false) {
    if (!fs::exists(fact_dir(c) / "manifest.json"))
        throw PrereqError("missing factorized checkpoint at " + fact_dir(c).string() +
                          " (run compress first)");
    FactorizedModel fm = load_factorized(fact_dir(c));
    if (need_routers && fm.routers.empty())
        throw PrereqError("factorized checkpoint has no routers (run train-router first)");
    return fm;
}

inline PatternCache require_cache(const RunConfig& c) {
    if (!fs::exists(cache_dir(c) / "cache.json"))
        throw PrereqError("missing pattern cache at " + cache_dir(c).string() +
                          " (run build-cache first)");
    return load_cache(cache_dir(c));
}

// ---- shared evaluation helpers -----------------------------------------

// per-window online routing: fresh router state for every window
inline double routed_window_ce(const FactorizedModel& fm, const std::vector<std::uint8_t>& w) {
    RoutingProvider prov(fm);
    return window_cross_entropy(fm.core, prov, w);
}

inline double routed_eval_ce(const FactorizedModel& fm, const std::vector<std::uint8_t>& tokens,
                             std::size_t window) {
    double total = 0;
    std::size_t n = 0;
    for (std::size_t s = 0; s + window <= tokens.size(); s += window) {
        std::vector<std::uint8_t> w(tokens.begin() + std::ptrdiff_t(s),
                                    tokens.begin() + std::ptrdiff_t(s + window));
        total += routed_window_ce(fm, w);
        ++n;
    }
    if (n == 0) throw std::invalid_argument("routed_eval_ce: too few tokens");
    return total / double(n);
}

// compress against a specific calibration set, optionally training routers
// on the mixed-domain router corpus
inline FactorizedModel compress_with(const RunConfig& c, const DenseModel& dense,
                                     const std::vector<std::vector<std::uint8_t>>& calib,
                                     bool with_routers) {
    FactorizedModel fm = compress_model(dense, calib, c.compress);
    if (!with_routers) return fm;
    auto seqs = mixed_sequences(c, salt::router, c.router_sequences, c.router_seq_len);
    // activations come from the statically compressed model (the serving
    // distribution); supervision targets stay the dense projections
    FactorizedProvider sprov(fm);
    std::map<std::string, std::vector<RouterSeqStats>> stats;
    for (const auto& seq : seqs) {
        std::map<std::string, Matd> inputs;
        Capture cap;
        cap.proj_inputs = true;
        cap.inputs = &inputs;
        KVCacheState kvc(fm.core.cfg.n_blocks);
        forward_lm(fm.core, sprov, seq, kvc, &cap);
        for (std::size_t b = 0; b < dense.core.cfg.n_blocks; ++b)
            for (const char* p : proj_names) {
                const std::string id = tensor_id(b, p);
                const Matd y = matmul(dense_weight(dense, b, p), inputs.at(id));
                stats[id].push_back(precompute_router_stats(fm.layers.at(id), inputs.at(id), y));
            }
    }
    for (const std::string& id : fm.layer_ids()) {
        RouterTrainConfig rc = c.router;
        rc.seed = mix_seed(c.seed, salt::router ^ std::hash<std::string>{}(id));
        fm.routers[id] = train_router_matrix(fm.layers.at(id), stats.at(id), rc, c.tau, c.eps).params;
    }
    return fm;
}

inline std::vector<std::vector<std::uint8_t>> balanced_calibration(const RunConfig& c) {
    return mixed_sequences(c, salt::calib, c.calib_sequences, c.calib_seq_len);
}

// ---- pipeline stages ---------------------------------------------------

inline void cmd_train_dense(const RunConfig& c) {
    const std::vector<std::uint8_t> corpus = mixed_stream(c, salt::train, c.train_tokens, 512);
    ToyLMConfig lm = c.lm;
    lm.seed = c.seed;
    LmTrainResult res = train_lm(lm, corpus, c.lm_train);
    save_dense(dense_dir(c), res.model);
    std::vector<std::vector<std::string>> rows;
    for (std::size_t i = 0; i < res.step_loss.size(); ++i)
        rows.push_back({std::to_string(i), fmt_num(res.step_loss[i])});
    write_csv(c.out_dir / "train_loss.csv", "step,loss", rows);
}

inline void cmd_compress(const RunConfig& c) {
    DenseModel dense = require_dense(c);
    FactorizedModel fm = compress_model(dense, balanced_calibration(c), c.compress);
    save_factorized(fact_dir(c), fm);
}

inline void cmd_train_router(const RunConfig& c) {
    DenseModel dense = require_dense(c);
    FactorizedModel fm = require_factorized(c);
    FactorizedModel routed = compress_with(c, dense, balanced_calibration(c), true);
    fm.routers = std::move(routed.routers);
    save_factorized(fact_dir(c), fm);
}

inline void cmd_build_cache(const RunConfig& c) {
    FactorizedModel fm = require_factorized(c, true);
    std::vector<std::vector<std::uint8_t>> prompts;
    for (std::size_t d = 0; d < c.domains.size(); ++d)
        for (auto& p :
             domain_sequences(c, d, salt::cache, c.cache_prompts_per_domain, c.cache_prompt_len))
            prompts.push_back(std::move(p));
    PatternCache cache = build_cache(fm, prompts, c.cache_min_similarity);
    save_cache(cache_dir(c), cache);
}

// eval.csv: per-domain perplexity for dense / static prefix / routed
inline void cmd_eval(const RunConfig& c) {
    DenseModel dense = require_dense(c);
    FactorizedModel fm = require_factorized(c);
    DenseProvider dprov(dense);
    FactorizedProvider sprov(fm);
    std::vector<std::vector<std::string>> rows;
    for (std::size_t d = 0; d < c.domains.size(); ++d) {
        const auto stream = generate(domain_spec(c, d, salt::eval, c.eval_tokens));
        const double dense_ce = eval_cross_entropy(dense.core, dprov, stream, c.eval_window);
        const double stat_ce = eval_cross_entropy(fm.core, sprov, stream, c.eval_window);
        rows.push_back({c.domains[d], "dense", fmt_num(std::exp(dense_ce))});
        rows.push_back({c.domains[d], "static", fmt_num(std::exp(stat_ce))});
        if (!fm.routers.empty())
            rows.push_back(
                {c.domains[d], "routed", fmt_num(std::exp(routed_eval_ce(fm, stream, c.eval_window)))});
    }
    write_csv(c.out_dir / "eval.csv", "domain,variant,ppl", rows);
}

inline void cmd_bench(const RunConfig& c) {
    FactorizedModel fm = require_factorized(c);
    std::vector<SelectionMap> patterns;
    if (fs::exists(cache_dir(c) / "cache.json")) {
        PatternCache cache = load_cache(cache_dir(c));
        for (const auto& e : cache.entries) patterns.push_back(e.pattern);
    }
    if (patterns.empty()) {
        SelectionMap stat;
        for (const auto& [id, l] : fm.layers) {
            RankSelection s;
            for (std::uint32_t i = 0; i < l.K; ++i) s.indices.push_back(i);
            stat[id] = s;
        }
        patterns.push_back(std::move(stat));
    }
    auto eng64 = ExecEngine<double>::build(fm, patterns, c.psi);
    auto eng32 = ExecEngine<float>::build(fm, patterns, c.psi);
    const ExecPlan plan = build_plan(fm, fm.core.cfg.gqa());
    const double base_storage = fm.storage_params() / fm.dense_params();
    const double agg_storage = base_storage * (1.0 + eng64.storage_overhead());

    std::vector<std::vector<std::string>> rows;
    const ExecVariant variants[4] = {ExecVariant::scattered_unfused, ExecVariant::aggregated_only,
                                     ExecVariant::fused_only, ExecVariant::aggregated_fused};
    for (std::size_t batch : c.bench_batches)
        for (std::size_t seq : c.bench_seqs)
            for (const char* phase : {"prefill", "decode"}) {
                const std::size_t t = std::string(phase) == "prefill" ? batch * seq : batch;
                std::map<std::string, Matd> inputs;
                for (const auto& [id, l] : fm.layers) {
                    Rng rng(mix_seed(c.seed, salt::bench ^ std::hash<std::string>{}(id)) ^ t);
                    Matd x(l.n, t);
                    for (double& v : x.raw()) v = rng.gaussian();
                    inputs[id] = std::move(x);
                }
                std::map<std::string, Matf> inputs32;
                for (const auto& [id, x] : inputs) inputs32[id] = x.cast<float>();
                for (ExecVariant v : variants) {
                    const double ms = time_engine_pass(eng64, 0, v, inputs, c.bench_repeats);
                    const double ms32 = time_engine_pass(eng32, 0, v, inputs32, c.bench_repeats);
                    const std::size_t launches =
                        variant_fused(v) ? plan.launches_per_block : plan.unfused_per_block;
                    const double storage = variant_aggregated(v) ? agg_storage : base_storage;
                    rows.push_back({std::string(variant_name(v)) + "-f64",
                                    fmt_num(fm.cfg.ratio), std::to_string(batch),
                                    std::to_string(seq), phase, fmt_num(ms),
                                    std::to_string(launches), fmt_num(storage)});
                    rows.push_back({std::string(variant_name(v)) + "-f32",
                                    fmt_num(fm.cfg.ratio), std::to_string(batch),
                                    std::to_string(seq), phase, fmt_num(ms32),
                                    std::to_string(launches), fmt_num(storage)});
                }
            }
    write_csv(c.out_dir / "bench.csv",
              "variant,ratio,batch,seq_len,phase,median_ms,launches_per_block,storage_ratio",
              rows);
}

// ---- observation figures -----------------------------------------------

// Fig. 1 analog: window perplexity over a mixed stream; static compression
// is deliberately calibrated on the first domain only.
inline void observe_ppl_windows(const RunConfig& c) {
    DenseModel dense = require_dense(c);
    const auto calib0 =
        domain_sequences(c, 0, salt::calib, c.calib_sequences, c.calib_seq_len);
    FactorizedModel fm = compress_with(c, dense, calib0, true);

    const std::vector<std::uint8_t> stream =
        mixed_stream(c, salt::stream, c.eval_tokens, 2 * c.eval_window);
    DenseProvider dprov(dense);
    FactorizedProvider sprov(fm);
    const std::vector<double> dense_ppl = window_ppl(dense.core, dprov, stream, c.eval_window);
    const std::vector<double> stat_ppl = window_ppl(fm.core, sprov, stream, c.eval_window);
    std::vector<std::vector<std::string>> rows;
    for (std::size_t wi = 0; wi < dense_ppl.size(); ++wi) {
        std::vector<std::uint8_t> w(stream.begin() + std::ptrdiff_t(wi * c.eval_window),
                                    stream.begin() + std::ptrdiff_t((wi + 1) * c.eval_window));
        const double parse_ppl = std::exp(routed_window_ce(fm, w));
        rows.push_back({std::to_string(wi), fmt_num(dense_ppl[wi]), fmt_num(stat_ppl[wi]),
                        fmt_num(parse_ppl)});
    }
    write_csv(c.out_dir / "observe_ppl_windows.csv", "window,dense_ppl,static_ppl,parse_ppl",
              rows);
}

// Fig. 2a/2b analog: |domains|^2 calibrate-then-evaluate delta-PPL grid.
inline void observe_calib_grid(const RunConfig& c) {
    DenseModel dense = require_dense(c);
    DenseProvider dprov(dense);
    const std::size_t nd = c.domains.size();

    std::vector<std::vector<std::uint8_t>> eval_streams;
    std::vector<double> dense_ppl;
    for (std::size_t d = 0; d < nd; ++d) {
        eval_streams.push_back(generate(domain_spec(c, d, salt::eval, c.eval_tokens)));
        dense_ppl.push_back(
            std::exp(eval_cross_entropy(dense.core, dprov, eval_streams[d], c.eval_window)));
    }

    std::vector<std::vector<std::string>> rows, summary;
    for (std::size_t cd = 0; cd < nd; ++cd) {
        const auto calib = domain_sequences(c, cd, salt::calib, c.calib_sequences, c.calib_seq_len);
        FactorizedModel fm = compress_with(c, dense, calib, true);
        FactorizedProvider sprov(fm);
        double off_static = 0, off_parse = 0;
        for (std::size_t ed = 0; ed < nd; ++ed) {
            const double stat_d =
                std::exp(eval_cross_entropy(fm.core, sprov, eval_streams[ed], c.eval_window)) -
                dense_ppl[ed];
            const double parse_d =
                std::exp(routed_eval_ce(fm, eval_streams[ed], c.eval_window)) - dense_ppl[ed];
            rows.push_back(
                {c.domains[cd], c.domains[ed], "static", fmt_num(stat_d)});
            rows.push_back(
                {c.domains[cd], c.domains[ed], "parse", fmt_num(parse_d)});
            if (ed != cd) {
                off_static += stat_d;
                off_parse += parse_d;
            }
        }
        summary.push_back({c.domains[cd], "static", fmt_num(off_static / double(nd - 1))});
        summary.push_back({c.domains[cd], "parse", fmt_num(off_parse / double(nd - 1))});
    }
    write_csv(c.out_dir / "observe_calib_grid.csv", "calib_domain,eval_domain,variant,delta_ppl",
              rows);
    write_csv(c.out_dir / "observe_calib_grid_summary.csv",
              "calib_domain,variant,mean_offdiag_delta_ppl", summary);
}

// Fig. 2c analog: leave-one-out expert sensitivity on block 0 at full rank.
inline void observe_sensitivity(const RunConfig& c) {
    DenseModel dense = require_dense(c);
    RunConfig c0 = c;
    c0.compress.ratio = 0.0;
    FactorizedModel fm = compress_model(dense, balanced_calibration(c0), c0.compress);
    const std::vector<std::uint8_t> stream =
        mixed_stream(c, salt::stream, c.sensitivity_eval_tokens, c.eval_window);
    std::vector<std::vector<std::string>> rows;
    for (const std::string& id : {tensor_id(0, "q"), tensor_id(0, "down")}) {
        const auto imp = connection_sensitivity(fm, id, stream, c.eval_window);
        const auto& layer = fm.layers.at(id);
        for (std::size_t e = 0; e < imp.size(); ++e)
            rows.push_back(
                {id, std::to_string(e), fmt_num(layer.sigma[e]), fmt_num(imp[e])});
    }
    write_csv(c.out_dir / "observe_sensitivity.csv", "tensor_id,expert,sigma,delta_ce", rows);
}

struct SimilarityOverlapResult {
    std::vector<double> cosines, overlaps;
    double rho = 0;
};

inline SimilarityOverlapResult similarity_overlap_pairs(const RunConfig& c,
                                                        const FactorizedModel& fm) {
    std::vector<std::vector<std::uint8_t>> prompts;
    for (std::size_t d = 0; d < c.domains.size(); ++d)
        for (auto& p :
             domain_sequences(c, d, salt::sim, c.sim_prompts_per_domain, c.cache_prompt_len))
            prompts.push_back(std::move(p));
    FactorizedProvider eprov(fm);
    std::vector<PromptEmbedding> embs;
    std::vector<SelectionMap> pats;
    for (std::size_t i = 0; i < prompts.size(); ++i) {
        embs.push_back(embed_prompt(fm.core, eprov, prompts[i], "p" + std::to_string(i)));
        pats.push_back(route_prompt(fm, prompts[i]));
    }
    SimilarityOverlapResult r;
    for (std::size_t i = 0; i < prompts.size(); ++i)
        for (std::size_t j = i + 1; j < prompts.size(); ++j) {
            r.cosines.push_back(cosine(embs[i].vec, embs[j].vec));
            r.overlaps.push_back(mean_pattern_overlap(pats[i], pats[j]));
        }
    r.rho = spearman(r.cosines, r.overlaps);
    return r;
}

// Fig. 4 analog: pairwise prompt-embedding cosine vs pattern overlap.
inline void observe_similarity_overlap(const RunConfig& c) {
    FactorizedModel fm = require_factorized(c, true);
    SimilarityOverlapResult r = similarity_overlap_pairs(c, fm);
    std::vector<std::vector<std::string>> rows;
    for (std::size_t i = 0; i < r.cosines.size(); ++i)
        rows.push_back({std::to_string(i), fmt_num(r.cosines[i]), fmt_num(r.overlaps[i])});
    write_csv(c.out_dir / "observe_similarity_overlap.csv", "pair,cosine,overlap", rows,
              {"spearman," + fmt_num(r.rho)});
}

// Fig. 5 analog: per-step overlap between the frozen prefill pattern and
// fresh routing during decode.
inline void observe_decode_overlap(const RunConfig& c) {
    FactorizedModel fm = require_factorized(c, true);
    std::vector<std::vector<std::string>> rows;
    double total = 0;
    std::size_t n = 0;
    for (std::size_t d = 0; d < c.domains.size(); ++d) {
        const auto prompt =
            domain_sequences(c, d, salt::decode, 1, c.cache_prompt_len).front();
        DecodeOverlapResult res = decode_overlap_curve(fm, prompt, c.decode_steps);
        for (std::size_t s = 0; s < res.overlap_curve.size(); ++s) {
            rows.push_back({c.domains[d], std::to_string(s), fmt_num(res.overlap_curve[s])});
            total += res.overlap_curve[s];
            ++n;
        }
    }
    write_csv(c.out_dir / "observe_decode_overlap.csv", "domain,step,overlap", rows,
              {"mean_overlap," + fmt_num(n ? total / double(n) : 0.0)});
}

inline void cmd_observe(const RunConfig& c, const std::string& figure) {
    if (figure == "ppl_windows") return observe_ppl_windows(c);
    if (figure == "calib_grid") return observe_calib_grid(c);
    if (figure == "sensitivity") return observe_sensitivity(c);
    if (figure == "similarity_overlap") return observe_similarity_overlap(c);
    if (figure == "decode_overlap") return observe_decode_overlap(c);
    throw ConfigError("unknown figure: " + figure);
}

}  // namespace parse
