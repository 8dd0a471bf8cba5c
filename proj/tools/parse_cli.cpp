#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "parse/pipeline.hpp"

int main(int argc, char** argv) {
    CLI::App app{"parse: whitened-SVD rank-expert compression pipeline"};
    app.require_subcommand(1);

    std::string config_path, out_dir, figure;
    std::optional<std::uint64_t> seed;
    std::optional<double> ratio, psi, store_multiplier;
    bool gqa = false;

    app.add_option("--config", config_path, "run configuration JSON");
    app.add_option("--out", out_dir, "output directory (overrides config)");
    app.add_option("--seed", seed, "global seed (overrides config)");
    app.add_option("--ratio", ratio, "compression ratio (overrides config)");
    app.add_option("--psi", psi, "shared-expert frequency threshold (overrides config)");
    app.add_option("--store-multiplier", store_multiplier,
                   "stored-rank multiplier (overrides config)");
    app.add_flag("--gqa", gqa, "use grouped-query attention (n_kv_heads = n_heads/2)");

    auto* sub_train = app.add_subcommand("train-dense", "train the dense toy LM");
    auto* sub_compress = app.add_subcommand("compress", "factorize the dense model");
    auto* sub_router = app.add_subcommand("train-router", "train per-matrix routers");
    auto* sub_cache = app.add_subcommand("build-cache", "build the rank-pattern cache");
    auto* sub_eval = app.add_subcommand("eval", "per-domain perplexity table");
    auto* sub_bench = app.add_subcommand("bench", "execution-variant micro benchmark");
    auto* sub_observe = app.add_subcommand("observe", "emit one figure analog as CSV");
    sub_observe->add_option("--figure", figure,
                            "ppl_windows|calib_grid|sensitivity|similarity_overlap|decode_overlap")
        ->required();

    CLI11_PARSE(app, argc, argv);

    try {
        parse::RunConfig cfg;
        if (!config_path.empty()) cfg = parse::load_run_config(config_path);
        if (!out_dir.empty()) cfg.out_dir = std::filesystem::absolute(out_dir);
        if (seed) {
            cfg.seed = *seed;
            cfg.lm.seed = *seed;
            cfg.router.seed = *seed;
        }
        if (ratio) cfg.compress.ratio = *ratio;
        if (psi) cfg.psi = *psi;
        if (store_multiplier) cfg.compress.store_multiplier = *store_multiplier;
        if (gqa) cfg.lm.n_kv_heads = cfg.lm.n_heads / 2;
        if (cfg.compress.ratio < 0 || cfg.compress.ratio >= 1)
            throw parse::ConfigError("ratio must be in [0, 1)");

        if (sub_train->parsed()) parse::cmd_train_dense(cfg);
        if (sub_compress->parsed()) parse::cmd_compress(cfg);
        if (sub_router->parsed()) parse::cmd_train_router(cfg);
        if (sub_cache->parsed()) parse::cmd_build_cache(cfg);
        if (sub_eval->parsed()) parse::cmd_eval(cfg);
        if (sub_bench->parsed()) parse::cmd_bench(cfg);
        if (sub_observe->parsed()) parse::cmd_observe(cfg, figure);
    } catch (const parse::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const parse::PrereqError& e) {
        std::cerr << "missing prerequisite: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
