#include <iostream>

#include <CLI11.hpp>

#include "cinemae/cli/commands.hpp"

namespace cli = cinemae::cli;

int main(int argc, char** argv) {
    CLI::App app{"cinemae: context-aware MAE anomaly detector for generated images"};
    app.require_subcommand(1);

    cli::GlobalOptions g;
    std::uint64_t seed = 0;
    std::string cache_dir, output_dir;
    app.add_option("--config", g.config_path, "run configuration (JSON)");
    auto* seed_opt = app.add_option("--seed", seed, "root seed, overrides the config");
    auto* cache_opt = app.add_option("--cache-dir", cache_dir, "feature cache directory");
    auto* out_opt = app.add_option("--output-dir", output_dir, "output directory");
    app.add_flag("--no-cache", g.no_cache, "compute every feature afresh");

    cli::IngestOptions ingest;
    auto* c_ingest = app.add_subcommand("ingest", "scan a real/ fake/ tree or render a synthetic recipe into a manifest");
    c_ingest->add_option("source", ingest.source, "directory or recipe, e.g. toy-smooth-vs-texture:n=64:seed=7")->required();
    c_ingest->add_option("--name", ingest.name, "corpus name");
    c_ingest->add_option("--manifest", ingest.manifest, "where to write the manifest");

    std::string corpus, model, image, kind = "fusion", scorer = "both";
    std::vector<std::string> corpora;
    bool whole = false;

    auto* c_train = app.add_subcommand("train", "train the detector head on the training split");
    c_train->add_option("corpus", corpus, "manifest or recipe")->required();

    auto* c_detect = app.add_subcommand("detect", "score one image");
    c_detect->add_option("image", image)->required();
    c_detect->add_option("--model", model, "detector checkpoint")->required();

    auto* c_eval = app.add_subcommand("evaluate", "metrics report for a trained detector");
    c_eval->add_option("corpus", corpus, "manifest or recipe")->required();
    c_eval->add_option("--model", model, "detector checkpoint")->required();
    c_eval->add_flag("--all", whole, "evaluate every sample instead of the test split");

    auto* c_ablate = app.add_subcommand("ablate", "ablation table");
    c_ablate->add_option("corpus", corpus, "manifest or recipe")->required();
    c_ablate->add_option("--kind", kind, "k_sweep, stats_subset, fusion or freezing");

    auto* c_cross = app.add_subcommand("crossmatrix", "train on each corpus, test on every corpus");
    c_cross->add_option("corpora", corpora, "two or more manifests or recipes")->required();
    c_cross->add_option("--scorer", scorer, "threshold, detector or both");

    auto* c_heat = app.add_subcommand("heatmap", "per-patch score heatmap of one image");
    c_heat->add_option("image", image)->required();
    c_heat->add_option("--model", model, "optional detector checkpoint");

    auto* c_nll = app.add_subcommand("nll-curve", "train the toy MAE and record per-epoch NLL per corpus");
    c_nll->add_option("corpora", corpora, "manifests or recipes")->required();

    CLI11_PARSE(app, argc, argv);
    if (*seed_opt) g.seed = seed;
    if (*cache_opt) g.cache_dir = cache_dir;
    if (*out_opt) g.output_dir = output_dir;

    try {
        cli::Session s(g);
        nlohmann::json out;
        if (*c_ingest) out = cli::cmd_ingest(s, ingest);
        else if (*c_train) out = cli::cmd_train(s, corpus);
        else if (*c_detect) out = cli::cmd_detect(s, image, model);
        else if (*c_eval) out = cli::cmd_evaluate(s, corpus, model, whole);
        else if (*c_ablate) out = cli::cmd_ablate(s, corpus, kind);
        else if (*c_cross) out = cli::cmd_crossmatrix(s, corpora, scorer);
        else if (*c_heat) out = cli::cmd_heatmap(s, image, model);
        else if (*c_nll) out = cli::cmd_nll_curve(s, corpora);
        std::cout << out.dump() << std::endl;
        return 0;
    } catch (const cinemae::Error& e) {
        std::cerr << cli::error_record(e.kind(), e.what()).dump() << std::endl;
        return 2;
    } catch (const std::exception& e) {
        std::cerr << cli::error_record("InternalError", e.what()).dump() << std::endl;
        return 3;
    }
}
