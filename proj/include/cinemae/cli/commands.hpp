#pragma once

// The command layer behind the `cinemae` executable. Every command writes
// under <output_dir>/<first 12 hex of the config hash>/ and returns a JSON
// summary; the executable prints it.

#include <cctype>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cinemae/backbone.hpp"
#include "cinemae/cli/cache.hpp"
#include "cinemae/cli/config.hpp"
#include "cinemae/cli/heatmap.hpp"
#include "cinemae/cli/lock.hpp"
#include "cinemae/cli/manifest.hpp"
#include "cinemae/cli/report.hpp"
#include "cinemae/corpus.hpp"
#include "cinemae/error.hpp"
#include "cinemae/eval.hpp"
#include "cinemae/features.hpp"
#include "cinemae/mae_train.hpp"
#include "cinemae/model.hpp"
#include "cinemae/synth.hpp"

namespace cinemae::cli {

struct GlobalOptions {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> cache_dir;
    std::optional<std::string> output_dir;
    bool no_cache = false;
};

inline RunConfig resolve_config(const GlobalOptions& g) {
    RunConfig c = g.config_path.empty() ? RunConfig{} : load_config(g.config_path);
    if (g.seed) c.seed = *g.seed;
    if (g.cache_dir) c.cache_dir = *g.cache_dir;
    if (g.output_dir) c.output_dir = *g.output_dir;
    c.validate();
    return c;
}

/// File-name-safe form of a corpus name.
inline std::string slug(const std::string& s) {
    std::string out;
    for (char ch : s) out += std::isalnum(static_cast<unsigned char>(ch)) || ch == '-' || ch == '.' ? ch : '_';
    return out.empty() ? "corpus" : out;
}

class Session {
public:
    explicit Session(const GlobalOptions& g)
        : config_(resolve_config(g)), hash_(config_hash(config_)), lock_(std::make_unique<DirLock>(config_.output_dir)) {
        if (!g.no_cache) cache_ = std::make_unique<FeatureCache>(config_.cache_path());
    }

    const RunConfig& config() const { return config_; }
    const std::string& hash() const { return hash_; }
    fs::path output_dir() const { return config_.output_dir; }
    fs::path run_dir() const { return fs::path(config_.output_dir) / hash_.substr(0, 12); }
    const FeatureCache* cache() const { return cache_.get(); }

    ReportHeader header(std::string split_hash) const { return {"", hash_, std::move(split_hash), preprocess_tag(config_)}; }

    void write_config() const { write_text(run_dir() / "config.json", to_json(config_, false).dump(2) + "\n"); }

    backbone::Backbone load_backbone() const {
        if (config_.weights.empty()) throw ConfigError("backbone.weights is not set");
        return backbone::load_backbone(config_.weights, config_.arch_tag);
    }

    /// A synthetic recipe or a manifest file.
    corpus::Corpus load_corpus(const std::string& arg) const {
        if (synth::is_recipe(arg)) {
            try {
                return synth::build(arg);
            } catch (const ValueError& e) {
                throw IngestError(e.what());
            }
        }
        return to_corpus(read_manifest(arg), config_.preprocess);
    }

    features::Provider provider(const backbone::Backbone& bb, const features::PlanConfig& plan) {
        return cache_ ? cache_->provider(bb, plan) : features::direct_provider(bb, plan);
    }

    eval::FeatureSource source(const backbone::Backbone& bb) {
        return [this, &bb](const corpus::Corpus& c, const features::PlanConfig& p) { return features::extract_corpus(c, provider(bb, p)); };
    }

    nlohmann::json timing(nlohmann::json extra = nlohmann::json::object()) const {
        extra["schema"] = "cinemae.timing/1";
        if (cache_) extra["cache"] = {{"hits", cache_->stats().hits}, {"misses", cache_->stats().misses}, {"corrupt", cache_->stats().corrupt}};
        return extra;
    }

    nlohmann::json summary(const std::string& command, const std::vector<fs::path>& files) const {
        nlohmann::json f = nlohmann::json::array();
        for (const auto& p : files) f.push_back(p.string());
        return {{"command", command}, {"config_hash", hash_}, {"run_dir", run_dir().string()}, {"files", f}};
    }

private:
    RunConfig config_;
    std::string hash_;
    std::unique_ptr<DirLock> lock_;
    std::unique_ptr<FeatureCache> cache_;
};

namespace detail {

inline void check_digest(const model::LoadedCheckpoint& ck, const backbone::Backbone& bb) {
    if (ck.backbone_digest != bb.param_digest())
        throw PreconditionError("checkpoint was trained on a different backbone (digest " + ck.backbone_digest.substr(0, 12) + ")");
}

inline model::LoadedCheckpoint load_model(const std::string& path, const backbone::Backbone& bb) {
    if (path.empty()) throw ConfigError("--model is required");
    auto ck = model::load_checkpoint(path);
    check_digest(ck, bb);
    return ck;
}

inline corpus::Split split(const Session& s, const corpus::Corpus& c) {
    return corpus::split_corpus(c, s.config().test_fraction, s.config().split_seed());
}

inline std::string ids_hash(const corpus::Corpus& c) {
    Sha256 h;
    for (const auto& s : c.samples) h.update("A:").update(s.id).update("\n");
    return h.hex();
}

}  // namespace detail

// ---- ingest ----------------------------------------------------------------------

struct IngestOptions {
    std::string source;    // directory tree or recipe
    std::string name;      // defaults to the directory name or recipe
    std::string manifest;  // defaults to <output_dir>/manifests/<slug>.json
};

inline nlohmann::json cmd_ingest(Session& s, const IngestOptions& o) {
    CorpusManifest m;
    if (synth::is_recipe(o.source)) {
        try {
            m = ingest_recipe(o.source, s.output_dir() / "corpora" / slug(o.source));
        } catch (const ValueError& e) {
            throw IngestError(e.what());
        }
        if (!o.name.empty()) m.name = o.name;
    } else {
        m = scan_tree(o.source, o.name);
    }
    const fs::path out = o.manifest.empty() ? s.output_dir() / "manifests" / (slug(m.name) + ".json") : fs::path(o.manifest);
    write_manifest(m, out);
    std::size_t n_real = 0;
    for (const auto& e : m.entries) n_real += e.label == corpus::kReal;
    return {{"command", "ingest"},
            {"manifest", out.string()},
            {"name", m.name},
            {"hash", m.hash()},
            {"n_real", n_real},
            {"n_fake", m.entries.size() - n_real},
            {"excluded", m.excluded.size()}};
}

// ---- train ------------------------------------------------------------------------

inline nlohmann::json cmd_train(Session& s, const std::string& corpus_arg) {
    const auto& cfg = s.config();
    const auto bb = s.load_backbone();
    const auto c = s.load_corpus(corpus_arg);
    const auto sp = detail::split(s, c);
    const auto plan = cfg.plan();
    auto provider = s.provider(bb, plan);

    auto result = model::train(sp.train, bb, provider, cfg.detector_config(bb.embed_dim()), cfg.train_config());
    const auto report = eval::evaluate(result.model, bb, sp.test, provider);

    const fs::path dir = s.run_dir();
    s.write_config();
    const fs::path ckpt = dir / "detector.safetensors", log = dir / "train_log.ndjson", stem = dir / "train_report";
    model::save_checkpoint(result.model, ckpt, s.hash(), bb.param_digest());
    write_text(log, train_log_ndjson(result.log));
    write_metrics(stem, s.header(sp.hash), c.name + ":test", report);
    write_text(stem.string() + ".timing.json", s.timing({{"latency_ms_mean", report.latency_ms_mean}}).dump(2) + "\n");
    auto j = s.summary("train", {ckpt, log, stem.string() + ".csv", stem.string() + ".json"});
    j["metrics"] = to_json(report);
    return j;
}

// ---- detect -----------------------------------------------------------------------

inline nlohmann::json detection_record(const model::DetectionResult& r) {
    nlohmann::json j = {{"probability", r.probability}, {"label", corpus::label_name(r.label)}};
    for (const char* k : {"s1", "s2", "s3"}) j[k] = nullptr;
    if (r.stats) {
        j["s1"] = r.stats->s1;
        j["s2"] = r.stats->s2;
        j["s3"] = r.stats->s3;
    }
    return j;
}

inline nlohmann::json cmd_detect(Session& s, const std::string& image, const std::string& model_path) {
    const auto bb = s.load_backbone();
    auto ck = detail::load_model(model_path, bb);
    const auto sample = sample_from_file(image, s.config().preprocess);
    auto provider = s.provider(bb, s.config().plan());
    return detection_record(model::predict_from_features(ck.model, provider(sample)));
}

// ---- evaluate -----------------------------------------------------------------------

inline nlohmann::json cmd_evaluate(Session& s, const std::string& corpus_arg, const std::string& model_path, bool whole_corpus) {
    const auto bb = s.load_backbone();
    auto ck = detail::load_model(model_path, bb);
    const auto c = s.load_corpus(corpus_arg);
    corpus::Corpus data = c;
    std::string split_hash = detail::ids_hash(c), part = "all";
    if (!whole_corpus) {
        auto sp = detail::split(s, c);
        data = std::move(sp.test);
        split_hash = sp.hash;
        part = "test";
    }
    const auto report = eval::evaluate(ck.model, bb, data, s.provider(bb, s.config().plan()));
    const fs::path stem = s.run_dir() / ("evaluate_" + slug(c.name) + "_" + part);
    s.write_config();
    write_metrics(stem, s.header(split_hash), c.name + ":" + part, report);
    write_text(stem.string() + ".timing.json", s.timing({{"latency_ms_mean", report.latency_ms_mean}}).dump(2) + "\n");
    auto j = s.summary("evaluate", {stem.string() + ".csv", stem.string() + ".json"});
    j["metrics"] = to_json(report);
    return j;
}

// ---- ablate ---------------------------------------------------------------------------

inline nlohmann::json cmd_ablate(Session& s, const std::string& corpus_arg, const std::string& kind_name) {
    const auto kind = eval::parse_ablation_kind(kind_name);
    const auto& cfg = s.config();
    const auto bb = s.load_backbone();
    const auto c = s.load_corpus(corpus_arg);
    eval::AblationSetup setup;
    setup.backbone = &bb;
    setup.source = s.source(bb);
    setup.plan = cfg.plan();
    setup.detector = cfg.detector_config(bb.embed_dim());
    setup.train = cfg.train_config();
    setup.split = detail::split(s, c);
    const auto table = eval::ablate(kind, setup);

    const fs::path stem = s.run_dir() / ("ablation_" + eval::to_string(kind));
    s.write_config();
    write_ablation(stem, s.header(table.split_hash), table);
    write_text(stem.string() + ".timing.json", s.timing(ablation_timing(table)).dump(2) + "\n");
    auto j = s.summary("ablate", {stem.string() + ".csv", stem.string() + ".json"});
    j["rows"] = table.rows.size();
    return j;
}

// ---- crossmatrix --------------------------------------------------------------------------

inline nlohmann::json cmd_crossmatrix(Session& s, const std::vector<std::string>& corpus_args, const std::string& scorer) {
    if (scorer != "threshold" && scorer != "detector" && scorer != "both")
        throw ConfigError("--scorer must be threshold, detector or both");
    if (corpus_args.size() < 2) throw PreconditionError("a cross-domain matrix needs at least two corpora");
    const auto& cfg = s.config();
    const auto bb = s.load_backbone();
    auto provider = s.provider(bb, cfg.plan());
    std::vector<eval::Domain> domains;
    Sha256 split_h;
    for (const auto& arg : corpus_args) {
        const auto c = s.load_corpus(arg);
        const auto sp = detail::split(s, c);
        split_h.update(c.name).update("=").update(sp.hash).update("\n");
        domains.push_back({c.name, features::extract_corpus(sp.train, provider), features::extract_corpus(sp.test, provider)});
    }
    const std::string split_hash = split_h.hex();
    s.write_config();

    std::vector<fs::path> files;
    nlohmann::json means = nlohmann::json::object();
    auto emit = [&](const std::string& name, const eval::ClassifierFactory& f) {
        const auto m = eval::cross_matrix(domains, f);
        const fs::path stem = s.run_dir() / ("crossmatrix_" + name);
        write_cross_matrix(stem, s.header(split_hash), name, m);
        save_png(render_matrix(m), stem.string() + ".png");
        for (const char* ext : {".csv", ".json", ".png"}) files.push_back(stem.string() + ext);
        means[name] = {{"diagonal_mean", m.diagonal_mean()}, {"off_diagonal_mean", m.off_diagonal_mean()}};
    };
    if (scorer != "detector") emit("threshold", eval::threshold_factory(eval::parse_threshold_feature(cfg.threshold_feature)));
    if (scorer != "threshold") emit("detector", eval::detector_factory(cfg.detector_config(bb.embed_dim()), cfg.train_config()));
    auto j = s.summary("crossmatrix", files);
    j["means"] = means;
    return j;
}

// ---- heatmap ------------------------------------------------------------------------------

inline nlohmann::json cmd_heatmap(Session& s, const std::string& image, const std::string& model_path) {
    const auto& cfg = s.config();
    if (cfg.k < 1) throw ConfigError("heatmaps need masking.k >= 1");
    const auto bb = s.load_backbone();
    const auto sample = sample_from_file(image, cfg.preprocess);
    const auto f = s.provider(bb, cfg.plan())(sample);
    nlohmann::json extra = nlohmann::json::object();
    if (!model_path.empty()) {
        auto ck = detail::load_model(model_path, bb);
        extra = detection_record(model::predict_from_features(ck.model, f));
    }
    const auto grid = heat_grid(f.scores, bb.arch().num_patches());
    const fs::path stem = s.run_dir() / ("heatmap_" + sample.id.substr(0, 12));
    s.write_config();
    save_png(render_heatmap(sample.pixels(), grid), stem.string() + ".png");
    write_text(stem.string() + ".csv", heat_grid_csv(grid, s.header(sample.id)));
    auto j = s.summary("heatmap", {stem.string() + ".png", stem.string() + ".csv"});
    j["cells"] = grid.side;
    j["scored_patches"] = grid.cells.size();
    if (!extra.empty()) j["detection"] = extra;
    return j;
}

// ---- nll-curve ------------------------------------------------------------------------------

inline nlohmann::json cmd_nll_curve(Session& s, const std::vector<std::string>& corpus_args) {
    const auto& cfg = s.config();
    if (cfg.arch_tag != "toy") throw ConfigError("nll-curve trains the toy backbone; set backbone.arch_tag to \"toy\"");
    if (corpus_args.empty()) throw PreconditionError("no corpora given");
    const auto arch = backbone::arch_for_tag("toy");
    backbone::Normalization norm;
    norm.target = cfg.mae_target == "pixel" ? backbone::TargetSpace::Pixel : backbone::TargetSpace::PerPatch;
    toy::MaeTrainer trainer(arch, norm, {cfg.mae_batch_size, cfg.mae_learning_rate, cfg.mask_ratio, derive_seed(cfg.seed, "mae")});

    std::vector<eval::NamedGrids> parts;
    Sha256 ids;
    for (const auto& arg : corpus_args) {
        const auto c = s.load_corpus(arg);
        ids.update(c.name).update("=").update(detail::ids_hash(c)).update("\n");
        for (int label : {corpus::kReal, corpus::kFake}) {
            corpus::Corpus part{c.name + "/" + corpus::label_name(label), {}};
            for (const auto& smp : c.samples)
                if (smp.label == label) part.samples.push_back(smp);
            if (!part.samples.empty()) parts.push_back({part.name, toy::make_grids(arch, norm, part)});
        }
    }
    const auto curve = eval::nll_epoch_curve(trainer, parts, cfg.mae_epochs, cfg.cas.sigma_nll);

    const fs::path stem = s.run_dir() / "nll_curve", weights = s.run_dir() / "toy_mae.safetensors";
    s.write_config();
    write_nll_curve(stem, s.header(ids.hex()), curve);
    const auto bb = trainer.snapshot();
    backbone::save_backbone(bb, weights);
    auto j = s.summary("nll-curve", {stem.string() + ".csv", stem.string() + ".json", weights, backbone::sidecar_path(weights)});
    j["backbone_digest"] = bb.param_digest();
    nlohmann::json final_nll = nlohmann::json::object();
    for (std::size_t i = curve.records.size() - std::min(curve.records.size(), parts.size()); i < curve.records.size(); ++i)
        final_nll[curve.records[i].corpus] = curve.records[i].mean_nll;
    j["final_mean_nll"] = final_nll;
    return j;
}

/// Error record for the executable.
inline nlohmann::json error_record(const std::string& kind, const std::string& message) {
    return {{"error", kind}, {"message", message}};
}

}  // namespace cinemae::cli
