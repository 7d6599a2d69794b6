#pragma once

// Run configuration: one JSON document, schema "cinemae.config/1".
//
// {
//   "schema": "cinemae.config/1",
//   "seed": 0,
//   "backbone":   {"arch_tag": "large-16", "weights": "weights/mae_visualize_vit_large.safetensors"},
//   "preprocess": {"resize": 256, "crop": 224},
//   "cas":        {"lambda": 1.0, "sigma_nll": 1.0, "sigma_floor": 1e-4, "reduction": "mean"},
//   "masking":    {"k": 2, "ratio": 0.75},
//   "model":      {"strategy": "add", "optimizer": "adam", "learning_rate": 1e-4, "epochs": 25,
//                  "batch_size": 32, "projector_hidden": 64, "fusion_hidden": 256},
//   "eval":       {"test_fraction": 0.3, "threshold_feature": "nll"},
//   "toy_mae":    {"epochs": 30, "learning_rate": 1e-3, "batch_size": 8, "target": "pixel"},
//   "io":         {"cache_dir": "", "output_dir": "out"}
// }
//
// Every key is optional on input; unknown keys are rejected. The config hash
// covers everything except "io", so moving output or cache directories does
// not change it.

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "cinemae/backbone.hpp"
#include "cinemae/cas.hpp"
#include "cinemae/error.hpp"
#include "cinemae/eval.hpp"
#include "cinemae/features.hpp"
#include "cinemae/hash.hpp"
#include "cinemae/image.hpp"
#include "cinemae/model.hpp"
#include "cinemae/random.hpp"

namespace cinemae::cli {

inline constexpr const char* kConfigSchema = "cinemae.config/1";

struct RunConfig {
    std::uint64_t seed = 0;

    std::string arch_tag = "large-16";
    std::string weights;

    PreprocessPolicy preprocess{};
    cas::CasConfig cas{};

    int k = 2;
    double mask_ratio = 0.75;

    model::Strategy strategy = model::Strategy::Add;
    std::string optimizer = "adam";
    double learning_rate = 1e-4;
    int epochs = 25;
    int batch_size = 32;
    int projector_hidden = 64;
    int fusion_hidden = 256;

    double test_fraction = 0.3;
    std::string threshold_feature = "nll";

    int mae_epochs = 30;
    double mae_learning_rate = 1e-3;
    int mae_batch_size = 8;
    std::string mae_target = "pixel";

    std::string cache_dir;  // empty: <output_dir>/cache
    std::string output_dir = "out";

    std::filesystem::path cache_path() const {
        return cache_dir.empty() ? std::filesystem::path(output_dir) / "cache" : std::filesystem::path(cache_dir);
    }

    void validate() const {
        backbone::arch_for_tag(arch_tag);
        if (preprocess.crop < 1 || preprocess.resize < preprocess.crop)
            throw ConfigError("preprocess.resize must be >= preprocess.crop >= 1");
        cas.validate();
        plan().validate();
        train_config().validate();
        if (projector_hidden < 1 || fusion_hidden < 1) throw ConfigError("hidden widths must be >= 1");
        if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw ConfigError("eval.test_fraction must lie in (0, 1)");
        eval::parse_threshold_feature(threshold_feature);
        if (mae_epochs < 0 || mae_batch_size < 1 || !(mae_learning_rate > 0.0)) throw ConfigError("bad toy_mae settings");
        if (mae_target != "pixel" && mae_target != "per_patch") throw ConfigError("toy_mae.target must be pixel or per_patch");
    }

    features::PlanConfig plan() const {
        features::PlanConfig p;
        p.runs = k;
        p.mask_ratio = mask_ratio;
        p.seed = derive_seed(seed, "masking");
        p.cas = cas;
        return p;
    }

    model::TrainConfig train_config() const {
        model::TrainConfig t;
        t.epochs = epochs;
        t.batch_size = batch_size;
        t.optimizer = optimizer;
        t.learning_rate = learning_rate;
        t.seed = derive_seed(seed, "detector");
        return t;
    }

    model::DetectorConfig detector_config(int embed_dim) const {
        model::DetectorConfig d;
        d.strategy = strategy;
        d.embed_dim = embed_dim;
        d.projector_hidden = projector_hidden;
        d.fusion_hidden = fusion_hidden;
        return d;
    }

    std::uint64_t split_seed() const { return derive_seed(seed, "split"); }
};

namespace detail {

inline void check_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed, const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + " must be an object");
    for (const auto& [key, _] : j.items()) {
        bool ok = false;
        for (const char* a : allowed) ok = ok || key == a;
        if (!ok) throw ConfigError("unknown config key '" + where + (where.empty() ? "" : ".") + key + "'");
    }
}

template <typename T>
void read(const nlohmann::json& j, const char* key, T& out, const std::string& where) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError("config key '" + where + "." + key + "' has the wrong type");
    }
}

}  // namespace detail

inline nlohmann::json to_json(const RunConfig& c, bool with_io = true) {
    nlohmann::json j = {
        {"schema", kConfigSchema},
        {"seed", c.seed},
        {"backbone", {{"arch_tag", c.arch_tag}, {"weights", c.weights}}},
        {"preprocess", {{"resize", c.preprocess.resize}, {"crop", c.preprocess.crop}}},
        {"cas", cas::to_json(c.cas)},
        {"masking", {{"k", c.k}, {"ratio", c.mask_ratio}}},
        {"model",
         {{"strategy", model::to_string(c.strategy)},
          {"optimizer", c.optimizer},
          {"learning_rate", c.learning_rate},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"projector_hidden", c.projector_hidden},
          {"fusion_hidden", c.fusion_hidden}}},
        {"eval", {{"test_fraction", c.test_fraction}, {"threshold_feature", c.threshold_feature}}},
        {"toy_mae",
         {{"epochs", c.mae_epochs},
          {"learning_rate", c.mae_learning_rate},
          {"batch_size", c.mae_batch_size},
          {"target", c.mae_target}}},
    };
    if (with_io) j["io"] = {{"cache_dir", c.cache_dir}, {"output_dir", c.output_dir}};
    return j;
}

inline RunConfig config_from_json(const nlohmann::json& j) {
    using detail::read;
    detail::check_keys(j, {"schema", "seed", "backbone", "preprocess", "cas", "masking", "model", "eval", "toy_mae", "io"}, "");
    RunConfig c;
    if (j.contains("schema") && j.at("schema") != kConfigSchema)
        throw ConfigError("unsupported config schema " + j.at("schema").dump());
    read(j, "seed", c.seed, "");
    if (j.contains("backbone")) {
        const auto& b = j.at("backbone");
        detail::check_keys(b, {"arch_tag", "weights"}, "backbone");
        read(b, "arch_tag", c.arch_tag, "backbone");
        read(b, "weights", c.weights, "backbone");
    }
    if (j.contains("preprocess")) {
        const auto& p = j.at("preprocess");
        detail::check_keys(p, {"resize", "crop"}, "preprocess");
        read(p, "resize", c.preprocess.resize, "preprocess");
        read(p, "crop", c.preprocess.crop, "preprocess");
    }
    if (j.contains("cas")) {
        detail::check_keys(j.at("cas"), {"lambda", "sigma_nll", "sigma_floor", "reduction"}, "cas");
        try {
            c.cas = cas::cas_config_from_json(j.at("cas"));
        } catch (const nlohmann::json::exception&) {
            throw ConfigError("config section 'cas' has a value of the wrong type");
        } catch (const ValueError& e) {
            throw ConfigError(e.what());
        }
    }
    if (j.contains("masking")) {
        const auto& m = j.at("masking");
        detail::check_keys(m, {"k", "ratio"}, "masking");
        read(m, "k", c.k, "masking");
        read(m, "ratio", c.mask_ratio, "masking");
    }
    if (j.contains("model")) {
        const auto& m = j.at("model");
        detail::check_keys(m, {"strategy", "optimizer", "learning_rate", "epochs", "batch_size", "projector_hidden", "fusion_hidden"},
                           "model");
        std::string strategy = model::to_string(c.strategy);
        read(m, "strategy", strategy, "model");
        c.strategy = model::parse_strategy(strategy);
        read(m, "optimizer", c.optimizer, "model");
        read(m, "learning_rate", c.learning_rate, "model");
        read(m, "epochs", c.epochs, "model");
        read(m, "batch_size", c.batch_size, "model");
        read(m, "projector_hidden", c.projector_hidden, "model");
        read(m, "fusion_hidden", c.fusion_hidden, "model");
    }
    if (j.contains("eval")) {
        const auto& e = j.at("eval");
        detail::check_keys(e, {"test_fraction", "threshold_feature"}, "eval");
        read(e, "test_fraction", c.test_fraction, "eval");
        read(e, "threshold_feature", c.threshold_feature, "eval");
    }
    if (j.contains("toy_mae")) {
        const auto& t = j.at("toy_mae");
        detail::check_keys(t, {"epochs", "learning_rate", "batch_size", "target"}, "toy_mae");
        read(t, "epochs", c.mae_epochs, "toy_mae");
        read(t, "learning_rate", c.mae_learning_rate, "toy_mae");
        read(t, "batch_size", c.mae_batch_size, "toy_mae");
        read(t, "target", c.mae_target, "toy_mae");
    }
    if (j.contains("io")) {
        const auto& io = j.at("io");
        detail::check_keys(io, {"cache_dir", "output_dir"}, "io");
        read(io, "cache_dir", c.cache_dir, "io");
        read(io, "output_dir", c.output_dir, "io");
    }
    c.validate();
    return c;
}

inline RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    try {
        return config_from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

/// SHA-256 of the canonical JSON form without the io section.
inline std::string config_hash(const RunConfig& c) { return sha256_hex(to_json(c, false).dump()); }

inline std::string preprocess_tag(const RunConfig& c) {
    return "resize" + std::to_string(c.preprocess.resize) + "-crop" + std::to_string(c.preprocess.crop);
}

}  // namespace cinemae::cli
