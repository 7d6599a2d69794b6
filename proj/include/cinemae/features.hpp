#pragma once

// Per-image feature extraction through a frozen backbone: f_global, the
// K-run score set, its summary statistics and the mean Gaussian NLL.

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "cinemae/aggregate.hpp"
#include "cinemae/backbone.hpp"
#include "cinemae/cas.hpp"
#include "cinemae/corpus.hpp"
#include "cinemae/random.hpp"

namespace cinemae::features {

/// Masking and scoring settings shared by training, evaluation and detection.
struct PlanConfig {
    int runs = 2;              // K; 0 disables the anomaly branch
    double mask_ratio = 0.75;
    std::uint64_t seed = 0;    // root; per-image mask seeds derive from it
    cas::CasConfig cas{};

    void validate() const {
        if (runs < 0 || runs > aggregate::kMaxRuns) throw ConfigError("masking.k must be in 0..8");
        if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) throw ConfigError("masking.ratio must lie in (0, 1)");
        cas.validate();
    }
};

inline std::uint64_t mask_seed(const PlanConfig& c, const std::string& image_id) {
    return derive_seed(c.seed, "mask:" + image_id);
}

struct ImageFeatures {
    Eigen::RowVectorXd f_global;
    std::optional<aggregate::AnomalyStats> stats;  // absent when K = 0
    aggregate::PatchScoreSet scores;
    double mean_nll = 0.0;
};

inline Eigen::RowVectorXd extract_global(const backbone::Backbone& bb, const backbone::PatchGrid& grid) {
    return bb.global_feature(grid);
}

inline aggregate::PatchScoreSet extract_scores(const backbone::Backbone& bb, const backbone::PatchGrid& grid,
                                               const PlanConfig& c) {
    const auto plan = aggregate::sample_masks(grid.num_patches(), c.mask_ratio, c.runs, mask_seed(c, grid.image_id));
    return aggregate::score_runs(grid, bb, plan, c.cas);
}

inline ImageFeatures assemble(Eigen::RowVectorXd f_global, aggregate::PatchScoreSet scores) {
    ImageFeatures f;
    f.f_global = std::move(f_global);
    if (!scores.empty()) {
        f.stats = aggregate::summarize(scores);
        f.mean_nll = scores.mean_nll();
    }
    f.scores = std::move(scores);
    return f;
}

inline ImageFeatures extract(const backbone::Backbone& bb, const backbone::PatchGrid& grid, const PlanConfig& c) {
    c.validate();
    return assemble(extract_global(bb, grid),
                    c.runs > 0 ? extract_scores(bb, grid, c) : aggregate::PatchScoreSet{grid.image_id, {}, {}, {}, {}});
}

/// Source of features for a sample; the CLI plugs its on-disk cache in here.
using Provider = std::function<ImageFeatures(const corpus::Sample&)>;

inline Provider direct_provider(const backbone::Backbone& bb, PlanConfig c) {
    return [&bb, c](const corpus::Sample& s) { return extract(bb, bb.make_grid(s.pixels(), s.id), c); };
}

struct LabeledFeatures {
    ImageFeatures features;
    int label = corpus::kReal;
    std::string id;
};

inline std::vector<LabeledFeatures> extract_corpus(const corpus::Corpus& c, const Provider& provider) {
    std::vector<LabeledFeatures> out;
    out.reserve(c.samples.size());
    for (const auto& s : c.samples) out.push_back({provider(s), s.label, s.id});
    return out;
}

}  // namespace cinemae::features
