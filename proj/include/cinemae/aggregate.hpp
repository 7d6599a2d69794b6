#pragma once

// K stochastic masking runs per image, their L_CAS score matrix, the three
// image-level summaries and the learned projection to f_anomaly.
//
//   s1 = (1/K) Σ_k (max_j S[k][j] − min_j S[k][j])
//   s2 = mean over all K×m entries
//   s3 = (1/K) Σ_k |mean_j S[k][j] − s2|

#include <algorithm>
#include <array>
#include <cmath>
#include <ostream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cinemae/autodiff.hpp"
#include "cinemae/backbone.hpp"
#include "cinemae/cas.hpp"
#include "cinemae/error.hpp"
#include "cinemae/nn.hpp"
#include "cinemae/random.hpp"

namespace cinemae::aggregate {

using ad::Matrix;

inline constexpr int kMaxRuns = 8;

struct MaskPlan {
    int num_patches = 0;
    int runs = 0;
    double mask_ratio = 0.75;
    std::uint64_t seed = 0;
    std::vector<std::vector<int>> masks;  // each sorted ascending
};

inline int mask_count(int num_patches, double mask_ratio) {
    return static_cast<int>(std::lround(mask_ratio * num_patches));
}

inline MaskPlan sample_masks(int num_patches, double mask_ratio, int runs, std::uint64_t seed) {
    if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) throw ValueError("mask_ratio must lie in (0, 1)");
    if (runs < 1 || runs > kMaxRuns) throw ValueError("run count must be in 1.." + std::to_string(kMaxRuns));
    const int count = mask_count(num_patches, mask_ratio);
    if (count < 1 || count >= num_patches)
        throw ValueError("mask ratio " + std::to_string(mask_ratio) + " on " + std::to_string(num_patches) +
                         " patches gives a degenerate mask of " + std::to_string(count));
    MaskPlan plan{num_patches, runs, mask_ratio, seed, {}};
    Rng rng(seed);
    for (int k = 0; k < runs; ++k) {
        auto m = rng.sample_without_replacement(num_patches, count);
        std::sort(m.begin(), m.end());
        plan.masks.push_back(std::move(m));
    }
    return plan;
}

/// L_CAS scores of every masked patch of every run, plus the plain
/// Gaussian NLL of the same patches (used by the threshold baseline).
struct PatchScoreSet {
    std::string image_id;
    Matrix scores;                  // K × m
    Matrix nll;                     // K × m
    Eigen::VectorXd run_means;      // K
    std::vector<std::vector<int>> masks;

    int runs() const { return static_cast<int>(scores.rows()); }
    int masked_per_run() const { return static_cast<int>(scores.cols()); }
    bool empty() const { return scores.size() == 0; }
    double mean_nll() const { return nll.size() ? nll.mean() : 0.0; }
};

inline PatchScoreSet make_score_set(Matrix scores) {
    PatchScoreSet s;
    s.run_means = scores.rowwise().mean();
    s.scores = std::move(scores);
    return s;
}

inline PatchScoreSet score_runs(const backbone::PatchGrid& grid, const backbone::Backbone& bb, const MaskPlan& plan,
                                const cas::CasConfig& config) {
    config.validate();
    if (plan.num_patches != grid.num_patches()) throw MaskError("mask plan built for a different patch count");
    const Matrix target = bb.target_patches(grid);
    PatchScoreSet out;
    out.image_id = grid.image_id;
    out.masks = plan.masks;
    const int m = plan.masks.empty() ? 0 : static_cast<int>(plan.masks.front().size());
    out.scores.resize(plan.runs, m);
    out.nll.resize(plan.runs, m);
    for (int k = 0; k < plan.runs; ++k) {
        const auto& mask = plan.masks[static_cast<std::size_t>(k)];
        const auto visible = backbone::visible_complement(mask, grid.num_patches());
        const cas::ContextStats ctx = cas::context_stats(target, visible, config.sigma_floor);
        const Matrix recon = bb.reconstruct(grid, mask);
        Matrix orig(m, target.cols()), pred(m, target.cols());
        for (int j = 0; j < m; ++j) {
            orig.row(j) = target.row(mask[static_cast<std::size_t>(j)]);
            pred.row(j) = recon.row(mask[static_cast<std::size_t>(j)]);
        }
        out.scores.row(k) = cas::cas_scores(orig, pred, ctx, config).transpose();
        for (int j = 0; j < m; ++j) out.nll(k, j) = cas::nll_gaussian(orig.row(j), pred.row(j), config.sigma_nll, config.reduction);
    }
    out.run_means = out.scores.rowwise().mean();
    return out;
}

struct AnomalyStats {
    double s1 = 0.0;
    double s2 = 0.0;
    double s3 = 0.0;

    std::array<double, 3> as_array() const { return {s1, s2, s3}; }
    bool operator==(const AnomalyStats&) const = default;
};

inline AnomalyStats summarize(const PatchScoreSet& set) {
    if (set.scores.rows() == 0 || set.scores.cols() == 0) throw EmptyError("cannot summarize an empty score set");
    const Matrix& s = set.scores;
    const double K = static_cast<double>(s.rows());
    AnomalyStats out;
    out.s1 = (s.rowwise().maxCoeff() - s.rowwise().minCoeff()).sum() / K;
    out.s2 = s.mean();
    // one run: its mean is the grand mean, avoid the rounding residue
    out.s3 = s.rows() == 1 ? 0.0 : (s.rowwise().mean().array() - out.s2).abs().sum() / K;
    return out;
}

/// (s1, s2, s3) as a 1×3 tape variable, differentiable with respect to
/// whichever backbone weights are trainable. Matches `summarize(score_runs())`
/// in value; used when the backbone is unfrozen for the freezing ablation.
template <typename W>
ad::Var stats_on_tape(ad::Tape& t, W& weights, const backbone::ArchSpec& arch, backbone::TargetSpace space,
                      const backbone::PatchGrid& grid, const MaskPlan& plan, const cas::CasConfig& config) {
    const Matrix target = backbone::to_target_space(grid.patches, space);
    const double n = config.reduction == cas::Reduction::Mean ? static_cast<double>(target.cols()) : 1.0;
    std::vector<ad::Var> rows;
    for (const auto& mask : plan.masks) {
        const auto visible = backbone::visible_complement(mask, grid.num_patches());
        const cas::ContextStats ctx = cas::context_stats(target, visible, config.sigma_floor);
        const auto m = static_cast<Eigen::Index>(mask.size());
        Matrix orig(m, target.cols());
        for (Eigen::Index j = 0; j < m; ++j) orig.row(j) = target.row(mask[static_cast<std::size_t>(j)]);
        cas::CasConfig dstat_only = config;
        dstat_only.lambda = 0.0;
        const Matrix dstat = cas::cas_scores(orig, orig, ctx, dstat_only).transpose();  // 1×m

        ad::Var latent = backbone::encode(t, weights, arch, grid.patches, visible);
        ad::Var pred = ad::gather_rows(backbone::decode(t, weights, arch, latent, visible), mask);
        ad::Var mismatch = ad::scale(ad::transpose(ad::mean_cols(ad::square(ad::sub(t.constant(orig), pred)))),
                                     static_cast<double>(target.cols()) / n);
        rows.push_back(ad::add(t.constant(dstat), ad::scale(mismatch, config.lambda)));
    }
    ad::Var S = ad::concat_rows(rows);
    const auto K = static_cast<Eigen::Index>(rows.size());
    ad::Var s1 = ad::mean(ad::sub(ad::max_cols(S), ad::min_cols(S)));
    ad::Var s2 = ad::mean(S);
    ad::Var s2_col = ad::matmul(t.constant(Matrix::Ones(K, 1)), s2);
    ad::Var s3 = ad::mean(ad::abs(ad::sub(ad::mean_cols(S), s2_col)));
    return ad::concat_cols({s1, s2, s3});
}

/// Zero the statistics whose flag is off.
inline AnomalyStats statistic_subset_mask(const AnomalyStats& stats, std::array<bool, 3> enabled) {
    return {enabled[0] ? stats.s1 : 0.0, enabled[1] ? stats.s2 : 0.0, enabled[2] ? stats.s3 : 0.0};
}

/// MLP 3 → hidden → D (GELU) mapping (s1, s2, s3) to f_anomaly.
struct Projector {
    nn::Mlp mlp;

    Projector() = default;
    Projector(int hidden, int out_dim) : mlp("projector", 3, hidden, out_dim) {}

    int out_dim() const { return static_cast<int>(mlp.fc2.out()); }

    ad::Var operator()(ad::Tape& t, ad::Var stats) {
        if (stats.cols() != 3) throw ShapeError("projector expects 3 statistics per row");
        return mlp(t, stats);
    }

    template <typename F>
    void for_each_parameter(F&& f) {
        mlp.for_each_parameter(f);
    }
};

inline Eigen::RowVectorXd project_anomaly(const AnomalyStats& stats, Projector& projector, int expected_dim) {
    if (projector.mlp.fc1.in() != 3 || projector.out_dim() != expected_dim)
        throw ShapeError("projector shape " + std::to_string(projector.mlp.fc1.in()) + "->" +
                         std::to_string(projector.out_dim()) + " does not match 3->" + std::to_string(expected_dim));
    ad::Tape t;
    Matrix in(1, 3);
    in << stats.s1, stats.s2, stats.s3;
    return projector(t, t.constant(in)).value();
}

/// Columnar export: image_id,run,patch_index,score. Schema line first.
inline constexpr const char* kScoreSchema = "cinemae.scores/1";

inline void write_scores_csv(std::ostream& out, const std::vector<PatchScoreSet>& sets) {
    out << "# schema=" << kScoreSchema << "\n";
    out << "image_id,run,patch_index,score\n";
    out.precision(17);
    for (const auto& s : sets)
        for (int k = 0; k < s.runs(); ++k)
            for (int j = 0; j < s.masked_per_run(); ++j)
                out << s.image_id << ',' << k << ',' << s.masks[static_cast<std::size_t>(k)][static_cast<std::size_t>(j)]
                    << ',' << s.scores(k, j) << '\n';
}

}  // namespace cinemae::aggregate
