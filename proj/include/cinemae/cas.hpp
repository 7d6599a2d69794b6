#pragma once

// Patch-level anomaly scores.
//
//   D_stat(p | ctx)  = mean_d ½(((p_d − μ_d)/σ_d)² + log σ_d²)
//   mismatch(p, p̂)   = mean_d (p_d − p̂_d)²        (or the plain sum, see Reduction)
//   L_CAS            = D_stat + λ·mismatch
//   NLL(p, p̂)        = mismatch / (2σ²)
//
// μ, σ are per-dimension population statistics of the visible patches with σ
// floored at `sigma_floor`.

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "cinemae/error.hpp"
#include "cinemae/hash.hpp"

namespace cinemae::cas {

using Vector = Eigen::RowVectorXd;
using Matrix = Eigen::MatrixXd;

enum class Reduction { Mean, Sum };

struct CasConfig {
    double lambda = 1.0;
    double sigma_nll = 1.0;
    double sigma_floor = 1e-4;
    Reduction reduction = Reduction::Mean;

    void validate() const {
        if (!(lambda >= 0.0)) throw ValueError("cas.lambda must be >= 0");
        if (!(sigma_nll > 0.0)) throw ValueError("cas.sigma_nll must be > 0");
        if (!(sigma_floor > 0.0)) throw ValueError("cas.sigma_floor must be > 0");
    }

    bool operator==(const CasConfig&) const = default;
};

inline nlohmann::json to_json(const CasConfig& c) {
    return {{"lambda", c.lambda},
            {"sigma_nll", c.sigma_nll},
            {"sigma_floor", c.sigma_floor},
            {"reduction", c.reduction == Reduction::Mean ? "mean" : "sum"}};
}

inline CasConfig cas_config_from_json(const nlohmann::json& j) {
    CasConfig c;
    c.lambda = j.value("lambda", c.lambda);
    c.sigma_nll = j.value("sigma_nll", c.sigma_nll);
    c.sigma_floor = j.value("sigma_floor", c.sigma_floor);
    const std::string r = j.value("reduction", std::string("mean"));
    if (r != "mean" && r != "sum") throw ConfigError("cas.reduction must be 'mean' or 'sum'");
    c.reduction = r == "mean" ? Reduction::Mean : Reduction::Sum;
    c.validate();
    return c;
}

inline std::string config_hash(const CasConfig& c) { return sha256_hex(to_json(c).dump()); }

struct ContextStats {
    Vector mu;
    Vector sigma;
    int n_visible = 0;
};

/// Per-dimension mean and population standard deviation of `visible` rows.
inline ContextStats context_stats(const Matrix& visible, double sigma_floor = 1e-4) {
    if (visible.rows() < 2) throw ContextError("context statistics need at least 2 visible patches, got " +
                                                std::to_string(visible.rows()));
    if (!(sigma_floor > 0.0)) throw ValueError("sigma_floor must be > 0");
    ContextStats s;
    s.n_visible = static_cast<int>(visible.rows());
    s.mu = visible.colwise().mean();
    s.sigma = ((visible.rowwise() - s.mu).array().square().colwise().sum() / static_cast<double>(visible.rows()))
                  .sqrt()
                  .max(sigma_floor);
    return s;
}

/// Context statistics over the rows of `patches` listed in `visible`.
inline ContextStats context_stats(const Matrix& patches, std::span<const int> visible, double sigma_floor) {
    Matrix rows(static_cast<Eigen::Index>(visible.size()), patches.cols());
    for (std::size_t i = 0; i < visible.size(); ++i) rows.row(static_cast<Eigen::Index>(i)) = patches.row(visible[i]);
    return context_stats(rows, sigma_floor);
}

namespace detail {
inline double reduce(double total, Eigen::Index n, Reduction r) {
    return r == Reduction::Mean ? total / static_cast<double>(n) : total;
}
inline void check_dims(Eigen::Index a, Eigen::Index b, const char* what) {
    if (a != b) throw DimensionError(std::string(what) + ": dimension " + std::to_string(a) + " vs " + std::to_string(b));
}
}  // namespace detail

/// Gaussian-form deviation of a patch from the context statistics. Can be
/// negative when σ < 1.
inline double d_stat(const Vector& patch, const ContextStats& stats, Reduction r = Reduction::Mean) {
    detail::check_dims(patch.size(), stats.mu.size(), "d_stat");
    const auto z = (patch - stats.mu).array() / stats.sigma.array();
    const double total = 0.5 * (z.square() + stats.sigma.array().square().log()).sum();
    return detail::reduce(total, patch.size(), r);
}

inline double semantic_mismatch(const Vector& patch, const Vector& recon, Reduction r = Reduction::Mean) {
    detail::check_dims(patch.size(), recon.size(), "semantic_mismatch");
    return detail::reduce((patch - recon).squaredNorm(), patch.size(), r);
}

inline double cas_score(const Vector& patch, const Vector& recon, const ContextStats& stats, const CasConfig& config) {
    return d_stat(patch, stats, config.reduction) + config.lambda * semantic_mismatch(patch, recon, config.reduction);
}

inline double nll_gaussian(const Vector& patch, const Vector& recon, double sigma_nll, Reduction r = Reduction::Mean) {
    if (!(sigma_nll > 0.0)) throw ValueError("sigma_nll must be > 0");
    return semantic_mismatch(patch, recon, r) / (2.0 * sigma_nll * sigma_nll);
}

/// Vectorised L_CAS for every row of `patches` against matching rows of
/// `recons`, sharing one context.
inline Eigen::VectorXd cas_scores(const Matrix& patches, const Matrix& recons, const ContextStats& stats,
                                  const CasConfig& config) {
    detail::check_dims(patches.cols(), stats.mu.size(), "cas_scores");
    detail::check_dims(patches.rows(), recons.rows(), "cas_scores rows");
    detail::check_dims(patches.cols(), recons.cols(), "cas_scores cols");
    const double n = config.reduction == Reduction::Mean ? static_cast<double>(patches.cols()) : 1.0;
    const Eigen::ArrayXXd z = (patches.rowwise() - stats.mu).array().rowwise() / stats.sigma.array();
    const double log_var = stats.sigma.array().square().log().sum();
    const Eigen::ArrayXd dstat = 0.5 * (z.square().rowwise().sum() + log_var) / n;
    const Eigen::ArrayXd mismatch = (patches - recons).array().square().rowwise().sum() / n;
    return (dstat + config.lambda * mismatch).matrix();
}

}  // namespace cinemae::cas
