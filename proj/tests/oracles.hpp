#pragma once

// Reference computations written with plain loops, independent of the
// vectorised library code they check.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include <Eigen/Dense>

#include "cinemae/autodiff.hpp"

namespace oracle {

/// Population mean/std per dimension over visible rows, floored.
inline void context(const Eigen::MatrixXd& visible, double floor, std::vector<double>& mu, std::vector<double>& sigma) {
    const auto n = visible.rows(), P = visible.cols();
    mu.assign(static_cast<std::size_t>(P), 0.0);
    sigma.assign(static_cast<std::size_t>(P), 0.0);
    for (Eigen::Index d = 0; d < P; ++d) {
        double s = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) s += visible(i, d);
        const double m = s / static_cast<double>(n);
        double v = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) v += (visible(i, d) - m) * (visible(i, d) - m);
        mu[static_cast<std::size_t>(d)] = m;
        sigma[static_cast<std::size_t>(d)] = std::max(std::sqrt(v / static_cast<double>(n)), floor);
    }
}

/// Mean over dimensions of ½(z² + log σ²) + λ (x − x̂)².
inline double cas(const Eigen::RowVectorXd& patch, const Eigen::RowVectorXd& recon, const std::vector<double>& mu,
                  const std::vector<double>& sigma, double lambda) {
    double total = 0.0;
    for (Eigen::Index d = 0; d < patch.size(); ++d) {
        const double s = sigma[static_cast<std::size_t>(d)];
        const double z = (patch(d) - mu[static_cast<std::size_t>(d)]) / s;
        const double diff = patch(d) - recon(d);
        total += 0.5 * (z * z + std::log(s * s)) + lambda * diff * diff;
    }
    return total / static_cast<double>(patch.size());
}

struct Stats {
    double s1, s2, s3;
};

/// s1 = mean over runs of (max − min); s2 = mean of all scores;
/// s3 = mean over runs of |run mean − s2|.
inline Stats summarize(const Eigen::MatrixXd& S) {
    const auto K = S.rows(), m = S.cols();
    double range_sum = 0.0, all = 0.0;
    std::vector<double> run_mean(static_cast<std::size_t>(K), 0.0);
    for (Eigen::Index k = 0; k < K; ++k) {
        double lo = S(k, 0), hi = S(k, 0), s = 0.0;
        for (Eigen::Index j = 0; j < m; ++j) {
            lo = std::min(lo, S(k, j));
            hi = std::max(hi, S(k, j));
            s += S(k, j);
        }
        range_sum += hi - lo;
        run_mean[static_cast<std::size_t>(k)] = s / static_cast<double>(m);
        all += s;
    }
    Stats out;
    out.s1 = range_sum / static_cast<double>(K);
    out.s2 = all / static_cast<double>(K * m);
    double dev = 0.0;
    for (double r : run_mean) dev += std::abs(r - out.s2);
    out.s3 = dev / static_cast<double>(K);
    return out;
}

/// P(score_fake > score_real) + ½ P(tie) by enumerating all pairs.
inline double auc_pairwise(const std::vector<double>& scores, const std::vector<int>& labels) {
    double wins = 0.0;
    double pairs = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (labels[i] != 1) continue;
        for (std::size_t j = 0; j < scores.size(); ++j) {
            if (labels[j] != 0) continue;
            pairs += 1.0;
            if (scores[i] > scores[j]) wins += 1.0;
            else if (scores[i] == scores[j]) wins += 0.5;
        }
    }
    return wins / pairs;
}

struct GradReport {
    double worst = 0.0;  // largest relative error seen
    int checked = 0;
};

/// Central differences of `loss` against the analytic gradient already in
/// p->grad for every parameter. Relative error |a − n| / max(|a|, |n|), with
/// entries whose gradients are both below `tiny` compared absolutely.
inline GradReport check_gradients(const std::vector<cinemae::ad::Parameter*>& params, const std::function<double()>& loss,
                                  double step = 1e-5, double tiny = 1e-7) {
    GradReport r;
    for (auto* p : params) {
        for (Eigen::Index i = 0; i < p->value.size(); ++i) {
            double& w = p->value.data()[i];
            const double keep = w;
            w = keep + step;
            const double up = loss();
            w = keep - step;
            const double down = loss();
            w = keep;
            const double numeric = (up - down) / (2.0 * step);
            const double analytic = p->grad.data()[i];
            const double scale = std::max(std::abs(analytic), std::abs(numeric));
            const double err = scale < tiny ? std::abs(analytic - numeric) : std::abs(analytic - numeric) / scale;
            r.worst = std::max(r.worst, err);
            ++r.checked;
        }
    }
    return r;
}

}  // namespace oracle
