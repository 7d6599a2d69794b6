#include <gtest/gtest.h>

#include <cmath>

#include "cinemae/aggregate.hpp"
#include "cinemae/cas.hpp"
#include "cinemae/corpus.hpp"
#include "cinemae/eval.hpp"
#include "cinemae/synth.hpp"
#include "oracles.hpp"

using namespace cinemae;
using Eigen::MatrixXd;
using Eigen::RowVectorXd;

namespace {

RowVectorXd row(std::initializer_list<double> v) {
    RowVectorXd r(static_cast<Eigen::Index>(v.size()));
    Eigen::Index i = 0;
    for (double x : v) r(i++) = x;
    return r;
}

cas::ContextStats stats(RowVectorXd mu, RowVectorXd sigma) { return {std::move(mu), std::move(sigma), 2}; }

}  // namespace

// ---- context statistics and scores ----------------------------------------------

TEST(ContextStats, TwoPatchesPopulationStd) {
    MatrixXd v(2, 2);
    v << 0, 0, 2, 2;
    const auto s = cas::context_stats(v);
    EXPECT_DOUBLE_EQ(s.mu(0), 1.0);
    EXPECT_DOUBLE_EQ(s.mu(1), 1.0);
    EXPECT_DOUBLE_EQ(s.sigma(0), 1.0);
    EXPECT_DOUBLE_EQ(s.sigma(1), 1.0);
    EXPECT_EQ(s.n_visible, 2);
}

TEST(ContextStats, IdenticalPatchesHitTheFloor) {
    MatrixXd v = MatrixXd::Constant(5, 4, 0.3);
    const auto s = cas::context_stats(v, 1e-3);
    for (int d = 0; d < 4; ++d) EXPECT_EQ(s.sigma(d), 1e-3);
}

TEST(ContextStats, OneVisiblePatchIsAnError) {
    EXPECT_THROW(cas::context_stats(MatrixXd::Ones(1, 3)), ContextError);
}

TEST(ContextStats, MatchesTwoPassOracle) {
    Rng rng(3);
    MatrixXd v(9, 12);
    for (Eigen::Index k = 0; k < v.size(); ++k) v.data()[k] = 100.0 + rng.normal();
    const auto s = cas::context_stats(v);
    std::vector<double> mu, sigma;
    oracle::context(v, 1e-4, mu, sigma);
    for (int d = 0; d < 12; ++d) {
        EXPECT_NEAR(s.mu(d), mu[static_cast<std::size_t>(d)], 1e-10 * std::abs(mu[static_cast<std::size_t>(d)]));
        EXPECT_NEAR(s.sigma(d), sigma[static_cast<std::size_t>(d)], 1e-10 * sigma[static_cast<std::size_t>(d)]);
    }
}

TEST(Cas, DStatHandValues) {
    EXPECT_DOUBLE_EQ(cas::d_stat(row({1, 1}), stats(row({1, 1}), row({1, 1}))), 0.0);
    EXPECT_DOUBLE_EQ(cas::d_stat(row({3.0}), stats(row({1.0}), row({1.0}))), 2.0);
    const double want = 0.25 * (1.0 + std::log(4.0));
    EXPECT_NEAR(cas::d_stat(row({1, 3}), stats(row({1, 1}), row({1, 2}))), want, 1e-12);
    EXPECT_NEAR(want, 0.5966, 1e-4);
}

TEST(Cas, SemanticMismatch) {
    EXPECT_DOUBLE_EQ(cas::semantic_mismatch(row({4, 5}), row({4, 5})), 0.0);
    EXPECT_DOUBLE_EQ(cas::semantic_mismatch(row({1, 1}), row({0, 1})), 0.5);
}

TEST(Cas, CombinedScore) {
    const auto st = stats(row({1, 1}), row({1, 2}));
    cas::CasConfig c;
    EXPECT_NEAR(cas::cas_score(row({1, 3}), row({1, 1}), st, c), 0.25 * (1.0 + std::log(4.0)) + 2.0, 1e-12);
    c.lambda = 0.0;
    EXPECT_EQ(cas::cas_score(row({1, 3}), row({0, 9}), st, c), cas::d_stat(row({1, 3}), st));
    c.lambda = 1.0;
    EXPECT_EQ(cas::cas_score(row({1, 1}), row({1, 1}), stats(row({1, 1}), row({1, 1})), c), 0.0);
}

TEST(Cas, VectorisedScoresMatchScalar) {
    Rng rng(4);
    MatrixXd p(6, 5), r(6, 5);
    for (Eigen::Index k = 0; k < p.size(); ++k) {
        p.data()[k] = rng.normal();
        r.data()[k] = rng.normal();
    }
    const auto st = cas::context_stats(p.topRows(3));
    cas::CasConfig c;
    c.lambda = 0.7;
    const auto v = cas::cas_scores(p, r, st, c);
    for (int i = 0; i < 6; ++i) EXPECT_NEAR(v(i), cas::cas_score(p.row(i), r.row(i), st, c), 1e-12);
}

TEST(Cas, GaussianNll) {
    EXPECT_DOUBLE_EQ(cas::nll_gaussian(row({1, 2}), row({1, 2}), 1.0), 0.0);
    EXPECT_DOUBLE_EQ(cas::nll_gaussian(row({2.0}), row({0.0}), 1.0), 2.0);
    EXPECT_THROW(cas::nll_gaussian(row({1}), row({1}), 0.0), ValueError);
}

TEST(Cas, DimensionMismatch) {
    EXPECT_THROW(cas::d_stat(row({1, 2, 3}), stats(row({1, 1}), row({1, 1}))), DimensionError);
    EXPECT_THROW(cas::semantic_mismatch(row({1}), row({1, 2})), DimensionError);
}

TEST(Cas, ConfigValidation) {
    cas::CasConfig c;
    c.lambda = -1;
    EXPECT_THROW(c.validate(), ValueError);
    EXPECT_THROW(cas::cas_config_from_json({{"reduction", "max"}}), ConfigError);
    EXPECT_EQ(cas::cas_config_from_json(cas::to_json(cas::CasConfig{})), cas::CasConfig{});
}

// ---- masks and statistics ----------------------------------------------------------

TEST(Masks, CountAndDeterminism) {
    const auto a = aggregate::sample_masks(196, 0.75, 2, 42);
    ASSERT_EQ(a.masks.size(), 2u);
    for (const auto& m : a.masks) {
        EXPECT_EQ(m.size(), 147u);
        EXPECT_TRUE(std::is_sorted(m.begin(), m.end()));
        EXPECT_EQ(std::adjacent_find(m.begin(), m.end()), m.end());
    }
    EXPECT_EQ(aggregate::sample_masks(196, 0.75, 2, 42).masks, a.masks);
    EXPECT_NE(a.masks[0], a.masks[1]);
}

TEST(Masks, DegenerateCountIsAnError) {
    EXPECT_THROW(aggregate::sample_masks(4, 0.999, 1, 1), ValueError);
    EXPECT_THROW(aggregate::sample_masks(16, 0.75, 0, 1), ValueError);
    EXPECT_THROW(aggregate::sample_masks(16, 0.75, 9, 1), ValueError);
}

TEST(Summarize, HandValues) {
    MatrixXd one(1, 2);
    one << 1, 3;
    auto s = aggregate::summarize(aggregate::make_score_set(one));
    EXPECT_EQ(s, (aggregate::AnomalyStats{2, 2, 0}));
    MatrixXd two(2, 2);
    two << 0, 2, 4, 6;
    s = aggregate::summarize(aggregate::make_score_set(two));
    EXPECT_DOUBLE_EQ(s.s1, 2);
    EXPECT_DOUBLE_EQ(s.s2, 3);
    EXPECT_DOUBLE_EQ(s.s3, 2);
}

TEST(Summarize, ConstantScores) {
    const auto s = aggregate::summarize(aggregate::make_score_set(MatrixXd::Constant(3, 7, -1.5)));
    EXPECT_EQ(s, (aggregate::AnomalyStats{0, -1.5, 0}));
}

TEST(Summarize, EmptyIsAnError) {
    EXPECT_THROW(aggregate::summarize(aggregate::PatchScoreSet{}), EmptyError);
}

TEST(Summarize, AffineResponse) {
    Rng rng(8);
    MatrixXd S(3, 10);
    for (Eigen::Index k = 0; k < S.size(); ++k) S.data()[k] = rng.normal();
    const auto base = aggregate::summarize(aggregate::make_score_set(S));
    const auto scaled = aggregate::summarize(aggregate::make_score_set((2.5 * S.array() + 4.0).matrix()));
    EXPECT_NEAR(scaled.s1, 2.5 * base.s1, 1e-12);
    EXPECT_NEAR(scaled.s2, 2.5 * base.s2 + 4.0, 1e-12);
    EXPECT_NEAR(scaled.s3, 2.5 * base.s3, 1e-12);
}

TEST(Summarize, OrderWithinRunIrrelevant) {
    MatrixXd a(2, 3), b(2, 3);
    a << 1, 5, 2, 7, 3, 3;
    b << 2, 1, 5, 3, 7, 3;
    EXPECT_EQ(aggregate::summarize(aggregate::make_score_set(a)), aggregate::summarize(aggregate::make_score_set(b)));
}

TEST(Subset, Flags) {
    const aggregate::AnomalyStats s{5, 7, 2};
    EXPECT_EQ(aggregate::statistic_subset_mask(s, {true, true, true}), s);
    EXPECT_EQ(aggregate::statistic_subset_mask(s, {false, false, false}), (aggregate::AnomalyStats{0, 0, 0}));
    EXPECT_EQ(aggregate::statistic_subset_mask(s, {false, true, false}), (aggregate::AnomalyStats{0, 7, 0}));
}

TEST(Projector, ZeroWeightsGiveZeroOutput) {
    aggregate::Projector p(64, 16);
    const auto f = aggregate::project_anomaly({1, 2, 3}, p, 16);
    EXPECT_EQ(f.size(), 16);
    EXPECT_TRUE(f.isZero(0.0));
    EXPECT_THROW(aggregate::project_anomaly({1, 2, 3}, p, 32), ShapeError);
}

// ---- metrics and thresholds ----------------------------------------------------------

TEST(Metrics, PerfectSeparation) {
    const auto r = eval::metrics_from_probabilities({0.9, 0.9, 0.1, 0.1}, {1, 1, 0, 0});
    EXPECT_DOUBLE_EQ(r.accuracy, 100);
    EXPECT_DOUBLE_EQ(*r.auc, 1.0);
    EXPECT_EQ(r.n_fake, 2);
    EXPECT_EQ(r.n_real, 2);
}

TEST(Metrics, ConstantHalfScorer) {
    const auto r = eval::metrics_from_probabilities({0.5, 0.5, 0.5, 0.5}, {1, 0, 1, 0});
    EXPECT_DOUBLE_EQ(r.accuracy, 50);
    EXPECT_DOUBLE_EQ(r.fake_accuracy, 100);
    EXPECT_DOUBLE_EQ(r.real_accuracy, 0);
    EXPECT_DOUBLE_EQ(*r.auc, 0.5);
}

TEST(Metrics, SingleClassHasNoAuc) {
    const auto r = eval::metrics_from_probabilities({0.2, 0.7}, {0, 0});
    EXPECT_FALSE(r.auc.has_value());
    EXPECT_DOUBLE_EQ(r.accuracy, 50);
    EXPECT_THROW(eval::metrics_from_probabilities({}, {}), DataError);
}

TEST(Metrics, MidrankAucMatchesPairs) {
    Rng rng(12);
    for (int t = 0; t < 20; ++t) {
        std::vector<double> s;
        std::vector<int> l{0, 1};
        s.push_back(static_cast<double>(rng.below(5)));
        s.push_back(static_cast<double>(rng.below(5)));
        for (int i = 0; i < 30; ++i) {
            s.push_back(static_cast<double>(rng.below(5)));
            l.push_back(static_cast<int>(rng.below(2)));
        }
        EXPECT_EQ(*eval::auc_midrank(s, l), oracle::auc_pairwise(s, l));
    }
}

TEST(Threshold, SeparableMidpoint) {
    const auto t = eval::fit_threshold({2.0, 3.0, 0.1, 0.2}, {0, 0, 1, 1});
    EXPECT_DOUBLE_EQ(t.value, 1.1);
    EXPECT_TRUE(t.fake_below);
    EXPECT_DOUBLE_EQ(t.balanced_accuracy, 100);
}

TEST(Threshold, IdenticalScoresGiveHalf) {
    const auto t = eval::fit_threshold({1, 1, 1, 1}, {0, 1, 0, 1});
    EXPECT_DOUBLE_EQ(t.balanced_accuracy, 50);
}

TEST(Threshold, BeatsEveryCandidateCut) {
    const std::vector<double> s{1, 2, 3, 2.5};
    const std::vector<int> l{0, 0, 0, 1};
    const auto t = eval::fit_threshold(s, l);
    std::vector<double> cuts{0.0, 4.0};
    for (double a : s)
        for (double b : s) cuts.push_back(0.5 * (a + b));
    double best = 0;
    for (double c : cuts)
        for (bool below : {true, false}) best = std::max(best, eval::balanced_accuracy(s, l, {c, below, 0}));
    EXPECT_DOUBLE_EQ(t.balanced_accuracy, best);
    EXPECT_DOUBLE_EQ(eval::balanced_accuracy(s, l, t), best);
}

TEST(Threshold, NeedsBothClasses) { EXPECT_THROW(eval::fit_threshold({1, 2}, {0, 0}), DataError); }

// ---- cross matrix ----------------------------------------------------------------

namespace {

std::vector<features::LabeledFeatures> scalar_set(std::vector<double> nll, std::vector<int> labels) {
    std::vector<features::LabeledFeatures> out;
    for (std::size_t i = 0; i < nll.size(); ++i) {
        features::ImageFeatures f;
        f.f_global = RowVectorXd::Zero(2);
        f.scores = aggregate::make_score_set(MatrixXd::Constant(1, 2, nll[i]));
        f.stats = aggregate::summarize(f.scores);
        f.mean_nll = nll[i];
        out.push_back({f, labels[i], std::to_string(i)});
    }
    return out;
}

}  // namespace

TEST(CrossMatrix, IdenticalDomainsGiveEqualRows) {
    const auto d = scalar_set({1, 2, 5, 6, 1.5, 5.5}, {1, 1, 0, 0, 1, 0});
    const auto m = eval::cross_matrix({{"a", d, d}, {"b", d, d}}, eval::threshold_factory(eval::ThresholdFeature::Nll));
    EXPECT_EQ(m.accuracy[0][0], m.accuracy[0][1]);
    EXPECT_EQ(m.accuracy[1][0], m.accuracy[1][1]);
    EXPECT_DOUBLE_EQ(m.diagonal_mean(), 100);
}

TEST(CrossMatrix, ShiftedDomainsFavourDiagonal) {
    const auto a = scalar_set({1, 2, 5, 6}, {1, 1, 0, 0});
    const auto b = scalar_set({7, 8, 11, 12}, {1, 1, 0, 0});
    const auto m = eval::cross_matrix({{"a", a, a}, {"b", b, b}}, eval::threshold_factory(eval::ThresholdFeature::Nll));
    EXPECT_GE(m.accuracy[0][0], m.accuracy[0][1]);
    EXPECT_GE(m.accuracy[1][1], m.accuracy[1][0]);
    EXPECT_DOUBLE_EQ(m.off_diagonal_mean(), 50);
}

TEST(CrossMatrix, NeedsTwoDomains) {
    const auto a = scalar_set({1, 2}, {1, 0});
    EXPECT_THROW(eval::cross_matrix({{"a", a, a}}, eval::threshold_factory(eval::ThresholdFeature::Nll)), PreconditionError);
}

// ---- corpora -------------------------------------------------------------------

TEST(Split, DeterministicAndStratified) {
    const auto c = synth::build("toy-smooth-vs-texture:n=10:seed=1");
    const auto a = corpus::split_corpus(c, 0.3, 5), b = corpus::split_corpus(c, 0.3, 5);
    EXPECT_EQ(a.hash, b.hash);
    EXPECT_EQ(a.test.count(corpus::kFake), 3u);
    EXPECT_EQ(a.test.count(corpus::kReal), 3u);
    EXPECT_EQ(a.train.samples.size(), 14u);
    EXPECT_NE(corpus::split_corpus(c, 0.3, 6).hash, a.hash);
    EXPECT_THROW(corpus::split_corpus(c, 1.0, 5), ValueError);
}

TEST(Synth, RecipeReproducible) {
    const auto a = synth::build("toy-smooth-vs-texture:n=4:seed=7");
    const auto b = synth::build("toy-smooth-vs-texture:n=4:seed=7");
    ASSERT_EQ(a.samples.size(), 8u);
    for (std::size_t i = 0; i < a.samples.size(); ++i) {
        EXPECT_EQ(a.samples[i].id, b.samples[i].id);
        EXPECT_EQ(corpus::image_hash(*a.samples[i].image), corpus::image_hash(*b.samples[i].image));
    }
    EXPECT_NE(synth::build("toy-smooth-vs-texture:n=4:seed=8").samples[0].id, a.samples[0].id);
}

TEST(Synth, BadRecipes) {
    EXPECT_THROW(synth::build("toy-wobbly-vs-texture:n=4"), ValueError);
    EXPECT_THROW(synth::build("toy-smooth-vs-texture:n=0"), ValueError);
}
