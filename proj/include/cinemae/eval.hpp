#pragma once

// Metrics, the NLL-threshold baseline, cross-domain matrices, NLL-vs-epoch
// curves of the toy MAE and the four ablation sweeps.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "cinemae/aggregate.hpp"
#include "cinemae/backbone.hpp"
#include "cinemae/corpus.hpp"
#include "cinemae/error.hpp"
#include "cinemae/features.hpp"
#include "cinemae/mae_train.hpp"
#include "cinemae/model.hpp"

namespace cinemae::eval {

using features::LabeledFeatures;

// ---- metrics ---------------------------------------------------------------

struct MetricsReport {
    double accuracy = 0.0;  // percent
    std::optional<double> auc;
    double fake_accuracy = 0.0;
    double real_accuracy = 0.0;
    int n_fake = 0;
    int n_real = 0;
    double latency_ms_mean = 0.0;  // not part of the deterministic reports
};

/// Area under the ROC curve by the Mann-Whitney rank statistic with midranks.
/// Higher scores mean "more likely fake". Absent unless both classes occur.
inline std::optional<double> auc_midrank(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size()) throw DimensionError("scores and labels differ in length");
    const std::size_t n = scores.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    double rank_sum = 0.0;
    std::size_t n_fake = 0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j < n && scores[order[j]] == scores[order[i]]) ++j;
        const double midrank = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
        for (std::size_t k = i; k < j; ++k)
            if (labels[order[k]] == corpus::kFake) rank_sum += midrank;
        i = j;
    }
    for (int l : labels) n_fake += l == corpus::kFake;
    const std::size_t n_real = n - n_fake;
    if (n_fake == 0 || n_real == 0) return std::nullopt;
    const double nf = static_cast<double>(n_fake);
    return (rank_sum - nf * (nf + 1.0) / 2.0) / (nf * static_cast<double>(n_real));
}

/// Metrics from fake-probabilities with the 0.5 decision rule.
inline MetricsReport metrics_from_probabilities(const std::vector<double>& prob, const std::vector<int>& labels) {
    if (prob.empty()) throw DataError("cannot evaluate an empty corpus");
    if (prob.size() != labels.size()) throw DimensionError("probabilities and labels differ in length");
    MetricsReport r;
    int ok_fake = 0, ok_real = 0;
    for (std::size_t i = 0; i < prob.size(); ++i) {
        const bool correct = model::label_from_probability(prob[i]) == labels[i];
        if (labels[i] == corpus::kFake) {
            ++r.n_fake;
            ok_fake += correct;
        } else {
            ++r.n_real;
            ok_real += correct;
        }
    }
    r.fake_accuracy = r.n_fake ? 100.0 * ok_fake / r.n_fake : 0.0;
    r.real_accuracy = r.n_real ? 100.0 * ok_real / r.n_real : 0.0;
    r.accuracy = 100.0 * (ok_fake + ok_real) / static_cast<double>(prob.size());
    r.auc = auc_midrank(prob, labels);
    return r;
}

inline MetricsReport evaluate(model::DetectorModel& m, const std::vector<LabeledFeatures>& data) {
    std::vector<double> prob;
    std::vector<int> labels;
    for (const auto& d : data) {
        prob.push_back(model::classify(m, d.features.f_global, d.features.stats));
        labels.push_back(d.label);
    }
    return metrics_from_probabilities(prob, labels);
}

/// End to end over a corpus; latency is the wall-clock mean per image of
/// feature extraction plus classification.
inline MetricsReport evaluate(model::DetectorModel& m, const backbone::Backbone& bb, const corpus::Corpus& c,
                              const features::Provider& provider) {
    if (m.config.embed_dim != bb.embed_dim()) throw DimensionError("model and backbone embedding widths differ");
    std::vector<double> prob;
    std::vector<int> labels;
    double total_ms = 0.0;
    for (const auto& s : c.samples) {
        const auto t0 = std::chrono::steady_clock::now();
        const auto f = provider(s);
        prob.push_back(model::classify(m, f.f_global, f.stats));
        total_ms += std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        labels.push_back(s.label);
    }
    auto r = metrics_from_probabilities(prob, labels);
    r.latency_ms_mean = total_ms / static_cast<double>(c.samples.size());
    return r;
}

// ---- threshold baseline ------------------------------------------------------

/// A single cut on a per-image score. With `fake_below` set, scores under
/// `value` are called fake (generated images reconstruct more easily);
/// otherwise scores above it are.
struct Threshold {
    double value = 0.0;
    bool fake_below = true;
    double balanced_accuracy = 0.0;  // on the fitting data, percent

    int label(double score) const {
        return (fake_below ? score < value : score > value) ? corpus::kFake : corpus::kReal;
    }
};

inline double balanced_accuracy(const std::vector<double>& scores, const std::vector<int>& labels, const Threshold& t) {
    int nf = 0, nr = 0, of = 0, orr = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        const bool ok = t.label(scores[i]) == labels[i];
        if (labels[i] == corpus::kFake) {
            ++nf;
            of += ok;
        } else {
            ++nr;
            orr += ok;
        }
    }
    if (!nf || !nr) throw DataError("balanced accuracy needs both classes");
    return 50.0 * (static_cast<double>(of) / nf + static_cast<double>(orr) / nr);
}

/// Candidate cuts are one unit below the minimum, every midpoint between
/// adjacent distinct scores, and one unit above the maximum, each tried with
/// both polarities. The first candidate with the best balanced accuracy wins,
/// scanning fake-below cuts first.
inline Threshold fit_threshold(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size()) throw DimensionError("scores and labels differ in length");
    const bool fake = std::find(labels.begin(), labels.end(), corpus::kFake) != labels.end();
    const bool real = std::find(labels.begin(), labels.end(), corpus::kReal) != labels.end();
    if (!fake || !real) throw DataError("threshold fitting needs both classes");
    std::vector<double> distinct = scores;
    std::sort(distinct.begin(), distinct.end());
    distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
    std::vector<double> cuts{distinct.front() - 1.0};
    for (std::size_t i = 0; i + 1 < distinct.size(); ++i) cuts.push_back(0.5 * (distinct[i] + distinct[i + 1]));
    cuts.push_back(distinct.back() + 1.0);
    Threshold best{cuts.front(), true, -1.0};
    for (bool below : {true, false})
        for (double c : cuts) {
            Threshold t{c, below, 0.0};
            t.balanced_accuracy = balanced_accuracy(scores, labels, t);
            if (t.balanced_accuracy > best.balanced_accuracy) best = t;
        }
    return best;
}

enum class ThresholdFeature { Nll, Cas };

inline ThresholdFeature parse_threshold_feature(const std::string& s) {
    if (s == "nll") return ThresholdFeature::Nll;
    if (s == "cas") return ThresholdFeature::Cas;
    throw ConfigError("threshold feature must be 'nll' or 'cas'");
}

/// Mean Gaussian NLL of the masked patches, or s2 (mean L_CAS).
inline double threshold_score(const features::ImageFeatures& f, ThresholdFeature which) {
    if (f.scores.empty()) throw PreconditionError("threshold scoring needs at least one masking run");
    return which == ThresholdFeature::Nll ? f.mean_nll : f.stats->s2;
}

// ---- cross-domain matrix -----------------------------------------------------

using Classifier = std::function<int(const features::ImageFeatures&)>;
using ClassifierFactory = std::function<Classifier(const std::vector<LabeledFeatures>& train)>;

inline ClassifierFactory threshold_factory(ThresholdFeature which) {
    return [which](const std::vector<LabeledFeatures>& train) -> Classifier {
        std::vector<double> s;
        std::vector<int> l;
        for (const auto& d : train) {
            s.push_back(threshold_score(d.features, which));
            l.push_back(d.label);
        }
        const Threshold t = fit_threshold(s, l);
        return [t, which](const features::ImageFeatures& f) { return t.label(threshold_score(f, which)); };
    };
}

inline ClassifierFactory detector_factory(model::DetectorConfig dc, model::TrainConfig tc) {
    return [dc, tc](const std::vector<LabeledFeatures>& train) -> Classifier {
        auto m = std::make_shared<model::DetectorModel>(model::train(train, dc, tc).model);
        return [m](const features::ImageFeatures& f) {
            return model::label_from_probability(model::classify(*m, f.f_global, f.stats));
        };
    };
}

struct Domain {
    std::string name;
    std::vector<LabeledFeatures> train;
    std::vector<LabeledFeatures> test;
};

struct CrossDomainMatrix {
    std::vector<std::string> sources;
    std::vector<std::vector<double>> accuracy;  // [train on i][test on j], percent

    double diagonal_mean() const {
        double s = 0;
        for (std::size_t i = 0; i < sources.size(); ++i) s += accuracy[i][i];
        return s / static_cast<double>(sources.size());
    }
    double off_diagonal_mean() const {
        double s = 0;
        for (std::size_t i = 0; i < sources.size(); ++i)
            for (std::size_t j = 0; j < sources.size(); ++j)
                if (i != j) s += accuracy[i][j];
        const auto n = static_cast<double>(sources.size());
        return s / (n * (n - 1.0));
    }
};

inline double accuracy_of(const Classifier& c, const std::vector<LabeledFeatures>& data) {
    if (data.empty()) throw DataError("empty test set");
    int ok = 0;
    for (const auto& d : data) ok += c(d.features) == d.label;
    return 100.0 * ok / static_cast<double>(data.size());
}

inline CrossDomainMatrix cross_matrix(const std::vector<Domain>& domains, const ClassifierFactory& factory) {
    if (domains.size() < 2) throw PreconditionError("a cross-domain matrix needs at least two corpora");
    CrossDomainMatrix out;
    for (const auto& d : domains) out.sources.push_back(d.name);
    for (const auto& src : domains) {
        const Classifier c = factory(src.train);
        std::vector<double> row;
        for (const auto& dst : domains) row.push_back(accuracy_of(c, dst.test));
        out.accuracy.push_back(std::move(row));
    }
    return out;
}

// ---- NLL curve -----------------------------------------------------------------

struct NllPoint {
    int epoch = 0;
    std::string corpus;
    double mean_nll = 0.0;
};

struct NllCurve {
    std::vector<NllPoint> initial;  // epoch 0, one per corpus
    std::vector<NllPoint> records;  // epochs × corpora, epoch-major
};

struct NamedGrids {
    std::string name;
    std::vector<backbone::PatchGrid> grids;
};

/// Train `trainer` for `epochs` on the union of the corpora, scoring every
/// corpus after each epoch.
inline NllCurve nll_epoch_curve(toy::MaeTrainer& trainer, const std::vector<NamedGrids>& corpora, int epochs,
                                double sigma_nll = 1.0) {
    if (epochs < 0) throw ValueError("epochs must be >= 0");
    if (corpora.empty()) throw PreconditionError("no corpora given");
    std::vector<backbone::PatchGrid> all;
    for (const auto& c : corpora) all.insert(all.end(), c.grids.begin(), c.grids.end());
    NllCurve out;
    for (const auto& c : corpora) out.initial.push_back({trainer.epoch(), c.name, trainer.mean_nll(c.grids, sigma_nll)});
    for (int e = 0; e < epochs; ++e) {
        trainer.train_epoch(all);
        for (const auto& c : corpora) out.records.push_back({trainer.epoch(), c.name, trainer.mean_nll(c.grids, sigma_nll)});
    }
    return out;
}

// ---- fine-tuning (freezing ablation only) ----------------------------------------

struct Unfreeze {
    bool encoder = false;
    bool decoder = false;
};

/// Detector training with selected backbone parts updated as well. Works on a
/// private copy of the weights; the handle passed in is never modified.
/// Returns the trained head and a frozen handle over the tuned weights.
inline std::pair<model::DetectorModel, backbone::Backbone> train_unfrozen(const corpus::Corpus& dataset,
                                                                          const backbone::Backbone& bb,
                                                                          model::DetectorConfig dc,
                                                                          const model::TrainConfig& tc,
                                                                          const features::PlanConfig& plan, Unfreeze parts) {
    tc.validate();
    plan.validate();
    if (!dataset.has_both_labels()) throw DataError("training set must contain both real and fake samples");
    dc.embed_dim = bb.embed_dim();
    auto weights = std::make_unique<backbone::MaeWeights>(bb.clone_weights());
    weights->for_each_parameter([](ad::Parameter& p) { p.trainable = false; });
    if (parts.encoder) weights->for_each_encoder_parameter([](ad::Parameter& p) { p.trainable = true; });
    if (parts.decoder) weights->for_each_decoder_parameter([](ad::Parameter& p) { p.trainable = true; });
    weights->pos_embed.trainable = false;
    weights->decoder_pos_embed.trainable = false;

    model::DetectorModel m(dc);
    m.init(derive_seed(tc.seed, "init"));
    auto params = nn::parameters_of(m);
    for (auto* p : nn::parameters_of(*weights))
        if (p->trainable) params.push_back(p);
    nn::Adam opt(params, {tc.learning_rate});

    std::vector<backbone::PatchGrid> grids;
    for (const auto& s : dataset.samples) grids.push_back(bb.make_grid(s.pixels(), s.id));
    std::vector<std::size_t> order(grids.size());
    std::iota(order.begin(), order.end(), 0);
    const auto& arch = bb.arch();
    for (int epoch = 1; epoch <= tc.epochs; ++epoch) {
        Rng rng(derive_seed(tc.seed, "shuffle:" + std::to_string(epoch)));
        rng.shuffle(order);
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(tc.batch_size)) {
            const auto end = std::min(order.size(), start + static_cast<std::size_t>(tc.batch_size));
            for (std::size_t i = start; i < end; ++i) {
                const auto& g = grids[order[i]];
                ad::Tape t;
                ad::Var fg = backbone::global_feature_on_tape(t, *weights, arch, g.patches);
                std::optional<ad::Var> stats;
                if (plan.runs > 0) {
                    const auto mp = aggregate::sample_masks(g.num_patches(), plan.mask_ratio, plan.runs,
                                                            features::mask_seed(plan, g.image_id));
                    stats = aggregate::stats_on_tape(t, *weights, arch, bb.normalization().target, g, mp, plan.cas);
                }
                const double target = dataset.samples[order[i]].label == corpus::kFake ? 1.0 : 0.0;
                ad::Var loss = ad::bce_with_logits(model::logits(t, m, fg, stats), {target});
                if (!std::isfinite(loss.value()(0, 0))) throw NonFiniteError("non-finite loss while fine-tuning");
                t.backward(ad::scale(loss, 1.0 / static_cast<double>(end - start)));
            }
            opt.step();
        }
    }
    backbone::MaeWeights tuned = *weights;
    tuned.for_each_parameter([](ad::Parameter& p) {
        p.trainable = false;
        p.grad.resize(0, 0);
    });
    return {std::move(m), backbone::Backbone(arch, bb.normalization(), std::move(tuned))};
}

// ---- ablations -------------------------------------------------------------------

enum class AblationKind { KSweep, StatsSubset, Fusion, Freezing };

inline std::string to_string(AblationKind k) {
    switch (k) {
        case AblationKind::KSweep: return "k_sweep";
        case AblationKind::StatsSubset: return "stats_subset";
        case AblationKind::Fusion: return "fusion";
        case AblationKind::Freezing: return "freezing";
    }
    return "?";
}

inline AblationKind parse_ablation_kind(const std::string& s) {
    if (s == "k_sweep") return AblationKind::KSweep;
    if (s == "stats_subset") return AblationKind::StatsSubset;
    if (s == "fusion") return AblationKind::Fusion;
    if (s == "freezing") return AblationKind::Freezing;
    throw ConfigError("unknown ablation kind '" + s + "'");
}

struct AblationRow {
    std::string config;
    std::string note;
    MetricsReport metrics;
    std::string split_hash;
};

struct AblationTable {
    AblationKind kind = AblationKind::Fusion;
    std::string split_hash;
    std::vector<AblationRow> rows;
};

/// Labelled features for a corpus under a plan; the CLI supplies a cached one.
using FeatureSource = std::function<std::vector<LabeledFeatures>(const corpus::Corpus&, const features::PlanConfig&)>;

inline FeatureSource direct_source(const backbone::Backbone& bb) {
    return [&bb](const corpus::Corpus& c, const features::PlanConfig& p) {
        return features::extract_corpus(c, features::direct_provider(bb, p));
    };
}

struct AblationSetup {
    const backbone::Backbone* backbone = nullptr;
    FeatureSource source;
    features::PlanConfig plan;
    model::DetectorConfig detector;
    model::TrainConfig train;
    corpus::Split split;
};

/// All eight (s1, s2, s3) flag combinations, from none to all.
inline const std::array<std::array<bool, 3>, 8>& stats_subset_grid() {
    static const std::array<std::array<bool, 3>, 8> grid{{{false, false, false},
                                                          {true, false, false},
                                                          {false, true, false},
                                                          {false, false, true},
                                                          {true, true, false},
                                                          {false, true, true},
                                                          {true, false, true},
                                                          {true, true, true}}};
    return grid;
}

inline std::string subset_name(std::array<bool, 3> f) {
    std::string s;
    for (int i = 0; i < 3; ++i)
        if (f[static_cast<std::size_t>(i)]) s += (s.empty() ? "s" : "+s") + std::to_string(i + 1);
    return s.empty() ? "none" : s;
}

namespace detail {

inline AblationRow run_row(const AblationSetup& a, const features::PlanConfig& plan, const model::DetectorConfig& dc,
                           std::string name, std::string note, bool timed) {
    const auto train = a.source(a.split.train, plan);
    auto m = model::train(train, dc, a.train).model;
    MetricsReport r;
    if (timed) {
        // Latency covers the backbone work, so it bypasses any cache.
        r = evaluate(m, *a.backbone, a.split.test, features::direct_provider(*a.backbone, plan));
    } else {
        r = evaluate(m, a.source(a.split.test, plan));
    }
    return {std::move(name), std::move(note), r, a.split.hash};
}

}  // namespace detail

inline AblationTable ablate(AblationKind kind, const AblationSetup& a) {
    if (!a.backbone || !a.source) throw PreconditionError("ablation needs a backbone and a feature source");
    if (!a.split.train.has_both_labels() || !a.split.test.has_both_labels())
        throw DataError("ablation split must contain both labels on each side");
    AblationTable t{kind, a.split.hash, {}};
    model::DetectorConfig dc = a.detector;
    dc.embed_dim = a.backbone->embed_dim();
    switch (kind) {
        case AblationKind::KSweep:
            for (int k : {0, 1, 2, 3}) {
                auto plan = a.plan;
                plan.runs = k;
                t.rows.push_back(detail::run_row(a, plan, dc, "K=" + std::to_string(k), k == 0 ? "global-only" : "", true));
            }
            break;
        case AblationKind::StatsSubset:
            for (const auto& flags : stats_subset_grid()) {
                auto d = dc;
                d.stats_enabled = flags;
                t.rows.push_back(detail::run_row(a, a.plan, d, subset_name(flags), "", false));
            }
            break;
        case AblationKind::Fusion:
            for (auto s : model::kAllStrategies) {
                auto d = dc;
                d.strategy = s;
                t.rows.push_back(detail::run_row(a, a.plan, d, model::to_string(s), s == model::Strategy::Add ? "default" : "",
                                                 false));
            }
            break;
        case AblationKind::Freezing: {
            t.rows.push_back(detail::run_row(a, a.plan, dc, "frozen", "default", false));
            const std::array<std::pair<const char*, Unfreeze>, 3> configs{{{"encoder-unfrozen", {true, false}},
                                                                           {"decoder-unfrozen", {false, true}},
                                                                           {"both-unfrozen", {true, true}}}};
            for (const auto& [name, parts] : configs) {
                auto [m, tuned] = train_unfrozen(a.split.train, *a.backbone, dc, a.train, a.plan, parts);
                auto r = evaluate(m, features::extract_corpus(a.split.test, features::direct_provider(tuned, a.plan)));
                t.rows.push_back({name, "", r, a.split.hash});
            }
            break;
        }
    }
    return t;
}

}  // namespace cinemae::eval
