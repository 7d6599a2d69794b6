#pragma once

// Detector head over a frozen backbone: statistics projector, two LayerNorms,
// a fusion stage (additive by default) and a linear classifier trained with
// binary cross-entropy.
//
//   add:    f = LN(g) + Fusion(LN(a))
//   concat: f = Concat([LN(g), LN(a)])
//   gate:   f = σ(Gate([LN(g), LN(a)])) ⊙ LN(g) + (1 − σ(·)) ⊙ LN(a)
//   both:   h = LN(g) + Fusion(LN(a)); f = h + Concat([h, LN(a)])
//   late:   logit = ½(Head(LN(g)) + HeadAnomaly(LN(a)))
//
// with a = Projector(s1, s2, s3). Without statistics (K = 0) every strategy
// reduces to Head(LN(g)).

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "cinemae/aggregate.hpp"
#include "cinemae/autodiff.hpp"
#include "cinemae/backbone.hpp"
#include "cinemae/corpus.hpp"
#include "cinemae/error.hpp"
#include "cinemae/features.hpp"
#include "cinemae/nn.hpp"
#include "cinemae/random.hpp"
#include "cinemae/tensor_io.hpp"

namespace cinemae::model {

using ad::Matrix;
using ad::Tape;
using ad::Var;

enum class Strategy { Add, Concat, Gate, Both, Late };

inline constexpr std::array<Strategy, 5> kAllStrategies{Strategy::Concat, Strategy::Gate, Strategy::Add, Strategy::Both,
                                                        Strategy::Late};

inline std::string to_string(Strategy s) {
    switch (s) {
        case Strategy::Add: return "add";
        case Strategy::Concat: return "concat";
        case Strategy::Gate: return "gate";
        case Strategy::Both: return "both";
        case Strategy::Late: return "late";
    }
    return "?";
}

inline Strategy parse_strategy(const std::string& s) {
    if (s == "add") return Strategy::Add;
    if (s == "concat") return Strategy::Concat;
    if (s == "gate") return Strategy::Gate;
    if (s == "both") return Strategy::Both;
    if (s == "late") return Strategy::Late;
    throw StrategyError("unknown fusion strategy '" + s + "'");
}

struct DetectorConfig {
    Strategy strategy = Strategy::Add;
    int embed_dim = 1024;
    int projector_hidden = 64;
    int fusion_hidden = 256;
    std::array<bool, 3> stats_enabled{true, true, true};
};

/// All trainable state of the detector. Backbone parameters are not part of
/// it.
struct DetectorModel {
    DetectorConfig config;
    aggregate::Projector projector;
    nn::LayerNorm norm_global;
    nn::LayerNorm norm_anomaly;
    nn::Mlp fusion;
    nn::Mlp concat;
    nn::Linear gate;
    nn::Linear head;
    nn::Linear head_anomaly;

    DetectorModel() = default;
    explicit DetectorModel(const DetectorConfig& c)
        : config(c),
          projector(c.projector_hidden, c.embed_dim),
          norm_global("norm_global", c.embed_dim, 1e-5),
          norm_anomaly("norm_anomaly", c.embed_dim, 1e-5),
          fusion("fusion", c.embed_dim, c.fusion_hidden, c.embed_dim),
          concat("concat", 2 * c.embed_dim, c.fusion_hidden, c.embed_dim),
          gate("gate", 2 * c.embed_dim, c.embed_dim),
          head("head", c.embed_dim, 1),
          head_anomaly("head_anomaly", c.embed_dim, 1) {}

    /// Parameters the configured strategy actually uses.
    template <typename F>
    void for_each_parameter(F&& f) {
        projector.for_each_parameter(f);
        norm_global.for_each_parameter(f);
        norm_anomaly.for_each_parameter(f);
        head.for_each_parameter(f);
        switch (config.strategy) {
            case Strategy::Add: fusion.for_each_parameter(f); break;
            case Strategy::Concat: concat.for_each_parameter(f); break;
            case Strategy::Gate: gate.for_each_parameter(f); break;
            case Strategy::Both:
                fusion.for_each_parameter(f);
                concat.for_each_parameter(f);
                break;
            case Strategy::Late: head_anomaly.for_each_parameter(f); break;
        }
    }

    void init(std::uint64_t seed) {
        Rng rng(seed);
        projector.mlp.xavier_uniform(rng);
        fusion.xavier_uniform(rng);
        concat.xavier_uniform(rng);
        gate.xavier_uniform(rng);
        head.xavier_uniform(rng);
        head_anomaly.xavier_uniform(rng);
    }
};

/// Stats rows (n×3) with disabled components zeroed.
inline Matrix stats_matrix(const std::vector<aggregate::AnomalyStats>& stats, std::array<bool, 3> enabled) {
    Matrix m(static_cast<Eigen::Index>(stats.size()), 3);
    for (std::size_t i = 0; i < stats.size(); ++i) {
        const auto s = aggregate::statistic_subset_mask(stats[i], enabled);
        m.row(static_cast<Eigen::Index>(i)) << s.s1, s.s2, s.s3;
    }
    return m;
}

inline Var zero_stats_if_disabled(Tape& t, Var stats, std::array<bool, 3> enabled) {
    if (enabled[0] && enabled[1] && enabled[2]) return stats;
    Matrix keep(stats.rows(), 3);
    for (int c = 0; c < 3; ++c) keep.col(c).setConstant(enabled[static_cast<std::size_t>(c)] ? 1.0 : 0.0);
    return ad::mul(stats, t.constant(keep));
}

/// f_corrected for a batch: `f_global` n×D, `stats` n×3 (or absent for the
/// global-only path). For `late` this is LN(f_global); the branch logits are
/// combined in `logits`.
inline Var fuse(Tape& t, DetectorModel& m, Var f_global, std::optional<Var> stats) {
    if (f_global.cols() != m.config.embed_dim)
        throw ShapeError("f_global has width " + std::to_string(f_global.cols()) + ", model expects " +
                         std::to_string(m.config.embed_dim));
    Var g = m.norm_global(t, f_global);
    if (!stats) return g;
    Var a = m.norm_anomaly(t, m.projector(t, zero_stats_if_disabled(t, *stats, m.config.stats_enabled)));
    switch (m.config.strategy) {
        case Strategy::Add: return ad::add(g, m.fusion(t, a));
        case Strategy::Concat: return m.concat(t, ad::concat_cols({g, a}));
        case Strategy::Gate: {
            Var w = ad::sigmoid(m.gate(t, ad::concat_cols({g, a})));
            return ad::add(a, ad::mul(w, ad::sub(g, a)));
        }
        case Strategy::Both: {
            Var h = ad::add(g, m.fusion(t, a));
            return ad::add(h, m.concat(t, ad::concat_cols({h, a})));
        }
        case Strategy::Late: return g;
    }
    throw StrategyError("unhandled strategy");
}

/// n×1 classifier logits.
inline Var logits(Tape& t, DetectorModel& m, Var f_global, std::optional<Var> stats) {
    if (m.config.strategy == Strategy::Late && stats) {
        Var g = m.norm_global(t, f_global);
        Var a = m.norm_anomaly(t, m.projector(t, zero_stats_if_disabled(t, *stats, m.config.stats_enabled)));
        return ad::scale(ad::add(m.head(t, g), m.head_anomaly(t, a)), 0.5);
    }
    return m.head(t, fuse(t, m, f_global, stats));
}

inline double probability_from_logit(double z) { return ad::sigmoid(z); }

/// Decision rule: fake iff probability >= 0.5.
inline int label_from_probability(double p) { return p >= 0.5 ? corpus::kFake : corpus::kReal; }

/// Probability that one image is fake.
inline double classify(DetectorModel& m, const Eigen::RowVectorXd& f_global,
                       const std::optional<aggregate::AnomalyStats>& stats) {
    Tape t;
    Var g = t.constant(f_global);
    std::optional<Var> s;
    if (stats) s = t.constant(stats_matrix({*stats}, {true, true, true}));
    return probability_from_logit(logits(t, m, g, s).value()(0, 0));
}

// ---- training --------------------------------------------------------------

struct TrainConfig {
    int epochs = 25;
    int batch_size = 32;
    std::string optimizer = "adam";
    double learning_rate = 1e-4;
    std::uint64_t seed = 0;

    void validate() const {
        if (epochs < 1) throw ConfigError("epochs must be >= 1");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (optimizer != "adam") throw ConfigError("only the 'adam' optimizer is supported");
        if (!(learning_rate > 0)) throw ConfigError("learning_rate must be > 0");
    }
};

struct EpochRecord {
    int epoch = 0;
    double loss = 0.0;
    double accuracy = 0.0;  // percent on the training set
    double s2_real_mean = 0.0;
    double s2_fake_mean = 0.0;
};

struct TrainLog {
    double initial_loss = 0.0;
    std::vector<EpochRecord> epochs;
};

inline nlohmann::json to_json(const EpochRecord& r) {
    return {{"epoch", r.epoch}, {"loss", r.loss}, {"acc", r.accuracy}, {"s2_real_mean", r.s2_real_mean},
            {"s2_fake_mean", r.s2_fake_mean}};
}

/// Batched tensors for a feature list.
struct Batch {
    Matrix f_global;
    std::optional<Matrix> stats;
    std::vector<double> targets;
};

inline Batch make_batch(const std::vector<features::LabeledFeatures>& data, const std::vector<std::size_t>& idx) {
    if (idx.empty()) throw DataError("empty batch");
    const auto D = data[idx.front()].features.f_global.size();
    const bool has_stats = data[idx.front()].features.stats.has_value();
    Batch b;
    b.f_global.resize(static_cast<Eigen::Index>(idx.size()), D);
    if (has_stats) b.stats = Matrix(static_cast<Eigen::Index>(idx.size()), 3);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        const auto& f = data[idx[i]].features;
        if (f.f_global.size() != D || f.stats.has_value() != has_stats)
            throw DataError("inconsistent feature shapes across the dataset");
        b.f_global.row(static_cast<Eigen::Index>(i)) = f.f_global;
        if (has_stats) (*b.stats).row(static_cast<Eigen::Index>(i)) << f.stats->s1, f.stats->s2, f.stats->s3;
        b.targets.push_back(data[idx[i]].label == corpus::kFake ? 1.0 : 0.0);
    }
    return b;
}

inline Var batch_loss(Tape& t, DetectorModel& m, const Batch& b) {
    std::optional<Var> s;
    if (b.stats) s = t.constant(*b.stats);
    return ad::bce_with_logits(logits(t, m, t.constant(b.f_global), s), b.targets);
}

/// Mean BCE and accuracy (percent) of `m` over a whole feature list.
inline std::pair<double, double> evaluate_loss(DetectorModel& m, const std::vector<features::LabeledFeatures>& data) {
    std::vector<std::size_t> all(data.size());
    std::iota(all.begin(), all.end(), 0);
    const Batch b = make_batch(data, all);
    Tape t;
    std::optional<Var> s;
    if (b.stats) s = t.constant(*b.stats);
    Var z = logits(t, m, t.constant(b.f_global), s);
    const double loss = ad::bce_with_logits(z, b.targets).value()(0, 0);
    int correct = 0;
    for (std::size_t i = 0; i < data.size(); ++i)
        correct += label_from_probability(probability_from_logit(z.value()(static_cast<Eigen::Index>(i), 0))) == data[i].label;
    return {loss, 100.0 * correct / static_cast<double>(data.size())};
}

struct TrainResult {
    DetectorModel model;
    TrainLog log;
};

/// Train the detector head on precomputed features. Deterministic in
/// (data order, config, detector config).
inline TrainResult train(const std::vector<features::LabeledFeatures>& data, const DetectorConfig& dc,
                         const TrainConfig& config) {
    config.validate();
    if (data.empty()) throw DataError("training set is empty");
    bool has_real = false, has_fake = false;
    for (const auto& d : data) (d.label == corpus::kFake ? has_fake : has_real) = true;
    if (!has_real || !has_fake) throw DataError("training set must contain both real and fake samples");

    TrainResult r{DetectorModel(dc), {}};
    r.model.init(derive_seed(config.seed, "init"));
    auto params = nn::parameters_of(r.model);
    nn::Adam opt(params, {config.learning_rate});

    double s2_real = 0, s2_fake = 0;
    int n_real = 0, n_fake = 0;
    for (const auto& d : data) {
        if (!d.features.stats) continue;
        (d.label == corpus::kFake ? s2_fake : s2_real) += d.features.stats->s2;
        ++(d.label == corpus::kFake ? n_fake : n_real);
    }
    if (n_real) s2_real /= n_real;
    if (n_fake) s2_fake /= n_fake;

    r.log.initial_loss = evaluate_loss(r.model, data).first;
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        Rng rng(derive_seed(config.seed, "shuffle:" + std::to_string(epoch)));
        rng.shuffle(order);
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
            const auto end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
            const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                               order.begin() + static_cast<std::ptrdiff_t>(end));
            Tape t;
            Var loss = batch_loss(t, r.model, make_batch(data, idx));
            if (!std::isfinite(loss.value()(0, 0))) throw NonFiniteError("non-finite loss at epoch " + std::to_string(epoch));
            t.backward(loss);
            opt.step();
        }
        const auto [loss, acc] = evaluate_loss(r.model, data);
        if (!std::isfinite(loss)) throw NonFiniteError("non-finite loss after epoch " + std::to_string(epoch));
        r.log.epochs.push_back({epoch, loss, acc, s2_real, s2_fake});
    }
    return r;
}

/// Extract features through `bb` and train; verifies the backbone digest is
/// unchanged afterwards.
inline TrainResult train(const corpus::Corpus& dataset, const backbone::Backbone& bb, const features::Provider& provider,
                         DetectorConfig dc, const TrainConfig& config) {
    const std::string before = bb.compute_digest();
    dc.embed_dim = bb.embed_dim();
    auto result = train(features::extract_corpus(dataset, provider), dc, config);
    if (bb.compute_digest() != before || before != bb.param_digest())
        throw Error("FrozenViolation", "backbone parameters changed during training");
    return result;
}

// ---- prediction ------------------------------------------------------------

struct DetectionResult {
    double probability = 0.0;
    int label = corpus::kReal;
    std::optional<aggregate::AnomalyStats> stats;
    aggregate::PatchScoreSet scores;  // every run; the last one feeds heatmaps
};

inline DetectionResult predict_from_features(DetectorModel& m, const features::ImageFeatures& f) {
    DetectionResult r;
    r.probability = classify(m, f.f_global, f.stats);
    r.label = label_from_probability(r.probability);
    r.stats = f.stats;
    r.scores = f.scores;
    return r;
}

inline DetectionResult predict(const Image& image, const backbone::Backbone& bb, DetectorModel& m,
                               const features::PlanConfig& plan, const std::string& image_id = {}) {
    if (m.config.embed_dim != bb.embed_dim()) throw DimensionError("model and backbone embedding widths differ");
    const std::string id = image_id.empty() ? corpus::image_hash(image) : image_id;
    return predict_from_features(m, features::extract(bb, bb.make_grid(image, id), plan));
}

// ---- checkpoint --------------------------------------------------------------

inline void save_checkpoint(DetectorModel& m, const std::filesystem::path& path, const std::string& config_hash,
                            const std::string& backbone_digest) {
    io::SafeTensorWriter out;
    auto put_all = [&](auto& module) { module.for_each_parameter([&](ad::Parameter& p) { out.add_matrix(p.name, p.value); }); };
    put_all(m.projector);
    put_all(m.norm_global);
    put_all(m.norm_anomaly);
    put_all(m.fusion);
    put_all(m.concat);
    put_all(m.gate);
    put_all(m.head);
    put_all(m.head_anomaly);
    out.set_metadata("format", "cinemae-detector/1");
    out.set_metadata("strategy", to_string(m.config.strategy));
    out.set_metadata("embed_dim", std::to_string(m.config.embed_dim));
    out.set_metadata("projector_hidden", std::to_string(m.config.projector_hidden));
    out.set_metadata("fusion_hidden", std::to_string(m.config.fusion_hidden));
    out.set_metadata("stats_enabled", std::string{m.config.stats_enabled[0] ? '1' : '0', m.config.stats_enabled[1] ? '1' : '0',
                                                  m.config.stats_enabled[2] ? '1' : '0'});
    out.set_metadata("config_hash", config_hash);
    out.set_metadata("backbone_digest", backbone_digest);
    out.write(path);
}

struct LoadedCheckpoint {
    DetectorModel model;
    std::string config_hash;
    std::string backbone_digest;
};

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
    io::SafeTensorReader in(path);
    const auto& meta = in.metadata();
    auto get = [&](const std::string& k) {
        auto it = meta.find(k);
        if (it == meta.end()) throw FormatError(path.string() + ": checkpoint metadata lacks '" + k + "'");
        return it->second;
    };
    if (get("format") != "cinemae-detector/1") throw FormatError(path.string() + ": not a detector checkpoint");
    DetectorConfig dc;
    dc.strategy = parse_strategy(get("strategy"));
    dc.embed_dim = std::stoi(get("embed_dim"));
    dc.projector_hidden = std::stoi(get("projector_hidden"));
    dc.fusion_hidden = std::stoi(get("fusion_hidden"));
    const std::string flags = get("stats_enabled");
    if (flags.size() != 3) throw FormatError("bad stats_enabled flags");
    for (std::size_t i = 0; i < 3; ++i) dc.stats_enabled[i] = flags[i] == '1';
    LoadedCheckpoint c{DetectorModel(dc), get("config_hash"), get("backbone_digest")};
    auto load_all = [&](auto& module) {
        module.for_each_parameter([&](ad::Parameter& p) {
            p.value = in.read_matrix(p.name, p.value.rows(), p.value.cols());
            if (in.info(p.name).shape != std::vector<std::int64_t>{p.value.rows(), p.value.cols()})
                throw ShapeError(p.name + ": checkpoint shape mismatch");
        });
    };
    load_all(c.model.projector);
    load_all(c.model.norm_global);
    load_all(c.model.norm_anomaly);
    load_all(c.model.fusion);
    load_all(c.model.concat);
    load_all(c.model.gate);
    load_all(c.model.head);
    load_all(c.model.head_anomaly);
    return c;
}

}  // namespace cinemae::model
