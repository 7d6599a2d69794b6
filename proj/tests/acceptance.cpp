// Acceptance suite: one PASS/FAIL line per criterion, exit status 0 only if
// all nine pass.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <set>
#include <string>
#include <vector>

#include <unistd.h>

#include "cinemae/cli/commands.hpp"
#include "cinemae/eval.hpp"
#include "cinemae/synth.hpp"
#include "oracles.hpp"

using namespace cinemae;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

// ---- shared toy fixture (criteria 5 and 6) ------------------------------------

const char* kRecipeSmooth = "toy-smooth-vs-texture:n=48:seed=7";
const char* kRecipeGrainy = "toy-grainy-vs-texture:n=48:seed=7";

struct ToyWorld {
    corpus::Corpus smooth, grainy;
    std::unique_ptr<backbone::Backbone> bb;
    eval::NllCurve curve;
    double mae_seconds = 0.0;
};

ToyWorld& toy_world() {
    static ToyWorld w = [] {
        ToyWorld out;
        out.smooth = synth::build(kRecipeSmooth);
        out.grainy = synth::build(kRecipeGrainy);
        const auto arch = backbone::toy();
        backbone::Normalization norm;
        toy::MaeTrainer trainer(arch, norm, {8, 1e-3, 0.75, 1});
        corpus::Corpus reals{"real", {}}, fakes{"smooth", {}};
        for (const auto& s : out.smooth.samples) (s.label == corpus::kReal ? reals : fakes).samples.push_back(s);
        const auto t0 = std::chrono::steady_clock::now();
        out.curve = eval::nll_epoch_curve(trainer, {{"real", toy::make_grids(arch, norm, reals)}, {"smooth", toy::make_grids(arch, norm, fakes)}},
                                          30);
        out.mae_seconds = seconds_since(t0);
        out.bb = std::make_unique<backbone::Backbone>(trainer.snapshot());
        return out;
    }();
    return w;
}

features::PlanConfig toy_plan() {
    features::PlanConfig p;
    p.runs = 2;
    p.seed = 3;
    return p;
}

model::TrainConfig toy_train() {
    model::TrainConfig t;
    t.learning_rate = 1e-2;
    t.epochs = 25;
    t.batch_size = 8;
    t.seed = 5;
    return t;
}

// ---- criteria -------------------------------------------------------------------------

Outcome criterion1() {
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(101);
    double worst = 0.0;
    for (int i = 0; i < 1000; ++i) {
        const int P = 1 + static_cast<int>(rng.below(48));
        const int n = 2 + static_cast<int>(rng.below(30));
        Eigen::MatrixXd visible(n, P);
        for (Eigen::Index k = 0; k < visible.size(); ++k) visible.data()[k] = rng.normal() * rng.uniform(0.01, 3.0);
        if (i % 10 == 0) visible.row(1) = visible.row(0);  // low-variance contexts
        if (i % 25 == 0) visible.rowwise() = visible.row(0).eval();  // floored sigma
        Eigen::RowVectorXd patch(P), recon(P);
        for (int d = 0; d < P; ++d) {
            patch(d) = rng.normal() * 2.0;
            recon(d) = patch(d) + rng.normal() * 0.5;
        }
        cas::CasConfig cfg;
        cfg.lambda = rng.uniform(0.0, 2.0);
        const auto ctx = cas::context_stats(visible, cfg.sigma_floor);
        const double got = cas::cas_score(patch, recon, ctx, cfg);
        const double got_vec = cas::cas_scores(patch, recon, ctx, cfg)(0);
        std::vector<double> mu, sigma;
        oracle::context(visible, cfg.sigma_floor, mu, sigma);
        const double want = oracle::cas(patch, recon, mu, sigma, cfg.lambda);
        const double scale = std::max(1.0, std::abs(want));
        worst = std::max({worst, std::abs(got - want) / scale, std::abs(got_vec - want) / scale});
    }
    const double secs = seconds_since(t0);
    return {worst <= 1e-6 && secs < 10.0, "max rel err " + fmt("%.2e", worst) + ", " + fmt("%.2f", secs) + " s"};
}

Outcome criterion2() {
    Rng rng(202);
    double worst = 0.0;
    bool forced_ok = true;
    for (int i = 0; i < 1000; ++i) {
        const int K = 1 + static_cast<int>(rng.below(8));
        const int m = 1 + static_cast<int>(rng.below(200));
        Eigen::MatrixXd S(K, m);
        for (Eigen::Index k = 0; k < S.size(); ++k) S.data()[k] = rng.normal() * 5.0 + 1.0;
        const auto got = aggregate::summarize(aggregate::make_score_set(S));
        const auto want = oracle::summarize(S);
        worst = std::max({worst, std::abs(got.s1 - want.s1), std::abs(got.s2 - want.s2), std::abs(got.s3 - want.s3)});
    }
    // forced cases
    for (int K : {1, 2, 5}) {
        const double c = 2.75;
        const auto s = aggregate::summarize(aggregate::make_score_set(Eigen::MatrixXd::Constant(K, 17, c)));
        forced_ok = forced_ok && s.s1 == 0.0 && std::abs(s.s2 - c) <= 1e-12 && s.s3 <= 1e-12;
    }
    for (int i = 0; i < 20; ++i) {
        Eigen::MatrixXd S(1, 9);
        for (Eigen::Index k = 0; k < S.size(); ++k) S.data()[k] = rng.normal();
        forced_ok = forced_ok && aggregate::summarize(aggregate::make_score_set(S)).s3 == 0.0;
    }
    return {worst <= 1e-10 && forced_ok, "max abs err " + fmt("%.2e", worst) + ", forced cases " + (forced_ok ? "ok" : "wrong")};
}

Outcome criterion3() {
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(303);
    const int n = 6, D = 8;
    model::Batch b;
    b.f_global = Eigen::MatrixXd(n, D);
    for (Eigen::Index k = 0; k < b.f_global.size(); ++k) b.f_global.data()[k] = rng.normal();
    Eigen::MatrixXd stats(n, 3);
    for (Eigen::Index k = 0; k < stats.size(); ++k) stats.data()[k] = rng.uniform(0.0, 3.0);
    b.stats = stats;
    for (int i = 0; i < n; ++i) b.targets.push_back(i % 2);

    double worst = 0.0;
    int checked = 0;
    std::string groups;
    for (auto s : model::kAllStrategies) {
        model::DetectorConfig dc;
        dc.strategy = s;
        dc.embed_dim = D;
        dc.projector_hidden = 5;
        dc.fusion_hidden = 7;
        model::DetectorModel m(dc);
        m.init(derive_seed(404, model::to_string(s)));
        // move LayerNorm parameters off their identity initialisation
        for (auto* ln : {&m.norm_global, &m.norm_anomaly}) {
            for (Eigen::Index k = 0; k < ln->gain.value.size(); ++k) ln->gain.value.data()[k] = rng.uniform(0.5, 1.5);
            for (Eigen::Index k = 0; k < ln->bias.value.size(); ++k) ln->bias.value.data()[k] = rng.uniform(-0.3, 0.3);
        }
        auto params = nn::parameters_of(m);
        for (auto* p : params) p->zero_grad();
        {
            ad::Tape t;
            t.backward(model::batch_loss(t, m, b));
        }
        const auto r = oracle::check_gradients(params, [&] {
            ad::Tape t;
            return model::batch_loss(t, m, b).value()(0, 0);
        });
        worst = std::max(worst, r.worst);
        checked += r.checked;
    }
    const double secs = seconds_since(t0);
    return {worst <= 1e-4 && secs < 60.0,
            "max rel err " + fmt("%.2e", worst) + " over " + std::to_string(checked) + " parameters (all strategies), " + fmt("%.1f", secs) +
                " s"};
}

Outcome criterion4() {
    const auto arch = backbone::toy();
    backbone::Backbone bb(arch, {}, backbone::init_weights(arch, 404));
    const auto c = synth::build("toy-smooth-vs-texture:n=8:seed=4");
    features::PlanConfig plan;
    plan.seed = 9;
    auto provider = features::direct_provider(bb, plan);
    std::string failed;
    for (auto s : model::kAllStrategies) {
        const std::string before = bb.compute_digest();
        model::DetectorConfig dc;
        dc.strategy = s;
        model::TrainConfig tc;
        tc.epochs = 3;
        tc.batch_size = 4;
        model::train(c, bb, provider, dc, tc);
        if (bb.compute_digest() != before || before != bb.param_digest()) failed += model::to_string(s) + " ";
    }
    return {failed.empty(), failed.empty() ? "digest unchanged for concat, gate, add, both, late" : "digest changed: " + failed};
}

Outcome criterion5() {
    const auto t0 = std::chrono::steady_clock::now();
    auto& w = toy_world();
    double real = 0, smooth = 0;
    for (const auto& p : w.curve.records)
        if (p.epoch == 30) (p.corpus == "real" ? real : smooth) = p.mean_nll;
    const auto sp = corpus::split_corpus(w.smooth, 0.5, 11);
    const auto plan = toy_plan();
    auto provider = features::direct_provider(*w.bb, plan);
    model::DetectorConfig dc;
    auto trained = model::train(sp.train, *w.bb, provider, dc, toy_train());
    const auto report = eval::evaluate(trained.model, features::extract_corpus(sp.test, provider));
    const double secs = seconds_since(t0);
    const double auc = report.auc.value_or(0.0);
    const bool pass = smooth * 2.0 <= real && auc >= 0.90 && secs < 900.0;
    return {pass, "final NLL real " + fmt("%.4f", real) + " vs smooth " + fmt("%.4f", smooth) + " (ratio " + fmt("%.2f", real / smooth) +
                      "), held-out AUC " + fmt("%.4f", auc) + " on " + std::to_string(sp.test.samples.size()) + " images, " + fmt("%.1f", secs) +
                      " s"};
}

Outcome criterion6() {
    auto& w = toy_world();
    const auto plan = toy_plan();
    auto provider = features::direct_provider(*w.bb, plan);
    std::vector<eval::Domain> domains;
    for (const auto* c : {&w.smooth, &w.grainy}) {
        const auto sp = corpus::split_corpus(*c, 0.5, 11);
        domains.push_back({c->name, features::extract_corpus(sp.train, provider), features::extract_corpus(sp.test, provider)});
    }
    const auto thr = eval::cross_matrix(domains, eval::threshold_factory(eval::ThresholdFeature::Nll));
    model::DetectorConfig dc;
    dc.embed_dim = w.bb->embed_dim();
    const auto det = eval::cross_matrix(domains, eval::detector_factory(dc, toy_train()));
    bool rows_ok = true;
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 2; ++j)
            if (i != j && thr.accuracy[i][i] < thr.accuracy[i][j]) rows_ok = false;
    const double margin = det.off_diagonal_mean() - thr.off_diagonal_mean();
    std::ostringstream d;
    d << "threshold rows [" << thr.accuracy[0][0] << " " << thr.accuracy[0][1] << "] [" << thr.accuracy[1][0] << " " << thr.accuracy[1][1]
      << "], off-diagonal threshold " << fmt("%.2f", thr.off_diagonal_mean()) << " vs detector " << fmt("%.2f", det.off_diagonal_mean())
      << " (+" << fmt("%.2f", margin) << " points)";
    return {rows_ok && margin >= 10.0, d.str()};
}

Outcome criterion7() {
    const auto arch = backbone::toy();
    backbone::Backbone bb(arch, {}, backbone::init_weights(arch, 505));
    const auto c = synth::build("toy-smooth-vs-texture:n=10:seed=5");
    eval::AblationSetup a;
    a.backbone = &bb;
    a.source = eval::direct_source(bb);
    a.plan.seed = 6;
    a.detector.embed_dim = bb.embed_dim();
    a.train.epochs = 2;
    a.train.batch_size = 8;
    a.train.learning_rate = 1e-2;
    a.split = corpus::split_corpus(c, 0.3, 12);
    std::map<eval::AblationKind, std::size_t> want{{eval::AblationKind::KSweep, 4},
                                                   {eval::AblationKind::StatsSubset, 8},
                                                   {eval::AblationKind::Fusion, 5},
                                                   {eval::AblationKind::Freezing, 4}};
    bool ok = true;
    std::string counts;
    std::set<std::string> hashes;
    for (const auto& [kind, n] : want) {
        const auto t = eval::ablate(kind, a);
        ok = ok && t.rows.size() == n;
        if (kind == eval::AblationKind::KSweep) ok = ok && t.rows.front().config == "K=0" && t.rows.front().note == "global-only";
        for (const auto& r : t.rows) hashes.insert(r.split_hash);
        hashes.insert(t.split_hash);
        counts += eval::to_string(kind) + "=" + std::to_string(t.rows.size()) + " ";
    }
    ok = ok && hashes.size() == 1;
    return {ok, counts + "split hashes distinct: " + std::to_string(hashes.size())};
}

std::map<std::string, std::string> artifacts(const fs::path& dir) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        if (!e.is_regular_file()) continue;
        const std::string name = e.path().filename().string();
        const std::string ext = e.path().extension().string();
        if (name.ends_with(".timing.json") || (ext != ".csv" && ext != ".json" && ext != ".ndjson")) continue;
        std::ifstream in(e.path(), std::ios::binary);
        out[fs::relative(e.path(), dir).string()] = std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    }
    return out;
}

Outcome criterion8() {
    const fs::path root = fs::temp_directory_path() / ("cinemae-acceptance-" + std::to_string(::getpid()));
    fs::remove_all(root);
    fs::create_directories(root);
    const std::string recipe_a = "toy-smooth-vs-texture:n=12:seed=2", recipe_b = "toy-grainy-vs-texture:n=12:seed=2";

    // one toy backbone at a fixed path so every run shares the config hash
    nlohmann::json cfg = {{"schema", "cinemae.config/1"},
                          {"seed", 17},
                          {"backbone", {{"arch_tag", "toy"}, {"weights", (root / "toy.safetensors").string()}}},
                          {"preprocess", {{"resize", 32}, {"crop", 32}}},
                          {"model", {{"learning_rate", 1e-2}, {"epochs", 3}, {"batch_size", 8}}},
                          {"toy_mae", {{"epochs", 2}}}};
    {
        std::ofstream(root / "config.json") << cfg.dump(2);
        cli::GlobalOptions g{(root / "config.json").string(), {}, std::nullopt, (root / "boot").string(), true};
        cli::Session s(g);
        cli::cmd_nll_curve(s, {recipe_a});
        fs::copy_file(s.run_dir() / "toy_mae.safetensors", root / "toy.safetensors");
        fs::copy_file(backbone::sidecar_path(s.run_dir() / "toy_mae.safetensors"), backbone::sidecar_path(root / "toy.safetensors"));
    }

    auto run = [&](const std::string& out, bool no_cache) {
        cli::GlobalOptions g{(root / "config.json").string(), {}, (root / "cache").string(), (root / out).string(), no_cache};
        cli::Session s(g);
        const std::string manifest = cli::cmd_ingest(s, {recipe_a, "", ""}).at("manifest").get<std::string>();
        cli::cmd_nll_curve(s, {manifest});
        cli::cmd_train(s, manifest);
        const std::string model = (s.run_dir() / "detector.safetensors").string();
        cli::cmd_evaluate(s, manifest, model, false);
        cli::cmd_evaluate(s, recipe_b, model, true);
        cli::cmd_ablate(s, manifest, "fusion");
        cli::cmd_ablate(s, manifest, "k_sweep");
        cli::cmd_crossmatrix(s, {manifest, recipe_b}, "both");
        const auto image = (s.output_dir() / "corpora" / cli::slug(recipe_a) / "fake" / "0000.png").string();
        cli::cmd_heatmap(s, image, model);
        std::ofstream(s.run_dir() / "detect.json") << cli::cmd_detect(s, image, model).dump() << "\n";
        return artifacts(s.run_dir());
    };
    const auto first = run("run1", false);    // cold cache
    const auto second = run("run2", false);   // warm cache
    const auto uncached = run("run3", true);  // no cache
    fs::remove_all(root);

    std::string diff;
    for (const auto* other : {&second, &uncached})
        for (const auto& [name, bytes] : first) {
            auto it = other->find(name);
            if (it == other->end() || it->second != bytes) diff += name + " ";
        }
    const bool ok = diff.empty() && first.size() == second.size() && first.size() == uncached.size() && first.size() >= 15;
    return {ok, std::to_string(first.size()) + " CSV/JSON artifacts compared over cold-cache, warm-cache and no-cache runs" +
                    (diff.empty() ? "" : "; differing: " + diff)};
}

Outcome criterion9() {
    Rng rng(909);
    int exact = 0;
    for (int i = 0; i < 50; ++i) {
        const int n = 2 + static_cast<int>(rng.below(199));
        std::vector<double> scores;
        std::vector<int> labels;
        for (int k = 0; k < n; ++k) {
            // coarse grid so ties are common
            scores.push_back(static_cast<double>(rng.below(i % 2 ? 7 : 1000)) / 4.0);
            labels.push_back(k < 1 ? 1 : k < 2 ? 0 : static_cast<int>(rng.below(2)));
        }
        const auto got = eval::auc_midrank(scores, labels);
        exact += got && *got == oracle::auc_pairwise(scores, labels);
    }
    return {exact == 50, std::to_string(exact) + "/50 score sets equal the pairwise definition exactly"};
}

}  // namespace

int main() {
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"CAS oracle equivalence", criterion1},
        {"statistics definition oracle", criterion2},
        {"gradient checks", criterion3},
        {"frozen backbone invariant", criterion4},
        {"toy separation", criterion5},
        {"cross-domain ordering", criterion6},
        {"ablation harness shape", criterion7},
        {"determinism and cache transparency", criterion8},
        {"AUC oracle", criterion9},
    };
    int failures = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        failures += !o.pass;
        std::cout << "criterion " << i + 1 << " " << (o.pass ? "PASS" : "FAIL") << " " << criteria[i].first << ": " << o.detail << std::endl;
    }
    std::cout << (failures ? std::to_string(failures) + " criteria failed" : "all criteria passed") << std::endl;
    return failures ? 1 : 0;
}
