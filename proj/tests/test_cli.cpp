#include <gtest/gtest.h>

#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "cinemae/cli/commands.hpp"

using namespace cinemae;
using namespace cinemae::cli;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("cinemae-cli-" + std::to_string(::getpid())) / name;
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

const backbone::Backbone& toy_backbone() {
    static const backbone::Backbone bb(backbone::toy(), {}, backbone::init_weights(backbone::toy(), 31));
    return bb;
}

/// Config file with a saved toy backbone next to it.
fs::path toy_config(const fs::path& dir, nlohmann::json overrides = nlohmann::json::object()) {
    const fs::path w = dir / "toy.safetensors";
    if (!fs::exists(w)) backbone::save_backbone(toy_backbone(), w);
    nlohmann::json j = {{"schema", "cinemae.config/1"},
                        {"seed", 3},
                        {"backbone", {{"arch_tag", "toy"}, {"weights", w.string()}}},
                        {"preprocess", {{"resize", 32}, {"crop", 32}}},
                        {"model", {{"learning_rate", 1e-2}, {"epochs", 2}, {"batch_size", 8}}},
                        {"toy_mae", {{"epochs", 1}}}};
    j.merge_patch(overrides);
    const fs::path p = dir / "config.json";
    std::ofstream(p) << j.dump(2);
    return p;
}

GlobalOptions options(const fs::path& dir, const std::string& out, bool no_cache = false) {
    return {toy_config(dir).string(), std::nullopt, (dir / "cache").string(), (dir / out).string(), no_cache};
}

void write_png_tree(const fs::path& root, int real, int fake) {
    const auto c = synth::build("toy-smooth-vs-texture:n=" + std::to_string(std::max(real, fake)) + ":seed=9");
    fs::create_directories(root / "real");
    fs::create_directories(root / "fake");
    int r = 0, f = 0;
    for (const auto& s : c.samples) {
        int& n = s.label == corpus::kReal ? r : f;
        if (n >= (s.label == corpus::kReal ? real : fake)) continue;
        save_png(*s.image, root / corpus::label_name(s.label) / (std::to_string(n++) + ".png"));
    }
}

}  // namespace

// ---- config ----------------------------------------------------------------------

TEST(Config, RoundTripAndHash) {
    RunConfig c;
    c.seed = 11;
    c.cas.lambda = 0.25;
    c.strategy = model::Strategy::Gate;
    const auto back = config_from_json(to_json(c));
    EXPECT_EQ(config_hash(back), config_hash(c));
    RunConfig moved = c;
    moved.output_dir = "elsewhere";
    EXPECT_EQ(config_hash(moved), config_hash(c));
    moved.cas.lambda = 0.5;
    EXPECT_NE(config_hash(moved), config_hash(c));
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
    EXPECT_THROW(config_from_json({{"bogus", 1}}), ConfigError);
    EXPECT_THROW(config_from_json({{"masking", {{"k", 9}}}}), ConfigError);
    EXPECT_THROW(config_from_json({{"model", {{"strategy", "sum"}}}}), StrategyError);
}

// ---- manifests ---------------------------------------------------------------------

TEST(Ingest, TreeOfTwenty) {
    const auto dir = scratch("tree");
    write_png_tree(dir / "data", 10, 10);
    const auto m = scan_tree(dir / "data");
    EXPECT_EQ(m.entries.size(), 20u);
    const auto c = to_corpus(m, {32, 32});
    EXPECT_EQ(c.count(corpus::kFake), 10u);
    const auto back = manifest_from_json(to_json(m));
    EXPECT_EQ(back.hash(), m.hash());
}

TEST(Ingest, EmptyFakeDirectory) {
    const auto dir = scratch("nofake");
    write_png_tree(dir / "data", 3, 0);
    EXPECT_THROW(scan_tree(dir / "data"), IngestError);
}

TEST(Ingest, UndecodableFilesAreExcluded) {
    const auto dir = scratch("bad");
    write_png_tree(dir / "data", 2, 2);
    std::ofstream(dir / "data" / "fake" / "broken.png") << "not an image";
    const auto m = scan_tree(dir / "data");
    EXPECT_EQ(m.entries.size(), 4u);
    EXPECT_EQ(m.excluded.size(), 1u);
}

TEST(Ingest, RecipeReproducible) {
    const auto dir = scratch("recipe");
    const auto a = ingest_recipe("toy-smooth-vs-texture:n=64:seed=7", dir / "a");
    const auto b = ingest_recipe("toy-smooth-vs-texture:n=64:seed=7", dir / "b");
    EXPECT_EQ(a.entries.size(), 128u);
    EXPECT_EQ(a.hash(), b.hash());
    // PNG round trip keeps the sample ids of the in-memory corpus
    const auto mem = synth::build("toy-smooth-vs-texture:n=64:seed=7");
    const auto disk = to_corpus(a, {32, 32});
    std::set<std::string> ids_mem, ids_disk;
    for (const auto& s : mem.samples) ids_mem.insert(corpus::image_hash(*s.image));
    for (const auto& s : disk.samples) ids_disk.insert(corpus::image_hash(s.pixels()));
    EXPECT_EQ(ids_mem, ids_disk);
}

TEST(Ingest, ModifiedFileFailsVerification) {
    const auto dir = scratch("tamper");
    auto m = ingest_recipe("toy-smooth-vs-texture:n=2:seed=1", dir / "c");
    save_png(Image(32, 32, 3, 0.5), fs::path(m.root) / m.entries[0].path);
    EXPECT_THROW(to_corpus(m, {32, 32}), IngestError);
}

// ---- cache -----------------------------------------------------------------------

TEST(Cache, SecondPassDoesNoForwards) {
    const auto dir = scratch("cache1");
    const auto& bb = toy_backbone();
    const auto c = synth::build("toy-smooth-vs-texture:n=3:seed=2");
    features::PlanConfig plan;
    FeatureCache cache(dir);
    const auto first = features::extract_corpus(c, cache.provider(bb, plan));
    bb.forward_counter().reset();
    FeatureCache again(dir);
    const auto second = features::extract_corpus(c, again.provider(bb, plan));
    EXPECT_EQ(bb.forward_counter().value(), 0);
    EXPECT_EQ(again.stats().misses, 0);
    for (std::size_t i = 0; i < first.size(); ++i) {
        EXPECT_EQ(first[i].features.f_global, second[i].features.f_global);
        EXPECT_EQ(first[i].features.scores.scores, second[i].features.scores.scores);
        EXPECT_EQ(first[i].features.scores.nll, second[i].features.scores.nll);
        EXPECT_EQ(first[i].features.stats, second[i].features.stats);
    }
}

TEST(Cache, LambdaChangeMissesScoresOnly) {
    const auto dir = scratch("cache2");
    const auto& bb = toy_backbone();
    const auto c = synth::build("toy-smooth-vs-texture:n=2:seed=3");
    features::PlanConfig plan;
    {
        FeatureCache warm(dir);
        features::extract_corpus(c, warm.provider(bb, plan));
    }
    plan.cas.lambda = 2.0;
    FeatureCache cache(dir);
    features::extract_corpus(c, cache.provider(bb, plan));
    EXPECT_EQ(cache.stats().hits, 4);    // f_global
    EXPECT_EQ(cache.stats().misses, 4);  // scores
}

TEST(Cache, CorruptEntryIsRecomputed) {
    const auto dir = scratch("cache3");
    const auto& bb = toy_backbone();
    const auto c = synth::build("toy-smooth-vs-texture:n=2:seed=4");
    features::PlanConfig plan;
    FeatureCache fresh(dir);
    const auto want = features::extract_corpus(c, fresh.provider(bb, plan));
    const fs::path victim = fs::directory_iterator(dir / "scores")->path();
    {
        std::fstream f(victim, std::ios::in | std::ios::out | std::ios::binary);
        f.seekg(100);
        char ch = 0;
        f.read(&ch, 1);
        f.seekp(100);
        ch = static_cast<char>(ch ^ 0x5a);
        f.write(&ch, 1);
    }
    FeatureCache cache(dir);
    const auto got = features::extract_corpus(c, cache.provider(bb, plan));
    EXPECT_EQ(cache.stats().corrupt, 1);
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_EQ(got[i].features.stats, want[i].features.stats);
}

// ---- heatmaps -----------------------------------------------------------------------

TEST(Heatmap, GridGeometry) {
    const auto plan = aggregate::sample_masks(196, 0.75, 1, 1);
    auto s = aggregate::make_score_set(Eigen::MatrixXd::Random(1, 147));
    s.masks = plan.masks;
    const auto g = heat_grid(s, 196);
    EXPECT_EQ(g.side, 14);
    EXPECT_EQ(g.cells.size(), 147u);
    for (const auto& c : g.cells) {
        EXPECT_EQ(c.row * 14 + c.col, c.patch_index);
        EXPECT_GE(c.normalized, 0.0);
        EXPECT_LE(c.normalized, 1.0);
    }
    EXPECT_THROW(heat_grid(s, 195), DimensionError);
}

TEST(Heatmap, TiesMapToZero) {
    auto s = aggregate::make_score_set(Eigen::MatrixXd::Constant(1, 3, 4.0));
    s.masks = {{0, 5, 9}};
    for (const auto& c : heat_grid(s, 16).cells) EXPECT_EQ(c.normalized, 0.0);
    EXPECT_THROW(heat_grid(aggregate::PatchScoreSet{}, 16), EmptyError);
}

TEST(Heatmap, RenderSize) {
    auto s = aggregate::make_score_set(Eigen::MatrixXd::Constant(1, 2, 1.0));
    s.masks = {{0, 3}};
    const auto img = render_heatmap(Image(32, 32, 3), heat_grid(s, 64));
    EXPECT_EQ(img.width, 256);
    EXPECT_EQ(img.channels, 3);
}

// ---- lock and reports -------------------------------------------------------------------

TEST(Lock, SecondHolderIsRejectedAndStaleLockTaken) {
    const auto dir = scratch("lock");
    {
        DirLock a(dir);
        EXPECT_THROW(DirLock b(dir), IoError);
    }
    std::ofstream(dir / ".cinemae.lock") << "999999999\n";
    EXPECT_NO_THROW(DirLock c(dir));
}

TEST(Report, CsvQuotingAndHeader) {
    EXPECT_EQ(csv_field("a,b"), "\"a,b\"");
    EXPECT_EQ(csv_field("say \"x\""), "\"say \"\"x\"\"\"");
    EXPECT_EQ(csv_field("plain"), "plain");
    const auto h = csv_header({"s/1", "c", "d", "p"});
    EXPECT_EQ(h, "# schema=s/1\n# config_hash=c\n# split_hash=d\n# preprocess=p\n");
}

// ---- commands ----------------------------------------------------------------------------

TEST(Commands, TrainEvaluateDetect) {
    const auto dir = scratch("cmd");
    auto g = options(dir, "out");
    Session s(g);
    const std::string recipe = "toy-smooth-vs-texture:n=6:seed=5";
    const auto ing = cmd_ingest(s, {recipe, "", ""});
    const std::string manifest = ing.at("manifest");
    EXPECT_EQ(ing.at("n_real"), 6);
    cmd_train(s, manifest);
    const auto model = (s.run_dir() / "detector.safetensors").string();
    EXPECT_TRUE(fs::exists(s.run_dir() / "train_log.ndjson"));

    cmd_evaluate(s, manifest, model, false);
    const fs::path csv = s.run_dir() / ("evaluate_" + slug(recipe) + "_test.csv");
    const std::string first = slurp(csv);
    EXPECT_NE(first.find("# config_hash=" + s.hash()), std::string::npos);
    cmd_evaluate(s, manifest, model, false);
    EXPECT_EQ(slurp(csv), first);

    const auto image = fs::path(s.output_dir() / "corpora" / slug(recipe) / "real" / "0000.png").string();
    const auto rec = cmd_detect(s, image, model);
    EXPECT_EQ(rec.dump().find('\n'), std::string::npos);
    for (const char* k : {"probability", "label", "s1", "s2", "s3"}) EXPECT_TRUE(rec.contains(k)) << k;
    EXPECT_TRUE(rec.at("s2").is_number());

    const auto ab = cmd_ablate(s, manifest, "fusion");
    const auto table = nlohmann::json::parse(slurp(s.run_dir() / "ablation_fusion.json"));
    EXPECT_EQ(table.at("rows").size(), 5u);
    (void)ab;

    cmd_heatmap(s, image, "");
    bool png = false;
    for (const auto& e : fs::directory_iterator(s.run_dir())) png |= e.path().filename().string().rfind("heatmap_", 0) == 0;
    EXPECT_TRUE(png);
}

TEST(Commands, ModelForAnotherBackboneIsRejected) {
    const auto dir = scratch("digest");
    Session s(options(dir, "out"));
    model::DetectorConfig dc;
    dc.embed_dim = 64;
    model::DetectorModel m(dc);
    model::save_checkpoint(m, dir / "m.safetensors", s.hash(), "not-the-digest");
    EXPECT_THROW(cmd_detect(s, (dir / "x.png").string(), (dir / "m.safetensors").string()), PreconditionError);
}

TEST(Commands, CrossMatrixNeedsTwoCorpora) {
    const auto dir = scratch("cm");
    Session s(options(dir, "out"));
    EXPECT_THROW(cmd_crossmatrix(s, {"toy-smooth-vs-texture:n=4:seed=1"}, "threshold"), PreconditionError);
    EXPECT_THROW(cmd_ingest(s, {"toy-bogus", "", ""}), IngestError);
}

TEST(Commands, ErrorRecord) {
    const auto j = error_record("IngestError", "no images");
    EXPECT_EQ(j.at("error"), "IngestError");
    EXPECT_EQ(j.dump().find('\n'), std::string::npos);
}
