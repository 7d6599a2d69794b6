#pragma once

// Corpus manifests (schema "cinemae.manifest/1"): a directory tree with real/
// and fake/ subdirectories, every decodable file listed with its SHA-256.
// Synthetic recipes are first rendered to such a tree as 8-bit PNGs.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cinemae/corpus.hpp"
#include "cinemae/error.hpp"
#include "cinemae/hash.hpp"
#include "cinemae/image.hpp"
#include "cinemae/synth.hpp"

namespace cinemae::cli {

namespace fs = std::filesystem;

inline constexpr const char* kManifestSchema = "cinemae.manifest/1";

struct ManifestEntry {
    std::string path;  // relative to root, forward slashes
    int label = corpus::kReal;
    std::string sha256;
};

struct Excluded {
    std::string path;
    std::string reason;
};

struct CorpusManifest {
    std::string name;
    std::string root;
    std::string recipe;  // empty for plain directory trees
    std::vector<ManifestEntry> entries;
    std::vector<Excluded> excluded;

    /// Covers the listed files only, so re-scanning an unchanged tree from a
    /// different location gives the same value.
    std::string hash() const {
        Sha256 h;
        for (const auto& e : entries) h.update(e.path).update("\t").update(corpus::label_name(e.label)).update("\t").update(e.sha256).update("\n");
        return h.hex();
    }
};

inline std::string file_sha256(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw IoError("cannot read " + p.string());
    Sha256 h;
    std::vector<char> buf(1 << 16);
    while (in) {
        in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
        h.update(buf.data(), static_cast<std::size_t>(in.gcount()));
    }
    return h.hex();
}

/// Scan root/real and root/fake. Files that fail to decode are excluded with a
/// warning on stderr.
inline CorpusManifest scan_tree(const fs::path& root, std::string name = {}) {
    if (!fs::is_directory(root)) throw IngestError(root.string() + " is not a directory");
    CorpusManifest m;
    m.name = name.empty() ? root.filename().string() : std::move(name);
    m.root = fs::absolute(root).lexically_normal().string();
    for (int label : {corpus::kReal, corpus::kFake}) {
        const fs::path dir = root / corpus::label_name(label);
        std::vector<fs::path> files;
        if (fs::is_directory(dir))
            for (const auto& e : fs::recursive_directory_iterator(dir))
                if (e.is_regular_file()) files.push_back(e.path());
        std::sort(files.begin(), files.end());
        std::size_t kept = 0;
        for (const auto& f : files) {
            const std::string rel = f.lexically_relative(root).generic_string();
            try {
                load_image(f);
            } catch (const Error& e) {
                std::cerr << "warning: excluding " << rel << ": " << e.what() << "\n";
                m.excluded.push_back({rel, e.what()});
                continue;
            }
            m.entries.push_back({rel, label, file_sha256(f)});
            ++kept;
        }
        if (kept == 0) throw IngestError(dir.string() + " has no decodable images");
    }
    return m;
}

/// Render a recipe to `dir` (real/NNNN.png, fake/NNNN.png) and scan it.
inline CorpusManifest ingest_recipe(const std::string& recipe, const fs::path& dir) {
    const corpus::Corpus c = synth::build(recipe);
    for (const char* sub : {"real", "fake"}) {
        fs::remove_all(dir / sub);
        fs::create_directories(dir / sub);
    }
    std::size_t counts[2] = {0, 0};
    for (const auto& s : c.samples) {
        char file[32];
        std::snprintf(file, sizeof file, "%04zu.png", counts[s.label]++);
        save_png(*s.image, dir / corpus::label_name(s.label) / file);
    }
    auto m = scan_tree(dir, recipe);
    m.recipe = recipe;
    return m;
}

inline nlohmann::json to_json(const CorpusManifest& m) {
    nlohmann::json entries = nlohmann::json::array(), excluded = nlohmann::json::array();
    for (const auto& e : m.entries) entries.push_back({{"path", e.path}, {"label", corpus::label_name(e.label)}, {"sha256", e.sha256}});
    for (const auto& e : m.excluded) excluded.push_back({{"path", e.path}, {"reason", e.reason}});
    return {{"schema", kManifestSchema}, {"name", m.name},      {"root", m.root},         {"recipe", m.recipe},
            {"hash", m.hash()},          {"entries", entries}, {"excluded", excluded}};
}

inline CorpusManifest manifest_from_json(const nlohmann::json& j) {
    try {
        if (j.at("schema") != kManifestSchema) throw IngestError("unsupported manifest schema");
        CorpusManifest m;
        m.name = j.at("name").get<std::string>();
        m.root = j.at("root").get<std::string>();
        m.recipe = j.value("recipe", std::string());
        for (const auto& e : j.at("entries")) {
            const std::string label = e.at("label").get<std::string>();
            if (label != "real" && label != "fake") throw IngestError("bad label '" + label + "' in manifest");
            m.entries.push_back({e.at("path").get<std::string>(), label == "fake" ? corpus::kFake : corpus::kReal,
                                 e.at("sha256").get<std::string>()});
        }
        for (const auto& e : j.value("excluded", nlohmann::json::array()))
            m.excluded.push_back({e.at("path").get<std::string>(), e.at("reason").get<std::string>()});
        if (j.contains("hash") && j.at("hash") != m.hash()) throw IngestError("manifest hash does not match its entries");
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw IngestError(std::string("malformed manifest: ") + e.what());
    }
}

inline void write_manifest(const CorpusManifest& m, const fs::path& path) {
    fs::create_directories(path.parent_path().empty() ? fs::path(".") : path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out << to_json(m).dump(2) << "\n";
}

inline CorpusManifest read_manifest(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IngestError("cannot open manifest " + path.string());
    try {
        return manifest_from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::parse_error& e) {
        throw IngestError(path.string() + ": " + e.what());
    }
}

/// Sample ids combine the file hash with the preprocessing policy.
inline std::string sample_id(const std::string& file_sha, const PreprocessPolicy& policy) {
    return sha256_hex(file_sha + "|resize" + std::to_string(policy.resize) + "|crop" + std::to_string(policy.crop));
}

/// A single image file as a sample (label unknown, reported as real).
inline corpus::Sample sample_from_file(const fs::path& p, const PreprocessPolicy& policy) {
    if (!fs::exists(p)) throw IoError("no such image " + p.string());
    corpus::Sample s;
    s.id = sample_id(file_sha256(p), policy);
    s.path = p;
    s.policy = policy;
    return s;
}

/// Corpus view of a manifest; images are decoded lazily.
inline corpus::Corpus to_corpus(const CorpusManifest& m, const PreprocessPolicy& policy, bool verify = true) {
    corpus::Corpus c;
    c.name = m.name;
    for (const auto& e : m.entries) {
        const fs::path p = fs::path(m.root) / e.path;
        if (!fs::exists(p)) throw IngestError("manifest entry missing on disk: " + p.string());
        if (verify && file_sha256(p) != e.sha256) throw IngestError("file changed since ingest: " + p.string());
        corpus::Sample s;
        s.id = sample_id(e.sha256, policy);
        s.label = e.label;
        s.path = p;
        s.policy = policy;
        c.samples.push_back(std::move(s));
    }
    if (!c.has_both_labels()) throw IngestError("manifest " + m.name + " lacks real or fake images");
    return c;
}

}  // namespace cinemae::cli
