#pragma once

#include <algorithm>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "cinemae/error.hpp"
#include "cinemae/hash.hpp"
#include "cinemae/image.hpp"
#include "cinemae/random.hpp"

namespace cinemae::corpus {

inline constexpr int kReal = 0;
inline constexpr int kFake = 1;

inline std::string label_name(int label) { return label == kFake ? "fake" : "real"; }

/// Content hash of an image's pixel values; used as the stable image id.
inline std::string image_hash(const Image& img) {
    Sha256 h;
    h.update_pod(img.height).update_pod(img.width).update_pod(img.channels);
    h.update(img.data.data(), img.data.size() * sizeof(double));
    return h.hex();
}

/// One labelled image. Pixels are held in memory (synthetic corpora) or
/// decoded from `path` on demand.
struct Sample {
    std::string id;
    int label = kReal;
    std::filesystem::path path;
    std::optional<Image> image;
    PreprocessPolicy policy{};

    Image pixels() const {
        if (image) return *image;
        return preprocess(load_image(path), policy);
    }
};

struct Corpus {
    std::string name;
    std::vector<Sample> samples;

    std::size_t count(int label) const {
        return static_cast<std::size_t>(std::count_if(samples.begin(), samples.end(), [&](const Sample& s) { return s.label == label; }));
    }
    bool has_both_labels() const { return count(kReal) > 0 && count(kFake) > 0; }
};

struct Split {
    Corpus train;
    Corpus test;
    std::string hash;  // identifies train/test membership
};

/// Deterministic split: samples are ordered by SHA-256(seed/id) and the first
/// `test_fraction` of each class goes to test. Membership depends only on ids
/// and seed, never on input order.
inline Split split_corpus(const Corpus& c, double test_fraction, std::uint64_t seed) {
    if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw ValueError("test_fraction must lie in (0, 1)");
    Split out;
    out.train.name = c.name + ":train";
    out.test.name = c.name + ":test";
    Sha256 h;
    for (int label : {kReal, kFake}) {
        std::vector<std::pair<std::string, const Sample*>> keyed;
        for (const auto& s : c.samples)
            if (s.label == label) keyed.emplace_back(sha256_hex(std::to_string(seed) + "/" + s.id), &s);
        std::sort(keyed.begin(), keyed.end(), [](const auto& a, const auto& b) {
            return a.first != b.first ? a.first < b.first : a.second->id < b.second->id;
        });
        const auto n_test = static_cast<std::size_t>(std::lround(test_fraction * static_cast<double>(keyed.size())));
        for (std::size_t i = 0; i < keyed.size(); ++i) {
            const bool test = i < n_test;
            (test ? out.test : out.train).samples.push_back(*keyed[i].second);
            h.update(test ? "T:" : "R:").update(keyed[i].second->id).update("\n");
        }
    }
    out.hash = h.hex();
    return out;
}

inline Corpus merge(std::string name, const std::vector<const Corpus*>& parts) {
    Corpus out{std::move(name), {}};
    for (const Corpus* p : parts) out.samples.insert(out.samples.end(), p->samples.begin(), p->samples.end());
    return out;
}

}  // namespace cinemae::corpus
