#pragma once

// On-disk feature cache.
//
//   <dir>/global/<key>.bin   f_global,     key = H(image id, backbone digest)
//   <dir>/scores/<key>.bin   K-run scores, key = H(image id, backbone digest,
//                                              mask seed, K, ratio, cas hash)
//
// Entry layout: "CNMC1\n", the key as 64 hex chars, a little-endian payload of
// int64 counts and raw float64 values, then the SHA-256 of everything before
// it. A failed check raises CacheCorruptionError; the provider drops the entry
// and recomputes.

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "cinemae/aggregate.hpp"
#include "cinemae/backbone.hpp"
#include "cinemae/cas.hpp"
#include "cinemae/error.hpp"
#include "cinemae/features.hpp"
#include "cinemae/hash.hpp"

namespace cinemae::cli {

namespace fs = std::filesystem;

namespace detail {

inline constexpr char kCacheMagic[] = "CNMC1\n";

class Writer {
public:
    void i64(std::int64_t v) { raw(&v, sizeof v); }
    void f64s(const double* p, std::size_t n) { raw(p, n * sizeof(double)); }
    void bytes(const std::string& s) { raw(s.data(), s.size()); }
    const std::string& data() const { return buf_; }

private:
    void raw(const void* p, std::size_t n) { buf_.append(static_cast<const char*>(p), n); }
    std::string buf_;
};

class Reader {
public:
    explicit Reader(std::string_view s) : s_(s) {}
    std::int64_t i64() {
        std::int64_t v;
        raw(&v, sizeof v);
        return v;
    }
    void f64s(double* p, std::size_t n) { raw(p, n * sizeof(double)); }
    bool done() const { return pos_ == s_.size(); }

private:
    void raw(void* p, std::size_t n) {
        if (pos_ + n > s_.size()) throw CacheCorruptionError("cache entry truncated");
        std::memcpy(p, s_.data() + pos_, n);
        pos_ += n;
    }
    std::string_view s_;
    std::size_t pos_ = 0;
};

}  // namespace detail

struct CacheStats {
    long hits = 0;
    long misses = 0;
    long corrupt = 0;
};

class FeatureCache {
public:
    explicit FeatureCache(fs::path dir) : dir_(std::move(dir)) {}

    const fs::path& dir() const { return dir_; }
    const CacheStats& stats() const { return stats_; }

    static std::string exact(double v) {
        char buf[40];
        std::snprintf(buf, sizeof buf, "%a", v);
        return buf;
    }

    static std::string global_key(const std::string& image_id, const std::string& digest) {
        return sha256_hex("global|" + image_id + "|" + digest);
    }

    static std::string scores_key(const std::string& image_id, const std::string& digest, const features::PlanConfig& plan) {
        return sha256_hex("scores|" + image_id + "|" + digest + "|" + std::to_string(features::mask_seed(plan, image_id)) + "|" +
                          std::to_string(plan.runs) + "|" + exact(plan.mask_ratio) + "|" +
                          cas::config_hash(plan.cas));
    }

    fs::path global_path(const std::string& key) const { return dir_ / "global" / (key + ".bin"); }
    fs::path scores_path(const std::string& key) const { return dir_ / "scores" / (key + ".bin"); }

    std::optional<Eigen::RowVectorXd> get_global(const std::string& key) {
        auto payload = load(global_path(key), key);
        if (!payload) return std::nullopt;
        detail::Reader r(*payload);
        const auto n = r.i64();
        if (n < 0 || n > (1 << 20)) throw CacheCorruptionError("bad vector length in cache entry");
        Eigen::RowVectorXd v(n);
        r.f64s(v.data(), static_cast<std::size_t>(n));
        if (!r.done()) throw CacheCorruptionError("trailing bytes in cache entry");
        return v;
    }

    void put_global(const std::string& key, const Eigen::RowVectorXd& v) {
        detail::Writer w;
        w.i64(v.size());
        w.f64s(v.data(), static_cast<std::size_t>(v.size()));
        store(global_path(key), key, w.data());
    }

    std::optional<aggregate::PatchScoreSet> get_scores(const std::string& key, const std::string& image_id) {
        auto payload = load(scores_path(key), key);
        if (!payload) return std::nullopt;
        detail::Reader r(*payload);
        const auto K = r.i64(), m = r.i64();
        if (K < 0 || m < 0 || K > 64 || m > (1 << 20)) throw CacheCorruptionError("bad score shape in cache entry");
        aggregate::PatchScoreSet s;
        s.image_id = image_id;
        s.scores.resize(K, m);
        s.nll.resize(K, m);
        std::vector<double> tmp(static_cast<std::size_t>(m));
        for (Eigen::Index k = 0; k < K; ++k) {
            r.f64s(tmp.data(), tmp.size());
            std::vector<int> mask;
            for (double d : tmp) mask.push_back(static_cast<int>(d));
            s.masks.push_back(std::move(mask));
            r.f64s(tmp.data(), tmp.size());
            for (Eigen::Index j = 0; j < m; ++j) s.scores(k, j) = tmp[static_cast<std::size_t>(j)];
            r.f64s(tmp.data(), tmp.size());
            for (Eigen::Index j = 0; j < m; ++j) s.nll(k, j) = tmp[static_cast<std::size_t>(j)];
        }
        if (!r.done()) throw CacheCorruptionError("trailing bytes in cache entry");
        s.run_means = s.scores.rowwise().mean();
        return s;
    }

    void put_scores(const std::string& key, const aggregate::PatchScoreSet& s) {
        detail::Writer w;
        w.i64(s.runs());
        w.i64(s.masked_per_run());
        std::vector<double> tmp;
        for (int k = 0; k < s.runs(); ++k) {
            tmp.assign(s.masks[static_cast<std::size_t>(k)].begin(), s.masks[static_cast<std::size_t>(k)].end());
            w.f64s(tmp.data(), tmp.size());
            for (int j = 0; j < s.masked_per_run(); ++j) tmp[static_cast<std::size_t>(j)] = s.scores(k, j);
            w.f64s(tmp.data(), tmp.size());
            for (int j = 0; j < s.masked_per_run(); ++j) tmp[static_cast<std::size_t>(j)] = s.nll(k, j);
            w.f64s(tmp.data(), tmp.size());
        }
        store(scores_path(key), key, w.data());
    }

    /// Cached f_global and score sets; corrupted entries are reported, removed
    /// and recomputed, so results never depend on the cache state.
    features::Provider provider(const backbone::Backbone& bb, features::PlanConfig plan) {
        return [this, &bb, plan](const corpus::Sample& s) {
            const std::string digest = bb.param_digest();
            std::optional<backbone::PatchGrid> grid;
            auto get_grid = [&]() -> const backbone::PatchGrid& {
                if (!grid) grid = bb.make_grid(s.pixels(), s.id);
                return *grid;
            };

            const std::string gk = global_key(s.id, digest);
            auto g = guarded([&] { return get_global(gk); }, global_path(gk));
            if (!g) {
                ++stats_.misses;
                g = features::extract_global(bb, get_grid());
                put_global(gk, *g);
            } else {
                ++stats_.hits;
            }

            aggregate::PatchScoreSet scores{s.id, {}, {}, {}, {}};
            if (plan.runs > 0) {
                const std::string sk = scores_key(s.id, digest, plan);
                auto cached = guarded([&] { return get_scores(sk, s.id); }, scores_path(sk));
                if (!cached) {
                    ++stats_.misses;
                    scores = features::extract_scores(bb, get_grid(), plan);
                    put_scores(sk, scores);
                } else {
                    ++stats_.hits;
                    scores = std::move(*cached);
                }
            }
            return features::assemble(std::move(*g), std::move(scores));
        };
    }

private:
    template <typename F>
    auto guarded(F&& f, const fs::path& path) -> decltype(f()) {
        try {
            return f();
        } catch (const CacheCorruptionError& e) {
            ++stats_.corrupt;
            std::cerr << "warning: dropping corrupted cache entry " << path.string() << ": " << e.what() << "\n";
            std::error_code ec;
            fs::remove(path, ec);
            return std::nullopt;
        }
    }

    std::optional<std::string> load(const fs::path& path, const std::string& key) const {
        std::ifstream in(path, std::ios::binary);
        if (!in) return std::nullopt;
        std::string all((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        const std::size_t head = sizeof(detail::kCacheMagic) - 1 + 64;
        if (all.size() < head + 32) throw CacheCorruptionError("cache entry too short");
        if (all.compare(0, sizeof(detail::kCacheMagic) - 1, detail::kCacheMagic) != 0)
            throw CacheCorruptionError("bad cache magic");
        Sha256 h;
        h.update(std::string_view(all).substr(0, all.size() - 32));
        const auto digest = h.finish();
        if (std::memcmp(digest.data(), all.data() + all.size() - 32, 32) != 0) throw CacheCorruptionError("checksum mismatch");
        if (all.compare(sizeof(detail::kCacheMagic) - 1, 64, key) != 0) throw CacheCorruptionError("key mismatch");
        return all.substr(head, all.size() - head - 32);
    }

    void store(const fs::path& path, const std::string& key, const std::string& payload) const {
        fs::create_directories(path.parent_path());
        std::string all = detail::kCacheMagic;
        all += key;
        all += payload;
        Sha256 h;
        h.update(all);
        const auto digest = h.finish();
        all.append(reinterpret_cast<const char*>(digest.data()), digest.size());
        const fs::path tmp = path.string() + ".tmp";
        {
            std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
            if (!out) throw IoError("cannot write cache entry " + tmp.string());
            out.write(all.data(), static_cast<std::streamsize>(all.size()));
        }
        fs::rename(tmp, path);
    }

    fs::path dir_;
    CacheStats stats_;
};

}  // namespace cinemae::cli
