#pragma once

// Procedural toy corpora.
//
//   texture  1/f-like multi-octave value noise plus pixel grain ("reals")
//   smooth   only the coarsest octaves, low-pass ("fakes")
//   grainy   the texture with heavy pixel noise ("fakes", second kind)
//   constant one flat colour per image
//
// Fake images additionally carry a fixed colour cast, the generator
// fingerprint shared by every fake kind.
//
// Recipe strings: "toy-<fake>-vs-texture:n=<per class>:seed=<s>" with
// <fake> in {smooth, grainy}, and "toy-constant:n=<count>:seed=<s>".

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "cinemae/corpus.hpp"
#include "cinemae/error.hpp"
#include "cinemae/image.hpp"
#include "cinemae/random.hpp"

namespace cinemae::synth {

enum class Kind { Texture, Smooth, Grainy, Blurred, Constant };

inline Kind parse_kind(const std::string& s) {
    if (s == "texture") return Kind::Texture;
    if (s == "smooth") return Kind::Smooth;
    if (s == "grainy") return Kind::Grainy;
    if (s == "blurred") return Kind::Blurred;
    if (s == "constant") return Kind::Constant;
    throw ValueError("unknown synthetic image kind '" + s + "'");
}

namespace detail {

/// Bilinearly upsampled cells×cells Gaussian field on a size×size image.
inline std::vector<double> value_noise(Rng& rng, int size, int cells) {
    std::vector<double> lattice(static_cast<std::size_t>((cells + 1) * (cells + 1)));
    for (auto& v : lattice) v = rng.normal();
    std::vector<double> out(static_cast<std::size_t>(size * size));
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const double fy = (y + 0.5) * cells / size, fx = (x + 0.5) * cells / size;
            const int y0 = std::min(static_cast<int>(fy), cells - 1), x0 = std::min(static_cast<int>(fx), cells - 1);
            const double ty = fy - y0, tx = fx - x0;
            auto at = [&](int yy, int xx) { return lattice[static_cast<std::size_t>(yy * (cells + 1) + xx)]; };
            out[static_cast<std::size_t>(y * size + x)] = (1 - ty) * ((1 - tx) * at(y0, x0) + tx * at(y0, x0 + 1)) +
                                                          ty * ((1 - tx) * at(y0 + 1, x0) + tx * at(y0 + 1, x0 + 1));
        }
    return out;
}

/// Sum of octaves with amplitude proportional to wavelength.
inline std::vector<double> octaves(Rng& rng, int size, int min_cells, int max_cells) {
    std::vector<double> sum(static_cast<std::size_t>(size * size), 0.0);
    for (int cells = min_cells; cells <= max_cells; cells *= 2) {
        const double amp = 2.0 / cells;
        const auto layer = value_noise(rng, size, cells);
        for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += amp * layer[i];
    }
    return sum;
}

inline double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

/// (2r+1)² box filter with clamped borders.
inline Image box_blur(const Image& src, int r) {
    Image out(src.height, src.width, src.channels);
    for (int y = 0; y < src.height; ++y)
        for (int x = 0; x < src.width; ++x)
            for (int c = 0; c < src.channels; ++c) {
                double sum = 0.0;
                for (int dy = -r; dy <= r; ++dy)
                    for (int dx = -r; dx <= r; ++dx)
                        sum += src.at(std::clamp(y + dy, 0, src.height - 1), std::clamp(x + dx, 0, src.width - 1), c);
                out.at(y, x, c) = sum / ((2 * r + 1) * (2 * r + 1));
            }
    return out;
}

}  // namespace detail

/// One synthetic RGB image of `size` pixels square.
inline Image generate(Kind kind, int size, std::uint64_t seed) {
    Rng rng(seed);
    Image img(size, size, 3);
    const double level = rng.uniform(0.35, 0.65);
    double base[3];
    for (double& b : base) b = level + rng.uniform(-0.03, 0.03);
    if (kind == Kind::Constant) {
        for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = base[i % 3];
        return img;
    }

    std::vector<double> lum;
    double contrast = 0.0, grain = 0.0;
    switch (kind) {
        case Kind::Texture:
            lum = detail::octaves(rng, size, 2, size);
            contrast = rng.uniform(0.20, 0.24);
            grain = 0.06;
            break;
        case Kind::Smooth:
            lum = detail::octaves(rng, size, 2, 4);
            contrast = rng.uniform(0.08, 0.10);
            break;
        case Kind::Blurred:
            lum = detail::octaves(rng, size, 2, size);
            contrast = rng.uniform(0.20, 0.24);
            grain = 0.06;
            break;
        case Kind::Grainy:
            lum = detail::octaves(rng, size, 2, size);
            contrast = rng.uniform(0.20, 0.24);
            grain = 0.15;
            break;
        case Kind::Constant: break;
    }
    const auto chroma = detail::octaves(rng, size, 2, 4);
    const bool fake = kind != Kind::Texture;
    const double cast[3] = {fake ? 0.16 : 0.0, fake ? -0.12 : 0.0, fake ? 0.10 : 0.0};
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const auto p = static_cast<std::size_t>(y * size + x);
            for (int c = 0; c < 3; ++c) {
                const double tint = (c == 1 ? -0.5 : 0.5) * 0.05 * chroma[p];
                const double g = grain > 0.0 ? grain * rng.normal() : 0.0;
                img.data[p * 3 + static_cast<std::size_t>(c)] =
                    detail::clamp01(base[c] + cast[c] + contrast * lum[p] + tint + g);
            }
        }
    return kind == Kind::Blurred ? detail::box_blur(img, 2) : img;
}

struct Recipe {
    std::string name;   // canonical recipe string
    Kind fake_kind = Kind::Smooth;
    bool constant = false;
    int n = 64;
    std::uint64_t seed = 0;
    int size = 32;
};

inline bool is_recipe(const std::string& s) { return s.rfind("toy-", 0) == 0; }

inline Recipe parse_recipe(const std::string& s) {
    std::stringstream in(s);
    std::string head, part;
    std::getline(in, head, ':');
    Recipe r;
    if (head == "toy-constant") {
        r.constant = true;
    } else if (head.size() > 15 && head.rfind("toy-", 0) == 0 && head.substr(head.size() - 11) == "-vs-texture") {
        r.fake_kind = parse_kind(head.substr(4, head.size() - 15));
        if (r.fake_kind == Kind::Texture || r.fake_kind == Kind::Constant) throw ValueError("bad fake kind in recipe '" + s + "'");
    } else {
        throw ValueError("unknown corpus recipe '" + s + "'");
    }
    while (std::getline(in, part, ':')) {
        const auto eq = part.find('=');
        if (eq == std::string::npos) throw ValueError("bad recipe field '" + part + "'");
        const std::string key = part.substr(0, eq), val = part.substr(eq + 1);
        try {
            if (key == "n") r.n = std::stoi(val);
            else if (key == "seed") r.seed = std::stoull(val);
            else if (key == "size") r.size = std::stoi(val);
            else throw ValueError("unknown recipe field '" + key + "'");
        } catch (const std::logic_error&) {
            throw ValueError("bad value for recipe field '" + key + "'");
        }
    }
    if (r.n < 1) throw ValueError("recipe n must be >= 1");
    if (r.size < 8) throw ValueError("recipe size must be >= 8");
    r.name = s;
    return r;
}

/// Pixels are snapped to 8 bits so a sample equals its PNG round trip.
inline corpus::Sample make_sample(Image img, int label) {
    img = quantize_u8(std::move(img));
    corpus::Sample s;
    s.id = corpus::image_hash(img);
    s.label = label;
    s.image = std::move(img);
    return s;
}

/// Reals depend only on (seed, index), so corpora built from the same seed
/// share their real images.
inline corpus::Corpus build(const Recipe& r) {
    corpus::Corpus c;
    c.name = r.name;
    if (r.constant) {
        for (int i = 0; i < r.n; ++i)
            c.samples.push_back(make_sample(generate(Kind::Constant, r.size, derive_seed(r.seed, "constant:" + std::to_string(i))),
                                            corpus::kReal));
        return c;
    }
    for (int i = 0; i < r.n; ++i)
        c.samples.push_back(make_sample(generate(Kind::Texture, r.size, derive_seed(r.seed, "real:" + std::to_string(i))),
                                        corpus::kReal));
    const std::string tag = r.fake_kind == Kind::Smooth ? "smooth:" : r.fake_kind == Kind::Grainy ? "grainy:" : "blurred:";
    for (int i = 0; i < r.n; ++i)
        c.samples.push_back(make_sample(generate(r.fake_kind, r.size, derive_seed(r.seed, tag + std::to_string(i))),
                                        corpus::kFake));
    return c;
}

inline corpus::Corpus build(const std::string& recipe) { return build(parse_recipe(recipe)); }

}  // namespace cinemae::synth
