#pragma once

// Masked-autoencoder ViT backbone: patchification, visible-context encoding,
// masked-patch reconstruction and the global (mean patch token) feature.
//
// Parameter names and layouts follow the reference MAE checkpoints, so a
// converted `mae_visualize_vit_large` archive loads unchanged. Weight archive
// layout (PyTorch shapes, C order):
//
//   patch_embed.proj.weight   [D, C, p, p]     patch_embed.proj.bias [D]
//   cls_token                 [1, 1, D]        pos_embed             [1, M+1, D]
//   blocks.{i}.norm1.{weight,bias}             [D]
//   blocks.{i}.attn.qkv.weight [3D, D]         blocks.{i}.attn.qkv.bias  [3D]
//   blocks.{i}.attn.proj.weight [D, D]         blocks.{i}.attn.proj.bias [D]
//   blocks.{i}.norm2.{weight,bias}             [D]
//   blocks.{i}.mlp.fc1.weight [H, D]  .bias [H]  blocks.{i}.mlp.fc2.weight [D, H] .bias [D]
//   norm.{weight,bias}                         [D]
//   decoder_embed.weight [Dd, D]  .bias [Dd]   mask_token [1, 1, Dd]
//   decoder_pos_embed         [1, M+1, Dd]     decoder_blocks.{i}.* (as blocks, width Dd)
//   decoder_norm.{weight,bias} [Dd]            decoder_pred.weight [P, Dd]  .bias [P]
//
// The sidecar `<archive>.json` carries the architecture tag, per-channel pixel
// normalisation and the reconstruction target space.

#include <array>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "cinemae/autodiff.hpp"
#include "cinemae/error.hpp"
#include "cinemae/hash.hpp"
#include "cinemae/image.hpp"
#include "cinemae/nn.hpp"
#include "cinemae/random.hpp"
#include "cinemae/tensor_io.hpp"

namespace cinemae::backbone {

using ad::Matrix;
using ad::Parameter;
using ad::Tape;
using ad::Var;

// ---- architecture ----------------------------------------------------------

struct ArchSpec {
    std::string tag;
    int image_size = 224;
    int patch_size = 16;
    int channels = 3;
    int embed_dim = 1024;
    int depth = 24;
    int heads = 16;
    int mlp_hidden = 4096;
    int decoder_dim = 512;
    int decoder_depth = 8;
    int decoder_heads = 16;
    int decoder_mlp_hidden = 2048;
    bool use_pos_embed = true;
    double ln_eps = 1e-6;

    int grid() const { return image_size / patch_size; }
    int num_patches() const { return grid() * grid(); }
    int patch_dim() const { return patch_size * patch_size * channels; }

    bool operator==(const ArchSpec&) const = default;
};

inline ArchSpec large16() {
    return {"large-16", 224, 16, 3, 1024, 24, 16, 4096, 512, 8, 16, 2048, true, 1e-6};
}

inline ArchSpec base16() {
    return {"base-16", 224, 16, 3, 768, 12, 12, 3072, 512, 8, 16, 2048, true, 1e-6};
}

/// Miniature MAE for desk-scale experiments: 32×32 inputs, 4-px patches,
/// 4 encoder blocks, 2 decoder blocks.
inline ArchSpec toy() {
    return {"toy", 32, 4, 3, 64, 4, 4, 128, 64, 2, 4, 128, true, 1e-6};
}

inline ArchSpec arch_for_tag(const std::string& tag) {
    if (tag == "large-16") return large16();
    if (tag == "base-16") return base16();
    if (tag == "toy") return toy();
    throw ConfigError("unknown arch tag '" + tag + "' (expected large-16, base-16 or toy)");
}

inline nlohmann::json arch_to_json(const ArchSpec& a) {
    return {{"tag", a.tag},           {"image_size", a.image_size},
            {"patch_size", a.patch_size}, {"channels", a.channels},
            {"embed_dim", a.embed_dim}, {"depth", a.depth},
            {"heads", a.heads},         {"mlp_hidden", a.mlp_hidden},
            {"decoder_dim", a.decoder_dim}, {"decoder_depth", a.decoder_depth},
            {"decoder_heads", a.decoder_heads}, {"decoder_mlp_hidden", a.decoder_mlp_hidden},
            {"use_pos_embed", a.use_pos_embed}, {"ln_eps", a.ln_eps}};
}

inline ArchSpec arch_from_json(const nlohmann::json& j) {
    ArchSpec a;
    a.tag = j.at("tag").get<std::string>();
    a.image_size = j.at("image_size");
    a.patch_size = j.at("patch_size");
    a.channels = j.at("channels");
    a.embed_dim = j.at("embed_dim");
    a.depth = j.at("depth");
    a.heads = j.at("heads");
    a.mlp_hidden = j.at("mlp_hidden");
    a.decoder_dim = j.at("decoder_dim");
    a.decoder_depth = j.at("decoder_depth");
    a.decoder_heads = j.at("decoder_heads");
    a.decoder_mlp_hidden = j.at("decoder_mlp_hidden");
    a.use_pos_embed = j.value("use_pos_embed", true);
    a.ln_eps = j.value("ln_eps", 1e-6);
    return a;
}

enum class TargetSpace { Pixel, PerPatch };

/// Per-channel pixel normalisation plus the space decoder outputs live in.
struct Normalization {
    std::array<double, 3> mean{0.485, 0.456, 0.406};
    std::array<double, 3> std{0.229, 0.224, 0.225};
    TargetSpace target = TargetSpace::Pixel;
};

// ---- patch grid ------------------------------------------------------------

/// M×P patch matrix. Row m is patch (m / cols, m % cols); within a patch the
/// vector is ordered (row, col, channel), the MAE convention.
struct PatchGrid {
    Matrix patches;
    int rows = 0;
    int cols = 0;
    int patch_size = 0;
    int channels = 0;
    std::string image_id;

    int num_patches() const { return rows * cols; }
    int patch_dim() const { return patch_size * patch_size * channels; }
};

inline PatchGrid patchify(const Image& img, int patch_size, std::string image_id = {}) {
    if (patch_size <= 0) throw DimensionError("patch_size must be positive");
    if (img.channels != 1 && img.channels != 3) throw DimensionError("images must have 1 or 3 channels");
    if (img.height % patch_size != 0 || img.width % patch_size != 0)
        throw DimensionError("image " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                             " not divisible by patch size " + std::to_string(patch_size));
    for (double v : img.data)
        if (!std::isfinite(v)) throw ValueError("non-finite pixel value");
    PatchGrid g;
    g.rows = img.height / patch_size;
    g.cols = img.width / patch_size;
    g.patch_size = patch_size;
    g.channels = img.channels;
    g.image_id = std::move(image_id);
    g.patches.resize(g.num_patches(), g.patch_dim());
    for (int gr = 0; gr < g.rows; ++gr)
        for (int gc = 0; gc < g.cols; ++gc) {
            const int m = gr * g.cols + gc;
            int k = 0;
            for (int py = 0; py < patch_size; ++py)
                for (int px = 0; px < patch_size; ++px)
                    for (int c = 0; c < img.channels; ++c) g.patches(m, k++) = img.at(gr * patch_size + py, gc * patch_size + px, c);
        }
    return g;
}

inline Image unpatchify(const PatchGrid& g) {
    Image img(g.rows * g.patch_size, g.cols * g.patch_size, g.channels);
    for (int gr = 0; gr < g.rows; ++gr)
        for (int gc = 0; gc < g.cols; ++gc) {
            const int m = gr * g.cols + gc;
            int k = 0;
            for (int py = 0; py < g.patch_size; ++py)
                for (int px = 0; px < g.patch_size; ++px)
                    for (int c = 0; c < g.channels; ++c) img.at(gr * g.patch_size + py, gc * g.patch_size + px, c) = g.patches(m, k++);
        }
    return img;
}

/// Apply per-channel (x - mean) / std in place. Called exactly once per grid.
inline void normalize_pixels(PatchGrid& g, const Normalization& norm) {
    if (g.channels != 3) throw DimensionError("pixel normalisation expects 3 channels");
    for (Eigen::Index k = 0; k < g.patches.cols(); ++k) {
        const auto c = static_cast<std::size_t>(k % g.channels);
        g.patches.col(k) = (g.patches.col(k).array() - norm.mean[c]) / norm.std[c];
    }
}

/// Map normalised patches into the decoder's target space.
inline Matrix to_target_space(const Matrix& patches, TargetSpace space) {
    if (space == TargetSpace::Pixel) return patches;
    Matrix out(patches.rows(), patches.cols());
    for (Eigen::Index r = 0; r < patches.rows(); ++r) {
        const double mu = patches.row(r).mean();
        const double var = (patches.row(r).array() - mu).square().sum() / static_cast<double>(patches.cols() - 1);
        out.row(r) = (patches.row(r).array() - mu) / std::sqrt(var + 1e-6);
    }
    return out;
}

/// Fixed 2-D sine-cosine position table with a zero class-token row, as used
/// by MAE.
inline Matrix sincos_pos_embed(int dim, int grid) {
    const int quarter = dim / 4;
    auto one_d = [&](int half, double pos, Eigen::RowVectorXd& out, int offset) {
        const int q = half / 2;
        for (int i = 0; i < q; ++i) {
            const double omega = 1.0 / std::pow(10000.0, static_cast<double>(i) / q);
            out(offset + i) = std::sin(pos * omega);
            out(offset + q + i) = std::cos(pos * omega);
        }
    };
    Matrix table = Matrix::Zero(grid * grid + 1, dim);
    for (int h = 0; h < grid; ++h)
        for (int w = 0; w < grid; ++w) {
            Eigen::RowVectorXd row = Eigen::RowVectorXd::Zero(dim);
            // MAE meshgrid quirk: the first half encodes the column coordinate.
            one_d(2 * quarter, w, row, 0);
            one_d(2 * quarter, h, row, 2 * quarter);
            table.row(1 + h * grid + w) = row;
        }
    return table;
}

// ---- parameters ------------------------------------------------------------

struct BlockWeights {
    nn::LayerNorm norm1;
    nn::Linear qkv;
    nn::Linear proj;
    nn::LayerNorm norm2;
    nn::Linear fc1;
    nn::Linear fc2;

    BlockWeights() = default;
    BlockWeights(const std::string& prefix, int dim, int hidden, double eps)
        : norm1(prefix + ".norm1", dim, eps), qkv(prefix + ".attn.qkv", dim, 3 * dim), proj(prefix + ".attn.proj", dim, dim),
          norm2(prefix + ".norm2", dim, eps), fc1(prefix + ".mlp.fc1", dim, hidden), fc2(prefix + ".mlp.fc2", hidden, dim) {}

    template <typename F>
    void for_each_parameter(F&& f) {
        norm1.for_each_parameter(f);
        qkv.for_each_parameter(f);
        proj.for_each_parameter(f);
        norm2.for_each_parameter(f);
        fc1.for_each_parameter(f);
        fc2.for_each_parameter(f);
    }
};

struct MaeWeights {
    nn::Linear patch_embed;
    Parameter cls_token;
    Parameter pos_embed;
    std::vector<BlockWeights> blocks;
    nn::LayerNorm norm;
    nn::Linear decoder_embed;
    Parameter mask_token;
    Parameter decoder_pos_embed;
    std::vector<BlockWeights> decoder_blocks;
    nn::LayerNorm decoder_norm;
    nn::Linear decoder_pred;

    MaeWeights() = default;
    explicit MaeWeights(const ArchSpec& a) {
        const int M = a.num_patches();
        patch_embed = nn::Linear("patch_embed.proj", a.patch_dim(), a.embed_dim);
        cls_token = {"cls_token", Matrix::Zero(1, a.embed_dim), {}, true};
        pos_embed = {"pos_embed", Matrix::Zero(M + 1, a.embed_dim), {}, false};
        for (int i = 0; i < a.depth; ++i) blocks.emplace_back("blocks." + std::to_string(i), a.embed_dim, a.mlp_hidden, a.ln_eps);
        norm = nn::LayerNorm("norm", a.embed_dim, a.ln_eps);
        decoder_embed = nn::Linear("decoder_embed", a.embed_dim, a.decoder_dim);
        mask_token = {"mask_token", Matrix::Zero(1, a.decoder_dim), {}, true};
        decoder_pos_embed = {"decoder_pos_embed", Matrix::Zero(M + 1, a.decoder_dim), {}, false};
        for (int i = 0; i < a.decoder_depth; ++i)
            decoder_blocks.emplace_back("decoder_blocks." + std::to_string(i), a.decoder_dim, a.decoder_mlp_hidden, a.ln_eps);
        decoder_norm = nn::LayerNorm("decoder_norm", a.decoder_dim, a.ln_eps);
        decoder_pred = nn::Linear("decoder_pred", a.decoder_dim, a.patch_dim());
    }

    template <typename F>
    void for_each_encoder_parameter(F&& f) {
        patch_embed.for_each_parameter(f);
        f(cls_token);
        f(pos_embed);
        for (auto& b : blocks) b.for_each_parameter(f);
        norm.for_each_parameter(f);
    }

    template <typename F>
    void for_each_decoder_parameter(F&& f) {
        decoder_embed.for_each_parameter(f);
        f(mask_token);
        f(decoder_pos_embed);
        for (auto& b : decoder_blocks) b.for_each_parameter(f);
        decoder_norm.for_each_parameter(f);
        decoder_pred.for_each_parameter(f);
    }

    template <typename F>
    void for_each_parameter(F&& f) {
        for_each_encoder_parameter(f);
        for_each_decoder_parameter(f);
    }
};

// ---- differentiable forward -------------------------------------------------
//
// Templated on weight constness: const weights enter the tape as borrowed
// constants (inference), mutable weights as parameters (training).

namespace detail {

inline Var leaf(Tape& t, const Parameter& p) { return t.constant_ref(p.value); }
inline Var leaf(Tape& t, Parameter& p) { return t.param(p); }

template <typename L>
Var linear(Tape& t, L& l, Var x) {
    return ad::add_row(ad::matmul(x, leaf(t, l.weight)), leaf(t, l.bias));
}

template <typename N>
Var layer_norm(Tape& t, N& n, Var x) {
    return ad::layer_norm(x, leaf(t, n.gain), leaf(t, n.bias), n.eps);
}

template <typename B>
Var block(Tape& t, B& b, Var x, int heads) {
    const Eigen::Index dim = x.cols();
    const Eigen::Index hd = dim / heads;
    Var h = layer_norm(t, b.norm1, x);
    Var qkv = linear(t, b.qkv, h);
    std::vector<Var> outs;
    outs.reserve(static_cast<std::size_t>(heads));
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    for (int i = 0; i < heads; ++i) {
        Var q = ad::slice_cols(qkv, i * hd, hd);
        Var k = ad::slice_cols(qkv, dim + i * hd, hd);
        Var v = ad::slice_cols(qkv, 2 * dim + i * hd, hd);
        Var att = ad::softmax_rows(ad::scale(ad::matmul(q, ad::transpose(k)), scale));
        outs.push_back(ad::matmul(att, v));
    }
    x = ad::add(x, linear(t, b.proj, heads == 1 ? outs.front() : ad::concat_cols(outs)));
    Var m = linear(t, b.fc2, ad::gelu(linear(t, b.fc1, layer_norm(t, b.norm2, x))));
    return ad::add(x, m);
}

}  // namespace detail

/// Encode the patches at `keep` (in that order). Returns (1+|keep|)×D tokens
/// after the final norm; row 0 is the class token.
template <typename W>
Var encode(Tape& t, W& w, const ArchSpec& a, const Matrix& patches, const std::vector<int>& keep) {
    Var all = t.constant_ref(patches);
    Var x = detail::linear(t, w.patch_embed, ad::gather_rows(all, keep));
    Var cls = detail::leaf(t, w.cls_token);
    if (a.use_pos_embed) {
        Var pos = detail::leaf(t, w.pos_embed);
        std::vector<int> rows(keep.size());
        for (std::size_t i = 0; i < keep.size(); ++i) rows[i] = keep[i] + 1;
        x = ad::add(x, ad::gather_rows(pos, rows));
        cls = ad::add(cls, ad::gather_rows(pos, {0}));
    }
    x = ad::concat_rows({cls, x});
    for (auto& b : w.blocks) x = detail::block(t, b, x, a.heads);
    return detail::layer_norm(t, w.norm, x);
}

/// Decode latent tokens from `encode(..., keep)` into an M×P prediction for
/// every patch position (class token dropped).
template <typename W>
Var decode(Tape& t, W& w, const ArchSpec& a, Var latent, const std::vector<int>& keep) {
    const int M = a.num_patches();
    Var y = detail::linear(t, w.decoder_embed, latent);
    Var with_mask = ad::concat_rows({y, detail::leaf(t, w.mask_token)});
    const int mask_row = static_cast<int>(keep.size()) + 1;
    std::vector<int> order(static_cast<std::size_t>(M + 1), mask_row);
    order[0] = 0;
    for (std::size_t i = 0; i < keep.size(); ++i) order[static_cast<std::size_t>(keep[i] + 1)] = static_cast<int>(i) + 1;
    Var x = ad::gather_rows(with_mask, order);
    if (a.use_pos_embed) x = ad::add(x, detail::leaf(t, w.decoder_pos_embed));
    for (auto& b : w.decoder_blocks) x = detail::block(t, b, x, a.decoder_heads);
    x = detail::layer_norm(t, w.decoder_norm, x);
    Var pred = detail::linear(t, w.decoder_pred, x);
    std::vector<int> body(static_cast<std::size_t>(M));
    std::iota(body.begin(), body.end(), 1);
    return ad::gather_rows(pred, body);
}

/// Mean of the patch tokens of a fully visible image, on the tape.
template <typename W>
Var global_feature_on_tape(Tape& t, W& w, const ArchSpec& a, const Matrix& patches) {
    const int M = static_cast<int>(patches.rows());
    std::vector<int> all(static_cast<std::size_t>(M));
    std::iota(all.begin(), all.end(), 0);
    std::vector<int> body(static_cast<std::size_t>(M));
    std::iota(body.begin(), body.end(), 1);
    return ad::mean_rows(ad::gather_rows(encode(t, w, a, patches, all), body));
}

/// Validate a mask against M patches and return the complementary visible
/// index list in ascending order.
inline std::vector<int> visible_complement(const std::vector<int>& mask, int M) {
    if (mask.empty()) throw MaskError("mask is empty");
    std::vector<char> masked(static_cast<std::size_t>(M), 0);
    for (int i : mask) {
        if (i < 0 || i >= M) throw MaskError("mask index " + std::to_string(i) + " out of range");
        if (masked[static_cast<std::size_t>(i)]) throw MaskError("duplicate mask index " + std::to_string(i));
        masked[static_cast<std::size_t>(i)] = 1;
    }
    if (static_cast<int>(mask.size()) >= M) throw MaskError("mask covers every patch");
    std::vector<int> visible;
    for (int i = 0; i < M; ++i)
        if (!masked[static_cast<std::size_t>(i)]) visible.push_back(i);
    return visible;
}

// ---- handle ------------------------------------------------------------------

/// Shared forward-pass counter; copies of a handle keep counting into the same
/// total (feature-cache tests rely on this).
class ForwardCounter {
public:
    ForwardCounter() : count_(std::make_shared<std::atomic<long>>(0)) {}
    void bump() const { count_->fetch_add(1, std::memory_order_relaxed); }
    long value() const { return count_->load(); }
    void reset() const { count_->store(0); }

private:
    std::shared_ptr<std::atomic<long>> count_;
};

/// Frozen MAE backbone. All forward methods are const and pure given the
/// parameters; the handle may be shared by concurrent readers.
class Backbone {
public:
    Backbone(ArchSpec arch, Normalization norm, MaeWeights weights)
        : arch_(std::move(arch)), norm_(norm), weights_(std::move(weights)) {
        digest_ = compute_digest();
    }

    const ArchSpec& arch() const { return arch_; }
    const std::string& arch_tag() const { return arch_.tag; }
    int embed_dim() const { return arch_.embed_dim; }
    const Normalization& normalization() const { return norm_; }
    bool frozen() const { return true; }
    const std::string& param_digest() const { return digest_; }
    const MaeWeights& weights() const { return weights_; }
    const ForwardCounter& forward_counter() const { return counter_; }

    /// SHA-256 over parameter names, shapes and raw values.
    std::string compute_digest() const {
        Sha256 h;
        const_cast<MaeWeights&>(weights_).for_each_parameter([&](const Parameter& p) {
            h.update(p.name);
            h.update_pod(static_cast<std::int64_t>(p.value.rows()));
            h.update_pod(static_cast<std::int64_t>(p.value.cols()));
            h.update(p.value.data(), static_cast<std::size_t>(p.value.size()) * sizeof(double));
        });
        return h.hex();
    }

    /// Patchify and normalise an image already at the backbone's resolution.
    PatchGrid make_grid(const Image& img, std::string image_id = {}) const {
        if (img.height != arch_.image_size || img.width != arch_.image_size)
            throw DimensionError("backbone expects " + std::to_string(arch_.image_size) + "x" +
                                 std::to_string(arch_.image_size) + " input");
        PatchGrid g = patchify(to_rgb(img), arch_.patch_size, std::move(image_id));
        normalize_pixels(g, norm_);
        return g;
    }

    Matrix target_patches(const PatchGrid& g) const { return to_target_space(g.patches, norm_.target); }

    /// Masked rows: decoder reconstructions (target space). Visible rows: the
    /// input rows, untouched.
    Matrix reconstruct(const PatchGrid& grid, const std::vector<int>& mask) const {
        check_grid(grid);
        const std::vector<int> visible = visible_complement(mask, grid.num_patches());
        counter_.bump();
        Tape t;
        Var latent = encode(t, weights_, arch_, grid.patches, visible);
        Var pred = decode(t, weights_, arch_, latent, visible);
        Matrix out = grid.patches;
        for (int m : mask) out.row(m) = pred.value().row(m);
        return out;
    }

    /// Mean of the encoder's patch tokens over the unmasked image; the class
    /// token is excluded.
    Eigen::RowVectorXd global_feature(const PatchGrid& grid) const {
        check_grid(grid);
        counter_.bump();
        std::vector<int> all(static_cast<std::size_t>(grid.num_patches()));
        std::iota(all.begin(), all.end(), 0);
        Tape t;
        Var tokens = encode(t, weights_, arch_, grid.patches, all);
        return tokens.value().bottomRows(grid.num_patches()).colwise().mean();
    }

    /// Mutable copy of the weights for the fine-tuning ablation only.
    MaeWeights clone_weights() const { return weights_; }

private:
    void check_grid(const PatchGrid& g) const {
        if (g.num_patches() != arch_.num_patches() || g.patch_dim() != arch_.patch_dim())
            throw DimensionError("patch grid geometry does not match backbone " + arch_.tag);
    }

    ArchSpec arch_;
    Normalization norm_;
    MaeWeights weights_;
    std::string digest_;
    ForwardCounter counter_;
};

/// Fresh weights: Xavier-uniform linears, N(0, 0.02) tokens and fixed
/// sine-cosine position tables.
inline MaeWeights init_weights(const ArchSpec& a, std::uint64_t seed) {
    MaeWeights w(a);
    Rng rng(seed);
    w.patch_embed.xavier_uniform(rng);
    w.cls_token.value = w.cls_token.value.unaryExpr([&](double) { return 0.02 * rng.normal(); });
    w.mask_token.value = w.mask_token.value.unaryExpr([&](double) { return 0.02 * rng.normal(); });
    w.pos_embed.value = sincos_pos_embed(a.embed_dim, a.grid());
    w.decoder_pos_embed.value = sincos_pos_embed(a.decoder_dim, a.grid());
    for (auto* blocks : {&w.blocks, &w.decoder_blocks})
        for (auto& b : *blocks) {
            b.qkv.xavier_uniform(rng);
            b.proj.xavier_uniform(rng);
            b.fc1.xavier_uniform(rng);
            b.fc2.xavier_uniform(rng);
        }
    w.decoder_embed.xavier_uniform(rng);
    w.decoder_pred.xavier_uniform(rng);
    return w;
}

// ---- archive I/O -----------------------------------------------------------

namespace detail {

/// Expected PyTorch-layout shape of every tensor of an architecture.
inline std::map<std::string, std::vector<std::int64_t>> expected_shapes(const ArchSpec& a) {
    std::map<std::string, std::vector<std::int64_t>> s;
    const std::int64_t D = a.embed_dim, Dd = a.decoder_dim, M = a.num_patches(), P = a.patch_dim();
    s["patch_embed.proj.weight"] = {D, a.channels, a.patch_size, a.patch_size};
    s["patch_embed.proj.bias"] = {D};
    s["cls_token"] = {1, 1, D};
    s["pos_embed"] = {1, M + 1, D};
    auto block = [&](const std::string& p, std::int64_t d, std::int64_t h) {
        s[p + ".norm1.weight"] = {d};
        s[p + ".norm1.bias"] = {d};
        s[p + ".attn.qkv.weight"] = {3 * d, d};
        s[p + ".attn.qkv.bias"] = {3 * d};
        s[p + ".attn.proj.weight"] = {d, d};
        s[p + ".attn.proj.bias"] = {d};
        s[p + ".norm2.weight"] = {d};
        s[p + ".norm2.bias"] = {d};
        s[p + ".mlp.fc1.weight"] = {h, d};
        s[p + ".mlp.fc1.bias"] = {h};
        s[p + ".mlp.fc2.weight"] = {d, h};
        s[p + ".mlp.fc2.bias"] = {d};
    };
    for (int i = 0; i < a.depth; ++i) block("blocks." + std::to_string(i), D, a.mlp_hidden);
    s["norm.weight"] = {D};
    s["norm.bias"] = {D};
    s["decoder_embed.weight"] = {Dd, D};
    s["decoder_embed.bias"] = {Dd};
    s["mask_token"] = {1, 1, Dd};
    s["decoder_pos_embed"] = {1, M + 1, Dd};
    for (int i = 0; i < a.decoder_depth; ++i) block("decoder_blocks." + std::to_string(i), Dd, a.decoder_mlp_hidden);
    s["decoder_norm.weight"] = {Dd};
    s["decoder_norm.bias"] = {Dd};
    s["decoder_pred.weight"] = {P, Dd};
    s["decoder_pred.bias"] = {P};
    return s;
}

inline std::string shape_str(const std::vector<std::int64_t>& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
    return out + "]";
}

}  // namespace detail

inline std::filesystem::path sidecar_path(const std::filesystem::path& weights) {
    return std::filesystem::path(weights.string() + ".json");
}

struct Sidecar {
    ArchSpec arch;
    Normalization norm;
};

inline nlohmann::json sidecar_to_json(const Sidecar& s) {
    return {{"schema", "cinemae.backbone/1"},
            {"arch_tag", s.arch.tag},
            {"arch", arch_to_json(s.arch)},
            {"mean", s.norm.mean},
            {"std", s.norm.std},
            {"target_space", s.norm.target == TargetSpace::Pixel ? "pixel" : "per_patch"}};
}

inline Sidecar read_sidecar(const std::filesystem::path& weights, const std::string& arch_tag) {
    Sidecar s;
    const auto path = sidecar_path(weights);
    if (!std::filesystem::exists(path)) {
        if (arch_tag == "toy") throw FormatError("toy backbone requires sidecar " + path.string());
        s.arch = arch_for_tag(arch_tag);
        return s;
    }
    try {
        std::ifstream in(path);
        const auto j = nlohmann::json::parse(in);
        const std::string tag = j.at("arch_tag");
        if (tag != arch_tag) throw ArchMismatchError("archive is '" + tag + "' but '" + arch_tag + "' was requested");
        s.arch = j.contains("arch") ? arch_from_json(j.at("arch")) : arch_for_tag(tag);
        if (s.arch.tag != tag) throw FormatError("sidecar arch block disagrees with arch_tag");
        if (tag != "toy" && !(s.arch == arch_for_tag(tag)))
            throw ArchMismatchError("sidecar geometry differs from the standard " + tag + " architecture");
        s.norm.mean = j.at("mean").get<std::array<double, 3>>();
        s.norm.std = j.at("std").get<std::array<double, 3>>();
        const std::string ts = j.value("target_space", "pixel");
        if (ts != "pixel" && ts != "per_patch") throw FormatError("unknown target_space '" + ts + "'");
        s.norm.target = ts == "pixel" ? TargetSpace::Pixel : TargetSpace::PerPatch;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
    return s;
}

/// Load a frozen backbone. Shapes are validated against `arch_tag` from the
/// archive header before any tensor payload is read.
inline Backbone load_backbone(const std::filesystem::path& weights_path, const std::string& arch_tag) {
    const Sidecar side = read_sidecar(weights_path, arch_tag);
    const ArchSpec& a = side.arch;
    io::SafeTensorReader reader(weights_path);
    const auto expected = detail::expected_shapes(a);
    for (const auto& [name, shape] : expected) {
        if (!reader.contains(name)) throw FormatError(weights_path.string() + ": missing tensor '" + name + "'");
        if (reader.info(name).shape != shape)
            throw ArchMismatchError("tensor '" + name + "' has shape " + detail::shape_str(reader.info(name).shape) + ", " +
                                    a.tag + " expects " + detail::shape_str(shape));
    }

    MaeWeights w(a);
    const int p = a.patch_size, C = a.channels;
    {
        // Conv kernel [D, C, p, p] -> P×D with rows in (row, col, channel) order.
        const auto flat = reader.read("patch_embed.proj.weight");
        Matrix& W = w.patch_embed.weight.value;
        for (int d = 0; d < a.embed_dim; ++d)
            for (int c = 0; c < C; ++c)
                for (int py = 0; py < p; ++py)
                    for (int px = 0; px < p; ++px)
                        W((py * p + px) * C + c, d) = flat[static_cast<std::size_t>(((d * C + c) * p + py) * p + px)];
        w.patch_embed.bias.value = reader.read_matrix("patch_embed.proj.bias", 1, a.embed_dim);
    }
    auto torch_linear = [&](nn::Linear& l, const std::string& name) {
        l.weight.value = reader.read_matrix(name + ".weight", l.out(), l.in()).transpose();
        l.bias.value = reader.read_matrix(name + ".bias", 1, l.out());
    };
    auto norm = [&](nn::LayerNorm& n, const std::string& name) {
        const auto d = n.gain.value.cols();
        n.gain.value = reader.read_matrix(name + ".weight", 1, d);
        n.bias.value = reader.read_matrix(name + ".bias", 1, d);
    };
    auto blocks = [&](std::vector<BlockWeights>& bs, const std::string& prefix) {
        for (std::size_t i = 0; i < bs.size(); ++i) {
            const std::string q = prefix + "." + std::to_string(i);
            norm(bs[i].norm1, q + ".norm1");
            torch_linear(bs[i].qkv, q + ".attn.qkv");
            torch_linear(bs[i].proj, q + ".attn.proj");
            norm(bs[i].norm2, q + ".norm2");
            torch_linear(bs[i].fc1, q + ".mlp.fc1");
            torch_linear(bs[i].fc2, q + ".mlp.fc2");
        }
    };
    const int M = a.num_patches();
    w.cls_token.value = reader.read_matrix("cls_token", 1, a.embed_dim);
    w.pos_embed.value = reader.read_matrix("pos_embed", M + 1, a.embed_dim);
    blocks(w.blocks, "blocks");
    norm(w.norm, "norm");
    torch_linear(w.decoder_embed, "decoder_embed");
    w.mask_token.value = reader.read_matrix("mask_token", 1, a.decoder_dim);
    w.decoder_pos_embed.value = reader.read_matrix("decoder_pos_embed", M + 1, a.decoder_dim);
    blocks(w.decoder_blocks, "decoder_blocks");
    norm(w.decoder_norm, "decoder_norm");
    torch_linear(w.decoder_pred, "decoder_pred");

    w.for_each_parameter([](Parameter& prm) {
        prm.trainable = false;
        if (!prm.value.allFinite()) throw FormatError("tensor '" + prm.name + "' contains non-finite values");
    });
    return Backbone(a, side.norm, std::move(w));
}

/// Write weights (F64, PyTorch layout) plus the JSON sidecar.
inline void save_backbone(const ArchSpec& a, const Normalization& norm, const MaeWeights& weights,
                          const std::filesystem::path& path) {
    io::SafeTensorWriter out;
    MaeWeights& w = const_cast<MaeWeights&>(weights);
    const int p = a.patch_size, C = a.channels;
    {
        std::vector<double> flat(static_cast<std::size_t>(a.embed_dim) * a.patch_dim());
        const Matrix& W = w.patch_embed.weight.value;
        for (int d = 0; d < a.embed_dim; ++d)
            for (int c = 0; c < C; ++c)
                for (int py = 0; py < p; ++py)
                    for (int px = 0; px < p; ++px)
                        flat[static_cast<std::size_t>(((d * C + c) * p + py) * p + px)] = W((py * p + px) * C + c, d);
        out.add("patch_embed.proj.weight", {a.embed_dim, C, p, p}, std::move(flat));
    }
    const auto shapes = detail::expected_shapes(a);
    auto put = [&](const std::string& name, const Matrix& m) {
        std::vector<double> flat(static_cast<std::size_t>(m.size()));
        for (Eigen::Index r = 0; r < m.rows(); ++r)
            for (Eigen::Index c = 0; c < m.cols(); ++c) flat[static_cast<std::size_t>(r * m.cols() + c)] = m(r, c);
        out.add(name, shapes.at(name), std::move(flat));
    };
    w.for_each_parameter([&](Parameter& prm) {
        if (prm.name == "patch_embed.proj.weight") return;
        const bool is_linear_weight = prm.name.ends_with(".weight") && prm.value.rows() > 1;
        put(prm.name, is_linear_weight ? Matrix(prm.value.transpose()) : prm.value);
    });
    out.set_metadata("format", "cinemae-mae");
    out.write(path);
    std::ofstream side(sidecar_path(path));
    side << sidecar_to_json({a, norm}).dump(2) << "\n";
}

inline void save_backbone(const Backbone& b, const std::filesystem::path& path) {
    save_backbone(b.arch(), b.normalization(), b.weights(), path);
}

}  // namespace cinemae::backbone
