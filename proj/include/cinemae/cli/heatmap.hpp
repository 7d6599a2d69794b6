#pragma once

// Patch-score heatmaps and the cross-domain matrix picture.
//
// Scores of one run are min-max normalised within the image. If every score
// is equal the normalised value is 0 for all of them (low end of the map).
// Colours run from yellow (0) to red (1); patches the run left visible keep
// their original pixels.

#include <algorithm>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cinemae/aggregate.hpp"
#include "cinemae/cli/report.hpp"
#include "cinemae/error.hpp"
#include "cinemae/eval.hpp"
#include "cinemae/image.hpp"

namespace cinemae::cli {

struct HeatCell {
    int patch_index = 0;
    int row = 0;
    int col = 0;
    double score = 0.0;
    double normalized = 0.0;
};

struct HeatGrid {
    int side = 0;  // cells per row and column
    std::vector<HeatCell> cells;
};

inline HeatGrid heat_grid(const aggregate::PatchScoreSet& s, int num_patches, int run = -1) {
    if (s.empty()) throw EmptyError("no scored runs to render");
    int side = 0;
    while (side * side < num_patches) ++side;
    if (side * side != num_patches) throw DimensionError("patch count is not a square grid");
    const int k = run < 0 ? s.runs() - 1 : run;
    if (k >= s.runs()) throw ValueError("run index out of range");
    const auto& mask = s.masks[static_cast<std::size_t>(k)];
    const double lo = s.scores.row(k).minCoeff(), hi = s.scores.row(k).maxCoeff();
    HeatGrid g{side, {}};
    for (int j = 0; j < s.masked_per_run(); ++j) {
        const int p = mask[static_cast<std::size_t>(j)];
        if (p < 0 || p >= num_patches) throw MaskError("mask index outside the patch grid");
        const double v = s.scores(k, j);
        g.cells.push_back({p, p / side, p % side, v, hi > lo ? (v - lo) / (hi - lo) : 0.0});
    }
    std::sort(g.cells.begin(), g.cells.end(), [](const HeatCell& a, const HeatCell& b) { return a.patch_index < b.patch_index; });
    return g;
}

inline std::array<double, 3> yellow_red(double t) {
    t = std::clamp(t, 0.0, 1.0);
    return {1.0, 1.0 - t, 0.0};
}

inline Image upscale(const Image& img, int factor) {
    Image out(img.height * factor, img.width * factor, img.channels);
    for (int y = 0; y < out.height; ++y)
        for (int x = 0; x < out.width; ++x)
            for (int c = 0; c < img.channels; ++c) out.at(y, x, c) = img.at(y / factor, x / factor, c);
    return out;
}

/// Blend the cell colours over `img`; small inputs are enlarged so the image is
/// at least 256 pixels wide.
inline Image render_heatmap(const Image& img, const HeatGrid& g, double alpha = 0.6) {
    if (img.height != img.width || img.height % g.side != 0) throw DimensionError("image does not tile into the heat grid");
    Image rgb = to_rgb(img);
    const int cell = img.height / g.side;
    for (const auto& c : g.cells) {
        const auto col = yellow_red(c.normalized);
        for (int y = c.row * cell; y < (c.row + 1) * cell; ++y)
            for (int x = c.col * cell; x < (c.col + 1) * cell; ++x)
                for (int ch = 0; ch < 3; ++ch) rgb.at(y, x, ch) = (1.0 - alpha) * rgb.at(y, x, ch) + alpha * col[static_cast<std::size_t>(ch)];
    }
    const int factor = std::max(1, 256 / img.width);
    return factor > 1 ? upscale(rgb, factor) : rgb;
}

inline std::string heat_grid_csv(const HeatGrid& g, const ReportHeader& h) {
    ReportHeader hh = h;
    hh.schema = "cinemae.heatmap/1";
    std::string out = csv_header(hh) + "patch_index,row,col,score,normalized\n";
    for (const auto& c : g.cells)
        out += std::to_string(c.patch_index) + "," + std::to_string(c.row) + "," + std::to_string(c.col) + "," + num(c.score) + "," +
               num(c.normalized) + "\n";
    return out;
}

/// One 48-pixel square per matrix entry, accuracy 0..100 mapped yellow..red
/// inverted so that high accuracy is pale.
inline Image render_matrix(const eval::CrossDomainMatrix& m, int cell = 48) {
    const int n = static_cast<int>(m.sources.size());
    Image img(n * cell, n * cell, 3, 1.0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            const auto col = yellow_red(1.0 - m.accuracy[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] / 100.0);
            for (int y = i * cell + 1; y < (i + 1) * cell - 1; ++y)
                for (int x = j * cell + 1; x < (j + 1) * cell - 1; ++x)
                    for (int ch = 0; ch < 3; ++ch) img.at(y, x, ch) = col[static_cast<std::size_t>(ch)];
        }
    return img;
}

}  // namespace cinemae::cli
