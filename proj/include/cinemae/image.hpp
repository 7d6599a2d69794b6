#pragma once

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include <jpeglib.h>
#include <png.h>

#include "cinemae/error.hpp"

namespace cinemae {

/// Interleaved H×W×C image with values in [0, 1].
struct Image {
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<double> data;

    Image() = default;
    Image(int h, int w, int c, double fill = 0.0)
        : height(h), width(w), channels(c), data(static_cast<std::size_t>(h) * w * c, fill) {}

    double& at(int y, int x, int c) { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
    double at(int y, int x, int c) const { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }

    bool operator==(const Image&) const = default;
};

/// Snap values to the 8-bit grid an encoded file can hold.
inline Image quantize_u8(Image img) {
    for (double& v : img.data) v = std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
    return img;
}

namespace detail {

struct PngReadGuard {
    png_structp png = nullptr;
    png_infop info = nullptr;
    ~PngReadGuard() { png_destroy_read_struct(&png, info ? &info : nullptr, nullptr); }
};

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline Image read_png(const std::filesystem::path& path) {
    FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw IoError("cannot open " + path.string());
    PngReadGuard g;
    g.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!g.png) throw FormatError("png: out of memory");
    g.info = png_create_info_struct(g.png);
    if (!g.info) throw FormatError("png: out of memory");
    if (setjmp(png_jmpbuf(g.png))) throw FormatError(path.string() + ": corrupt PNG");
    png_init_io(g.png, fp.get());
    png_read_info(g.png, g.info);
    png_set_strip_16(g.png);
    png_set_palette_to_rgb(g.png);
    png_set_expand_gray_1_2_4_to_8(g.png);
    png_set_strip_alpha(g.png);
    png_read_update_info(g.png, g.info);
    const int w = static_cast<int>(png_get_image_width(g.png, g.info));
    const int h = static_cast<int>(png_get_image_height(g.png, g.info));
    const int c = png_get_channels(g.png, g.info);
    if (c != 1 && c != 3) throw FormatError(path.string() + ": unsupported channel count " + std::to_string(c));
    std::vector<png_byte> buf(static_cast<std::size_t>(h) * png_get_rowbytes(g.png, g.info));
    std::vector<png_bytep> rows(static_cast<std::size_t>(h));
    for (int y = 0; y < h; ++y) rows[static_cast<std::size_t>(y)] = buf.data() + static_cast<std::size_t>(y) * png_get_rowbytes(g.png, g.info);
    png_read_image(g.png, rows.data());
    Image img(h, w, c);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w * c; ++x) img.data[static_cast<std::size_t>(y) * w * c + x] = rows[static_cast<std::size_t>(y)][x] / 255.0;
    return img;
}

struct JpegErrorMgr {
    jpeg_error_mgr base;
    std::jmp_buf jump;
};

inline Image read_jpeg(const std::filesystem::path& path) {
    FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw IoError("cannot open " + path.string());
    jpeg_decompress_struct cinfo;
    JpegErrorMgr err;
    cinfo.err = jpeg_std_error(&err.base);
    err.base.error_exit = [](j_common_ptr c) { std::longjmp(reinterpret_cast<JpegErrorMgr*>(c->err)->jump, 1); };
    if (setjmp(err.jump)) {
        jpeg_destroy_decompress(&cinfo);
        throw FormatError(path.string() + ": corrupt JPEG");
    }
    jpeg_create_decompress(&cinfo);
    jpeg_stdio_src(&cinfo, fp.get());
    jpeg_read_header(&cinfo, TRUE);
    if (cinfo.num_components != 1) cinfo.out_color_space = JCS_RGB;
    jpeg_start_decompress(&cinfo);
    const int w = static_cast<int>(cinfo.output_width), h = static_cast<int>(cinfo.output_height);
    const int c = cinfo.output_components;
    Image img(h, w, c);
    std::vector<JSAMPLE> row(static_cast<std::size_t>(w) * c);
    while (cinfo.output_scanline < cinfo.output_height) {
        const int y = static_cast<int>(cinfo.output_scanline);
        JSAMPROW r = row.data();
        jpeg_read_scanlines(&cinfo, &r, 1);
        for (int x = 0; x < w * c; ++x) img.data[static_cast<std::size_t>(y) * w * c + x] = row[static_cast<std::size_t>(x)] / 255.0;
    }
    jpeg_finish_decompress(&cinfo);
    jpeg_destroy_decompress(&cinfo);
    return img;
}

inline Image read_ppm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::string magic;
    int w = 0, h = 0, maxval = 0;
    in >> magic >> w >> h >> maxval;
    if (!in || (magic != "P6" && magic != "P5") || w <= 0 || h <= 0 || maxval != 255)
        throw FormatError(path.string() + ": unsupported PNM header");
    in.get();
    const int c = magic == "P6" ? 3 : 1;
    std::vector<unsigned char> buf(static_cast<std::size_t>(w) * h * c);
    if (!in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size())))
        throw FormatError(path.string() + ": truncated PNM data");
    Image img(h, w, c);
    for (std::size_t i = 0; i < buf.size(); ++i) img.data[i] = buf[i] / 255.0;
    return img;
}

}  // namespace detail

/// Decode PNG, JPEG or binary PNM, chosen by file signature.
inline Image load_image(const std::filesystem::path& path) {
    std::ifstream probe(path, std::ios::binary);
    if (!probe) throw IoError("cannot open " + path.string());
    unsigned char sig[8] = {};
    probe.read(reinterpret_cast<char*>(sig), 8);
    if (probe.gcount() < 2) throw FormatError(path.string() + ": file too short");
    probe.close();
    if (sig[0] == 0x89 && sig[1] == 'P' && sig[2] == 'N' && sig[3] == 'G') return detail::read_png(path);
    if (sig[0] == 0xFF && sig[1] == 0xD8) return detail::read_jpeg(path);
    if (sig[0] == 'P' && (sig[1] == '6' || sig[1] == '5')) return detail::read_ppm(path);
    throw FormatError(path.string() + ": unrecognised image format");
}

/// 8-bit PNG, 1 or 3 channels. Output bytes depend only on pixel values.
inline void save_png(const Image& img, const std::filesystem::path& path) {
    if (img.channels != 1 && img.channels != 3) throw FormatError("save_png: 1 or 3 channels required");
    detail::FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw IoError("cannot write " + path.string());
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, nullptr);
        throw IoError("png: out of memory");
    }
    std::vector<png_byte> buf(img.data.size());
    for (std::size_t i = 0; i < buf.size(); ++i)
        buf[i] = static_cast<png_byte>(std::lround(std::clamp(img.data[i], 0.0, 1.0) * 255.0));
    std::vector<png_bytep> rows(static_cast<std::size_t>(img.height));
    for (int y = 0; y < img.height; ++y) rows[static_cast<std::size_t>(y)] = buf.data() + static_cast<std::size_t>(y) * img.width * img.channels;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("png: write failed for " + path.string());
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
                 img.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

/// Bilinear resampling with half-pixel centres. Downscaling by more than 2×
/// first box-filters so the result does not alias.
inline Image resize_bilinear(const Image& src, int out_h, int out_w) {
    if (out_h <= 0 || out_w <= 0) throw ValueError("resize: target size must be positive");
    if (out_h == src.height && out_w == src.width) return src;
    const Image* in = &src;
    Image boxed;
    const int fy = src.height >= 2 * out_h ? src.height / out_h : 1;
    const int fx = src.width >= 2 * out_w ? src.width / out_w : 1;
    if (fy > 1 || fx > 1) {
        boxed = Image(src.height / fy, src.width / fx, src.channels);
        for (int y = 0; y < boxed.height; ++y)
            for (int x = 0; x < boxed.width; ++x)
                for (int c = 0; c < src.channels; ++c) {
                    double s = 0;
                    for (int dy = 0; dy < fy; ++dy)
                        for (int dx = 0; dx < fx; ++dx) s += src.at(y * fy + dy, x * fx + dx, c);
                    boxed.at(y, x, c) = s / (fy * fx);
                }
        in = &boxed;
    }
    Image out(out_h, out_w, in->channels);
    const double sy = static_cast<double>(in->height) / out_h, sx = static_cast<double>(in->width) / out_w;
    for (int y = 0; y < out_h; ++y) {
        const double fyp = std::clamp((y + 0.5) * sy - 0.5, 0.0, in->height - 1.0);
        const int y0 = static_cast<int>(fyp), y1 = std::min(y0 + 1, in->height - 1);
        const double wy = fyp - y0;
        for (int x = 0; x < out_w; ++x) {
            const double fxp = std::clamp((x + 0.5) * sx - 0.5, 0.0, in->width - 1.0);
            const int x0 = static_cast<int>(fxp), x1 = std::min(x0 + 1, in->width - 1);
            const double wx = fxp - x0;
            for (int c = 0; c < in->channels; ++c) {
                const double top = in->at(y0, x0, c) * (1 - wx) + in->at(y0, x1, c) * wx;
                const double bot = in->at(y1, x0, c) * (1 - wx) + in->at(y1, x1, c) * wx;
                out.at(y, x, c) = top * (1 - wy) + bot * wy;
            }
        }
    }
    return out;
}

inline Image center_crop(const Image& src, int size) {
    if (src.height < size || src.width < size) throw DimensionError("center_crop: image smaller than crop");
    const int oy = (src.height - size) / 2, ox = (src.width - size) / 2;
    Image out(size, size, src.channels);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
            for (int c = 0; c < src.channels; ++c) out.at(y, x, c) = src.at(y + oy, x + ox, c);
    return out;
}

/// Deterministic input policy: resize the shorter side to `resize`, then
/// center-crop to `crop`. Grey inputs are expanded to three channels.
struct PreprocessPolicy {
    int resize = 256;
    int crop = 224;
};

inline Image to_rgb(const Image& img) {
    if (img.channels == 3) return img;
    if (img.channels != 1) throw DimensionError("expected 1 or 3 channels");
    Image out(img.height, img.width, 3);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c) out.at(y, x, c) = img.at(y, x, 0);
    return out;
}

inline Image preprocess(const Image& img, const PreprocessPolicy& policy) {
    if (policy.crop > policy.resize) throw ConfigError("preprocess: crop larger than resize");
    Image rgb = to_rgb(img);
    if (std::min(rgb.height, rgb.width) != policy.resize) {
        int h = policy.resize, w = policy.resize;
        if (rgb.height <= rgb.width)
            w = static_cast<int>(std::lround(static_cast<double>(rgb.width) * policy.resize / rgb.height));
        else
            h = static_cast<int>(std::lround(static_cast<double>(rgb.height) * policy.resize / rgb.width));
        rgb = resize_bilinear(rgb, h, w);
    }
    return center_crop(rgb, policy.crop);
}

}  // namespace cinemae
