#pragma once

// Reader/writer for the safetensors single-file layout:
//
//   u64 little-endian header length N
//   N bytes of JSON: { "<name>": {"dtype": "F32", "shape": [..],
//                                 "data_offsets": [begin, end]}, ...,
//                      "__metadata__": {"key": "value", ...} }
//   raw little-endian tensor bytes, C (row-major) order
//
// Backbone weights and detector checkpoints both use this layout.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "cinemae/error.hpp"

namespace cinemae::io {

static_assert(std::endian::native == std::endian::little, "tensor archives assume a little-endian host");

enum class DType { F64, F32, F16, BF16 };

inline std::string to_string(DType d) {
    switch (d) {
        case DType::F64: return "F64";
        case DType::F32: return "F32";
        case DType::F16: return "F16";
        case DType::BF16: return "BF16";
    }
    return "?";
}

inline DType parse_dtype(const std::string& s) {
    if (s == "F64") return DType::F64;
    if (s == "F32") return DType::F32;
    if (s == "F16") return DType::F16;
    if (s == "BF16") return DType::BF16;
    throw FormatError("unsupported tensor dtype '" + s + "'");
}

inline std::size_t dtype_size(DType d) {
    switch (d) {
        case DType::F64: return 8;
        case DType::F32: return 4;
        default: return 2;
    }
}

namespace detail {
inline float half_to_float(std::uint16_t h) {
    const std::uint32_t sign = (h & 0x8000u) << 16;
    std::uint32_t exp = (h >> 10) & 0x1Fu;
    std::uint32_t mant = h & 0x3FFu;
    std::uint32_t bits;
    if (exp == 0) {
        if (mant == 0) {
            bits = sign;
        } else {
            exp = 127 - 15 + 1;
            while ((mant & 0x400u) == 0) {
                mant <<= 1;
                --exp;
            }
            bits = sign | (exp << 23) | ((mant & 0x3FFu) << 13);
        }
    } else if (exp == 0x1F) {
        bits = sign | 0x7F800000u | (mant << 13);
    } else {
        bits = sign | ((exp + 127 - 15) << 23) | (mant << 13);
    }
    return std::bit_cast<float>(bits);
}
}  // namespace detail

struct TensorInfo {
    DType dtype = DType::F32;
    std::vector<std::int64_t> shape;
    std::uint64_t begin = 0;
    std::uint64_t end = 0;

    std::int64_t numel() const {
        std::int64_t n = 1;
        for (auto s : shape) n *= s;
        return n;
    }
};

/// Parses the header eagerly and reads tensor payloads on demand, so shape
/// validation can run before any data is touched.
class SafeTensorReader {
public:
    explicit SafeTensorReader(const std::filesystem::path& path) : path_(path), in_(path, std::ios::binary) {
        if (!in_) throw IoError("cannot open tensor archive " + path.string());
        const auto file_size = std::filesystem::file_size(path);
        std::uint64_t header_len = 0;
        if (file_size < 8 || !in_.read(reinterpret_cast<char*>(&header_len), 8))
            throw FormatError(path.string() + ": truncated archive header");
        if (header_len == 0 || header_len > file_size - 8 || header_len > (std::uint64_t{1} << 30))
            throw FormatError(path.string() + ": implausible header length");
        std::string header(header_len, '\0');
        if (!in_.read(header.data(), static_cast<std::streamsize>(header_len)))
            throw FormatError(path.string() + ": truncated header");
        data_start_ = 8 + header_len;
        const std::uint64_t data_size = file_size - data_start_;

        nlohmann::json j;
        try {
            j = nlohmann::json::parse(header);
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(path.string() + ": header is not valid JSON (" + e.what() + ")");
        }
        if (!j.is_object()) throw FormatError(path.string() + ": header must be a JSON object");
        for (auto it = j.begin(); it != j.end(); ++it) {
            if (it.key() == "__metadata__") {
                if (!it->is_object()) throw FormatError("__metadata__ must be an object");
                for (auto m = it->begin(); m != it->end(); ++m) {
                    if (!m->is_string()) throw FormatError("__metadata__ values must be strings");
                    metadata_[m.key()] = m->get<std::string>();
                }
                continue;
            }
            try {
                TensorInfo info;
                info.dtype = parse_dtype(it->at("dtype").get<std::string>());
                info.shape = it->at("shape").get<std::vector<std::int64_t>>();
                const auto offs = it->at("data_offsets").get<std::vector<std::uint64_t>>();
                if (offs.size() != 2) throw FormatError("data_offsets must have two entries");
                info.begin = offs[0];
                info.end = offs[1];
                for (auto s : info.shape)
                    if (s < 0) throw FormatError("negative dimension");
                if (info.end < info.begin || info.end > data_size ||
                    info.end - info.begin != static_cast<std::uint64_t>(info.numel()) * dtype_size(info.dtype))
                    throw FormatError("data_offsets inconsistent with shape/dtype or file size");
                tensors_.emplace(it.key(), std::move(info));
            } catch (const nlohmann::json::exception& e) {
                throw FormatError(path.string() + ": bad entry '" + it.key() + "': " + e.what());
            } catch (const FormatError& e) {
                throw FormatError(path.string() + ": bad entry '" + it.key() + "': " + e.what());
            }
        }
    }

    const std::map<std::string, TensorInfo>& tensors() const { return tensors_; }
    const std::map<std::string, std::string>& metadata() const { return metadata_; }
    bool contains(const std::string& name) const { return tensors_.count(name) != 0; }

    const TensorInfo& info(const std::string& name) const {
        auto it = tensors_.find(name);
        if (it == tensors_.end()) throw FormatError(path_.string() + ": missing tensor '" + name + "'");
        return it->second;
    }

    /// Flat values in C order, converted to double.
    std::vector<double> read(const std::string& name) {
        const TensorInfo& t = info(name);
        const auto n = static_cast<std::size_t>(t.numel());
        std::vector<char> raw(n * dtype_size(t.dtype));
        in_.clear();
        in_.seekg(static_cast<std::streamoff>(data_start_ + t.begin));
        if (!in_.read(raw.data(), static_cast<std::streamsize>(raw.size())))
            throw FormatError(path_.string() + ": short read for '" + name + "'");
        std::vector<double> out(n);
        for (std::size_t i = 0; i < n; ++i) {
            switch (t.dtype) {
                case DType::F64: {
                    double v;
                    std::memcpy(&v, raw.data() + 8 * i, 8);
                    out[i] = v;
                    break;
                }
                case DType::F32: {
                    float v;
                    std::memcpy(&v, raw.data() + 4 * i, 4);
                    out[i] = v;
                    break;
                }
                case DType::F16: {
                    std::uint16_t h;
                    std::memcpy(&h, raw.data() + 2 * i, 2);
                    out[i] = detail::half_to_float(h);
                    break;
                }
                case DType::BF16: {
                    std::uint16_t h;
                    std::memcpy(&h, raw.data() + 2 * i, 2);
                    out[i] = std::bit_cast<float>(static_cast<std::uint32_t>(h) << 16);
                    break;
                }
            }
        }
        return out;
    }

    /// Read a tensor with exactly `rows*cols` elements as a rows×cols matrix
    /// (C order: element (r, c) at r*cols + c).
    Eigen::MatrixXd read_matrix(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
        auto flat = read(name);
        if (static_cast<Eigen::Index>(flat.size()) != rows * cols)
            throw ShapeError(name + ": expected " + std::to_string(rows * cols) + " elements");
        Eigen::MatrixXd m(rows, cols);
        for (Eigen::Index r = 0; r < rows; ++r)
            for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = flat[static_cast<std::size_t>(r * cols + c)];
        return m;
    }

private:
    std::filesystem::path path_;
    std::ifstream in_;
    std::uint64_t data_start_ = 0;
    std::map<std::string, TensorInfo> tensors_;
    std::map<std::string, std::string> metadata_;
};

/// Collects named tensors and writes them in sorted-name order, making the
/// output a deterministic function of its contents.
class SafeTensorWriter {
public:
    void set_metadata(const std::string& key, const std::string& value) { metadata_[key] = value; }

    void add(const std::string& name, std::vector<std::int64_t> shape, std::vector<double> values, DType dtype = DType::F64) {
        if (dtype != DType::F64 && dtype != DType::F32) throw FormatError("writer supports F64 and F32 only");
        std::int64_t n = 1;
        for (auto s : shape) n *= s;
        if (n != static_cast<std::int64_t>(values.size())) throw ShapeError(name + ": shape does not match value count");
        entries_[name] = Entry{std::move(shape), std::move(values), dtype};
    }

    /// Store a matrix in C order with shape [rows, cols].
    void add_matrix(const std::string& name, const Eigen::MatrixXd& m, DType dtype = DType::F64) {
        std::vector<double> flat(static_cast<std::size_t>(m.size()));
        for (Eigen::Index r = 0; r < m.rows(); ++r)
            for (Eigen::Index c = 0; c < m.cols(); ++c) flat[static_cast<std::size_t>(r * m.cols() + c)] = m(r, c);
        add(name, {m.rows(), m.cols()}, std::move(flat), dtype);
    }

    void write(const std::filesystem::path& path) const {
        nlohmann::json header = nlohmann::json::object();
        std::uint64_t offset = 0;
        for (const auto& [name, e] : entries_) {
            const std::uint64_t bytes = e.values.size() * dtype_size(e.dtype);
            header[name] = {{"dtype", to_string(e.dtype)}, {"shape", e.shape}, {"data_offsets", {offset, offset + bytes}}};
            offset += bytes;
        }
        if (!metadata_.empty()) header["__metadata__"] = metadata_;
        std::string text = header.dump();
        while ((text.size() + 8) % 8 != 0) text.push_back(' ');

        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + path.string());
        const std::uint64_t len = text.size();
        out.write(reinterpret_cast<const char*>(&len), 8);
        out.write(text.data(), static_cast<std::streamsize>(text.size()));
        for (const auto& [name, e] : entries_) {
            for (double v : e.values) {
                if (e.dtype == DType::F64) {
                    out.write(reinterpret_cast<const char*>(&v), 8);
                } else {
                    const float f = static_cast<float>(v);
                    out.write(reinterpret_cast<const char*>(&f), 4);
                }
            }
        }
        if (!out) throw IoError("failed writing " + path.string());
    }

private:
    struct Entry {
        std::vector<std::int64_t> shape;
        std::vector<double> values;
        DType dtype;
    };
    std::map<std::string, Entry> entries_;
    std::map<std::string, std::string> metadata_;
};

}  // namespace cinemae::io
