#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>

#include <openssl/evp.h>

#include "cinemae/error.hpp"

namespace cinemae {

/// Incremental SHA-256. Used for parameter digests, config hashes, cache keys
/// and seed derivation.
class Sha256 {
public:
    Sha256() : ctx_(EVP_MD_CTX_new()) {
        if (ctx_ == nullptr || EVP_DigestInit_ex(ctx_, EVP_sha256(), nullptr) != 1)
            throw Error("HashError", "failed to initialise SHA-256");
    }
    ~Sha256() { EVP_MD_CTX_free(ctx_); }
    Sha256(const Sha256&) = delete;
    Sha256& operator=(const Sha256&) = delete;

    Sha256& update(const void* data, std::size_t size) {
        if (size > 0) EVP_DigestUpdate(ctx_, data, size);
        return *this;
    }
    Sha256& update(std::string_view s) { return update(s.data(), s.size()); }

    template <typename T>
    Sha256& update_pod(const T& value) {
        static_assert(std::is_trivially_copyable_v<T>);
        return update(&value, sizeof(T));
    }

    std::array<std::uint8_t, 32> finish() {
        std::array<std::uint8_t, 32> out{};
        unsigned int len = 0;
        EVP_DigestFinal_ex(ctx_, out.data(), &len);
        return out;
    }

    std::string hex() {
        static constexpr char digits[] = "0123456789abcdef";
        auto bytes = finish();
        std::string s;
        s.reserve(64);
        for (auto b : bytes) {
            s.push_back(digits[b >> 4]);
            s.push_back(digits[b & 0xF]);
        }
        return s;
    }

private:
    EVP_MD_CTX* ctx_;
};

inline std::string sha256_hex(std::string_view data) { return Sha256{}.update(data).hex(); }

/// First 8 bytes of SHA-256(label), little-endian.
inline std::uint64_t hash64(std::string_view label) {
    auto d = Sha256{}.update(label).finish();
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | d[static_cast<std::size_t>(i)];
    return v;
}

}  // namespace cinemae
