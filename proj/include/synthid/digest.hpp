#pragma once

#include <openssl/evp.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <string_view>

#include "synthid/errors.hpp"

namespace synthid {

namespace detail {

inline std::string hex(const unsigned char* p, unsigned n) {
    static constexpr char kDigits[] = "0123456789abcdef";
    std::string s(2 * n, '0');
    for (unsigned i = 0; i < n; ++i) {
        s[2 * i] = kDigits[p[i] >> 4];
        s[2 * i + 1] = kDigits[p[i] & 15];
    }
    return s;
}

inline std::string evp_digest(const EVP_MD* md, std::span<const std::string_view> parts) {
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    std::array<unsigned char, EVP_MAX_MD_SIZE> out{};
    unsigned len = 0;
    EVP_DigestInit_ex(ctx, md, nullptr);
    for (auto p : parts) EVP_DigestUpdate(ctx, p.data(), p.size());
    EVP_DigestFinal_ex(ctx, out.data(), &len);
    EVP_MD_CTX_free(ctx);
    return hex(out.data(), len);
}

} // namespace detail

inline std::string sha256_hex(std::string_view bytes) {
    const std::string_view parts[] = {bytes};
    return detail::evp_digest(EVP_sha256(), parts);
}

/// SHA-256 of a span of trivially copyable values, as raw bytes.
template <typename T>
std::string sha256_of(std::span<const T> values) {
    return sha256_hex({reinterpret_cast<const char*>(values.data()), values.size_bytes()});
}

inline std::string read_file_bytes(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw IoError("cannot read " + p.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::string sha256_file(const std::filesystem::path& p) { return sha256_hex(read_file_bytes(p)); }

/// Content digest in the form git uses for blobs: sha1("blob <len>\0" + bytes).
inline std::string git_blob_digest(std::string_view bytes) {
    const std::string header = "blob " + std::to_string(bytes.size()) + std::string(1, '\0');
    const std::string_view parts[] = {header, bytes};
    return detail::evp_digest(EVP_sha1(), parts);
}

} // namespace synthid
