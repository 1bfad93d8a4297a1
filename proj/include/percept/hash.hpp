#pragma once

#include <openssl/evp.h>

#include <array>
#include <cstdint>
#include <fstream>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>

namespace percept {

/// Incremental digest over OpenSSL's EVP interface ("SHA256" or "MD5").
class Digest {
public:
    explicit Digest(const char* algorithm = "SHA256") : ctx_(EVP_MD_CTX_new(), &EVP_MD_CTX_free) {
        const EVP_MD* md = EVP_get_digestbyname(algorithm);
        if (md == nullptr || !ctx_ || EVP_DigestInit_ex(ctx_.get(), md, nullptr) != 1)
            throw std::runtime_error(std::string("Digest: cannot initialise ") + algorithm);
    }

    Digest& update(const void* data, std::size_t n) {
        EVP_DigestUpdate(ctx_.get(), data, n);
        return *this;
    }
    Digest& update(std::string_view s) { return update(s.data(), s.size()); }

    template <typename T>
    Digest& update(std::span<const T> s) {
        return update(s.data(), s.size_bytes());
    }

    std::string hex() {
        std::array<unsigned char, EVP_MAX_MD_SIZE> buf{};
        unsigned int len = 0;
        EVP_DigestFinal_ex(ctx_.get(), buf.data(), &len);
        static constexpr char digits[] = "0123456789abcdef";
        std::string out;
        for (unsigned int i = 0; i < len; ++i) {
            out += digits[buf[i] >> 4];
            out += digits[buf[i] & 15];
        }
        return out;
    }

private:
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx_;
};

inline std::string sha256_hex(std::string_view s) { return Digest("SHA256").update(s).hex(); }

inline std::string file_digest(const std::string& path, const char* algorithm) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    Digest d(algorithm);
    std::array<char, 1 << 16> buf{};
    while (in) {
        in.read(buf.data(), buf.size());
        d.update(buf.data(), static_cast<std::size_t>(in.gcount()));
    }
    return d.hex();
}

}  // namespace percept
