#pragma once

#include <curl/curl.h>
#include <zlib.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "percept/hash.hpp"

namespace percept {

/// Transient failure (network, partial transfer); calling again may succeed.
class FetchError : public std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Content does not match its published checksum; never retried.
class ChecksumError : public std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct RemoteFile {
    std::string url;
    std::string filename;
    std::string md5;
};

struct FetchOptions {
    int attempts = 3;
    std::function<void(const std::string&)> log;
};

inline std::vector<RemoteFile> dataset_files(const std::string& name) {
    if (name == "stl10")
        return {{"http://ai.stanford.edu/~acoates/stl10/stl10_binary.tar.gz", "stl10_binary.tar.gz",
                 "91f7769df0f17e558f3565bffb0c7dfb"}};
    if (name == "svhn")
        return {{"http://ufldl.stanford.edu/housenumbers/train_32x32.mat", "train_32x32.mat",
                 "e26dedcc434d2e4c54c9b2d4a06d8373"},
                {"http://ufldl.stanford.edu/housenumbers/test_32x32.mat", "test_32x32.mat",
                 "eb5a983be6a315427106f1b164d9cef3"},
                {"http://ufldl.stanford.edu/housenumbers/extra_32x32.mat", "extra_32x32.mat",
                 "a93ce644f1a588dc4d68dda5feec44a7"}};
    throw std::invalid_argument("unknown dataset '" + name + "' (expected stl10 or svhn)");
}

namespace detail {

inline std::size_t curl_write(char* data, std::size_t size, std::size_t n, void* user) {
    auto* out = static_cast<std::ofstream*>(user);
    out->write(data, static_cast<std::streamsize>(size * n));
    return out->good() ? size * n : 0;
}

inline void curl_global() {
    static const bool once = [] {
        curl_global_init(CURL_GLOBAL_DEFAULT);
        return true;
    }();
    (void)once;
}

inline void download(const std::string& url, const std::filesystem::path& dest) {
    curl_global();
    std::unique_ptr<CURL, decltype(&curl_easy_cleanup)> h(curl_easy_init(), curl_easy_cleanup);
    if (!h) throw FetchError("curl initialisation failed");
    std::ofstream out(dest, std::ios::binary | std::ios::trunc);
    if (!out) throw FetchError("cannot write " + dest.string());
    char err[CURL_ERROR_SIZE] = {0};
    curl_easy_setopt(h.get(), CURLOPT_URL, url.c_str());
    curl_easy_setopt(h.get(), CURLOPT_WRITEFUNCTION, &curl_write);
    curl_easy_setopt(h.get(), CURLOPT_WRITEDATA, &out);
    curl_easy_setopt(h.get(), CURLOPT_FOLLOWLOCATION, 1L);
    curl_easy_setopt(h.get(), CURLOPT_FAILONERROR, 1L);
    curl_easy_setopt(h.get(), CURLOPT_ERRORBUFFER, err);
    curl_easy_setopt(h.get(), CURLOPT_CONNECTTIMEOUT, 30L);
    const CURLcode rc = curl_easy_perform(h.get());
    out.close();
    if (rc != CURLE_OK)
        throw FetchError("download of " + url + " failed: " + (err[0] ? std::string(err) : curl_easy_strerror(rc)));
    if (!out) throw FetchError("write to " + dest.string() + " failed");
}

}  // namespace detail

/// Ensures every file is present in `dir` with its checksum. Present files are
/// verified, never re-downloaded; a mismatch is a ChecksumError.
inline void fetch_files(const std::vector<RemoteFile>& files, const std::filesystem::path& dir,
                        const FetchOptions& opt = {}) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    for (const auto& f : files) {
        const fs::path dest = dir / f.filename;
        if (fs::exists(dest)) {
            const std::string got = file_digest(dest, "MD5");
            if (got != f.md5)
                throw ChecksumError(dest.string() + ": md5 " + got + " does not match expected " + f.md5);
            if (opt.log) opt.log(dest.string() + " ok (cached)");
            continue;
        }
        const fs::path part = dest.string() + ".part";
        for (int attempt = 1;; ++attempt) {
            try {
                if (opt.log) opt.log("downloading " + f.url);
                detail::download(f.url, part);
                break;
            } catch (const FetchError&) {
                fs::remove(part);
                if (attempt >= opt.attempts) throw;
                std::this_thread::sleep_for(std::chrono::seconds(attempt));
            }
        }
        const std::string got = file_digest(part, "MD5");
        if (got != f.md5) {
            fs::remove(part);
            throw ChecksumError(f.url + ": md5 " + got + " does not match expected " + f.md5);
        }
        fs::rename(part, dest);
    }
}

/// Extracts regular files of a gzip-compressed ustar archive under `dir`.
inline void extract_tar_gz(const std::filesystem::path& archive, const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    std::unique_ptr<gzFile_s, decltype(&gzclose)> gz(gzopen(archive.string().c_str(), "rb"), gzclose);
    if (!gz) throw std::runtime_error("cannot open " + archive.string());
    auto read_exact = [&](char* buf, std::size_t n) {
        std::size_t got = 0;
        while (got < n) {
            const int k = gzread(gz.get(), buf + got, static_cast<unsigned>(std::min<std::size_t>(n - got, 1u << 30)));
            if (k <= 0) return false;
            got += static_cast<std::size_t>(k);
        }
        return true;
    };
    std::vector<char> block(512), buf(1 << 20);
    std::string long_name;
    while (read_exact(block.data(), 512)) {
        if (std::all_of(block.begin(), block.end(), [](char c) { return c == 0; })) break;
        auto field = [&](int off, int len) {
            std::string s(block.data() + off, len);
            return s.substr(0, s.find('\0'));
        };
        const std::size_t size = std::stoull("0" + field(124, 12), nullptr, 8);
        const char type = block[156];
        std::string name = field(0, 100);
        if (const std::string prefix = field(345, 155); !prefix.empty() && field(257, 5) == "ustar")
            name = prefix + "/" + name;
        if (!long_name.empty()) {
            name = long_name;
            long_name.clear();
        }
        const std::size_t padded_size = (size + 511) / 512 * 512;
        if (type == 'L') {
            std::string n(padded_size, '\0');
            if (!read_exact(n.data(), padded_size)) throw std::runtime_error("truncated archive " + archive.string());
            long_name = n.substr(0, n.find('\0'));
            continue;
        }
        const fs::path rel = fs::path(name).lexically_normal();
        if (rel.is_absolute() || (!rel.empty() && *rel.begin() == ".."))
            throw std::runtime_error("unsafe path in archive: " + name);
        if (type == '5') {
            fs::create_directories(dir / rel);
            continue;
        }
        std::ofstream out;
        const bool regular = type == '0' || type == '\0';
        if (regular) {
            fs::create_directories((dir / rel).parent_path());
            out.open(dir / rel, std::ios::binary | std::ios::trunc);
            if (!out) throw std::runtime_error("cannot write " + (dir / rel).string());
        }
        std::size_t left = padded_size, payload = size;
        while (left > 0) {
            const std::size_t k = std::min(left, buf.size());
            if (!read_exact(buf.data(), k)) throw std::runtime_error("truncated archive " + archive.string());
            if (regular) out.write(buf.data(), static_cast<std::streamsize>(std::min(k, payload)));
            payload -= std::min(k, payload);
            left -= k;
        }
    }
}

/// Downloads (or verifies) a dataset under root/<name> and unpacks it where
/// needed. Returns root/<name>.
inline std::filesystem::path fetch_dataset(const std::string& name, const std::filesystem::path& root,
                                           const FetchOptions& opt = {}) {
    namespace fs = std::filesystem;
    const fs::path dir = root / name;
    fetch_files(dataset_files(name), dir, opt);
    if (name == "stl10") {
        const fs::path stamp = dir / ".extracted";
        if (!fs::exists(stamp)) {
            if (opt.log) opt.log("extracting stl10_binary.tar.gz");
            extract_tar_gz(dir / "stl10_binary.tar.gz", dir);
            std::ofstream(stamp) << "ok\n";
        }
    }
    return dir;
}

}  // namespace percept
