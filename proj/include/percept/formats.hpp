#pragma once

// Readers for the distributed STL-10 and SVHN binary formats.
//
// STL-10 (stl10_binary/*.bin): raw uint8, 3x96x96 per image, each channel
// stored column-major; *_y.bin holds one uint8 label in 1..10 per image.
//
// SVHN (*_32x32.mat): MATLAB level-5 MAT files holding X (32x32x3xN uint8,
// column-major) and y (Nx1, label 10 means digit 0). Variables may be wrapped
// in zlib-compressed elements. X is streamed into a raw cache file next to
// the .mat so that the image data can be memory-mapped.

#include <fcntl.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <unistd.h>
#include <zlib.h>

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "percept/datasets.hpp"

namespace percept {

class IngestError : public std::runtime_error {
public:
    IngestError(const std::filesystem::path& file, const std::string& what)
        : std::runtime_error(file.string() + ": " + what), file_(file) {}
    const std::filesystem::path& file() const { return file_; }

private:
    std::filesystem::path file_;
};

/// Read-only memory map of a whole file.
class MappedFile {
public:
    explicit MappedFile(const std::filesystem::path& path) : path_(path) {
        fd_ = ::open(path.c_str(), O_RDONLY);
        if (fd_ < 0) throw IngestError(path, "cannot open");
        struct stat st {};
        if (::fstat(fd_, &st) != 0) {
            ::close(fd_);
            throw IngestError(path, "cannot stat");
        }
        size_ = static_cast<std::size_t>(st.st_size);
        if (size_ > 0) {
            void* p = ::mmap(nullptr, size_, PROT_READ, MAP_PRIVATE, fd_, 0);
            if (p == MAP_FAILED) {
                ::close(fd_);
                throw IngestError(path, "mmap failed");
            }
            data_ = static_cast<const std::uint8_t*>(p);
        }
    }
    MappedFile(const MappedFile&) = delete;
    MappedFile& operator=(const MappedFile&) = delete;
    ~MappedFile() {
        if (data_ != nullptr) ::munmap(const_cast<std::uint8_t*>(data_), size_);
        if (fd_ >= 0) ::close(fd_);
    }

    std::span<const std::uint8_t> bytes() const { return {data_, size_}; }
    std::size_t size() const { return size_; }
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
    int fd_ = -1;
    const std::uint8_t* data_ = nullptr;
    std::size_t size_ = 0;
};

/// Storage order of one image's bytes.
enum class ByteLayout {
    chw_row_major,     // [c][row][col]
    chw_column_major,  // [c][col][row]  (STL-10, MATLAB)
};

/// Images stored as consecutive uint8 records, scaled by 1/255 on read.
/// With `tile2x2` each stored image is emitted as a 2x2 grid of copies.
class ByteImageSource final : public SampleSource {
public:
    using Storage = std::shared_ptr<const void>;

    ByteImageSource(Storage owner, std::span<const std::uint8_t> bytes, int stored_side, ByteLayout layout,
                    std::vector<Label> labels, std::vector<std::int64_t> groups = {}, bool tile2x2 = false)
        : owner_(std::move(owner)), bytes_(bytes), side_(stored_side), layout_(layout), labels_(std::move(labels)),
          groups_(std::move(groups)), tile_(tile2x2) {
        const std::size_t rec = record_size();
        if (rec == 0 || bytes_.size() % rec != 0) throw std::invalid_argument("ByteImageSource: partial record");
        count_ = bytes_.size() / rec;
        if (!labels_.empty() && labels_.size() != count_)
            throw std::invalid_argument("ByteImageSource: label count does not match image count");
        if (!groups_.empty() && groups_.size() != count_)
            throw std::invalid_argument("ByteImageSource: group count does not match image count");
    }

    std::size_t record_size() const { return 3ull * side_ * side_; }
    std::size_t size() const override { return count_; }
    int side() const override { return tile_ ? 2 * side_ : side_; }

    void read_image(std::size_t i, std::span<float> out) const override {
        const std::uint8_t* rec = bytes_.data() + i * record_size();
        const int s = side_;
        const int os = side();
        for (int c = 0; c < 3; ++c)
            for (int r = 0; r < os; ++r)
                for (int col = 0; col < os; ++col) {
                    const int sr = r % s, sc = col % s;
                    const std::size_t src = layout_ == ByteLayout::chw_row_major
                                                ? (static_cast<std::size_t>(c) * s + sr) * s + sc
                                                : (static_cast<std::size_t>(c) * s + sc) * s + sr;
                    out[(static_cast<std::size_t>(c) * os + r) * os + col] = static_cast<float>(rec[src]) / 255.0f;
                }
    }

    std::optional<Label> label(std::size_t i) const override {
        if (labels_.empty()) return std::nullopt;
        return labels_[i];
    }

    std::int64_t group(std::size_t i) const override {
        return groups_.empty() ? static_cast<std::int64_t>(i) : groups_[i];
    }

private:
    Storage owner_;
    std::span<const std::uint8_t> bytes_;
    int side_;
    ByteLayout layout_;
    std::vector<Label> labels_;
    std::vector<std::int64_t> groups_;
    bool tile_;
    std::size_t count_ = 0;
};

// ---------------------------------------------------------------- STL-10

inline constexpr int kStl10Side = 96;

inline std::vector<Label> read_class_labels(const std::filesystem::path& file, int num_classes, int first_label,
                                            std::optional<int> remap_from = std::nullopt) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw IngestError(file, "missing label file");
    std::vector<Label> labels;
    char b;
    while (in.get(b)) {
        int v = static_cast<std::uint8_t>(b);
        if (remap_from && v == *remap_from) v = first_label;
        const int cls = v - first_label;
        if (cls < 0 || cls >= num_classes) throw IngestError(file, "label " + std::to_string(v) + " out of range");
        labels.emplace_back(ClassId{cls});
    }
    return labels;
}

inline std::shared_ptr<const SampleSource> open_stl10_images(const std::filesystem::path& x_file,
                                                             const std::optional<std::filesystem::path>& y_file) {
    if (!std::filesystem::exists(x_file)) throw IngestError(x_file, "missing image file");
    auto map = std::make_shared<MappedFile>(x_file);
    const std::size_t rec = 3ull * kStl10Side * kStl10Side;
    if (map->size() == 0 || map->size() % rec != 0)
        throw IngestError(x_file, "size " + std::to_string(map->size()) + " is not a multiple of " +
                                      std::to_string(rec) + " (corrupt or truncated)");
    std::vector<Label> labels;
    if (y_file) {
        labels = read_class_labels(*y_file, 10, 1);
        if (labels.size() != map->size() / rec)
            throw IngestError(*y_file, std::to_string(labels.size()) + " labels for " +
                                           std::to_string(map->size() / rec) + " images");
    }
    auto bytes = map->bytes();
    return std::make_shared<ByteImageSource>(map, bytes, kStl10Side, ByteLayout::chw_column_major,
                                             std::move(labels));
}

// ---------------------------------------------------------------- MAT v5

namespace mat {

enum : std::uint32_t {
    miINT8 = 1, miUINT8 = 2, miINT16 = 3, miUINT16 = 4, miINT32 = 5, miUINT32 = 6,
    miSINGLE = 7, miDOUBLE = 9, miINT64 = 12, miUINT64 = 13, miMATRIX = 14, miCOMPRESSED = 15,
};

/// Sequential byte reader over a file region or a zlib stream.
class Reader {
public:
    virtual ~Reader() = default;
    /// Reads exactly n bytes or throws.
    virtual void read(void* dst, std::size_t n) = 0;

    void skip(std::size_t n) {
        std::array<char, 4096> buf{};
        while (n > 0) {
            const std::size_t k = std::min(n, buf.size());
            read(buf.data(), k);
            n -= k;
        }
    }
    template <typename U>
    U get() {
        U v{};
        read(&v, sizeof(U));
        return v;
    }
};

class FileReader final : public Reader {
public:
    FileReader(std::ifstream& in, const std::filesystem::path& path) : in_(in), path_(path) {}
    void read(void* dst, std::size_t n) override {
        if (!in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n)))
            throw IngestError(path_, "unexpected end of file");
    }

private:
    std::ifstream& in_;
    std::filesystem::path path_;
};

/// Inflates `compressed_size` bytes from the underlying file on demand.
class InflateReader final : public Reader {
public:
    InflateReader(std::ifstream& in, std::size_t compressed_size, const std::filesystem::path& path)
        : in_(in), remaining_(compressed_size), path_(path) {
        std::memset(&zs_, 0, sizeof(zs_));
        if (inflateInit(&zs_) != Z_OK) throw IngestError(path, "zlib init failed");
    }
    ~InflateReader() override { inflateEnd(&zs_); }

    void read(void* dst, std::size_t n) override {
        zs_.next_out = static_cast<Bytef*>(dst);
        while (n > 0) {
            const std::size_t chunk = std::min<std::size_t>(n, 1u << 30);
            zs_.avail_out = static_cast<uInt>(chunk);
            while (zs_.avail_out > 0) {
                if (zs_.avail_in == 0) {
                    if (remaining_ == 0) throw IngestError(path_, "compressed element ended early (corrupt)");
                    const std::size_t k = std::min(remaining_, inbuf_.size());
                    if (!in_.read(reinterpret_cast<char*>(inbuf_.data()), static_cast<std::streamsize>(k)))
                        throw IngestError(path_, "unexpected end of file in compressed element");
                    remaining_ -= k;
                    zs_.next_in = inbuf_.data();
                    zs_.avail_in = static_cast<uInt>(k);
                }
                const int rc = inflate(&zs_, Z_NO_FLUSH);
                if (rc == Z_STREAM_END && zs_.avail_out > 0)
                    throw IngestError(path_, "compressed element shorter than declared contents");
                if (rc != Z_OK && rc != Z_STREAM_END) throw IngestError(path_, "zlib inflate error (corrupt data)");
            }
            n -= chunk;
        }
    }

    /// Skips any unread compressed input belonging to this element.
    void finish() {
        if (remaining_ > 0) in_.seekg(static_cast<std::streamoff>(remaining_), std::ios::cur);
        remaining_ = 0;
    }

private:
    std::ifstream& in_;
    std::size_t remaining_;
    std::filesystem::path path_;
    z_stream zs_{};
    std::array<Bytef, 1 << 16> inbuf_{};
};

struct Tag {
    std::uint32_t type = 0;
    std::uint32_t bytes = 0;
    bool small = false;
    std::array<std::uint8_t, 4> inline_data{};
};

inline Tag read_tag(Reader& r) {
    Tag t;
    const auto w0 = r.get<std::uint32_t>();
    if ((w0 >> 16) != 0) {
        t.small = true;
        t.type = w0 & 0xffff;
        t.bytes = w0 >> 16;
        r.read(t.inline_data.data(), 4);
    } else {
        t.type = w0;
        t.bytes = r.get<std::uint32_t>();
    }
    return t;
}

inline std::size_t padded(std::size_t n) { return (n + 7) & ~std::size_t{7}; }

inline std::size_t type_size(std::uint32_t t) {
    switch (t) {
        case miINT8: case miUINT8: return 1;
        case miINT16: case miUINT16: return 2;
        case miINT32: case miUINT32: case miSINGLE: return 4;
        case miDOUBLE: case miINT64: case miUINT64: return 8;
        default: return 0;
    }
}

inline double decode_number(const std::uint8_t* p, std::uint32_t type) {
    switch (type) {
        case miINT8: return static_cast<std::int8_t>(*p);
        case miUINT8: return *p;
        case miINT16: { std::int16_t v; std::memcpy(&v, p, 2); return v; }
        case miUINT16: { std::uint16_t v; std::memcpy(&v, p, 2); return v; }
        case miINT32: { std::int32_t v; std::memcpy(&v, p, 4); return v; }
        case miUINT32: { std::uint32_t v; std::memcpy(&v, p, 4); return v; }
        case miSINGLE: { float v; std::memcpy(&v, p, 4); return v; }
        case miDOUBLE: { double v; std::memcpy(&v, p, 8); return v; }
        case miINT64: { std::int64_t v; std::memcpy(&v, p, 8); return static_cast<double>(v); }
        case miUINT64: { std::uint64_t v; std::memcpy(&v, p, 8); return static_cast<double>(v); }
        default: return 0;
    }
}

/// A parsed numeric matrix header; the real-part payload is handed to a sink.
struct MatrixInfo {
    std::string name;
    std::vector<std::int64_t> dims;
    std::uint32_t data_type = 0;
    std::size_t data_bytes = 0;
};

/// Visitor called for each numeric variable with the payload positioned at the
/// real part; it must consume exactly `info.data_bytes` bytes.
using MatrixSink = std::function<void(const MatrixInfo&, Reader&)>;

inline void read_small_or_block(Reader& r, const Tag& t, std::vector<std::uint8_t>& out) {
    out.resize(t.bytes);
    if (t.small) std::memcpy(out.data(), t.inline_data.data(), t.bytes);
    else {
        r.read(out.data(), t.bytes);
        r.skip(padded(t.bytes) - t.bytes);
    }
}

inline void parse_matrix(Reader& r, std::size_t total_bytes, const MatrixSink& sink,
                         const std::filesystem::path& path) {
    std::vector<std::uint8_t> buf;
    std::size_t consumed = 0;
    auto sub = [&](std::vector<std::uint8_t>& out) {
        const Tag t = read_tag(r);
        read_small_or_block(r, t, out);
        consumed += t.small ? 8 : 8 + padded(t.bytes);
        return t;
    };
    sub(buf);  // array flags
    if (buf.size() < 8) throw IngestError(path, "bad array flags");
    const std::uint8_t cls = buf[0];
    std::vector<std::uint8_t> dims_raw;
    const Tag dt = sub(dims_raw);
    if (dt.type != miINT32) throw IngestError(path, "bad dimensions element");
    MatrixInfo info;
    for (std::size_t i = 0; i + 4 <= dims_raw.size(); i += 4) {
        std::int32_t d;
        std::memcpy(&d, dims_raw.data() + i, 4);
        info.dims.push_back(d);
    }
    std::vector<std::uint8_t> name_raw;
    sub(name_raw);
    info.name.assign(name_raw.begin(), name_raw.end());
    constexpr std::uint8_t mxCELL = 1, mxSTRUCT = 2, mxCHAR = 4, mxSPARSE = 5;
    if (cls == mxCELL || cls == mxSTRUCT || cls == mxCHAR || cls == mxSPARSE) {
        r.skip(total_bytes - consumed);
        return;
    }
    const Tag real = read_tag(r);
    consumed += 8;
    info.data_type = real.type;
    info.data_bytes = real.bytes;
    if (type_size(real.type) == 0) throw IngestError(path, "unsupported numeric type in " + info.name);
    if (real.small) {
        struct Inline final : Reader {
            const std::uint8_t* p;
            std::size_t left;
            const std::filesystem::path& path;
            Inline(const std::uint8_t* d, std::size_t n, const std::filesystem::path& pp) : p(d), left(n), path(pp) {}
            void read(void* dst, std::size_t n) override {
                if (n > left) throw IngestError(path, "inline element overrun");
                std::memcpy(dst, p, n);
                p += n;
                left -= n;
            }
        } inl(real.inline_data.data(), real.bytes, path);
        sink(info, inl);
    } else {
        sink(info, r);
        r.skip(padded(real.bytes) - real.bytes);
        consumed += padded(real.bytes);
    }
    if (consumed < total_bytes) r.skip(total_bytes - consumed);  // imaginary part etc.
}

/// Walks every top-level variable of a level-5 MAT file.
inline void for_each_variable(const std::filesystem::path& path, const MatrixSink& sink) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IngestError(path, "missing file");
    std::array<char, 128> header{};
    if (!in.read(header.data(), 128)) throw IngestError(path, "truncated MAT header");
    if (header[126] != 'I' || header[127] != 'M') throw IngestError(path, "not a little-endian level-5 MAT file");
    FileReader fr(in, path);
    while (in.peek() != std::char_traits<char>::eof()) {
        const Tag t = read_tag(fr);
        if (t.type == miCOMPRESSED) {
            InflateReader zr(in, t.bytes, path);
            const Tag inner = read_tag(zr);
            if (inner.type == miMATRIX) parse_matrix(zr, inner.bytes, sink, path);
            zr.finish();
        } else if (t.type == miMATRIX) {
            parse_matrix(fr, t.bytes, sink, path);
            fr.skip(padded(t.bytes) - t.bytes);
        } else {
            fr.skip(padded(t.bytes));
        }
    }
}

}  // namespace mat

// ---------------------------------------------------------------- SVHN

inline constexpr int kSvhnSide = 32;

/// Loads one SVHN split (.mat). X is cached as raw bytes in `cache_dir`
/// (default: alongside the .mat) and memory-mapped; images are served tiled to 64x64.
inline std::shared_ptr<const SampleSource> open_svhn_split(const std::filesystem::path& mat_file,
                                                           std::optional<std::filesystem::path> cache_dir = {}) {
    namespace fs = std::filesystem;
    if (!fs::exists(mat_file)) throw IngestError(mat_file, "missing file");
    const fs::path dir = cache_dir.value_or(mat_file.parent_path());
    fs::create_directories(dir);
    const fs::path cache = dir / (mat_file.stem().string() + ".X.u8");
    std::vector<Label> labels;
    std::optional<std::size_t> n_images;
    const bool have_cache = fs::exists(cache);
    const fs::path tmp = cache.string() + ".tmp";

    mat::for_each_variable(mat_file, [&](const mat::MatrixInfo& info, mat::Reader& r) {
        const std::size_t tsize = mat::type_size(info.data_type);
        if (info.name == "X") {
            if (info.dims.size() != 4 || info.dims[0] != kSvhnSide || info.dims[1] != kSvhnSide || info.dims[2] != 3)
                throw IngestError(mat_file, "X must be 32x32x3xN");
            if (info.data_type != mat::miUINT8) throw IngestError(mat_file, "X must hold uint8 data");
            n_images = static_cast<std::size_t>(info.dims[3]);
            if (info.data_bytes != *n_images * 3072) throw IngestError(mat_file, "X payload size mismatch");
            if (have_cache && fs::file_size(cache) == info.data_bytes) {
                r.skip(info.data_bytes);
                return;
            }
            std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
            std::vector<char> buf(1 << 20);
            std::size_t left = info.data_bytes;
            while (left > 0) {
                const std::size_t k = std::min(left, buf.size());
                r.read(buf.data(), k);
                out.write(buf.data(), static_cast<std::streamsize>(k));
                left -= k;
            }
            out.close();
            if (!out) throw IngestError(cache, "cannot write cache");
            fs::rename(tmp, cache);
        } else if (info.name == "y") {
            std::vector<std::uint8_t> raw(info.data_bytes);
            r.read(raw.data(), raw.size());
            for (std::size_t i = 0; i + tsize <= raw.size(); i += tsize) {
                int v = static_cast<int>(mat::decode_number(raw.data() + i, info.data_type));
                if (v == 10) v = 0;
                if (v < 0 || v > 9) throw IngestError(mat_file, "label " + std::to_string(v) + " out of range");
                labels.emplace_back(ClassId{v});
            }
        } else {
            r.skip(info.data_bytes);
        }
    });
    if (!n_images) throw IngestError(mat_file, "variable X not found");
    if (labels.size() != *n_images)
        throw IngestError(mat_file, std::to_string(labels.size()) + " labels for " + std::to_string(*n_images) + " images");
    auto map = std::make_shared<MappedFile>(cache);
    auto bytes = map->bytes();
    if (bytes.size() != *n_images * 3072) throw IngestError(cache, "cache size mismatch");
    return std::make_shared<ByteImageSource>(map, bytes, kSvhnSide, ByteLayout::chw_column_major, std::move(labels),
                                             std::vector<std::int64_t>{}, true);
}

// ---------------------------------------------------------------- bundles

/// Optional per-part sample caps for reduced runs (0 = everything).
struct PartLimits {
    std::size_t autoencoder = 0;
    std::size_t predictor = 0;
    std::size_t test = 0;
};

/// STL-10: unlabeled -> autoencoder part, train -> predictor part, test -> test.
/// SVHN: extra -> autoencoder part, train -> predictor part, test -> test, tiled to 64x64.
/// Expects the layout produced by fetch_dataset under root/<name>.
inline DatasetBundle load_classification_dataset(const std::string& name, const std::filesystem::path& root,
                                                 std::uint64_t seed = 0, const PartLimits& limits = {}) {
    std::shared_ptr<const SampleSource> ae, pred, test;
    if (name == "stl10") {
        const auto dir = root / "stl10" / "stl10_binary";
        ae = open_stl10_images(dir / "unlabeled_X.bin", std::nullopt);
        pred = open_stl10_images(dir / "train_X.bin", dir / "train_y.bin");
        test = open_stl10_images(dir / "test_X.bin", dir / "test_y.bin");
    } else if (name == "svhn") {
        const auto dir = root / "svhn";
        ae = open_svhn_split(dir / "extra_32x32.mat");
        pred = open_svhn_split(dir / "train_32x32.mat");
        test = open_svhn_split(dir / "test_32x32.mat");
    } else {
        throw std::invalid_argument("unknown classification dataset '" + name + "' (expected stl10 or svhn)");
    }
    ae = limit_source(ae, limits.autoencoder, derive_seed(seed, 0x11a));
    pred = limit_source(pred, limits.predictor, derive_seed(seed, 0x11b));
    test = limit_source(test, limits.test, derive_seed(seed, 0x11c));
    return DatasetBundle(name, TaskKind::classification, 10, make_part(ae, derive_seed(seed, 0xae)),
                         make_part(pred, derive_seed(seed, 0x9d)), test);
}

}  // namespace percept
