#pragma once

// Serialized-weights container. All integers little-endian.
//
//   offset  size      field
//   0       8         magic "PCPTWTS1"
//   8       4 (u32)   entry count
//   then per entry:
//           4 (u32)   name length L
//           L         name (UTF-8, no terminator)
//           1 (u8)    dtype: 1 = float32, 2 = float64
//           1 (u8)    rank R
//           8*R (u64) dims, outermost first
//           ...       raw row-major values, prod(dims) * sizeof(dtype) bytes
//
// Entries keep file order. Readers look entries up by name, so unknown
// trailing entries are ignored.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "percept/hash.hpp"
#include "percept/nn/layers.hpp"
#include "percept/tensor.hpp"

namespace percept {

static_assert(std::endian::native == std::endian::little, "weights container assumes a little-endian host");

inline constexpr char kWeightsMagic[8] = {'P', 'C', 'P', 'T', 'W', 'T', 'S', '1'};

enum class DType : std::uint8_t { f32 = 1, f64 = 2 };

struct WeightEntry {
    std::string name;
    DType dtype = DType::f32;
    std::vector<int> shape;
    std::vector<double> values;

    template <typename T>
    Tensor<T> as_tensor() const {
        return Tensor<T>(shape, std::vector<T>(values.begin(), values.end()));
    }
};

class WeightsError : public std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct WeightsFile {
    std::vector<WeightEntry> entries;

    const WeightEntry* find(const std::string& name) const {
        for (const auto& e : entries)
            if (e.name == name) return &e;
        return nullptr;
    }

    template <typename T>
    void add(const std::string& name, const Tensor<T>& t) {
        WeightEntry e;
        e.name = name;
        e.dtype = sizeof(T) == 4 ? DType::f32 : DType::f64;
        e.shape = t.shape();
        e.values.assign(t.vec().begin(), t.vec().end());
        entries.push_back(std::move(e));
    }
};

namespace detail {
template <typename U>
void put(std::ostream& os, U v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(U));
}
template <typename U>
U get(std::istream& is, const std::string& path) {
    U v{};
    if (!is.read(reinterpret_cast<char*>(&v), sizeof(U))) throw WeightsError(path + ": truncated weights file");
    return v;
}
}  // namespace detail

inline void write_weights(const std::filesystem::path& path, const WeightsFile& file) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw WeightsError("cannot write " + path.string());
    os.write(kWeightsMagic, 8);
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(file.entries.size()));
    for (const auto& e : file.entries) {
        detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(e.name.size()));
        os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
        detail::put<std::uint8_t>(os, static_cast<std::uint8_t>(e.dtype));
        detail::put<std::uint8_t>(os, static_cast<std::uint8_t>(e.shape.size()));
        for (int d : e.shape) detail::put<std::uint64_t>(os, static_cast<std::uint64_t>(d));
        for (double v : e.values) {
            if (e.dtype == DType::f32) detail::put<float>(os, static_cast<float>(v));
            else detail::put<double>(os, v);
        }
    }
    if (!os) throw WeightsError("write failed: " + path.string());
}

inline WeightsFile read_weights(const std::filesystem::path& path) {
    const std::string p = path.string();
    std::ifstream is(path, std::ios::binary);
    if (!is) throw WeightsError("cannot open weights file " + p);
    char magic[8];
    if (!is.read(magic, 8) || std::memcmp(magic, kWeightsMagic, 8) != 0)
        throw WeightsError(p + ": bad magic, not a weights container");
    WeightsFile f;
    const auto count = detail::get<std::uint32_t>(is, p);
    for (std::uint32_t i = 0; i < count; ++i) {
        WeightEntry e;
        const auto len = detail::get<std::uint32_t>(is, p);
        if (len > 4096) throw WeightsError(p + ": implausible entry name length");
        e.name.resize(len);
        if (!is.read(e.name.data(), len)) throw WeightsError(p + ": truncated weights file");
        const auto dt = detail::get<std::uint8_t>(is, p);
        if (dt != 1 && dt != 2) throw WeightsError(p + ": unknown dtype in entry " + e.name);
        e.dtype = static_cast<DType>(dt);
        const auto rank = detail::get<std::uint8_t>(is, p);
        std::uint64_t n = 1;
        for (int r = 0; r < rank; ++r) {
            const auto d = detail::get<std::uint64_t>(is, p);
            e.shape.push_back(static_cast<int>(d));
            n *= d;
        }
        e.values.resize(n);
        for (auto& v : e.values)
            v = e.dtype == DType::f32 ? detail::get<float>(is, p) : detail::get<double>(is, p);
        f.entries.push_back(std::move(e));
    }
    return f;
}

/// Copies a stored entry into `dst`, requiring an exact shape match.
template <typename T>
void assign_entry(const WeightsFile& file, const std::string& name, Tensor<T>& dst, const std::string& origin) {
    const WeightEntry* e = file.find(name);
    if (e == nullptr) throw WeightsError(origin + ": missing entry '" + name + "'");
    if (e->shape != dst.shape()) {
        throw WeightsError(origin + ": entry '" + name + "' expected shape " + Tensor<T>::shape_string(dst.shape()) +
                           ", found " + Tensor<T>::shape_string(e->shape));
    }
    std::copy(e->values.begin(), e->values.end(), dst.vec().begin());
}

/// SHA-256 over parameter names and raw bytes.
template <typename T>
std::string hash_params(const std::vector<nn::Param<T>>& params) {
    Digest d;
    for (const auto& p : params) {
        d.update(p.name);
        d.update(std::span<const T>(p.value->vec()));
    }
    return d.hex();
}

template <typename T>
WeightsFile to_weights(const std::vector<nn::Param<T>>& params) {
    WeightsFile f;
    for (const auto& p : params) f.add(p.name, *p.value);
    return f;
}

template <typename T>
void load_params(const WeightsFile& f, std::vector<nn::Param<T>>& params, const std::string& origin) {
    for (auto& p : params) assign_entry(f, p.name, *p.value, origin);
}

}  // namespace percept
