#pragma once

#include <algorithm>
#include <cstddef>
#include <initializer_list>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace percept {

/// 64-byte aligned storage, so vectorised reductions split identically
/// regardless of where the heap places a buffer.
template <typename T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t alignment{64};

    AlignedAllocator() noexcept = default;
    template <typename U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, alignment); }

    template <typename U>
    bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

template <typename T>
using aligned_vector = std::vector<T, AlignedAllocator<T>>;

/// Dense row-major array with up to four dimensions (N, C, H, W).
template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    explicit Tensor(std::vector<int> shape, T fill = T(0))
        : shape_(std::move(shape)), data_(count(shape_), fill) {}

    Tensor(std::initializer_list<int> shape, T fill = T(0))
        : Tensor(std::vector<int>(shape), fill) {}

    Tensor(std::vector<int> shape, const std::vector<T>& data) : Tensor(std::move(shape), aligned_vector<T>(data.begin(), data.end())) {}

    Tensor(std::vector<int> shape, aligned_vector<T> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != count(shape_)) {
            throw std::invalid_argument("Tensor: data size " + std::to_string(data_.size()) +
                                        " does not match shape " + shape_string(shape_));
        }
    }

    static std::size_t count(const std::vector<int>& shape) {
        std::size_t n = 1;
        for (int d : shape) {
            if (d < 0) throw std::invalid_argument("Tensor: negative dimension");
            n *= static_cast<std::size_t>(d);
        }
        return n;
    }

    static std::string shape_string(const std::vector<int>& shape) {
        std::ostringstream os;
        os << '[';
        for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
        os << ']';
        return os.str();
    }

    const std::vector<int>& shape() const noexcept { return shape_; }
    int dim(std::size_t i) const { return shape_.at(i); }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    T* data() noexcept { return data_.data(); }
    const T* data() const noexcept { return data_.data(); }
    aligned_vector<T>& vec() noexcept { return data_; }
    const aligned_vector<T>& vec() const noexcept { return data_; }
    std::span<T> span() noexcept { return data_; }
    std::span<const T> span() const noexcept { return data_; }

    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }

    T& at(int n, int c, int h, int w) {
        return data_[((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }
    const T& at(int n, int c, int h, int w) const {
        return data_[((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }

    /// Number of elements per leading-axis entry.
    std::size_t stride0() const { return shape_.empty() || shape_[0] == 0 ? 0 : data_.size() / shape_[0]; }

    std::span<T> slice(int n) { return {data_.data() + n * stride0(), stride0()}; }
    std::span<const T> slice(int n) const { return {data_.data() + n * stride0(), stride0()}; }

    void reshape(std::vector<int> shape) {
        if (count(shape) != data_.size()) {
            throw std::invalid_argument("Tensor::reshape: " + shape_string(shape_) + " -> " +
                                        shape_string(shape));
        }
        shape_ = std::move(shape);
    }

    Tensor reshaped(std::vector<int> shape) const {
        Tensor t = *this;
        t.reshape(std::move(shape));
        return t;
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    template <typename U>
    Tensor<U> cast() const {
        return Tensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
    }

    T sum() const { return std::accumulate(data_.begin(), data_.end(), T(0)); }

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    std::vector<int> shape_;
    aligned_vector<T> data_;
};

inline void require_same_shape(const std::vector<int>& a, const std::vector<int>& b, const char* what) {
    if (a != b) {
        throw std::invalid_argument(std::string(what) + ": shape mismatch " +
                                    Tensor<float>::shape_string(a) + " vs " +
                                    Tensor<float>::shape_string(b));
    }
}

}  // namespace percept
