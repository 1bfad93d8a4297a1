#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "percept/nn/layers.hpp"
#include "percept/rng.hpp"
#include "percept/tensor.hpp"
#include "percept/weights_io.hpp"

namespace percept {

/// How images in [0,1] are prepared before entering the extractor.
enum class InputNorm {
    raw01,           // fed unchanged
    imagenet_stats,  // per-channel (x - mean) / std with the ImageNet statistics
};

inline const char* to_string(InputNorm n) { return n == InputNorm::raw01 ? "raw01" : "imagenet_stats"; }

inline InputNorm parse_input_norm(const std::string& s) {
    if (s == "raw01") return InputNorm::raw01;
    if (s == "imagenet_stats") return InputNorm::imagenet_stats;
    throw std::invalid_argument("unknown input normalization '" + s + "' (raw01 | imagenet_stats)");
}

inline constexpr double kImagenetMean[3] = {0.485, 0.456, 0.406};
inline constexpr double kImagenetStd[3] = {0.229, 0.224, 0.225};

/// Channel widths of the kept AlexNet prefix. The defaults are the real network;
/// narrower widths exist only for fast gradient tests.
struct ExtractorTopology {
    int conv1_channels = 64;
    int conv2_channels = 192;
};

template <typename T>
struct ExtractorTape {
    Tensor<T> input;    // normalized input
    Tensor<T> conv1;    // rectified conv1 output
    std::vector<std::int32_t> pool_argmax;
    Tensor<T> pooled;
    Tensor<T> features; // sigmoid(rectified conv2)
    Tensor<T> conv2_relu;
};

/// Frozen prefix of AlexNet: conv(64,k11,s4,p2) -> ReLU -> maxpool(k3,s2)
/// -> conv(192,k5,s1,p2) -> ReLU -> sigmoid. Immutable after construction.
template <typename T>
class PerceptualExtractor {
public:
    PerceptualExtractor(ExtractorTopology topo, std::string source)
        : topo_(topo), source_(std::move(source)), conv1_(3, topo.conv1_channels, 11, 4, 2),
          conv2_(topo.conv1_channels, topo.conv2_channels, 5, 1, 2) {}

    static int feature_side(int input_side) {
        const int c1 = nn::conv_out_size(input_side, 11, 4, 2);
        const int p = nn::conv_out_size(c1, 3, 2, 0);
        return nn::conv_out_size(p, 5, 1, 2);
    }

    const std::string& source() const { return source_; }
    const ExtractorTopology& topology() const { return topo_; }
    int conv_count() const { return 2; }
    const nn::Conv2d<T>& conv1() const { return conv1_; }
    const nn::Conv2d<T>& conv2() const { return conv2_; }

    std::vector<int> feature_shape(int input_side) const {
        const int s = feature_side(input_side);
        return {topo_.conv2_channels, s, s};
    }

    ExtractorTape<T> forward_tape(const Tensor<T>& x, InputNorm norm) const {
        nn::check_input(x, 3, "PerceptualExtractor");
        ExtractorTape<T> t;
        t.input = normalize(x, norm);
        t.conv1 = nn::relu(conv1_.forward(t.input));
        auto pooled = nn::maxpool2d_forward(t.conv1, 3, 2);
        t.pooled = std::move(pooled.output);
        t.pool_argmax = std::move(pooled.argmax);
        t.conv2_relu = nn::relu(conv2_.forward(t.pooled));
        t.features = nn::sigmoid(t.conv2_relu);
        return t;
    }

    Tensor<T> forward(const Tensor<T>& x, InputNorm norm) const { return forward_tape(x, norm).features; }

    /// dL/dx for dL/dfeatures; the weights receive no gradient.
    Tensor<T> backward_input(const ExtractorTape<T>& t, const Tensor<T>& dfeatures, InputNorm norm) const {
        Tensor<T> d = nn::sigmoid_backward(t.features, dfeatures);
        d = nn::relu_backward(t.conv2_relu, std::move(d));
        d = conv2_.backward_input(t.pooled.shape(), d);
        d = nn::maxpool2d_backward(t.conv1.shape(), t.pool_argmax, d);
        d = nn::relu_backward(t.conv1, std::move(d));
        d = conv1_.backward_input(t.input.shape(), d);
        if (norm == InputNorm::imagenet_stats) {
            const std::size_t plane = static_cast<std::size_t>(d.dim(2)) * d.dim(3);
            for (int n = 0; n < d.dim(0); ++n)
                for (int c = 0; c < 3; ++c) {
                    T* p = d.data() + (static_cast<std::size_t>(n) * 3 + c) * plane;
                    for (std::size_t i = 0; i < plane; ++i) p[i] /= static_cast<T>(kImagenetStd[c]);
                }
        }
        return d;
    }

    std::vector<nn::Param<T>> params() const {
        std::vector<nn::Param<T>> p;
        auto* self = const_cast<PerceptualExtractor*>(this);
        self->conv1_.params(p, "conv1");
        self->conv2_.params(p, "conv2");
        // Gradient slots are never written by this class; expose values only.
        for (auto& q : p) q.grad = nullptr;
        return p;
    }

    std::string weights_hash() const { return hash_params(params()); }

    template <typename U>
    PerceptualExtractor<U> cast() const {
        PerceptualExtractor<U> out(topo_, source_);
        out.set_weights(conv1_.weight().template cast<U>(), conv1_.bias().template cast<U>(),
                        conv2_.weight().template cast<U>(), conv2_.bias().template cast<U>());
        return out;
    }

    void set_weights(Tensor<T> w1, Tensor<T> b1, Tensor<T> w2, Tensor<T> b2) {
        require_same_shape(w1.shape(), conv1_.weight().shape(), "conv1.weight");
        require_same_shape(b1.shape(), conv1_.bias().shape(), "conv1.bias");
        require_same_shape(w2.shape(), conv2_.weight().shape(), "conv2.weight");
        require_same_shape(b2.shape(), conv2_.bias().shape(), "conv2.bias");
        conv1_.weight() = std::move(w1);
        conv1_.bias() = std::move(b1);
        conv2_.weight() = std::move(w2);
        conv2_.bias() = std::move(b2);
    }

    nn::Conv2d<T>& mutable_conv1() { return conv1_; }
    nn::Conv2d<T>& mutable_conv2() { return conv2_; }

private:
    static Tensor<T> normalize(const Tensor<T>& x, InputNorm norm) {
        if (norm == InputNorm::raw01) return x;
        Tensor<T> y = x;
        const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
        for (int n = 0; n < x.dim(0); ++n)
            for (int c = 0; c < 3; ++c) {
                T* p = y.data() + (static_cast<std::size_t>(n) * 3 + c) * plane;
                for (std::size_t i = 0; i < plane; ++i)
                    p[i] = (p[i] - static_cast<T>(kImagenetMean[c])) / static_cast<T>(kImagenetStd[c]);
            }
        return y;
    }

    ExtractorTopology topo_;
    std::string source_;
    nn::Conv2d<T> conv1_, conv2_;
};

/// Same topology with fan-in-scaled uniform weights; deterministic per seed.
template <typename T = float>
PerceptualExtractor<T> random_extractor(std::uint64_t seed, ExtractorTopology topo = {}) {
    PerceptualExtractor<T> p(topo, "seeded_random(" + std::to_string(seed) + ")");
    Rng rng(derive_seed(seed, 0xa1e7));
    p.mutable_conv1().init(rng);
    p.mutable_conv2().init(rng);
    return p;
}

/// Loads the kept prefix from a weights container holding entries
/// conv1.weight [64,3,11,11], conv1.bias [64], conv2.weight [192,64,5,5],
/// conv2.bias [192]. Any further entries are ignored.
template <typename T = float>
PerceptualExtractor<T> load_extractor(const std::filesystem::path& weights_file) {
    const WeightsFile f = read_weights(weights_file);
    PerceptualExtractor<T> p(ExtractorTopology{}, "pretrained(" + weights_file.filename().string() + ")");
    const std::vector<std::pair<std::string, std::vector<int>>> expected = {
        {"conv1.weight", {64, 3, 11, 11}}, {"conv1.bias", {64}}, {"conv2.weight", {192, 64, 5, 5}}, {"conv2.bias", {192}}};
    std::string problems;
    for (const auto& [name, shape] : expected) {
        const WeightEntry* e = f.find(name);
        if (e == nullptr) problems += "\n  " + name + ": expected " + Tensor<T>::shape_string(shape) + ", found nothing";
        else if (e->shape != shape)
            problems += "\n  " + name + ": expected " + Tensor<T>::shape_string(shape) + ", found " +
                        Tensor<T>::shape_string(e->shape);
    }
    if (!problems.empty()) throw WeightsError(weights_file.string() + ": extractor shape mismatch" + problems);
    p.set_weights(f.find("conv1.weight")->template as_tensor<T>(), f.find("conv1.bias")->template as_tensor<T>(),
                  f.find("conv2.weight")->template as_tensor<T>(), f.find("conv2.bias")->template as_tensor<T>());
    return p;
}

/// Feature map for a batch of 64x64 or 96x96 images: [N, 192, s, s] with s = 7 or 11.
template <typename T>
Tensor<T> extract_features(const PerceptualExtractor<T>& p, const Tensor<T>& x, InputNorm norm) {
    if (x.rank() != 4 || x.dim(1) != 3 || x.dim(2) != x.dim(3) || !(x.dim(2) == 64 || x.dim(2) == 96)) {
        throw std::invalid_argument("extract_features: unsupported input " + Tensor<T>::shape_string(x.shape()) +
                                    " (expected [N,3,64,64] or [N,3,96,96])");
    }
    return p.forward(x, norm);
}

}  // namespace percept
