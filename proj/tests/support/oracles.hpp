#pragma once

// Straight-line reference implementations. They share no code with the
// library beyond the Tensor container and are deliberately naive.

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "percept/perceptual.hpp"
#include "percept/tensor.hpp"

namespace oracle {

inline double mse(std::span<const double> a, std::span<const double> b) {
    double acc = 0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
    return acc / static_cast<double>(a.size());
}

inline double sse(std::span<const double> a, std::span<const double> b) {
    double acc = 0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
    return acc;
}

/// 0.5 * sum(mu^2 + exp(lv) - 1 - lv) for one row.
inline double kl_row(std::span<const double> mu, std::span<const double> lv) {
    double acc = 0;
    for (std::size_t i = 0; i < mu.size(); ++i) acc += mu[i] * mu[i] + std::exp(lv[i]) - 1.0 - lv[i];
    return 0.5 * acc;
}

struct Image {
    int c = 0, h = 0, w = 0;
    std::vector<double> v;
    double& at(int ch, int y, int x) { return v[(static_cast<std::size_t>(ch) * h + y) * w + x]; }
    double at(int ch, int y, int x) const { return v[(static_cast<std::size_t>(ch) * h + y) * w + x]; }
};

/// Direct convolution; weight layout [out][in][k][k], zero padding.
inline Image conv2d(const Image& in, std::span<const double> weight, std::span<const double> bias, int out_ch,
                    int k, int stride, int pad) {
    Image o;
    o.c = out_ch;
    o.h = (in.h + 2 * pad - k) / stride + 1;
    o.w = (in.w + 2 * pad - k) / stride + 1;
    o.v.assign(static_cast<std::size_t>(o.c) * o.h * o.w, 0.0);
    for (int oc = 0; oc < o.c; ++oc)
        for (int oy = 0; oy < o.h; ++oy)
            for (int ox = 0; ox < o.w; ++ox) {
                double acc = bias[oc];
                for (int ic = 0; ic < in.c; ++ic)
                    for (int ky = 0; ky < k; ++ky)
                        for (int kx = 0; kx < k; ++kx) {
                            const int iy = oy * stride - pad + ky, ix = ox * stride - pad + kx;
                            if (iy < 0 || iy >= in.h || ix < 0 || ix >= in.w) continue;
                            acc += weight[((static_cast<std::size_t>(oc) * in.c + ic) * k + ky) * k + kx] *
                                   in.at(ic, iy, ix);
                        }
                o.at(oc, oy, ox) = acc;
            }
    return o;
}

/// Transposed convolution, no padding; weight layout [in][out][k][k].
inline Image conv_transpose2d(const Image& in, std::span<const double> weight, std::span<const double> bias,
                              int out_ch, int k, int stride) {
    Image o;
    o.c = out_ch;
    o.h = (in.h - 1) * stride + k;
    o.w = (in.w - 1) * stride + k;
    o.v.assign(static_cast<std::size_t>(o.c) * o.h * o.w, 0.0);
    for (int oc = 0; oc < o.c; ++oc)
        for (int y = 0; y < o.h; ++y)
            for (int x = 0; x < o.w; ++x) o.at(oc, y, x) = bias[oc];
    for (int ic = 0; ic < in.c; ++ic)
        for (int iy = 0; iy < in.h; ++iy)
            for (int ix = 0; ix < in.w; ++ix)
                for (int oc = 0; oc < out_ch; ++oc)
                    for (int ky = 0; ky < k; ++ky)
                        for (int kx = 0; kx < k; ++kx)
                            o.at(oc, iy * stride + ky, ix * stride + kx) +=
                                in.at(ic, iy, ix) * weight[((static_cast<std::size_t>(ic) * out_ch + oc) * k + ky) * k + kx];
    return o;
}

inline Image maxpool(const Image& in, int k, int stride) {
    Image o;
    o.c = in.c;
    o.h = (in.h - k) / stride + 1;
    o.w = (in.w - k) / stride + 1;
    o.v.resize(static_cast<std::size_t>(o.c) * o.h * o.w);
    for (int c = 0; c < o.c; ++c)
        for (int y = 0; y < o.h; ++y)
            for (int x = 0; x < o.w; ++x) {
                double m = in.at(c, y * stride, x * stride);
                for (int ky = 0; ky < k; ++ky)
                    for (int kx = 0; kx < k; ++kx) m = std::max(m, in.at(c, y * stride + ky, x * stride + kx));
                o.at(c, y, x) = m;
            }
    return o;
}

inline void relu(Image& im) {
    for (auto& x : im.v) x = x > 0 ? x : 0;
}

inline void sigmoid(Image& im) {
    for (auto& x : im.v) x = 1.0 / (1.0 + std::exp(-x));
}

template <typename T>
std::vector<double> to_doubles(const percept::Tensor<T>& t) {
    return std::vector<double>(t.vec().begin(), t.vec().end());
}

/// Features of one [3,S,S] image through conv(11,s4,p2) -> relu -> pool(3,s2)
/// -> conv(5,s1,p2) -> relu -> sigmoid, with optional ImageNet normalization.
template <typename T>
Image extractor_features(const percept::PerceptualExtractor<T>& ex, std::span<const double> image, int side,
                         bool imagenet_norm) {
    const double mean[3] = {0.485, 0.456, 0.406}, stdv[3] = {0.229, 0.224, 0.225};
    Image in{3, side, side, {image.begin(), image.end()}};
    if (imagenet_norm)
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < side; ++y)
                for (int x = 0; x < side; ++x) in.at(c, y, x) = (in.at(c, y, x) - mean[c]) / stdv[c];
    const auto& c1 = ex.conv1();
    const auto& c2 = ex.conv2();
    Image a = conv2d(in, to_doubles(c1.weight()), to_doubles(c1.bias()), c1.out_channels(), 11, 4, 2);
    relu(a);
    Image p = maxpool(a, 3, 2);
    Image b = conv2d(p, to_doubles(c2.weight()), to_doubles(c2.bias()), c2.out_channels(), 5, 1, 2);
    relu(b);
    sigmoid(b);
    return b;
}

}  // namespace oracle
