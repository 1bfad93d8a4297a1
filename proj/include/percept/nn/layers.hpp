#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "percept/rng.hpp"
#include "percept/tensor.hpp"

#if defined(__SSE__) || defined(_M_X64)
#include <xmmintrin.h>
#define PERCEPT_HAVE_MXCSR 1
#endif

namespace percept::nn {

/// Flush-to-zero and denormals-are-zero for the current thread while in scope.
class FlushDenormals {
public:
    FlushDenormals() {
#ifdef PERCEPT_HAVE_MXCSR
        saved_ = _mm_getcsr();
        _mm_setcsr(saved_ | 0x8040u);
#endif
    }
    ~FlushDenormals() {
#ifdef PERCEPT_HAVE_MXCSR
        _mm_setcsr(saved_);
#endif
    }
    FlushDenormals(const FlushDenormals&) = delete;
    FlushDenormals& operator=(const FlushDenormals&) = delete;

private:
    unsigned saved_ = 0;
};

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

/// Named view of a trainable array and its gradient accumulator.
template <typename T>
struct Param {
    std::string name;
    Tensor<T>* value;
    Tensor<T>* grad;
};

inline int conv_out_size(int in, int kernel, int stride, int pad) {
    const int span = in + 2 * pad - kernel;
    if (span < 0) return 0;
    return span / stride + 1;
}

inline int deconv_out_size(int in, int kernel, int stride) { return (in - 1) * stride + kernel; }

/// Unfolds one [C,H,W] image into columns [C*k*k, Ho*Wo].
template <typename T>
void im2col(const T* img, int channels, int height, int width, int kernel, int stride, int pad,
            T* cols) {
    const int ho = conv_out_size(height, kernel, stride, pad);
    const int wo = conv_out_size(width, kernel, stride, pad);
    for (int c = 0; c < channels; ++c) {
        const T* plane = img + static_cast<std::size_t>(c) * height * width;
        for (int ki = 0; ki < kernel; ++ki) {
            for (int kj = 0; kj < kernel; ++kj) {
                T* row = cols + ((static_cast<std::size_t>(c) * kernel + ki) * kernel + kj) * ho * wo;
                for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * stride - pad + ki;
                    T* out = row + static_cast<std::size_t>(oy) * wo;
                    if (iy < 0 || iy >= height) {
                        std::fill(out, out + wo, T(0));
                        continue;
                    }
                    const T* src = plane + static_cast<std::size_t>(iy) * width;
                    for (int ox = 0; ox < wo; ++ox) {
                        const int ix = ox * stride - pad + kj;
                        out[ox] = (ix >= 0 && ix < width) ? src[ix] : T(0);
                    }
                }
            }
        }
    }
}

/// Adjoint of im2col: scatters-and-adds columns back into a zeroed [C,H,W] image.
template <typename T>
void col2im(const T* cols, int channels, int height, int width, int kernel, int stride, int pad,
            T* img) {
    const int ho = conv_out_size(height, kernel, stride, pad);
    const int wo = conv_out_size(width, kernel, stride, pad);
    std::fill(img, img + static_cast<std::size_t>(channels) * height * width, T(0));
    for (int c = 0; c < channels; ++c) {
        T* plane = img + static_cast<std::size_t>(c) * height * width;
        for (int ki = 0; ki < kernel; ++ki) {
            for (int kj = 0; kj < kernel; ++kj) {
                const T* row =
                    cols + ((static_cast<std::size_t>(c) * kernel + ki) * kernel + kj) * ho * wo;
                for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * stride - pad + ki;
                    if (iy < 0 || iy >= height) continue;
                    const T* in = row + static_cast<std::size_t>(oy) * wo;
                    T* dst = plane + static_cast<std::size_t>(iy) * width;
                    for (int ox = 0; ox < wo; ++ox) {
                        const int ix = ox * stride - pad + kj;
                        if (ix >= 0 && ix < width) dst[ix] += in[ox];
                    }
                }
            }
        }
    }
}

/// U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
template <typename T>
void fan_in_uniform(Tensor<T>& t, int fan_in, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (auto& v : t.vec()) v = static_cast<T>(rng.uniform(-bound, bound));
}

template <typename T>
void check_input(const Tensor<T>& x, int channels, const char* layer) {
    if (x.rank() != 4 || x.dim(1) != channels) {
        throw std::invalid_argument(std::string(layer) + ": expected [N," + std::to_string(channels) +
                                    ",H,W] input, got " + Tensor<T>::shape_string(x.shape()));
    }
}

template <typename T>
class Conv2d {
public:
    Conv2d() = default;
    Conv2d(int in_channels, int out_channels, int kernel, int stride, int pad)
        : in_(in_channels), out_(out_channels), k_(kernel), s_(stride), p_(pad),
          weight_({out_channels, in_channels, kernel, kernel}), bias_({out_channels}),
          dweight_(weight_.shape()), dbias_(bias_.shape()) {}

    void init(Rng& rng) {
        fan_in_uniform(weight_, in_ * k_ * k_, rng);
        fan_in_uniform(bias_, in_ * k_ * k_, rng);
    }

    int in_channels() const { return in_; }
    int out_channels() const { return out_; }
    int kernel() const { return k_; }
    int stride() const { return s_; }
    int pad() const { return p_; }
    int out_size(int in) const { return conv_out_size(in, k_, s_, p_); }

    Tensor<T>& weight() { return weight_; }
    Tensor<T>& bias() { return bias_; }
    const Tensor<T>& weight() const { return weight_; }
    const Tensor<T>& bias() const { return bias_; }

    Tensor<T> forward(const Tensor<T>& x) const {
        check_input(x, in_, "Conv2d");
        const int n = x.dim(0), h = x.dim(2), w = x.dim(3);
        const int ho = out_size(h), wo = out_size(w);
        if (ho <= 0 || wo <= 0) throw std::invalid_argument("Conv2d: input smaller than kernel");
        Tensor<T> y({n, out_, ho, wo});
        const int kdim = in_ * k_ * k_;
        aligned_vector<T> cols(static_cast<std::size_t>(kdim) * ho * wo);
        CMapMat<T> wm(weight_.data(), out_, kdim);
        for (int b = 0; b < n; ++b) {
            im2col(x.slice(b).data(), in_, h, w, k_, s_, p_, cols.data());
            CMapMat<T> cm(cols.data(), kdim, ho * wo);
            MapMat<T> ym(y.slice(b).data(), out_, ho * wo);
            ym.noalias() = wm * cm;
            ym.colwise() += Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(bias_.data(), out_);
        }
        return y;
    }

    /// Gradient with respect to the input; weights untouched.
    Tensor<T> backward_input(const std::vector<int>& x_shape, const Tensor<T>& dy) const {
        const int n = x_shape[0], h = x_shape[2], w = x_shape[3];
        const int ho = dy.dim(2), wo = dy.dim(3);
        const int kdim = in_ * k_ * k_;
        Tensor<T> dx(x_shape);
        aligned_vector<T> dcols(static_cast<std::size_t>(kdim) * ho * wo);
        CMapMat<T> wm(weight_.data(), out_, kdim);
        for (int b = 0; b < n; ++b) {
            CMapMat<T> dym(dy.slice(b).data(), out_, ho * wo);
            MapMat<T> dc(dcols.data(), kdim, ho * wo);
            dc.noalias() = wm.transpose() * dym;
            col2im(dcols.data(), in_, h, w, k_, s_, p_, dx.slice(b).data());
        }
        return dx;
    }

    void accumulate_grads(const Tensor<T>& x, const Tensor<T>& dy) {
        const int n = x.dim(0), h = x.dim(2), w = x.dim(3);
        const int ho = dy.dim(2), wo = dy.dim(3);
        const int kdim = in_ * k_ * k_;
        aligned_vector<T> cols(static_cast<std::size_t>(kdim) * ho * wo);
        MapMat<T> dwm(dweight_.data(), out_, kdim);
        for (int b = 0; b < n; ++b) {
            im2col(x.slice(b).data(), in_, h, w, k_, s_, p_, cols.data());
            CMapMat<T> cm(cols.data(), kdim, ho * wo);
            CMapMat<T> dym(dy.slice(b).data(), out_, ho * wo);
            dwm.noalias() += dym * cm.transpose();
            for (int o = 0; o < out_; ++o) dbias_[o] += dym.row(o).sum();
        }
    }

    void params(std::vector<Param<T>>& out, const std::string& prefix) {
        out.push_back({prefix + ".weight", &weight_, &dweight_});
        out.push_back({prefix + ".bias", &bias_, &dbias_});
    }

private:
    int in_ = 0, out_ = 0, k_ = 1, s_ = 1, p_ = 0;
    Tensor<T> weight_, bias_, dweight_, dbias_;
};

/// Transposed convolution without padding; weight layout [in, out, k, k].
template <typename T>
class ConvTranspose2d {
public:
    ConvTranspose2d() = default;
    ConvTranspose2d(int in_channels, int out_channels, int kernel, int stride)
        : in_(in_channels), out_(out_channels), k_(kernel), s_(stride),
          weight_({in_channels, out_channels, kernel, kernel}), bias_({out_channels}),
          dweight_(weight_.shape()), dbias_(bias_.shape()) {}

    void init(Rng& rng) {
        // Each output pixel receives about in*(k/s)^2 contributions.
        const int fan_in = std::max(1, in_ * k_ * k_ / (s_ * s_));
        fan_in_uniform(weight_, fan_in, rng);
        fan_in_uniform(bias_, fan_in, rng);
    }

    int in_channels() const { return in_; }
    int out_channels() const { return out_; }
    int kernel() const { return k_; }
    int stride() const { return s_; }
    int out_size(int in) const { return deconv_out_size(in, k_, s_); }

    Tensor<T>& weight() { return weight_; }
    Tensor<T>& bias() { return bias_; }
    const Tensor<T>& weight() const { return weight_; }
    const Tensor<T>& bias() const { return bias_; }

    Tensor<T> forward(const Tensor<T>& x) const {
        check_input(x, in_, "ConvTranspose2d");
        const int n = x.dim(0), h = x.dim(2), w = x.dim(3);
        const int ho = out_size(h), wo = out_size(w);
        const int kdim = out_ * k_ * k_;
        Tensor<T> y({n, out_, ho, wo});
        aligned_vector<T> cols(static_cast<std::size_t>(kdim) * h * w);
        CMapMat<T> wm(weight_.data(), in_, kdim);
        for (int b = 0; b < n; ++b) {
            CMapMat<T> xm(x.slice(b).data(), in_, h * w);
            MapMat<T> cm(cols.data(), kdim, h * w);
            cm.noalias() = wm.transpose() * xm;
            T* yb = y.slice(b).data();
            col2im(cols.data(), out_, ho, wo, k_, s_, 0, yb);
            for (int o = 0; o < out_; ++o) {
                T* plane = yb + static_cast<std::size_t>(o) * ho * wo;
                for (int i = 0; i < ho * wo; ++i) plane[i] += bias_[o];
            }
        }
        return y;
    }

    Tensor<T> backward_input(const std::vector<int>& x_shape, const Tensor<T>& dy) const {
        const int n = x_shape[0], h = x_shape[2], w = x_shape[3];
        const int ho = dy.dim(2), wo = dy.dim(3);
        const int kdim = out_ * k_ * k_;
        Tensor<T> dx(x_shape);
        aligned_vector<T> dcols(static_cast<std::size_t>(kdim) * h * w);
        CMapMat<T> wm(weight_.data(), in_, kdim);
        for (int b = 0; b < n; ++b) {
            im2col(dy.slice(b).data(), out_, ho, wo, k_, s_, 0, dcols.data());
            CMapMat<T> dc(dcols.data(), kdim, h * w);
            MapMat<T> dxm(dx.slice(b).data(), in_, h * w);
            dxm.noalias() = wm * dc;
        }
        return dx;
    }

    void accumulate_grads(const Tensor<T>& x, const Tensor<T>& dy) {
        const int n = x.dim(0), h = x.dim(2), w = x.dim(3);
        const int ho = dy.dim(2), wo = dy.dim(3);
        const int kdim = out_ * k_ * k_;
        aligned_vector<T> dcols(static_cast<std::size_t>(kdim) * h * w);
        MapMat<T> dwm(dweight_.data(), in_, kdim);
        for (int b = 0; b < n; ++b) {
            im2col(dy.slice(b).data(), out_, ho, wo, k_, s_, 0, dcols.data());
            CMapMat<T> dc(dcols.data(), kdim, h * w);
            CMapMat<T> xm(x.slice(b).data(), in_, h * w);
            dwm.noalias() += xm * dc.transpose();
            const T* db = dy.slice(b).data();
            for (int o = 0; o < out_; ++o) {
                T acc = 0;
                const T* plane = db + static_cast<std::size_t>(o) * ho * wo;
                for (int i = 0; i < ho * wo; ++i) acc += plane[i];
                dbias_[o] += acc;
            }
        }
    }

    void params(std::vector<Param<T>>& out, const std::string& prefix) {
        out.push_back({prefix + ".weight", &weight_, &dweight_});
        out.push_back({prefix + ".bias", &bias_, &dbias_});
    }

private:
    int in_ = 0, out_ = 0, k_ = 1, s_ = 1;
    Tensor<T> weight_, bias_, dweight_, dbias_;
};

/// Affine map on [N, in] rows; weight layout [out, in].
template <typename T>
class Linear {
public:
    Linear() = default;
    Linear(int in_features, int out_features)
        : in_(in_features), out_(out_features), weight_({out_features, in_features}),
          bias_({out_features}), dweight_(weight_.shape()), dbias_(bias_.shape()) {}

    void init(Rng& rng) {
        fan_in_uniform(weight_, in_, rng);
        fan_in_uniform(bias_, in_, rng);
    }

    int in_features() const { return in_; }
    int out_features() const { return out_; }
    Tensor<T>& weight() { return weight_; }
    Tensor<T>& bias() { return bias_; }
    const Tensor<T>& weight() const { return weight_; }
    const Tensor<T>& bias() const { return bias_; }

    Tensor<T> forward(const Tensor<T>& x) const {
        const int n = x.dim(0);
        if (static_cast<int>(x.stride0()) != in_) {
            throw std::invalid_argument("Linear: expected " + std::to_string(in_) +
                                        " features per row, got " + std::to_string(x.stride0()));
        }
        Tensor<T> y({n, out_});
        CMapMat<T> xm(x.data(), n, in_);
        CMapMat<T> wm(weight_.data(), out_, in_);
        MapMat<T> ym(y.data(), n, out_);
        ym.noalias() = xm * wm.transpose();
        ym.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias_.data(), out_);
        return y;
    }

    Tensor<T> backward_input(const std::vector<int>& x_shape, const Tensor<T>& dy) const {
        Tensor<T> dx(x_shape);
        const int n = x_shape[0];
        CMapMat<T> dym(dy.data(), n, out_);
        CMapMat<T> wm(weight_.data(), out_, in_);
        MapMat<T> dxm(dx.data(), n, in_);
        dxm.noalias() = dym * wm;
        return dx;
    }

    void accumulate_grads(const Tensor<T>& x, const Tensor<T>& dy) {
        const int n = x.dim(0);
        CMapMat<T> xm(x.data(), n, in_);
        CMapMat<T> dym(dy.data(), n, out_);
        MapMat<T> dwm(dweight_.data(), out_, in_);
        dwm.noalias() += dym.transpose() * xm;
        Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(dbias_.data(), out_) += dym.colwise().sum();
    }

    void params(std::vector<Param<T>>& out, const std::string& prefix) {
        out.push_back({prefix + ".weight", &weight_, &dweight_});
        out.push_back({prefix + ".bias", &bias_, &dbias_});
    }

private:
    int in_ = 0, out_ = 0;
    Tensor<T> weight_, bias_, dweight_, dbias_;
};

template <typename T>
struct PoolResult {
    Tensor<T> output;
    std::vector<std::int32_t> argmax;  // flat input index per output element
};

/// Max pooling without padding.
template <typename T>
PoolResult<T> maxpool2d_forward(const Tensor<T>& x, int kernel, int stride) {
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int ho = conv_out_size(h, kernel, stride, 0), wo = conv_out_size(w, kernel, stride, 0);
    PoolResult<T> r{Tensor<T>({n, c, ho, wo}), {}};
    r.argmax.resize(r.output.size());
    std::size_t o = 0;
    for (int b = 0; b < n; ++b) {
        for (int ch = 0; ch < c; ++ch) {
            const std::size_t base = (static_cast<std::size_t>(b) * c + ch) * h * w;
            for (int oy = 0; oy < ho; ++oy) {
                for (int ox = 0; ox < wo; ++ox, ++o) {
                    std::size_t best = base + static_cast<std::size_t>(oy * stride) * w + ox * stride;
                    for (int ki = 0; ki < kernel; ++ki) {
                        for (int kj = 0; kj < kernel; ++kj) {
                            const std::size_t idx =
                                base + static_cast<std::size_t>(oy * stride + ki) * w + ox * stride + kj;
                            if (x[idx] > x[best]) best = idx;
                        }
                    }
                    r.output[o] = x[best];
                    r.argmax[o] = static_cast<std::int32_t>(best);
                }
            }
        }
    }
    return r;
}

template <typename T>
Tensor<T> maxpool2d_backward(const std::vector<int>& x_shape, const std::vector<std::int32_t>& argmax,
                             const Tensor<T>& dy) {
    Tensor<T> dx(x_shape);
    for (std::size_t i = 0; i < dy.size(); ++i) dx[argmax[i]] += dy[i];
    return dx;
}

template <typename T>
Tensor<T> relu(Tensor<T> x) {
    for (auto& v : x.vec()) v = v > T(0) ? v : T(0);
    return x;
}

/// dL/dx given the ReLU output y.
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& y, Tensor<T> dy) {
    for (std::size_t i = 0; i < dy.size(); ++i)
        if (!(y[i] > T(0))) dy[i] = T(0);
    return dy;
}

template <typename T>
T sigmoid(T v) {
    return T(1) / (T(1) + std::exp(-v));
}

template <typename T>
Tensor<T> sigmoid(Tensor<T> x) {
    for (auto& v : x.vec()) v = sigmoid(v);
    return x;
}

/// dL/dx given the sigmoid output y.
template <typename T>
Tensor<T> sigmoid_backward(const Tensor<T>& y, Tensor<T> dy) {
    for (std::size_t i = 0; i < dy.size(); ++i) dy[i] *= y[i] * (T(1) - y[i]);
    return dy;
}

template <typename T>
void zero_grads(std::vector<Param<T>>& params) {
    for (auto& p : params) p.grad->fill(T(0));
}

}  // namespace percept::nn
