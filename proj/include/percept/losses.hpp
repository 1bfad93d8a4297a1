#pragma once

#include <cmath>
#include <stdexcept>
#include <string>

#include "percept/models.hpp"
#include "percept/perceptual.hpp"
#include "percept/tensor.hpp"

namespace percept {

enum class LossKind { pixelwise, perceptual };
enum class Reduction { sum, mean };

inline const char* to_string(LossKind k) { return k == LossKind::pixelwise ? "pixelwise" : "perceptual"; }
inline const char* to_string(Reduction r) { return r == Reduction::sum ? "sum" : "mean"; }

inline LossKind parse_loss_kind(const std::string& s) {
    if (s == "pixelwise") return LossKind::pixelwise;
    if (s == "perceptual") return LossKind::perceptual;
    throw std::invalid_argument("unknown loss kind '" + s + "'");
}

inline Reduction parse_reduction(const std::string& s) {
    if (s == "sum") return Reduction::sum;
    if (s == "mean") return Reduction::mean;
    throw std::invalid_argument("unknown reduction '" + s + "'");
}

/// Batch convention for every loss below: inputs are [N, ...]; `sum` adds the
/// per-element terms of one sample and `mean` averages them; either way the
/// result is then averaged over the N samples. A single unbatched image
/// (rank 3) counts as N = 1.
namespace detail {
inline int batch_of(const std::vector<int>& shape) { return shape.size() == 4 ? shape[0] : 1; }
}  // namespace detail

/// Squared-error element-wise loss between a target and its reconstruction.
template <typename T>
T elementwise_loss(const Tensor<T>& x, const Tensor<T>& x_hat, Reduction reduction = Reduction::mean) {
    require_same_shape(x.shape(), x_hat.shape(), "elementwise_loss");
    if (x.empty()) throw std::invalid_argument("elementwise_loss: empty input");
    long double acc = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const long double d = static_cast<long double>(x[i]) - x_hat[i];
        acc += d * d;
    }
    const double n = static_cast<double>(detail::batch_of(x.shape()));
    const double scale = reduction == Reduction::mean ? 1.0 / static_cast<double>(x.size()) : 1.0 / n;
    return static_cast<T>(acc * scale);
}

/// d elementwise_loss / d x_hat.
template <typename T>
Tensor<T> elementwise_loss_grad(const Tensor<T>& x, const Tensor<T>& x_hat, Reduction reduction = Reduction::mean) {
    require_same_shape(x.shape(), x_hat.shape(), "elementwise_loss_grad");
    const double n = static_cast<double>(detail::batch_of(x.shape()));
    const T scale = static_cast<T>(2.0 * (reduction == Reduction::mean ? 1.0 / static_cast<double>(x.size()) : 1.0 / n));
    Tensor<T> g(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) g[i] = scale * (x_hat[i] - x[i]);
    return g;
}

template <typename T>
Tensor<T> as_batch(const Tensor<T>& x) {
    return x.rank() == 3 ? x.reshaped({1, x.dim(0), x.dim(1), x.dim(2)}) : x;
}

/// Squared error between extractor features of target and reconstruction.
template <typename T>
T perceptual_loss(const Tensor<T>& x, const Tensor<T>& x_hat, const PerceptualExtractor<T>& extractor,
                  Reduction reduction = Reduction::mean, InputNorm norm = InputNorm::raw01) {
    require_same_shape(x.shape(), x_hat.shape(), "perceptual_loss");
    const Tensor<T> fx = extract_features(extractor, as_batch(x), norm);
    const Tensor<T> fy = extract_features(extractor, as_batch(x_hat), norm);
    return elementwise_loss(fx, fy, reduction);
}

template <typename T>
struct PerceptualEval {
    T value;
    Tensor<T> d_x_hat;
};

/// Value and gradient with respect to x_hat; the extractor stays frozen.
/// `target_features` may carry precomputed features of x.
template <typename T>
PerceptualEval<T> perceptual_loss_with_grad(const Tensor<T>& x, const Tensor<T>& x_hat,
                                            const PerceptualExtractor<T>& extractor, Reduction reduction,
                                            InputNorm norm, const Tensor<T>* target_features = nullptr) {
    require_same_shape(x.shape(), x_hat.shape(), "perceptual_loss");
    const Tensor<T> xb = as_batch(x), yb = as_batch(x_hat);
    const Tensor<T> fx = target_features ? *target_features : extractor.forward(xb, norm);
    const auto tape = extractor.forward_tape(yb, norm);
    PerceptualEval<T> r{elementwise_loss(fx, tape.features, reduction), {}};
    r.d_x_hat = extractor.backward_input(tape, elementwise_loss_grad(fx, tape.features, reduction), norm);
    r.d_x_hat.reshape(x_hat.shape());
    return r;
}

/// KL divergence from N(mu, exp(logvar)) to N(0, 1), summed over dimensions:
/// 0.5 * sum(mu^2 + exp(logvar) - 1 - logvar). Rows of a [N, z] input are averaged.
template <typename T>
T kl_loss(const Tensor<T>& mu, const Tensor<T>& logvar) {
    require_same_shape(mu.shape(), logvar.shape(), "kl_loss");
    long double acc = 0;
    for (std::size_t i = 0; i < mu.size(); ++i) {
        const long double m = mu[i], lv = logvar[i];
        acc += m * m + std::exp(lv) - 1.0L - lv;
    }
    const double rows = mu.rank() == 2 ? static_cast<double>(mu.dim(0)) : 1.0;
    return static_cast<T>(0.5L * acc / rows);
}

template <typename T>
void kl_loss_grad(const Tensor<T>& mu, const Tensor<T>& logvar, T scale, Tensor<T>& d_mu, Tensor<T>& d_logvar) {
    const T rows = static_cast<T>(mu.rank() == 2 ? mu.dim(0) : 1);
    d_mu = Tensor<T>(mu.shape());
    d_logvar = Tensor<T>(mu.shape());
    for (std::size_t i = 0; i < mu.size(); ++i) {
        d_mu[i] = scale * mu[i] / rows;
        d_logvar[i] = scale * T(0.5) * (std::exp(logvar[i]) - T(1)) / rows;
    }
}

/// Training objective. kind == perceptual requires an extractor, pixelwise forbids one.
template <typename T>
struct LossSpec {
    LossKind kind = LossKind::pixelwise;
    Reduction reduction = Reduction::mean;
    double kl_weight = 0.0;
    const PerceptualExtractor<T>* extractor = nullptr;
    InputNorm norm = InputNorm::raw01;

    void validate() const {
        if (kind == LossKind::perceptual && extractor == nullptr)
            throw std::invalid_argument("LossSpec: perceptual loss needs an extractor");
        if (kind == LossKind::pixelwise && extractor != nullptr)
            throw std::invalid_argument("LossSpec: pixel-wise loss takes no extractor");
        if (!(kl_weight >= 0.0)) throw std::invalid_argument("LossSpec: kl_weight must be >= 0");
    }
};

template <typename T>
struct LossParts {
    T recon = 0;
    /// KL expressed in the reconstruction term's reduction: the per-sample KL
    /// for `sum`, divided by the reconstruction element count for `mean`.
    T kl = 0;
};

template <typename T>
struct LossResult {
    T total = 0;
    LossParts<T> parts;
    Tensor<T> d_x_hat, d_mu, d_logvar;  // filled only when gradients are requested
};

/// Number of elements per sample that the reconstruction term averages over.
template <typename T>
std::size_t recon_elements(const LossSpec<T>& spec, const Tensor<T>& x) {
    const std::size_t per_sample = x.size() / detail::batch_of(x.shape());
    if (spec.kind == LossKind::pixelwise) return per_sample;
    const auto fs = spec.extractor->feature_shape(x.dim(x.rank() - 1));
    return Tensor<T>::count(fs);
}

/// total = recon + kl_weight * kl, with recon dispatched on spec.kind.
template <typename T>
LossResult<T> total_loss(const LossSpec<T>& spec, const Tensor<T>& x, const Tensor<T>& x_hat,
                         const LatentCode<T>& code, bool with_grad = false,
                         const Tensor<T>* target_features = nullptr) {
    spec.validate();
    LossResult<T> r;
    if (spec.kind == LossKind::pixelwise) {
        r.parts.recon = elementwise_loss(x, x_hat, spec.reduction);
        if (with_grad) r.d_x_hat = elementwise_loss_grad(x, x_hat, spec.reduction);
    } else if (with_grad) {
        auto pe = perceptual_loss_with_grad(x, x_hat, *spec.extractor, spec.reduction, spec.norm, target_features);
        r.parts.recon = pe.value;
        r.d_x_hat = std::move(pe.d_x_hat);
    } else {
        r.parts.recon = perceptual_loss(x, x_hat, *spec.extractor, spec.reduction, spec.norm);
    }
    const double kl_scale =
        spec.reduction == Reduction::mean ? 1.0 / static_cast<double>(recon_elements(spec, x)) : 1.0;
    if (spec.kl_weight > 0.0 && !code.mu.empty()) {
        r.parts.kl = static_cast<T>(kl_loss(code.mu, code.logvar) * kl_scale);
        if (with_grad) kl_loss_grad(code.mu, code.logvar, static_cast<T>(spec.kl_weight * kl_scale), r.d_mu, r.d_logvar);
    }
    r.total = r.parts.recon + static_cast<T>(spec.kl_weight) * r.parts.kl;
    return r;
}

}  // namespace percept
