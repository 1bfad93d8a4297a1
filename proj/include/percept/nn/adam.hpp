#pragma once

#include <cmath>
#include <vector>

#include "percept/nn/layers.hpp"

namespace percept::nn {

struct AdamOptions {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adaptive-moment gradient descent over a fixed parameter list.
template <typename T>
class Adam {
public:
    Adam(std::vector<Param<T>> params, AdamOptions opt) : params_(std::move(params)), opt_(opt) {
        for (auto& p : params_) {
            m_.emplace_back(p.value->size(), T(0));
            v_.emplace_back(p.value->size(), T(0));
        }
    }

    void step() {
        ++t_;
        const double c1 = 1.0 - std::pow(opt_.beta1, t_);
        const double c2 = 1.0 - std::pow(opt_.beta2, t_);
        const T step = static_cast<T>(opt_.lr * std::sqrt(c2) / c1);
        const T b1 = static_cast<T>(opt_.beta1), b2 = static_cast<T>(opt_.beta2);
        const T eps = static_cast<T>(opt_.eps * std::sqrt(c2));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            T* w = params_[i].value->data();
            const T* g = params_[i].grad->data();
            T* m = m_[i].data();
            T* v = v_[i].data();
            const std::size_t n = params_[i].value->size();
            for (std::size_t j = 0; j < n; ++j) {
                m[j] = b1 * m[j] + (T(1) - b1) * g[j];
                v[j] = b2 * v[j] + (T(1) - b2) * g[j] * g[j];
                w[j] -= step * m[j] / (std::sqrt(v[j]) + eps);
            }
        }
    }

    void zero_grad() { zero_grads(params_); }

    const std::vector<Param<T>>& params() const { return params_; }

private:
    std::vector<Param<T>> params_;
    AdamOptions opt_;
    std::vector<std::vector<T>> m_, v_;
    long t_ = 0;
};

}  // namespace percept::nn
