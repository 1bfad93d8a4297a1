#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "percept/rng.hpp"
#include "percept/tensor.hpp"

namespace gradcheck {

inline percept::Tensor<double> random_tensor(std::vector<int> shape, percept::Rng& rng, double lo = -1.0,
                                             double hi = 1.0) {
    percept::Tensor<double> t(std::move(shape));
    for (auto& v : t.vec()) v = rng.uniform(lo, hi);
    return t;
}

/// ||a - b|| / max(||a||, ||b||), zero when both vanish.
inline double relative_error(std::span<const double> a, std::span<const double> b) {
    double diff = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        diff += (a[i] - b[i]) * (a[i] - b[i]);
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    const double scale = std::sqrt(std::max(na, nb));
    return scale == 0 ? 0.0 : std::sqrt(diff) / scale;
}

/// Central differences of `f` with respect to the entries of `x` listed in
/// `coords` (all entries when empty). `x` is restored afterwards.
inline std::vector<double> numeric(const std::function<double()>& f, percept::Tensor<double>& x,
                                   std::vector<std::size_t> coords = {}, double h = 1e-6) {
    if (coords.empty())
        for (std::size_t i = 0; i < x.size(); ++i) coords.push_back(i);
    std::vector<double> g;
    g.reserve(coords.size());
    for (std::size_t i : coords) {
        const double saved = x[i];
        x[i] = saved + h;
        const double up = f();
        x[i] = saved - h;
        const double down = f();
        x[i] = saved;
        g.push_back((up - down) / (2 * h));
    }
    return g;
}

inline std::vector<double> pick(const percept::Tensor<double>& t, const std::vector<std::size_t>& coords) {
    if (coords.empty()) return {t.vec().begin(), t.vec().end()};
    std::vector<double> out;
    for (std::size_t i : coords) out.push_back(t[i]);
    return out;
}

/// `count` distinct coordinates out of `n`, deterministic per seed.
inline std::vector<std::size_t> sample_coords(std::size_t n, std::size_t count, std::uint64_t seed) {
    std::vector<std::size_t> all(n);
    for (std::size_t i = 0; i < n; ++i) all[i] = i;
    if (count >= n) return all;
    percept::Rng rng(seed);
    rng.shuffle(all);
    all.resize(count);
    std::sort(all.begin(), all.end());
    return all;
}

}  // namespace gradcheck
