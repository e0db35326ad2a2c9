#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>

#include "f2pad/mask.hpp"
#include "f2pad/tensor.hpp"

namespace testing {

using f2pad::Mask;
using f2pad::Shape;
using f2pad::Tensor;

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    Tensor t(std::move(shape));
    for (double& v : t.data()) v = u(rng);
    return t;
}

inline Mask random_mask(std::size_t h, std::size_t w, double p, std::mt19937_64& rng) {
    std::bernoulli_distribution b(p);
    Mask m(h, w);
    for (std::size_t k = 0; k < m.size(); ++k) m.set_flat(k, b(rng));
    return m;
}

// Plain central differences, kept separate from the library's checker.
inline Tensor numeric_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x, double h = 1e-5) {
    Tensor g(x.shape());
    Tensor p = x;
    for (std::size_t k = 0; k < x.size(); ++k) {
        const double v = p[k];
        p[k] = v + h;
        const double fp = f(p);
        p[k] = v - h;
        const double fm = f(p);
        p[k] = v;
        g[k] = (fp - fm) / (2 * h);
    }
    return g;
}

// max |a - b| / max(max |b|, tiny)
inline double rel_error(const Tensor& a, const Tensor& b) {
    double num = 0, den = 0;
    for (std::size_t k = 0; k < a.size(); ++k) {
        num = std::max(num, std::abs(a[k] - b[k]));
        den = std::max(den, std::abs(b[k]));
    }
    return num / std::max(den, 1e-300);
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0;
    for (std::size_t k = 0; k < a.size(); ++k) m = std::max(m, std::abs(a[k] - b[k]));
    return m;
}

}  // namespace testing
