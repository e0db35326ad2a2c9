#pragma once

// Gradient-sharing, adaptively stepped Adan solver over a pixel field.

#include <array>
#include <cstddef>
#include <functional>
#include <iosfwd>
#include <vector>

#include "f2pad/mask.hpp"
#include "f2pad/tensor.hpp"

namespace f2pad {

/// Bilateral stencil computed once from the input image.
struct SharingKernel {
    std::size_t h = 0;
    std::size_t w = 0;
    std::size_t ks = 0;
    std::vector<double> weights;  // h*w*(2ks+1)^2, offsets row-major from (-ks,-ks)

    std::size_t taps() const noexcept { return (2 * ks + 1) * (2 * ks + 1); }
    double weight(std::size_t i, std::size_t j, long di, long dj) const {
        const auto side = static_cast<long>(2 * ks + 1);
        const auto k = static_cast<std::size_t>((di + static_cast<long>(ks)) * side + dj + static_cast<long>(ks));
        return weights[(i * w + j) * taps() + k];
    }
};

SharingKernel build_sharing_kernel(const Tensor& x, std::size_t ks, double sigma0, double sigma1);

// g[i,j] = sum of w[i,j](di,dj) * grad[i+di, j+dj], then clipped componentwise to [-clip, clip].
Tensor share_gradients(const SharingKernel& kernel, const Tensor& grad, double clip);

// gamma0 / max(|x - n|, floor), per element.
Tensor adaptive_steps(const Tensor& x, const Tensor& n, double gamma0, double floor);

struct AdanParams {
    // PyTorch-style betas: decay of the gradient, gradient-difference and second moments.
    double beta1 = 0.98;
    double beta2 = 0.92;
    double beta3 = 0.99;
    double eps = 1e-8;
    double lr = 1e-3;
};

struct AdanState {
    Tensor m;
    Tensor v;
    Tensor s;
    Tensor g_prev;
    std::size_t step = 0;

    explicit AdanState(const Shape& shape) : m(shape), v(shape), s(shape), g_prev(shape) {}
};

// One Adan update of n in place, each element's step scaled by gamma. Elements
// with active[flat pixel] == false are left untouched (null = all active).
void adan_step(AdanState& state, Tensor& n, const Tensor& g, const Tensor& gamma, const AdanParams& params,
               const Mask* active = nullptr);

struct SolverConfig {
    double clip = 0.03;
    double gamma0 = 1.0;
    double step_floor = 0.01;
    double loss_threshold = 0.1;
    std::size_t max_iter = 1200;
    AdanParams adan;
    // Per-channel box the iterate is projected onto after every step.
    std::array<double, 3> lower{-1e300, -1e300, -1e300};
    std::array<double, 3> upper{1e300, 1e300, 1e300};
};

// Returns F(n) and writes dF/dn into grad.
using Objective = std::function<double(const Tensor& n, Tensor& grad)>;

struct SolveResult {
    Tensor n;
    std::vector<double> losses;  // F at every evaluated iterate, starting with n0
    std::size_t iterations = 0;  // updates applied
    bool converged = false;      // stopped by the loss-change rule rather than the cap
};

// Pixels outside `active` (null = all) keep their n0 values bitwise.
SolveResult solve(const Objective& objective, const Tensor& x, const Tensor& n0, const SharingKernel& kernel,
                  const Mask* active, const SolverConfig& config);

// "iteration<TAB>loss" lines.
void write_loss_log(std::ostream& os, const std::vector<double>& losses);

}  // namespace f2pad
