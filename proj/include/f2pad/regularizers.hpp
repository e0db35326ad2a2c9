#pragma once

// Penalty terms on the pixel field: LOG sparsity on the anomalous part,
// a mixture-of-Gaussians colour prior and total variation on the estimate.
// Each energy returns its value and, when `grad` is non-null, writes the
// gradient there (reshaped to the input's shape).

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "f2pad/tensor.hpp"

namespace f2pad {

using Pixel = std::array<double, 3>;

// sum over pixels of log(sqrt(|a|^2 + eps) + |a|).
double log_penalty(const Tensor& a, double eps, Tensor* grad = nullptr);

struct MogComponent {
    double weight = 0.0;
    Pixel mean{};
    std::array<double, 9> cov{};        // row-major 3x3
    std::array<double, 9> prec_chol{};  // lower L with inverse covariance = L L^T

    double quad(const double* p) const;
};

struct MogPrior {
    std::vector<MogComponent> components;
};

struct MogFit {
    MogPrior prior;
    // Mean per-sample log-likelihood after initialisation and after every EM iteration.
    std::vector<double> log_likelihood;
    std::size_t iterations = 0;
};

struct MogOptions {
    double tol = 1e-7;
    std::size_t max_iter = 500;
    double cov_floor = 1e-6;
};

MogFit fit_mog(std::span<const Pixel> pixels, std::size_t q, std::uint64_t seed, const MogOptions& opts = {});

// Rebuilds prec_chol from cov; throws NumericError if cov is not positive definite.
void finalize_component(MogComponent& comp);

// sum over pixels of min_q (n - mu_q)^T inv(cov_q) (n - mu_q); mixing weights are ignored.
double mog_prior_energy(const MogPrior& prior, const Tensor& n, Tensor* grad = nullptr);

// sum of sqrt(|n[i+1,j]-n[i,j]|^2 + smooth_eps) + sqrt(|n[i,j+1]-n[i,j]|^2 + smooth_eps) over valid pairs.
double tv_energy(const Tensor& n, double smooth_eps, Tensor* grad = nullptr);

// `count` pixels drawn uniformly (with replacement) from the images.
std::vector<Pixel> sample_pixels(std::span<const Tensor> images, std::size_t count, std::uint64_t seed);

void save_mog(const std::filesystem::path& path, const MogPrior& prior);
MogPrior load_mog(const std::filesystem::path& path);

}  // namespace f2pad
