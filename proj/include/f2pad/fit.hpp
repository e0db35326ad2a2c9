#pragma once

// Fitting the normality model and the pixel prior from normal training images.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>

#include "f2pad/backends.hpp"
#include "f2pad/extractor.hpp"
#include "f2pad/regularizers.hpp"
#include "f2pad/tensor.hpp"

namespace f2pad {

struct FitOptions {
    BackendKind kind = BackendKind::gaussian;
    double ridge = 0.0;  // 0 uses default_ridge(ridge_rel)
    double ridge_rel = 1e-3;
    double coreset_fraction = 0.1;
    std::uint64_t coreset_seed = 0;
    std::size_t candidate_size = 50;
    std::size_t mog_components = 4;
    std::size_t mog_samples = 100000;
    std::uint64_t mog_seed = 0;
};

struct FittedModels {
    Extractor extractor;
    std::unique_ptr<ScoringBackend> backend;
    MogPrior prior;
};

FittedModels fit_models(std::span<const Tensor> train, const ExtractorSpec& spec, const FitOptions& opts);

// Writes backend.f2pb and prior.f2pb into dir.
void save_models(const std::filesystem::path& dir, const FittedModels& models);
FittedModels load_models(const std::filesystem::path& dir, std::size_t candidate_size = 50);

}  // namespace f2pad
