#include "f2pad/fit.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "f2pad/error.hpp"
#include "f2pad/log.hpp"

namespace f2pad {

FittedModels fit_models(std::span<const Tensor> train, const ExtractorSpec& spec, const FitOptions& opts) {
    if (train.empty()) throw ValidationError("fit: no training images");
    Extractor extractor = build_extractor(spec);
    std::vector<FeatureStack> stacks;
    stacks.reserve(train.size());
    for (const auto& im : train) stacks.push_back(extractor.extract(im));

    std::unique_ptr<ScoringBackend> backend;
    if (opts.kind == BackendKind::gaussian) {
        const double ridge = opts.ridge > 0.0 ? opts.ridge : default_ridge(stacks, opts.ridge_rel);
        log::info("fit: gaussian field, ridge " + std::to_string(ridge));
        backend = std::make_unique<GaussianBackend>(fit_gaussian_field(stacks, ridge));
    } else {
        if (!(opts.coreset_fraction > 0.0) || opts.coreset_fraction > 1.0) {
            throw ValidationError("fit: coreset_fraction must lie in (0, 1]");
        }
        MemoryBank bank = build_memory_bank(stacks);
        const auto m = std::max<std::size_t>(
            1, static_cast<std::size_t>(std::llround(opts.coreset_fraction * static_cast<double>(bank.size()))));
        bank.coreset = coreset_select(bank, m, opts.coreset_seed);
        log::info("fit: memory bank of " + std::to_string(bank.size()) + " features, coreset " + std::to_string(m));
        backend = std::make_unique<MemoryBankBackend>(std::move(bank), opts.candidate_size);
    }
    const auto pixels = sample_pixels(train, opts.mog_samples, opts.mog_seed);
    MogFit mog = fit_mog(pixels, opts.mog_components, opts.mog_seed);
    log::info("fit: MOG prior with " + std::to_string(opts.mog_components) + " components, " +
              std::to_string(mog.iterations) + " EM iterations");
    return {std::move(extractor), std::move(backend), std::move(mog.prior)};
}

void save_models(const std::filesystem::path& dir, const FittedModels& models) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create model directory " + dir.string() + ": " + ec.message());
    if (const auto* g = dynamic_cast<const GaussianBackend*>(models.backend.get())) {
        save_gaussian_field(dir / "backend.f2pb", g->field(), models.extractor);
    } else if (const auto* b = dynamic_cast<const MemoryBankBackend*>(models.backend.get())) {
        save_memory_bank(dir / "backend.f2pb", b->bank(), models.extractor);
    } else {
        throw ValidationError("save_models: unsupported backend");
    }
    save_mog(dir / "prior.f2pb", models.prior);
}

FittedModels load_models(const std::filesystem::path& dir, std::size_t candidate_size) {
    LoadedModel lm = load_model(dir / "backend.f2pb", candidate_size);
    return {std::move(lm.extractor), std::move(lm.backend), load_mog(dir / "prior.f2pb")};
}

}  // namespace f2pad
