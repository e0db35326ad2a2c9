#pragma once

// Normality models fitted on training features and the differentiable
// feature-level losses built from them.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string_view>
#include <vector>

#include "f2pad/extractor.hpp"
#include "f2pad/mask.hpp"
#include "f2pad/tensor.hpp"

namespace f2pad {

/// Sub-window of the concatenated feature map that a loss is evaluated on.
/// The taped concat tensor covers cells [row0, row0+h) x [col0, col0+w) of the
/// full map; `include` (h x w, or empty for "all") selects the scored cells.
struct CellWindow {
    std::size_t row0 = 0;
    std::size_t col0 = 0;
    Mask include;
};

// ---- Gaussian field (PaDiM-style) -------------------------------------------

struct GaussianField {
    std::size_t h = 0;
    std::size_t w = 0;
    std::size_t c = 0;
    std::vector<double> mean;            // h*w*c
    std::vector<double> precision_chol;  // h*w*c*c, lower L with inverse covariance = L L^T
    double ridge = 0.0;

    const double* mean_at(std::size_t i, std::size_t j) const { return mean.data() + (i * w + j) * c; }
    const double* chol_at(std::size_t i, std::size_t j) const { return precision_chol.data() + (i * w + j) * c * c; }

    // Squared Mahalanobis distance of f to the (i,j) Gaussian.
    double score(std::size_t i, std::size_t j, const double* f) const;
    // Returns the score and writes its gradient with respect to f into grad.
    double score_and_grad(std::size_t i, std::size_t j, const double* f, double* grad) const;
};

// Per-location sample mean and (N-1)-normalized covariance plus ridge*I, inverted via Cholesky.
GaussianField fit_gaussian_field(std::span<const FeatureStack> train, double ridge);
// rel * (mean over locations of trace(cov)/c); the ridge used when none is configured.
double default_ridge(std::span<const FeatureStack> train, double rel = 1e-3);

Tensor padim_scores(const GaussianField& field, const Tensor& concat);
Var padim_loss(const GaussianField& field, Var concat, const CellWindow& window = {});

// ---- memory bank (PatchCore-style) ------------------------------------------

struct MemoryBank {
    std::size_t c = 0;
    std::vector<double> features;        // n*c
    std::vector<std::uint32_t> coreset;  // bank indices
    std::size_t grid_h = 0;
    std::size_t grid_w = 0;
    std::size_t candidates_per_cell = 0;
    std::vector<std::uint32_t> candidate_sets;  // grid_h*grid_w*candidates_per_cell bank indices

    std::size_t size() const noexcept { return c == 0 ? 0 : features.size() / c; }
    const double* feature(std::size_t idx) const { return features.data() + idx * c; }
    bool has_candidates() const noexcept { return candidates_per_cell > 0; }
    std::span<const std::uint32_t> candidates(std::size_t i, std::size_t j) const {
        return {candidate_sets.data() + (i * grid_w + j) * candidates_per_cell, candidates_per_cell};
    }
};

// Collects every location's concat feature. The coreset starts as the full bank.
MemoryBank build_memory_bank(std::span<const FeatureStack> train);

// Greedy farthest-point selection starting from a seeded random element.
std::vector<std::uint32_t> coreset_select(const MemoryBank& bank, std::size_t m, std::uint64_t seed);
std::vector<std::uint32_t> coreset_select_from(const MemoryBank& bank, std::size_t m, std::size_t start);

// For each cell of concat0, the `size` nearest coreset members (exact k-NN).
// `size` larger than the coreset is clamped with a warning.
void build_candidate_sets(MemoryBank& bank, const Tensor& concat0, std::size_t size);

// Min squared distance over the candidate set (approximate scores).
Tensor patchcore_scores(const MemoryBank& bank, const Tensor& concat);
// Min squared distance over the whole coreset.
Tensor exact_patchcore_scores(const MemoryBank& bank, const Tensor& concat);
Var patchcore_loss(const MemoryBank& bank, Var concat, const CellWindow& window = {});

// ---- backend interface ------------------------------------------------------

enum class BackendKind { gaussian, memory_bank };

class ScoringBackend {
public:
    virtual ~ScoringBackend() = default;

    virtual BackendKind kind() const noexcept = 0;
    virtual std::string_view name() const noexcept = 0;
    // [h, w] per-location anomaly scores of a concatenated feature map.
    virtual Tensor location_scores(const Tensor& concat) const = 0;
    virtual Var loss(Var concat, const CellWindow& window) const = 0;
    // Hook run once with the features of the initial estimate n^(0).
    virtual void prepare(const Tensor& /*initial_concat*/) {}
    // Stopping threshold on the loss change between iterations.
    virtual double default_loss_threshold() const noexcept = 0;
    virtual std::unique_ptr<ScoringBackend> clone() const = 0;
};

class GaussianBackend final : public ScoringBackend {
public:
    explicit GaussianBackend(GaussianField field) : field_(std::move(field)) {}

    BackendKind kind() const noexcept override { return BackendKind::gaussian; }
    std::string_view name() const noexcept override { return "gaussian"; }
    Tensor location_scores(const Tensor& concat) const override { return padim_scores(field_, concat); }
    Var loss(Var concat, const CellWindow& window) const override { return padim_loss(field_, concat, window); }
    double default_loss_threshold() const noexcept override { return 0.1; }
    std::unique_ptr<ScoringBackend> clone() const override { return std::make_unique<GaussianBackend>(*this); }

    const GaussianField& field() const noexcept { return field_; }

private:
    GaussianField field_;
};

class MemoryBankBackend final : public ScoringBackend {
public:
    MemoryBankBackend(MemoryBank bank, std::size_t candidate_size) : bank_(std::move(bank)), candidate_size_(candidate_size) {}

    BackendKind kind() const noexcept override { return BackendKind::memory_bank; }
    std::string_view name() const noexcept override { return "memory_bank"; }
    // Before prepare() this is the exact coreset score; afterwards the candidate-set score.
    Tensor location_scores(const Tensor& concat) const override;
    Var loss(Var concat, const CellWindow& window) const override { return patchcore_loss(bank_, concat, window); }
    void prepare(const Tensor& initial_concat) override { build_candidate_sets(bank_, initial_concat, candidate_size_); }
    double default_loss_threshold() const noexcept override { return 0.05; }
    std::unique_ptr<ScoringBackend> clone() const override { return std::make_unique<MemoryBankBackend>(*this); }

    const MemoryBank& bank() const noexcept { return bank_; }

private:
    MemoryBank bank_;
    std::size_t candidate_size_;
};

// ---- persistence ------------------------------------------------------------

void save_gaussian_field(const std::filesystem::path& path, const GaussianField& field, const Extractor& extractor);
void save_memory_bank(const std::filesystem::path& path, const MemoryBank& bank, const Extractor& extractor);

struct LoadedModel {
    Extractor extractor;
    std::unique_ptr<ScoringBackend> backend;
};

LoadedModel load_model(const std::filesystem::path& path, std::size_t candidate_size = 50);

}  // namespace f2pad
