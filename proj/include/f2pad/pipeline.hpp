#pragma once

// The full decomposition procedure: initial mask, inpainted starting point,
// region-restricted solve, mask extraction, cleanup and re-estimation.

#include <cstddef>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "f2pad/backends.hpp"
#include "f2pad/extractor.hpp"
#include "f2pad/mask.hpp"
#include "f2pad/optimizer.hpp"
#include "f2pad/regularizers.hpp"
#include "f2pad/tensor.hpp"

namespace f2pad {

enum class InitMaskMode { percentile, max_f1, threshold };

enum class Ablation { full, no_prior, no_sparsity, init_only, no_sharing };

const char* ablation_name(Ablation a);

struct F2PADConfig {
    double alpha1 = 0.01;
    double alpha2 = 1e-4;
    double beta0 = 200.0;
    double eps = 1e-4;
    double gamma0 = 1.0;
    std::size_t ks = 5;
    double sigma0 = 1.1;
    double sigma1 = 3.0;
    double clip = 0.03;
    double loss_threshold = 0.0;  // 0 picks the backend's default
    std::size_t max_iter = 1200;
    double step_floor = 0.01;
    double adan_lr = 1e-3;
    double tv_eps = 1e-12;

    double tau_a = 0.1;
    std::size_t dilation = 8;
    std::size_t open_size = 3;
    std::size_t mog_components = 4;
    std::size_t candidate_size = 50;

    InitMaskMode init_mode = InitMaskMode::percentile;
    double percentile = 98.0;
    double init_threshold = 0.0;  // threshold mode
    double init_only_threshold = 0.2;

    bool init_only = false;
    bool re_estimate = true;

    // Throws ValidationError naming the first out-of-range field.
    void validate() const;
};

F2PADConfig apply_ablation(F2PADConfig cfg, Ablation a);

// ---- mask stages -------------------------------------------------------------

// Bilinear resize of [h, w] scores to [H, W] with half-pixel centres.
Tensor upsample_scores(const Tensor& scores, std::size_t H, std::size_t W);

// Top (100 - q)% of pixels; ties go to the lower flat index.
Mask percentile_mask(const Tensor& heat, double q);
Mask threshold_mask(const Tensor& heat, double t);
double f1_score(const Mask& m, const Mask& gt);
// Threshold t maximising F1 of (heat >= t) against gt; the lowest maximiser wins ties.
double max_f1_threshold(const Tensor& heat, const Mask& gt);
// Same search over the pooled pixels of several images.
double max_f1_threshold(std::span<const Tensor> heats, std::span<const Mask> gts);

Mask dilate(const Mask& m, std::size_t radius);
Mask erode(const Mask& m, std::size_t radius);
// Erosion then dilation with a k x k square; k must be odd.
Mask morph_open(const Mask& m, std::size_t k);

struct InpaintStats {
    std::size_t iterations = 0;
    double last_update = 0.0;
};

// Harmonic fill of the masked pixels by Jacobi iteration.
Tensor inpaint_init(const Tensor& x, const Mask& m0, InpaintStats* stats = nullptr);

// |a[i,j]|_2 > tau.
Mask extract_mask(const Tensor& a, double tau);
Tensor anomaly_part(const Tensor& x, const Tensor& n);

// ---- active region -----------------------------------------------------------

struct ActiveRegion {
    Mask pixels;  // optimisable pixels, image coordinates
    Mask cells;   // affected cells of the concatenated feature map
    // Pixel crop holding every affected cell's receptive field, aligned to the extractor divisor.
    std::size_t row0 = 0, col0 = 0, rows = 0, cols = 0;
    CellWindow window;  // affected cells relative to the crop's feature map
    Mask crop_pixels;   // `pixels` restricted to the crop

    bool empty() const noexcept { return rows == 0 || cols == 0; }
};

ActiveRegion active_region(const Mask& pixels, const Extractor& extractor);

Tensor crop(const Tensor& image, std::size_t row0, std::size_t col0, std::size_t rows, std::size_t cols);
void paste(Tensor& image, const Tensor& patch, std::size_t row0, std::size_t col0);

// ---- objective ---------------------------------------------------------------

struct ObjectiveWeights {
    double alpha1 = 0.0;
    double alpha2 = 0.0;
    double beta = 0.0;
    double eps = 1e-4;
    double tv_eps = 1e-12;
};

struct ObjectiveTerms {
    double backend = 0.0;
    double prior = 0.0;
    double tv = 0.0;
    double sparsity = 0.0;
    double total = 0.0;
};

// F(n) = l_n(n) + alpha1 * prior(n) + alpha2 * tv(n) + beta * log_penalty(x - n) on a crop.
class F2PADObjective {
public:
    F2PADObjective(const Extractor& extractor, const ScoringBackend& backend, const MogPrior* prior, Tensor x,
                   CellWindow window, ObjectiveWeights weights);

    double operator()(const Tensor& n, Tensor& grad) const;
    // Unweighted term values and gradients (null gradients are skipped).
    ObjectiveTerms terms(const Tensor& n, Tensor* g_backend = nullptr, Tensor* g_prior = nullptr, Tensor* g_tv = nullptr,
                         Tensor* g_sparsity = nullptr) const;
    const ObjectiveWeights& weights() const noexcept { return w_; }

private:
    double backend_loss(const Tensor& n, Tensor* grad) const;

    const Extractor& extractor_;
    const ScoringBackend& backend_;
    const MogPrior* prior_;
    Tensor x_;
    CellWindow window_;
    ObjectiveWeights w_;
};

double beta_from_mask(double beta0, const Mask& m0);

// ---- full run ----------------------------------------------------------------

struct Diagnostics {
    std::vector<double> losses;             // first solve
    std::vector<double> reestimate_losses;  // second solve
    std::size_t iterations = 0;
    std::size_t reestimate_iterations = 0;
    bool converged = false;
    double beta = 0.0;
    std::size_t m0_pixels = 0;
    std::size_t active_pixels = 0;
    std::size_t affected_cells = 0;
    std::size_t crop_rows = 0, crop_cols = 0;
    std::size_t inpaint_iterations = 0;
    std::map<std::string, double> seconds;  // wall time per stage
    std::vector<std::string> warnings;
};

struct RunResult {
    Tensor heat;     // per-pixel baseline scores
    Mask m0;         // baseline mask
    Mask m_dilated;  // optimisable region
    Tensor n0;       // inpainted start
    Tensor n;        // first-solve estimate
    Mask m_star;     // final mask
    Tensor n_star;   // final estimate
    Diagnostics diag;
};

struct RunInputs {
    const Tensor* x = nullptr;
    const Extractor* extractor = nullptr;
    const ScoringBackend* backend = nullptr;
    const MogPrior* prior = nullptr;
    const Mask* gt = nullptr;  // required by max_f1 mode only
};

// Per-pixel baseline anomaly map of x.
Tensor baseline_heat(const Extractor& extractor, const ScoringBackend& backend, const Tensor& x);

RunResult run(const RunInputs& in, const F2PADConfig& cfg);

// Line-delimited JSON: one summary line, then one line per loss value.
void write_diagnostics(std::ostream& os, const Diagnostics& d);

}  // namespace f2pad
