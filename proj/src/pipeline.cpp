#include "f2pad/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>
#include <string>

#include <json.hpp>

#include "f2pad/error.hpp"
#include "f2pad/image_io.hpp"
#include "f2pad/log.hpp"

namespace f2pad {

const char* ablation_name(Ablation a) {
    switch (a) {
        case Ablation::full: return "f2pad";
        case Ablation::no_prior: return "no-prior";
        case Ablation::no_sparsity: return "no-sparsity";
        case Ablation::init_only: return "init-only";
        case Ablation::no_sharing: return "no-sharing";
    }
    return "unknown";
}

void F2PADConfig::validate() const {
    auto need = [](bool ok, const char* what) {
        if (!ok) throw ValidationError(std::string("config: ") + what);
    };
    need(alpha1 >= 0.0, "alpha1 must be >= 0");
    need(alpha2 >= 0.0, "alpha2 must be >= 0");
    need(beta0 >= 0.0, "beta0 must be >= 0");
    need(eps > 0.0, "eps must be > 0");
    need(gamma0 > 0.0, "gamma0 must be > 0");
    need(sigma0 > 0.0, "sigma0 must be > 0");
    need(sigma1 > 0.0, "sigma1 must be > 0");
    need(clip > 0.0, "clip must be > 0");
    need(loss_threshold >= 0.0, "loss_threshold must be >= 0");
    need(step_floor > 0.0, "step_floor must be > 0");
    need(adan_lr > 0.0, "adan_lr must be > 0");
    need(tv_eps >= 0.0, "tv_eps must be >= 0");
    need(tau_a > 0.0, "tau_a must be > 0");
    need(open_size % 2 == 1, "open_size must be odd");
    need(mog_components >= 1, "mog_components must be >= 1");
    need(candidate_size >= 1, "candidate_size must be >= 1");
    need(percentile >= 0.0 && percentile <= 100.0, "percentile must lie in [0, 100]");
    need(init_only_threshold > 0.0, "init_only_threshold must be > 0");
}

F2PADConfig apply_ablation(F2PADConfig cfg, Ablation a) {
    switch (a) {
        case Ablation::full: break;
        case Ablation::no_prior: cfg.alpha1 = 0.0; break;
        case Ablation::no_sparsity: cfg.beta0 = 0.0; break;
        case Ablation::init_only: cfg.init_only = true; break;
        case Ablation::no_sharing: cfg.ks = 0; break;
    }
    return cfg;
}

// ---- mask stages -------------------------------------------------------------

Tensor upsample_scores(const Tensor& s, std::size_t H, std::size_t W) {
    if (s.rank() != 2 || s.dim(0) == 0 || s.dim(1) == 0) throw ShapeError("upsample_scores: expected non-empty [h, w] scores");
    const std::size_t h = s.dim(0), w = s.dim(1);
    Tensor out({H, W}, 0.0);
    auto coord = [](std::size_t dst, std::size_t src_n, std::size_t dst_n, std::size_t& i0, std::size_t& i1, double& f) {
        double c = (static_cast<double>(dst) + 0.5) * static_cast<double>(src_n) / static_cast<double>(dst_n) - 0.5;
        c = std::clamp(c, 0.0, static_cast<double>(src_n - 1));
        i0 = static_cast<std::size_t>(std::floor(c));
        i1 = std::min(i0 + 1, src_n - 1);
        f = c - static_cast<double>(i0);
    };
    for (std::size_t i = 0; i < H; ++i) {
        std::size_t r0, r1;
        double fr;
        coord(i, h, H, r0, r1, fr);
        for (std::size_t j = 0; j < W; ++j) {
            std::size_t c0, c1;
            double fc;
            coord(j, w, W, c0, c1, fc);
            const double top = (1 - fc) * s[r0 * w + c0] + fc * s[r0 * w + c1];
            const double bot = (1 - fc) * s[r1 * w + c0] + fc * s[r1 * w + c1];
            out[i * W + j] = (1 - fr) * top + fr * bot;
        }
    }
    return out;
}

namespace {

void require_heat(const Tensor& heat, std::string_view what) {
    if (heat.rank() != 2) throw ShapeError(std::string(what) + ": expected [H, W] scores, got " + shape_str(heat.shape()));
}

}  // namespace

Mask percentile_mask(const Tensor& heat, double q) {
    require_heat(heat, "percentile_mask");
    if (q < 0.0 || q > 100.0) throw ValidationError("percentile_mask: q must lie in [0, 100]");
    const std::size_t n = heat.size();
    const auto keep_below = static_cast<std::size_t>(std::floor(q / 100.0 * static_cast<double>(n) + 1e-9));
    const std::size_t k = n - std::min(n, keep_below);
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return heat[a] > heat[b]; });
    Mask m(heat.dim(0), heat.dim(1));
    for (std::size_t t = 0; t < k; ++t) m.set_flat(idx[t]);
    return m;
}

Mask threshold_mask(const Tensor& heat, double t) {
    require_heat(heat, "threshold_mask");
    Mask m(heat.dim(0), heat.dim(1));
    for (std::size_t p = 0; p < heat.size(); ++p) m.set_flat(p, heat[p] >= t);
    return m;
}

double f1_score(const Mask& m, const Mask& gt) {
    if (!m.same_dims(gt)) throw ShapeError("f1_score: mask dims differ");
    std::size_t tp = 0;
    for (std::size_t p = 0; p < m.size(); ++p) tp += (m[p] && gt[p]) ? 1 : 0;
    const std::size_t denom = m.count() + gt.count();
    return denom == 0 ? 1.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
}

double max_f1_threshold(std::span<const Tensor> heats, std::span<const Mask> gts) {
    if (heats.size() != gts.size() || heats.empty()) throw ValidationError("max_f1_threshold: need matching, non-empty inputs");
    std::vector<std::pair<double, bool>> px;
    std::size_t positives = 0;
    for (std::size_t k = 0; k < heats.size(); ++k) {
        require_heat(heats[k], "max_f1_threshold");
        if (heats[k].dim(0) != gts[k].height() || heats[k].dim(1) != gts[k].width()) {
            throw ShapeError("max_f1_threshold: heat and mask dims differ for image " + std::to_string(k));
        }
        for (std::size_t p = 0; p < heats[k].size(); ++p) {
            px.emplace_back(heats[k][p], gts[k][p]);
            positives += gts[k][p] ? 1 : 0;
        }
    }
    std::sort(px.begin(), px.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    if (positives == 0) return std::nextafter(px.front().first, std::numeric_limits<double>::infinity());
    double best_f1 = -1.0, best_t = px.front().first;
    std::size_t tp = 0;
    for (std::size_t k = 0; k < px.size(); ++k) {
        tp += px[k].second ? 1 : 0;
        if (k + 1 < px.size() && px[k + 1].first == px[k].first) continue;
        const double f1 = 2.0 * static_cast<double>(tp) / static_cast<double>(k + 1 + positives);
        if (f1 >= best_f1) {
            best_f1 = f1;
            best_t = px[k].first;
        }
    }
    return best_t;
}

double max_f1_threshold(const Tensor& heat, const Mask& gt) {
    return max_f1_threshold(std::span<const Tensor>(&heat, 1), std::span<const Mask>(&gt, 1));
}

namespace {

// Separable square max (dilate) or min (erode) filter; out-of-image neighbours are ignored.
Mask square_filter(const Mask& m, std::size_t r, bool take_max) {
    if (r == 0) return m;
    const std::size_t h = m.height(), w = m.width();
    Mask tmp(h, w), out(h, w);
    for (std::size_t i = 0; i < h; ++i) {
        for (std::size_t j = 0; j < w; ++j) {
            const std::size_t j0 = j >= r ? j - r : 0, j1 = std::min(w - 1, j + r);
            bool v = !take_max;
            for (std::size_t jj = j0; jj <= j1; ++jj) v = take_max ? (v || m(i, jj)) : (v && m(i, jj));
            tmp.set(i, j, v);
        }
    }
    for (std::size_t i = 0; i < h; ++i) {
        const std::size_t i0 = i >= r ? i - r : 0, i1 = std::min(h - 1, i + r);
        for (std::size_t j = 0; j < w; ++j) {
            bool v = !take_max;
            for (std::size_t ii = i0; ii <= i1; ++ii) v = take_max ? (v || tmp(ii, j)) : (v && tmp(ii, j));
            out.set(i, j, v);
        }
    }
    return out;
}

}  // namespace

Mask dilate(const Mask& m, std::size_t radius) { return square_filter(m, radius, true); }
Mask erode(const Mask& m, std::size_t radius) { return square_filter(m, radius, false); }

Mask morph_open(const Mask& m, std::size_t k) {
    if (k % 2 == 0) throw ValidationError("morph_open: structuring element size must be odd");
    return dilate(erode(m, k / 2), k / 2);
}

Tensor inpaint_init(const Tensor& x, const Mask& m0, InpaintStats* stats) {
    require_hwc(x, 0, "inpaint_init");
    if (m0.height() != x.dim(0) || m0.width() != x.dim(1)) throw ShapeError("inpaint_init: mask dims differ from the image");
    Tensor n = x;
    if (!m0.any()) return n;
    if (m0.count() == m0.size()) throw ValidationError("inpaint_init: mask covers the entire image; no boundary data");
    const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
    std::vector<std::size_t> holes;
    for (std::size_t p = 0; p < m0.size(); ++p)
        if (m0[p]) holes.push_back(p);

    auto neighbours = [&](std::size_t p, auto&& fn) {
        const std::size_t i = p / w, j = p % w;
        if (i > 0) fn(p - w);
        if (i + 1 < h) fn(p + w);
        if (j > 0) fn(p - 1);
        if (j + 1 < w) fn(p + 1);
    };
    // Start from the mean of the known pixels bordering the holes.
    std::vector<double> seed(c, 0.0);
    std::size_t nb = 0;
    for (std::size_t p : holes) {
        neighbours(p, [&](std::size_t q) {
            if (m0[q]) return;
            for (std::size_t k = 0; k < c; ++k) seed[k] += x[q * c + k];
            ++nb;
        });
    }
    for (std::size_t p : holes)
        for (std::size_t k = 0; k < c; ++k) n[p * c + k] = seed[k] / static_cast<double>(nb);

    Tensor next = n;
    InpaintStats st;
    for (st.iterations = 1; st.iterations <= 10000; ++st.iterations) {
        double max_upd = 0.0;
        for (std::size_t p : holes) {
            std::size_t cnt = 0;
            for (std::size_t k = 0; k < c; ++k) next[p * c + k] = 0.0;
            neighbours(p, [&](std::size_t q) {
                for (std::size_t k = 0; k < c; ++k) next[p * c + k] += n[q * c + k];
                ++cnt;
            });
            for (std::size_t k = 0; k < c; ++k) {
                next[p * c + k] /= static_cast<double>(cnt);
                max_upd = std::max(max_upd, std::abs(next[p * c + k] - n[p * c + k]));
            }
        }
        for (std::size_t p : holes)
            for (std::size_t k = 0; k < c; ++k) n[p * c + k] = next[p * c + k];
        st.last_update = max_upd;
        if (max_upd < 1e-6) break;
    }
    st.iterations = std::min<std::size_t>(st.iterations, 10000);
    if (stats != nullptr) *stats = st;
    return n;
}

Mask extract_mask(const Tensor& a, double tau) {
    require_hwc(a, 0, "extract_mask");
    if (!(tau > 0.0)) throw ValidationError("extract_mask: tau must be > 0");
    const std::size_t c = a.dim(2);
    Mask m(a.dim(0), a.dim(1));
    for (std::size_t p = 0; p < m.size(); ++p) {
        double s = 0.0;
        for (std::size_t k = 0; k < c; ++k) s += a[p * c + k] * a[p * c + k];
        m.set_flat(p, std::sqrt(s) > tau);
    }
    return m;
}

Tensor anomaly_part(const Tensor& x, const Tensor& n) {
    if (x.shape() != n.shape()) throw ShapeError("anomaly_part: x " + shape_str(x.shape()) + " vs n " + shape_str(n.shape()));
    Tensor a(x.shape(), 0.0);
    for (std::size_t k = 0; k < x.size(); ++k) a[k] = x[k] - n[k];
    return a;
}

// ---- active region -----------------------------------------------------------

ActiveRegion active_region(const Mask& pixels, const Extractor& extractor) {
    ActiveRegion ar;
    ar.pixels = pixels;
    const std::size_t H = pixels.height(), W = pixels.width();
    const std::size_t div = extractor.required_divisor();
    if (H % div != 0 || W % div != 0) {
        throw ShapeError("active_region: image " + std::to_string(H) + "x" + std::to_string(W) + " not divisible by " +
                         std::to_string(div));
    }
    ar.cells = extractor.affected_cells(pixels);
    if (!pixels.any()) return ar;

    const auto& factors = extractor.tap_factors();
    const std::size_t f0 = factors[0];
    std::size_t lo_r = H, hi_r = 0, lo_c = W, hi_c = 0;
    std::vector<char> row_hit(ar.cells.height(), 0), col_hit(ar.cells.width(), 0);
    for (std::size_t i = 0; i < ar.cells.height(); ++i) {
        for (std::size_t j = 0; j < ar.cells.width(); ++j) {
            if (ar.cells(i, j)) row_hit[i] = col_hit[j] = 1;
        }
    }
    auto extend = [&](std::size_t cell, std::size_t extent, int axis, std::size_t& lo, std::size_t& hi) {
        lo = std::min(lo, cell * f0);
        hi = std::max(hi, cell * f0 + f0 - 1);
        for (std::size_t t = 0; t < factors.size(); ++t) {
            const Span s = extractor.receptive_span(t, cell / (factors[t] / f0), extent, axis);
            lo = std::min(lo, s.lo);
            hi = std::max(hi, s.hi);
        }
    };
    for (std::size_t i = 0; i < row_hit.size(); ++i)
        if (row_hit[i]) extend(i, H, 0, lo_r, hi_r);
    for (std::size_t j = 0; j < col_hit.size(); ++j)
        if (col_hit[j]) extend(j, W, 1, lo_c, hi_c);

    ar.row0 = lo_r / div * div;
    ar.col0 = lo_c / div * div;
    ar.rows = std::min(H, (hi_r + div) / div * div) - ar.row0;
    ar.cols = std::min(W, (hi_c + div) / div * div) - ar.col0;

    ar.window.row0 = ar.row0 / f0;
    ar.window.col0 = ar.col0 / f0;
    const std::size_t wh = ar.rows / f0, ww = ar.cols / f0;
    ar.window.include = Mask(wh, ww);
    for (std::size_t i = 0; i < wh; ++i)
        for (std::size_t j = 0; j < ww; ++j) ar.window.include.set(i, j, ar.cells(ar.window.row0 + i, ar.window.col0 + j));
    ar.crop_pixels = Mask(ar.rows, ar.cols);
    for (std::size_t i = 0; i < ar.rows; ++i)
        for (std::size_t j = 0; j < ar.cols; ++j) ar.crop_pixels.set(i, j, pixels(ar.row0 + i, ar.col0 + j));
    return ar;
}

Tensor crop(const Tensor& image, std::size_t row0, std::size_t col0, std::size_t rows, std::size_t cols) {
    require_hwc(image, 0, "crop");
    if (row0 + rows > image.dim(0) || col0 + cols > image.dim(1)) throw ShapeError("crop: window exceeds the image");
    const std::size_t c = image.dim(2), W = image.dim(1);
    Tensor out({rows, cols, c}, 0.0);
    for (std::size_t i = 0; i < rows; ++i) {
        const auto src = image.data().begin() + static_cast<std::ptrdiff_t>(((row0 + i) * W + col0) * c);
        std::copy(src, src + static_cast<std::ptrdiff_t>(cols * c), out.data().begin() + static_cast<std::ptrdiff_t>(i * cols * c));
    }
    return out;
}

void paste(Tensor& image, const Tensor& patch, std::size_t row0, std::size_t col0) {
    require_hwc(image, 0, "paste");
    require_hwc(patch, image.dim(2), "paste");
    const std::size_t rows = patch.dim(0), cols = patch.dim(1), c = image.dim(2), W = image.dim(1);
    if (row0 + rows > image.dim(0) || col0 + cols > W) throw ShapeError("paste: patch exceeds the image");
    for (std::size_t i = 0; i < rows; ++i) {
        const auto src = patch.data().begin() + static_cast<std::ptrdiff_t>(i * cols * c);
        std::copy(src, src + static_cast<std::ptrdiff_t>(cols * c),
                  image.data().begin() + static_cast<std::ptrdiff_t>(((row0 + i) * W + col0) * c));
    }
}

// ---- objective ---------------------------------------------------------------

F2PADObjective::F2PADObjective(const Extractor& extractor, const ScoringBackend& backend, const MogPrior* prior, Tensor x,
                               CellWindow window, ObjectiveWeights weights)
    : extractor_(extractor), backend_(backend), prior_(prior), x_(std::move(x)), window_(std::move(window)), w_(weights) {
    require_hwc(x_, 3, "F2PADObjective");
    if (w_.alpha1 > 0.0 && (prior_ == nullptr || prior_->components.empty())) {
        throw ValidationError("F2PADObjective: alpha1 > 0 needs a fitted pixel prior");
    }
}

double F2PADObjective::backend_loss(const Tensor& n, Tensor* grad) const {
    Tape tape;
    const Var img = tape.leaf(n);
    const TapedFeatures feats = extractor_.extract(img);
    const Var loss = backend_.loss(feats.concat, window_);
    if (grad != nullptr) {
        const Gradients g = tape.backward(loss);
        *grad = g[img];
    }
    return loss.value()[0];
}

ObjectiveTerms F2PADObjective::terms(const Tensor& n, Tensor* gb, Tensor* gp, Tensor* gt, Tensor* gs) const {
    if (n.shape() != x_.shape()) throw ShapeError("objective: n " + shape_str(n.shape()) + " vs x " + shape_str(x_.shape()));
    ObjectiveTerms t;
    t.backend = backend_loss(n, gb);
    if (prior_ != nullptr && !prior_->components.empty()) t.prior = mog_prior_energy(*prior_, n, gp);
    t.tv = tv_energy(n, w_.tv_eps, gt);
    t.sparsity = log_penalty(anomaly_part(x_, n), w_.eps, gs);
    if (gs != nullptr) {
        for (double& v : gs->data()) v = -v;  // a = x - n
    }
    t.total = t.backend + w_.alpha1 * t.prior + w_.alpha2 * t.tv + w_.beta * t.sparsity;
    return t;
}

double F2PADObjective::operator()(const Tensor& n, Tensor& grad) const {
    if (n.shape() != x_.shape()) throw ShapeError("objective: n " + shape_str(n.shape()) + " vs x " + shape_str(x_.shape()));
    double total = backend_loss(n, &grad);
    Tensor g;
    auto accumulate = [&](double weight, double value, double sign) {
        total += weight * value;
        for (std::size_t k = 0; k < grad.size(); ++k) grad[k] += sign * weight * g[k];
    };
    if (w_.alpha1 != 0.0) accumulate(w_.alpha1, mog_prior_energy(*prior_, n, &g), 1.0);
    if (w_.alpha2 != 0.0) accumulate(w_.alpha2, tv_energy(n, w_.tv_eps, &g), 1.0);
    if (w_.beta != 0.0) accumulate(w_.beta, log_penalty(anomaly_part(x_, n), w_.eps, &g), -1.0);
    return total;
}

double beta_from_mask(double beta0, const Mask& m0) {
    const std::size_t cnt = m0.count();
    if (cnt == 0) throw ValidationError("beta_from_mask: initial mask is empty");
    return beta0 / static_cast<double>(cnt);
}

// ---- full run ----------------------------------------------------------------

Tensor baseline_heat(const Extractor& extractor, const ScoringBackend& backend, const Tensor& x) {
    const FeatureStack fs = extractor.extract(x);
    return upsample_scores(backend.location_scores(fs.concat), x.dim(0), x.dim(1));
}

namespace {

[[noreturn]] void rethrow_stage(const std::string& name) {
    try {
        throw;
    } catch (const ValidationError& e) {
        throw ValidationError("stage " + name + ": " + e.what());
    } catch (const NumericError& e) {
        throw NumericError("stage " + name + ": " + e.what());
    } catch (const IoError& e) {
        throw IoError("stage " + name + ": " + e.what());
    } catch (const std::exception& e) {
        throw Error("stage " + name + ": " + e.what());
    }
}

class StageTimer {
public:
    StageTimer(Diagnostics& d, std::string name) : d_(d), name_(std::move(name)), t0_(std::chrono::steady_clock::now()) {}
    ~StageTimer() {
        d_.seconds[name_] += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count();
    }
    const std::string& name() const { return name_; }

private:
    Diagnostics& d_;
    std::string name_;
    std::chrono::steady_clock::time_point t0_;
};

SolverConfig solver_config(const F2PADConfig& cfg, const ScoringBackend& backend) {
    SolverConfig sc;
    sc.clip = cfg.clip;
    sc.gamma0 = cfg.gamma0;
    sc.step_floor = cfg.step_floor;
    sc.loss_threshold = cfg.loss_threshold > 0.0 ? cfg.loss_threshold : backend.default_loss_threshold();
    sc.max_iter = cfg.max_iter;
    sc.adan.lr = cfg.adan_lr;
    sc.lower = valid_lower();
    sc.upper = valid_upper();
    return sc;
}

// Solves on the crop of `region`, starting from `start`; returns the full-size estimate.
SolveResult solve_region(const RunInputs& in, const ScoringBackend& backend, const F2PADConfig& cfg, const ActiveRegion& ar,
                         const Tensor& start, double beta, Tensor& full_out) {
    const Tensor& x = *in.x;
    const Tensor xc = crop(x, ar.row0, ar.col0, ar.rows, ar.cols);
    const Tensor nc = crop(start, ar.row0, ar.col0, ar.rows, ar.cols);
    ObjectiveWeights w;
    w.alpha1 = cfg.alpha1;
    w.alpha2 = cfg.alpha2;
    w.beta = beta;
    w.eps = cfg.eps;
    w.tv_eps = cfg.tv_eps;
    const F2PADObjective objective(*in.extractor, backend, in.prior, xc, ar.window, w);
    const SharingKernel kernel = build_sharing_kernel(xc, cfg.ks, cfg.sigma0, cfg.sigma1);
    SolveResult res = solve(std::cref(objective), xc, nc, kernel, &ar.crop_pixels, solver_config(cfg, backend));
    full_out = start;
    paste(full_out, res.n, ar.row0, ar.col0);
    return res;
}

void warn(Diagnostics& d, const std::string& msg) {
    d.warnings.push_back(msg);
    log::warn(msg);
}

}  // namespace

RunResult run(const RunInputs& in, const F2PADConfig& cfg) {
    if (in.x == nullptr || in.extractor == nullptr || in.backend == nullptr) {
        throw ValidationError("run: image, extractor and backend are required");
    }
    cfg.validate();
    const Tensor& x = *in.x;
    require_hwc(x, 3, "run");
    RunResult r;
    Diagnostics& d = r.diag;
    std::unique_ptr<ScoringBackend> backend = in.backend->clone();

    auto stage = [&](const std::string& name, auto&& fn) {
        StageTimer timer(d, name);
        try {
            fn();
        } catch (...) {
            rethrow_stage(name);
        }
    };

    stage("initial_mask", [&] {
        r.heat = baseline_heat(*in.extractor, *backend, x);
        switch (cfg.init_mode) {
            case InitMaskMode::percentile: r.m0 = percentile_mask(r.heat, cfg.percentile); break;
            case InitMaskMode::threshold: r.m0 = threshold_mask(r.heat, cfg.init_threshold); break;
            case InitMaskMode::max_f1:
                if (in.gt == nullptr) throw ValidationError("max_f1 initial mask needs a ground-truth mask");
                r.m0 = threshold_mask(r.heat, max_f1_threshold(r.heat, *in.gt));
                break;
        }
    });
    d.m0_pixels = r.m0.count();
    const std::size_t H = x.dim(0), W = x.dim(1);
    if (!r.m0.any()) {
        warn(d, "initial mask is empty; returning the input as anomaly-free");
        r.m_dilated = Mask(H, W);
        r.m_star = Mask(H, W);
        r.n0 = r.n = r.n_star = x;
        return r;
    }

    stage("inpaint", [&] {
        InpaintStats st;
        r.n0 = inpaint_init(x, r.m0, &st);
        d.inpaint_iterations = st.iterations;
    });

    if (cfg.init_only) {
        stage("extract_mask", [&] {
            r.m_dilated = r.m0;
            r.n = r.n_star = r.n0;
            r.m_star = morph_open(extract_mask(anomaly_part(x, r.n0), cfg.init_only_threshold), cfg.open_size);
        });
        return r;
    }

    ActiveRegion ar;
    stage("active_region", [&] {
        r.m_dilated = dilate(r.m0, cfg.dilation);
        ar = active_region(r.m_dilated, *in.extractor);
        d.active_pixels = ar.pixels.count();
        d.affected_cells = ar.cells.count();
        d.crop_rows = ar.rows;
        d.crop_cols = ar.cols;
    });

    stage("prepare", [&] {
        if (backend->kind() == BackendKind::memory_bank) backend->prepare(in.extractor->extract(r.n0).concat);
    });

    stage("solve", [&] {
        d.beta = beta_from_mask(cfg.beta0, r.m0);
        const SolveResult res = solve_region(in, *backend, cfg, ar, r.n0, d.beta, r.n);
        d.losses = res.losses;
        d.iterations = res.iterations;
        d.converged = res.converged;
    });

    stage("extract_mask", [&] {
        r.m_star = morph_open(extract_mask(anomaly_part(x, r.n), cfg.tau_a), cfg.open_size);
    });

    stage("re_estimate", [&] {
        if (!r.m_star.any()) {
            r.n_star = x;
            return;
        }
        if (!cfg.re_estimate) {
            r.n_star = r.n;
            return;
        }
        // Restart from the first estimate inside m*, the input elsewhere.
        Tensor start = x;
        for (std::size_t p = 0; p < H * W; ++p) {
            if (!r.m_star[p]) continue;
            for (std::size_t k = 0; k < 3; ++k) start[p * 3 + k] = r.n[p * 3 + k];
        }
        const ActiveRegion ar2 = active_region(r.m_star, *in.extractor);
        const SolveResult res = solve_region(in, *backend, cfg, ar2, start, 0.0, r.n_star);
        d.reestimate_losses = res.losses;
        d.reestimate_iterations = res.iterations;
    });
    return r;
}

void write_diagnostics(std::ostream& os, const Diagnostics& d) {
    nlohmann::json summary = {{"event", "summary"},
                              {"iterations", d.iterations},
                              {"reestimate_iterations", d.reestimate_iterations},
                              {"converged", d.converged},
                              {"beta", d.beta},
                              {"m0_pixels", d.m0_pixels},
                              {"active_pixels", d.active_pixels},
                              {"affected_cells", d.affected_cells},
                              {"crop", {d.crop_rows, d.crop_cols}},
                              {"inpaint_iterations", d.inpaint_iterations},
                              {"seconds", d.seconds},
                              {"warnings", d.warnings}};
    if (!d.losses.empty()) summary["final_loss"] = d.losses.back();
    os << summary.dump() << '\n';
    for (std::size_t k = 0; k < d.losses.size(); ++k) {
        os << nlohmann::json{{"event", "loss"}, {"phase", "solve"}, {"iter", k}, {"loss", d.losses[k]}}.dump() << '\n';
    }
    for (std::size_t k = 0; k < d.reestimate_losses.size(); ++k) {
        os << nlohmann::json{{"event", "loss"}, {"phase", "re_estimate"}, {"iter", k}, {"loss", d.reestimate_losses[k]}}.dump()
           << '\n';
    }
}

}  // namespace f2pad
