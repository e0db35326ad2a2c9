#include "f2pad/backends.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <string>

#include "f2pad/error.hpp"
#include "f2pad/log.hpp"
#include "f2pad/tensor_io.hpp"

namespace f2pad {

namespace {

double sq_dist(const double* a, const double* b, std::size_t c) {
    double s = 0.0;
    for (std::size_t k = 0; k < c; ++k) {
        const double d = a[k] - b[k];
        s += d * d;
    }
    return s;
}

void check_stacks(std::span<const FeatureStack> train, std::size_t min_count, std::string_view what) {
    if (train.size() < min_count) {
        throw ValidationError(std::string(what) + ": need at least " + std::to_string(min_count) +
                              " training stacks, got " + std::to_string(train.size()));
    }
    const Shape& shape = train[0].concat.shape();
    require_hwc(train[0].concat, 0, what);
    for (std::size_t n = 1; n < train.size(); ++n) {
        if (train[n].concat.shape() != shape) {
            throw ShapeError(std::string(what) + ": training stack " + std::to_string(n) + " has shape " +
                             shape_str(train[n].concat.shape()) + ", expected " + shape_str(shape));
        }
    }
}

// Validates the window against a taped concat map and the model grid; returns window dims.
std::pair<std::size_t, std::size_t> check_window(const Tensor& concat, const CellWindow& window, std::size_t grid_h,
                                                 std::size_t grid_w, std::size_t c, std::string_view what) {
    require_hwc(concat, c, what);
    const std::size_t wh = concat.dim(0), ww = concat.dim(1);
    if (window.row0 + wh > grid_h) {
        throw ShapeError(std::string(what) + ": feature dim 0 (" + std::to_string(wh) + " at row " +
                         std::to_string(window.row0) + ") exceeds model grid height " + std::to_string(grid_h));
    }
    if (window.col0 + ww > grid_w) {
        throw ShapeError(std::string(what) + ": feature dim 1 (" + std::to_string(ww) + " at col " +
                         std::to_string(window.col0) + ") exceeds model grid width " + std::to_string(grid_w));
    }
    if (window.include.size() != 0 && (window.include.height() != wh || window.include.width() != ww)) {
        throw ShapeError(std::string(what) + ": window mask dims do not match feature dims");
    }
    return {wh, ww};
}

bool included(const CellWindow& window, std::size_t i, std::size_t j) {
    return window.include.size() == 0 || window.include(i, j);
}

// Returns (distance, bank index) of the best member; ties go to the lowest bank index.
std::pair<double, std::uint32_t> nearest(const MemoryBank& bank, std::span<const std::uint32_t> members, const double* f) {
    double best = std::numeric_limits<double>::infinity();
    std::uint32_t best_idx = std::numeric_limits<std::uint32_t>::max();
    for (std::uint32_t m : members) {
        const double d = sq_dist(f, bank.feature(m), bank.c);
        if (d < best || (d == best && m < best_idx)) {
            best = d;
            best_idx = m;
        }
    }
    return {best, best_idx};
}

}  // namespace

// ---- Gaussian field ---------------------------------------------------------

double GaussianField::score(std::size_t i, std::size_t j, const double* f) const {
    const double* mu = mean_at(i, j);
    const double* L = chol_at(i, j);
    double s = 0.0;
    for (std::size_t k = 0; k < c; ++k) {
        double t = 0.0;
        for (std::size_t r = k; r < c; ++r) t += L[r * c + k] * (f[r] - mu[r]);
        s += t * t;
    }
    return s;
}

double GaussianField::score_and_grad(std::size_t i, std::size_t j, const double* f, double* grad) const {
    const double* mu = mean_at(i, j);
    const double* L = chol_at(i, j);
    std::vector<double> t(c, 0.0);
    double s = 0.0;
    for (std::size_t k = 0; k < c; ++k) {
        double acc = 0.0;
        for (std::size_t r = k; r < c; ++r) acc += L[r * c + k] * (f[r] - mu[r]);
        t[k] = acc;
        s += acc * acc;
    }
    for (std::size_t r = 0; r < c; ++r) {
        double acc = 0.0;
        for (std::size_t k = 0; k <= r; ++k) acc += L[r * c + k] * t[k];
        grad[r] = 2.0 * acc;
    }
    return s;
}

GaussianField fit_gaussian_field(std::span<const FeatureStack> train, double ridge) {
    check_stacks(train, 2, "fit_gaussian_field");
    if (!(ridge > 0.0) || !std::isfinite(ridge)) throw ValidationError("fit_gaussian_field: ridge must be > 0");
    GaussianField field;
    field.h = train[0].concat.dim(0);
    field.w = train[0].concat.dim(1);
    field.c = train[0].concat.dim(2);
    field.ridge = ridge;
    const std::size_t c = field.c;
    const auto n = static_cast<double>(train.size());
    field.mean.assign(field.h * field.w * c, 0.0);
    field.precision_chol.assign(field.h * field.w * c * c, 0.0);

    Eigen::MatrixXd cov(c, c);
    Eigen::VectorXd mu(c), d(c);
    for (std::size_t i = 0; i < field.h; ++i) {
        for (std::size_t j = 0; j < field.w; ++j) {
            mu.setZero();
            for (const auto& s : train) {
                const double* f = s.concat.data().data() + (i * field.w + j) * c;
                for (std::size_t k = 0; k < c; ++k) mu[k] += f[k];
            }
            mu /= n;
            cov.setZero();
            for (const auto& s : train) {
                const double* f = s.concat.data().data() + (i * field.w + j) * c;
                for (std::size_t k = 0; k < c; ++k) d[k] = f[k] - mu[k];
                cov.selfadjointView<Eigen::Lower>().rankUpdate(d);
            }
            cov = cov.selfadjointView<Eigen::Lower>();
            cov /= (n - 1.0);
            cov.diagonal().array() += ridge;

            Eigen::LLT<Eigen::MatrixXd> llt(cov);
            if (llt.info() != Eigen::Success) {
                throw NumericError("fit_gaussian_field: covariance at (" + std::to_string(i) + "," + std::to_string(j) +
                                   ") is not positive definite; features are degenerate");
            }
            const Eigen::MatrixXd precision = llt.solve(Eigen::MatrixXd::Identity(c, c));
            Eigen::LLT<Eigen::MatrixXd> pllt(0.5 * (precision + precision.transpose()));
            if (pllt.info() != Eigen::Success) {
                throw NumericError("fit_gaussian_field: precision at (" + std::to_string(i) + "," + std::to_string(j) +
                                   ") is not positive definite");
            }
            const Eigen::MatrixXd L = pllt.matrixL();
            double* dst = field.precision_chol.data() + (i * field.w + j) * c * c;
            for (std::size_t r = 0; r < c; ++r) {
                for (std::size_t k = 0; k <= r; ++k) dst[r * c + k] = L(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k));
            }
            std::copy(mu.data(), mu.data() + c, field.mean.data() + (i * field.w + j) * c);
        }
    }
    return field;
}

double default_ridge(std::span<const FeatureStack> train, double rel) {
    check_stacks(train, 2, "default_ridge");
    const std::size_t h = train[0].concat.dim(0), w = train[0].concat.dim(1), c = train[0].concat.dim(2);
    const auto n = static_cast<double>(train.size());
    double total = 0.0;
    for (std::size_t p = 0; p < h * w; ++p) {
        for (std::size_t k = 0; k < c; ++k) {
            double s = 0.0, s2 = 0.0;
            for (const auto& st : train) {
                const double v = st.concat.data()[p * c + k];
                s += v;
                s2 += v * v;
            }
            const double mean = s / n;
            total += std::max(0.0, (s2 - n * mean * mean) / (n - 1.0));
        }
    }
    const double mean_trace_per_channel = total / static_cast<double>(h * w * c);
    return rel * mean_trace_per_channel;
}

Tensor padim_scores(const GaussianField& field, const Tensor& concat) {
    require_hwc(concat, field.c, "padim_scores");
    if (concat.dim(0) != field.h || concat.dim(1) != field.w) {
        throw ShapeError("padim_scores: feature map " + shape_str(concat.shape()) + " does not match field grid " +
                         std::to_string(field.h) + "x" + std::to_string(field.w));
    }
    Tensor out({field.h, field.w}, 0.0);
    for (std::size_t i = 0; i < field.h; ++i) {
        for (std::size_t j = 0; j < field.w; ++j) {
            out[i * field.w + j] = field.score(i, j, concat.data().data() + (i * field.w + j) * field.c);
        }
    }
    return out;
}

Var padim_loss(const GaussianField& field, Var concat, const CellWindow& window) {
    const Tensor& f = concat.value();
    const auto [wh, ww] = check_window(f, window, field.h, field.w, field.c, "padim_loss");
    const std::size_t c = field.c;
    auto grads = std::make_shared<std::vector<double>>(f.size(), 0.0);
    double total = 0.0;
    for (std::size_t i = 0; i < wh; ++i) {
        for (std::size_t j = 0; j < ww; ++j) {
            if (!included(window, i, j)) continue;
            const std::size_t p = (i * ww + j) * c;
            total += field.score_and_grad(window.row0 + i, window.col0 + j, f.data().data() + p, grads->data() + p);
        }
    }
    return concat.tape->record(Tensor({1}, total), {concat}, [grads](const Tensor& g, std::span<Tensor* const> pg) {
        if (pg[0] == nullptr) return;
        auto d = pg[0]->data();
        const double gs = g[0];
        for (std::size_t k = 0; k < d.size(); ++k) d[k] += gs * (*grads)[k];
    });
}

// ---- memory bank ------------------------------------------------------------

MemoryBank build_memory_bank(std::span<const FeatureStack> train) {
    check_stacks(train, 1, "build_memory_bank");
    MemoryBank bank;
    bank.c = train[0].concat.dim(2);
    for (const auto& s : train) bank.features.insert(bank.features.end(), s.concat.data().begin(), s.concat.data().end());
    bank.coreset.resize(bank.size());
    for (std::size_t k = 0; k < bank.coreset.size(); ++k) bank.coreset[k] = static_cast<std::uint32_t>(k);
    return bank;
}

std::vector<std::uint32_t> coreset_select_from(const MemoryBank& bank, std::size_t m, std::size_t start) {
    const std::size_t n = bank.size();
    if (m < 1 || m > n) {
        throw ValidationError("coreset_select: m=" + std::to_string(m) + " outside [1, " + std::to_string(n) + "]");
    }
    if (start >= n) throw ValidationError("coreset_select: start index out of range");
    std::vector<std::uint32_t> picked{static_cast<std::uint32_t>(start)};
    std::vector<char> chosen(n, 0);
    chosen[start] = 1;
    std::vector<double> min_dist(n);
    for (std::size_t k = 0; k < n; ++k) min_dist[k] = sq_dist(bank.feature(k), bank.feature(start), bank.c);
    while (picked.size() < m) {
        std::size_t best = n;
        for (std::size_t k = 0; k < n; ++k) {
            if (chosen[k]) continue;
            if (best == n || min_dist[k] > min_dist[best]) best = k;
        }
        picked.push_back(static_cast<std::uint32_t>(best));
        chosen[best] = 1;
        const double* fb = bank.feature(best);
        for (std::size_t k = 0; k < n; ++k) min_dist[k] = std::min(min_dist[k], sq_dist(bank.feature(k), fb, bank.c));
    }
    return picked;
}

std::vector<std::uint32_t> coreset_select(const MemoryBank& bank, std::size_t m, std::uint64_t seed) {
    if (bank.size() == 0) throw ValidationError("coreset_select: empty bank");
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> pick(0, bank.size() - 1);
    return coreset_select_from(bank, m, pick(rng));
}

void build_candidate_sets(MemoryBank& bank, const Tensor& concat0, std::size_t size) {
    require_hwc(concat0, bank.c, "build_candidate_sets");
    if (size < 1) throw ValidationError("build_candidate_sets: size must be >= 1");
    if (bank.coreset.empty()) throw ValidationError("build_candidate_sets: empty coreset");
    if (size > bank.coreset.size()) {
        log::warn("candidate-set size " + std::to_string(size) + " exceeds coreset size " +
                  std::to_string(bank.coreset.size()) + "; clamping");
        size = bank.coreset.size();
    }
    bank.grid_h = concat0.dim(0);
    bank.grid_w = concat0.dim(1);
    bank.candidates_per_cell = size;
    bank.candidate_sets.assign(bank.grid_h * bank.grid_w * size, 0);
    std::vector<std::pair<double, std::uint32_t>> dist(bank.coreset.size());
    for (std::size_t p = 0; p < bank.grid_h * bank.grid_w; ++p) {
        const double* f = concat0.data().data() + p * bank.c;
        for (std::size_t k = 0; k < bank.coreset.size(); ++k) {
            dist[k] = {sq_dist(f, bank.feature(bank.coreset[k]), bank.c), bank.coreset[k]};
        }
        std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(size), dist.end());
        for (std::size_t k = 0; k < size; ++k) bank.candidate_sets[p * size + k] = dist[k].second;
    }
}

Tensor patchcore_scores(const MemoryBank& bank, const Tensor& concat) {
    if (!bank.has_candidates()) throw ValidationError("patchcore_scores: candidate sets have not been built");
    require_hwc(concat, bank.c, "patchcore_scores");
    if (concat.dim(0) != bank.grid_h || concat.dim(1) != bank.grid_w) {
        throw ShapeError("patchcore_scores: feature grid does not match candidate-set grid");
    }
    Tensor out({bank.grid_h, bank.grid_w}, 0.0);
    for (std::size_t i = 0; i < bank.grid_h; ++i) {
        for (std::size_t j = 0; j < bank.grid_w; ++j) {
            out[i * bank.grid_w + j] =
                nearest(bank, bank.candidates(i, j), concat.data().data() + (i * bank.grid_w + j) * bank.c).first;
        }
    }
    return out;
}

Tensor exact_patchcore_scores(const MemoryBank& bank, const Tensor& concat) {
    require_hwc(concat, bank.c, "exact_patchcore_scores");
    if (bank.coreset.empty()) throw ValidationError("exact_patchcore_scores: empty coreset");
    const std::size_t h = concat.dim(0), w = concat.dim(1);
    Tensor out({h, w}, 0.0);
    for (std::size_t p = 0; p < h * w; ++p) out[p] = nearest(bank, bank.coreset, concat.data().data() + p * bank.c).first;
    return out;
}

Var patchcore_loss(const MemoryBank& bank, Var concat, const CellWindow& window) {
    if (!bank.has_candidates()) throw ValidationError("patchcore_loss: candidate sets have not been built");
    const Tensor& f = concat.value();
    const auto [wh, ww] = check_window(f, window, bank.grid_h, bank.grid_w, bank.c, "patchcore_loss");
    const std::size_t c = bank.c;
    auto grads = std::make_shared<std::vector<double>>(f.size(), 0.0);
    double total = 0.0;
    for (std::size_t i = 0; i < wh; ++i) {
        for (std::size_t j = 0; j < ww; ++j) {
            if (!included(window, i, j)) continue;
            const std::size_t p = (i * ww + j) * c;
            const double* fp = f.data().data() + p;
            const auto [d, idx] = nearest(bank, bank.candidates(window.row0 + i, window.col0 + j), fp);
            total += d;
            const double* fm = bank.feature(idx);
            for (std::size_t k = 0; k < c; ++k) (*grads)[p + k] = 2.0 * (fp[k] - fm[k]);
        }
    }
    return concat.tape->record(Tensor({1}, total), {concat}, [grads](const Tensor& g, std::span<Tensor* const> pg) {
        if (pg[0] == nullptr) return;
        auto d = pg[0]->data();
        const double gs = g[0];
        for (std::size_t k = 0; k < d.size(); ++k) d[k] += gs * (*grads)[k];
    });
}

Tensor MemoryBankBackend::location_scores(const Tensor& concat) const {
    return bank_.has_candidates() ? patchcore_scores(bank_, concat) : exact_patchcore_scores(bank_, concat);
}

// ---- persistence ------------------------------------------------------------

namespace {

void add_extractor(Bundle& bundle, const Extractor& extractor) {
    bundle.header["extractor"] = extractor.spec().to_json();
    for (std::size_t l = 0; l < extractor.weights().size(); ++l) {
        bundle.tensors.emplace("weights." + std::to_string(l), extractor.weights()[l]);
    }
}

Extractor read_extractor(const Bundle& bundle) {
    if (!bundle.header.contains("extractor")) throw IoError("model: header lacks extractor spec");
    ExtractorSpec spec = ExtractorSpec::from_json(bundle.header["extractor"]);
    std::vector<Tensor> weights;
    for (std::size_t l = 0; l < spec.layers.size(); ++l) weights.push_back(bundle.tensor("weights." + std::to_string(l)));
    return Extractor(std::move(spec), std::move(weights));
}

std::vector<double> to_doubles(const std::vector<std::uint32_t>& v) { return {v.begin(), v.end()}; }

}  // namespace

void save_gaussian_field(const std::filesystem::path& path, const GaussianField& field, const Extractor& extractor) {
    Bundle bundle;
    bundle.header["kind"] = "gaussian_field";
    bundle.header["ridge"] = field.ridge;
    add_extractor(bundle, extractor);
    bundle.tensors.emplace("mean", Tensor({field.h, field.w, field.c}, field.mean));
    bundle.tensors.emplace("precision_chol", Tensor({field.h, field.w, field.c, field.c}, field.precision_chol));
    save_bundle(path, bundle);
}

void save_memory_bank(const std::filesystem::path& path, const MemoryBank& bank, const Extractor& extractor) {
    Bundle bundle;
    bundle.header["kind"] = "memory_bank";
    add_extractor(bundle, extractor);
    bundle.tensors.emplace("features", Tensor({bank.size(), bank.c}, bank.features));
    bundle.tensors.emplace("coreset", Tensor({bank.coreset.size()}, to_doubles(bank.coreset)));
    save_bundle(path, bundle);
}

LoadedModel load_model(const std::filesystem::path& path, std::size_t candidate_size) {
    const Bundle bundle = load_bundle(path);
    Extractor extractor = read_extractor(bundle);
    const std::string kind = bundle.header.value("kind", "");
    if (kind == "gaussian_field") {
        GaussianField field;
        const Tensor& mean = bundle.tensor("mean");
        const Tensor& chol = bundle.tensor("precision_chol");
        if (mean.rank() != 3 || chol.rank() != 4) throw IoError("model: malformed gaussian field tensors");
        field.h = mean.dim(0);
        field.w = mean.dim(1);
        field.c = mean.dim(2);
        field.ridge = bundle.header.value("ridge", 0.0);
        field.mean = mean.vec();
        field.precision_chol = chol.vec();
        return {std::move(extractor), std::make_unique<GaussianBackend>(std::move(field))};
    }
    if (kind == "memory_bank") {
        MemoryBank bank;
        const Tensor& features = bundle.tensor("features");
        if (features.rank() != 2) throw IoError("model: malformed memory bank tensor");
        bank.c = features.dim(1);
        bank.features = features.vec();
        for (double v : bundle.tensor("coreset").data()) {
            if (v < 0 || v >= static_cast<double>(bank.size())) throw IoError("model: coreset index out of range");
            bank.coreset.push_back(static_cast<std::uint32_t>(v));
        }
        return {std::move(extractor), std::make_unique<MemoryBankBackend>(std::move(bank), candidate_size)};
    }
    throw IoError("model: unknown kind '" + kind + "' in " + path.string());
}

}  // namespace f2pad
