#include "f2pad/regularizers.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <string>

#include "f2pad/error.hpp"
#include "f2pad/log.hpp"
#include "f2pad/tensor_io.hpp"

namespace f2pad {

namespace {

void prepare_grad(Tensor* grad, const Tensor& like) {
    if (grad != nullptr) *grad = Tensor(like.shape(), 0.0);
}

Eigen::Matrix3d to_mat(const std::array<double, 9>& a) {
    Eigen::Matrix3d m;
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) m(r, c) = a[static_cast<std::size_t>(r * 3 + c)];
    return m;
}

std::array<double, 9> from_mat(const Eigen::Matrix3d& m) {
    std::array<double, 9> a{};
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) a[static_cast<std::size_t>(r * 3 + c)] = m(r, c);
    return a;
}

Eigen::Matrix3d clamp_eigenvalues(const Eigen::Matrix3d& cov, double floor) {
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(0.5 * (cov + cov.transpose()));
    Eigen::Vector3d ev = es.eigenvalues().cwiseMax(floor);
    return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

double sq_dist3(const Pixel& a, const Pixel& b) {
    double s = 0.0;
    for (int k = 0; k < 3; ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
    return s;
}

struct Mixture {
    std::vector<MogComponent> comps;
    std::vector<double> log_norm;  // log w_k - 0.5 log det(2 pi cov_k)
};

Mixture make_mixture(std::vector<MogComponent> comps) {
    Mixture m;
    for (auto& c : comps) {
        finalize_component(c);
        double logdet_prec = 0.0;
        for (int k = 0; k < 3; ++k) logdet_prec += 2.0 * std::log(c.prec_chol[static_cast<std::size_t>(k * 3 + k)]);
        m.log_norm.push_back(std::log(c.weight) + 0.5 * logdet_prec - 1.5 * std::log(2.0 * std::numbers::pi));
    }
    m.comps = std::move(comps);
    return m;
}

// Fills log-responsibilities (n x q, normalised) and returns the mean log-likelihood.
double e_step(const Mixture& mix, std::span<const Pixel> x, std::vector<double>& resp, std::vector<double>& point_ll) {
    const std::size_t n = x.size(), q = mix.comps.size();
    resp.resize(n * q);
    point_ll.resize(n);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < q; ++k) {
            const double v = mix.log_norm[k] - 0.5 * mix.comps[k].quad(x[i].data());
            resp[i * q + k] = v;
            mx = std::max(mx, v);
        }
        double s = 0.0;
        for (std::size_t k = 0; k < q; ++k) s += std::exp(resp[i * q + k] - mx);
        const double lse = mx + std::log(s);
        for (std::size_t k = 0; k < q; ++k) resp[i * q + k] = std::exp(resp[i * q + k] - lse);
        point_ll[i] = lse;
        total += lse;
    }
    return total / static_cast<double>(n);
}

Eigen::Matrix3d sample_cov(std::span<const Pixel> x) {
    Eigen::Vector3d mu = Eigen::Vector3d::Zero();
    for (const auto& p : x) mu += Eigen::Vector3d(p[0], p[1], p[2]);
    mu /= static_cast<double>(x.size());
    Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
    for (const auto& p : x) {
        const Eigen::Vector3d d = Eigen::Vector3d(p[0], p[1], p[2]) - mu;
        cov += d * d.transpose();
    }
    return cov / static_cast<double>(x.size());
}

// Weighted mean and covariance of component k from responsibilities (column k of resp).
MogComponent m_step_component(std::span<const Pixel> x, const std::vector<double>& resp, std::size_t q, std::size_t k,
                              double floor) {
    const std::size_t n = x.size();
    double nk = 0.0;
    Eigen::Vector3d mu = Eigen::Vector3d::Zero();
    for (std::size_t i = 0; i < n; ++i) {
        const double r = resp[i * q + k];
        nk += r;
        mu += r * Eigen::Vector3d(x[i][0], x[i][1], x[i][2]);
    }
    mu /= nk;
    Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
    for (std::size_t i = 0; i < n; ++i) {
        const Eigen::Vector3d d = Eigen::Vector3d(x[i][0], x[i][1], x[i][2]) - mu;
        cov += resp[i * q + k] * (d * d.transpose());
    }
    cov /= nk;
    MogComponent c;
    c.weight = nk / static_cast<double>(n);
    c.mean = {mu[0], mu[1], mu[2]};
    c.cov = from_mat(clamp_eigenvalues(cov, floor));
    return c;
}

std::vector<Pixel> kmeanspp(std::span<const Pixel> x, std::size_t q, std::mt19937_64& rng) {
    std::vector<Pixel> centers;
    std::uniform_int_distribution<std::size_t> pick(0, x.size() - 1);
    centers.push_back(x[pick(rng)]);
    std::vector<double> d2(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) d2[i] = sq_dist3(x[i], centers[0]);
    while (centers.size() < q) {
        double total = 0.0;
        for (double v : d2) total += v;
        std::size_t chosen = 0;
        if (total <= 0.0) {
            chosen = pick(rng);
        } else {
            std::uniform_real_distribution<double> u(0.0, total);
            double target = u(rng), acc = 0.0;
            chosen = x.size() - 1;
            for (std::size_t i = 0; i < x.size(); ++i) {
                acc += d2[i];
                if (acc >= target) {
                    chosen = i;
                    break;
                }
            }
        }
        centers.push_back(x[chosen]);
        for (std::size_t i = 0; i < x.size(); ++i) d2[i] = std::min(d2[i], sq_dist3(x[i], centers.back()));
    }
    return centers;
}

}  // namespace

double MogComponent::quad(const double* p) const {
    const double d0 = p[0] - mean[0], d1 = p[1] - mean[1], d2 = p[2] - mean[2];
    const auto& L = prec_chol;
    const double t0 = L[0] * d0 + L[3] * d1 + L[6] * d2;
    const double t1 = L[4] * d1 + L[7] * d2;
    const double t2 = L[8] * d2;
    return t0 * t0 + t1 * t1 + t2 * t2;
}

void finalize_component(MogComponent& comp) {
    const Eigen::Matrix3d cov = to_mat(comp.cov);
    Eigen::LLT<Eigen::Matrix3d> llt(cov);
    if (llt.info() != Eigen::Success) throw NumericError("mog: component covariance is not positive definite");
    const Eigen::Matrix3d prec = llt.solve(Eigen::Matrix3d::Identity());
    Eigen::LLT<Eigen::Matrix3d> pllt(0.5 * (prec + prec.transpose()));
    if (pllt.info() != Eigen::Success) throw NumericError("mog: component precision is not positive definite");
    comp.prec_chol = from_mat(pllt.matrixL().toDenseMatrix());
}

double log_penalty(const Tensor& a, double eps, Tensor* grad) {
    if (!(eps > 0.0)) throw ValidationError("log_penalty: eps must be > 0");
    require_hwc(a, 3, "log_penalty");
    prepare_grad(grad, a);
    const std::size_t np = a.dim(0) * a.dim(1);
    double total = 0.0;
    for (std::size_t p = 0; p < np; ++p) {
        const double* v = a.data().data() + p * 3;
        const double r2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
        const double r = std::sqrt(r2), s = std::sqrt(r2 + eps);
        total += std::log(s + r);
        if (grad != nullptr && r > 0.0) {
            // d/da log(s + r) = a / (s r)
            const double f = 1.0 / (s * r);
            for (std::size_t k = 0; k < 3; ++k) (*grad)[p * 3 + k] = f * v[k];
        }
    }
    return total;
}

MogFit fit_mog(std::span<const Pixel> pixels, std::size_t q, std::uint64_t seed, const MogOptions& opts) {
    if (q < 1) throw ValidationError("fit_mog: q must be >= 1");
    if (pixels.size() < 10 * q) {
        throw ValidationError("fit_mog: need at least " + std::to_string(10 * q) + " pixels for q=" + std::to_string(q) +
                              ", got " + std::to_string(pixels.size()));
    }
    if (!(opts.cov_floor > 0.0)) throw ValidationError("fit_mog: covariance floor must be > 0");
    const std::size_t n = pixels.size();
    std::mt19937_64 rng(seed);
    std::vector<Pixel> centers = kmeanspp(pixels, q, rng);

    // Hard assignment to the seeds; an empty cluster is moved to the farthest point.
    std::vector<double> resp(n * q, 0.0);
    for (std::size_t attempt = 0; attempt <= q; ++attempt) {
        std::fill(resp.begin(), resp.end(), 0.0);
        std::vector<std::size_t> counts(q, 0);
        std::vector<double> dist(n);
        for (std::size_t i = 0; i < n; ++i) {
            std::size_t best = 0;
            double bd = sq_dist3(pixels[i], centers[0]);
            for (std::size_t k = 1; k < q; ++k) {
                const double d = sq_dist3(pixels[i], centers[k]);
                if (d < bd) {
                    bd = d;
                    best = k;
                }
            }
            resp[i * q + best] = 1.0;
            dist[i] = bd;
            ++counts[best];
        }
        auto empty = std::find(counts.begin(), counts.end(), std::size_t{0});
        if (empty == counts.end()) break;
        if (attempt == q) throw NumericError("fit_mog: could not populate every component; sample has too few distinct pixels");
        const auto far = static_cast<std::size_t>(std::max_element(dist.begin(), dist.end()) - dist.begin());
        centers[static_cast<std::size_t>(empty - counts.begin())] = pixels[far];
    }

    std::vector<MogComponent> comps;
    for (std::size_t k = 0; k < q; ++k) comps.push_back(m_step_component(pixels, resp, q, k, opts.cov_floor));
    Mixture mix = make_mixture(std::move(comps));

    MogFit fit;
    std::vector<double> point_ll;
    double ll = e_step(mix, pixels, resp, point_ll);
    fit.log_likelihood.push_back(ll);
    for (std::size_t it = 0; it < opts.max_iter; ++it) {
        std::vector<MogComponent> next;
        for (std::size_t k = 0; k < q; ++k) {
            double nk = 0.0;
            for (std::size_t i = 0; i < n; ++i) nk += resp[i * q + k];
            if (nk < 1e-10) {
                log::warn("fit_mog: component " + std::to_string(k) + " lost all mass; reseeding from the farthest point");
                const auto far = static_cast<std::size_t>(std::min_element(point_ll.begin(), point_ll.end()) - point_ll.begin());
                MogComponent c;
                c.weight = 1.0 / static_cast<double>(n);
                c.mean = pixels[far];
                c.cov = from_mat(clamp_eigenvalues(sample_cov(pixels), opts.cov_floor));
                next.push_back(c);
            } else {
                next.push_back(m_step_component(pixels, resp, q, k, opts.cov_floor));
            }
        }
        double wsum = 0.0;
        for (const auto& c : next) wsum += c.weight;
        for (auto& c : next) c.weight /= wsum;
        mix = make_mixture(std::move(next));
        const double prev = ll;
        ll = e_step(mix, pixels, resp, point_ll);
        fit.log_likelihood.push_back(ll);
        fit.iterations = it + 1;
        if (ll - prev < opts.tol) break;
    }
    fit.prior.components = std::move(mix.comps);
    return fit;
}

double mog_prior_energy(const MogPrior& prior, const Tensor& n, Tensor* grad) {
    if (prior.components.empty()) throw ValidationError("mog_prior_energy: prior has no components");
    require_hwc(n, 3, "mog_prior_energy");
    prepare_grad(grad, n);
    const std::size_t np = n.dim(0) * n.dim(1);
    double total = 0.0;
    for (std::size_t p = 0; p < np; ++p) {
        const double* v = n.data().data() + p * 3;
        std::size_t best = 0;
        double bq = prior.components[0].quad(v);
        for (std::size_t k = 1; k < prior.components.size(); ++k) {
            const double qv = prior.components[k].quad(v);
            if (qv < bq) {
                bq = qv;
                best = k;
            }
        }
        total += bq;
        if (grad != nullptr) {
            const auto& c = prior.components[best];
            const auto& L = c.prec_chol;
            const double d0 = v[0] - c.mean[0], d1 = v[1] - c.mean[1], d2 = v[2] - c.mean[2];
            const double t0 = L[0] * d0 + L[3] * d1 + L[6] * d2;
            const double t1 = L[4] * d1 + L[7] * d2;
            const double t2 = L[8] * d2;
            (*grad)[p * 3 + 0] = 2.0 * (L[0] * t0);
            (*grad)[p * 3 + 1] = 2.0 * (L[3] * t0 + L[4] * t1);
            (*grad)[p * 3 + 2] = 2.0 * (L[6] * t0 + L[7] * t1 + L[8] * t2);
        }
    }
    return total;
}

double tv_energy(const Tensor& n, double smooth_eps, Tensor* grad) {
    if (smooth_eps < 0.0) throw ValidationError("tv_energy: smooth_eps must be >= 0");
    require_hwc(n, 0, "tv_energy");
    prepare_grad(grad, n);
    const std::size_t h = n.dim(0), w = n.dim(1), c = n.dim(2);
    const double* v = n.data().data();
    double total = 0.0;
    auto pair = [&](std::size_t p, std::size_t q) {
        double s2 = 0.0;
        for (std::size_t k = 0; k < c; ++k) {
            const double d = v[q * c + k] - v[p * c + k];
            s2 += d * d;
        }
        const double s = std::sqrt(s2 + smooth_eps);
        total += s;
        if (grad != nullptr && s > 0.0) {
            for (std::size_t k = 0; k < c; ++k) {
                const double g = (v[q * c + k] - v[p * c + k]) / s;
                (*grad)[q * c + k] += g;
                (*grad)[p * c + k] -= g;
            }
        }
    };
    for (std::size_t i = 0; i < h; ++i) {
        for (std::size_t j = 0; j < w; ++j) {
            const std::size_t p = i * w + j;
            if (i + 1 < h) pair(p, p + w);
            if (j + 1 < w) pair(p, p + 1);
        }
    }
    return total;
}

std::vector<Pixel> sample_pixels(std::span<const Tensor> images, std::size_t count, std::uint64_t seed) {
    if (images.empty()) throw ValidationError("sample_pixels: no images");
    std::size_t total = 0;
    for (const auto& im : images) {
        require_hwc(im, 3, "sample_pixels");
        total += im.dim(0) * im.dim(1);
    }
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> pick(0, total - 1);
    std::vector<Pixel> out;
    out.reserve(count);
    for (std::size_t s = 0; s < count; ++s) {
        std::size_t idx = pick(rng);
        std::size_t m = 0;
        while (idx >= images[m].dim(0) * images[m].dim(1)) {
            idx -= images[m].dim(0) * images[m].dim(1);
            ++m;
        }
        const double* p = images[m].data().data() + idx * 3;
        out.push_back({p[0], p[1], p[2]});
    }
    return out;
}

void save_mog(const std::filesystem::path& path, const MogPrior& prior) {
    const std::size_t q = prior.components.size();
    std::vector<double> w, mu, cov;
    for (const auto& c : prior.components) {
        w.push_back(c.weight);
        mu.insert(mu.end(), c.mean.begin(), c.mean.end());
        cov.insert(cov.end(), c.cov.begin(), c.cov.end());
    }
    Bundle b;
    b.header["kind"] = "mog_prior";
    b.tensors.emplace("weights", Tensor({q}, std::move(w)));
    b.tensors.emplace("means", Tensor({q, 3}, std::move(mu)));
    b.tensors.emplace("covs", Tensor({q, 3, 3}, std::move(cov)));
    save_bundle(path, b);
}

MogPrior load_mog(const std::filesystem::path& path) {
    const Bundle b = load_bundle(path);
    if (b.header.value("kind", "") != "mog_prior") throw IoError("load_mog: " + path.string() + " is not a MOG prior");
    const Tensor& w = b.tensor("weights");
    const Tensor& mu = b.tensor("means");
    const Tensor& cov = b.tensor("covs");
    const std::size_t q = w.size();
    if (mu.shape() != Shape{q, 3} || cov.shape() != Shape{q, 3, 3}) throw IoError("load_mog: inconsistent tensor shapes");
    MogPrior prior;
    for (std::size_t k = 0; k < q; ++k) {
        MogComponent c;
        c.weight = w[k];
        for (std::size_t d = 0; d < 3; ++d) c.mean[d] = mu[k * 3 + d];
        for (std::size_t d = 0; d < 9; ++d) c.cov[d] = cov[k * 9 + d];
        finalize_component(c);
        prior.components.push_back(c);
    }
    return prior;
}

}  // namespace f2pad
