#include "f2pad/optimizer.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <string>

#include "f2pad/error.hpp"

namespace f2pad {

SharingKernel build_sharing_kernel(const Tensor& x, std::size_t ks, double sigma0, double sigma1) {
    require_hwc(x, 0, "build_sharing_kernel");
    if (!(sigma0 > 0.0) || !(sigma1 > 0.0)) throw ValidationError("build_sharing_kernel: sigma0 and sigma1 must be > 0");
    SharingKernel k;
    k.h = x.dim(0);
    k.w = x.dim(1);
    k.ks = ks;
    const std::size_t c = x.dim(2), taps = k.taps();
    const long r = static_cast<long>(ks);
    k.weights.assign(k.h * k.w * taps, 0.0);
    for (std::size_t i = 0; i < k.h; ++i) {
        for (std::size_t j = 0; j < k.w; ++j) {
            double* wt = k.weights.data() + (i * k.w + j) * taps;
            const double* xc = x.data().data() + (i * k.w + j) * c;
            double total = 0.0;
            std::size_t t = 0;
            for (long di = -r; di <= r; ++di) {
                for (long dj = -r; dj <= r; ++dj, ++t) {
                    const long ii = static_cast<long>(i) + di, jj = static_cast<long>(j) + dj;
                    if (ii < 0 || jj < 0 || ii >= static_cast<long>(k.h) || jj >= static_cast<long>(k.w)) continue;
                    const double* xn = x.data().data() + (static_cast<std::size_t>(ii) * k.w + static_cast<std::size_t>(jj)) * c;
                    double d2 = 0.0;
                    for (std::size_t ch = 0; ch < c; ++ch) d2 += (xn[ch] - xc[ch]) * (xn[ch] - xc[ch]);
                    const auto sp = static_cast<double>(di * di + dj * dj);
                    wt[t] = std::exp(-sp / sigma0) * std::exp(-d2 / sigma1);
                    total += wt[t];
                }
            }
            for (std::size_t q = 0; q < taps; ++q) wt[q] /= total;
        }
    }
    return k;
}

Tensor share_gradients(const SharingKernel& kernel, const Tensor& grad, double clip) {
    require_hwc(grad, 0, "share_gradients");
    if (grad.dim(0) != kernel.h || grad.dim(1) != kernel.w) {
        throw ShapeError("share_gradients: gradient " + shape_str(grad.shape()) + " does not match kernel " +
                         std::to_string(kernel.h) + "x" + std::to_string(kernel.w));
    }
    if (!(clip > 0.0)) throw ValidationError("share_gradients: clip must be > 0");
    const std::size_t c = grad.dim(2), taps = kernel.taps();
    const long r = static_cast<long>(kernel.ks);
    Tensor out(grad.shape(), 0.0);
    const double* g = grad.data().data();
    for (std::size_t i = 0; i < kernel.h; ++i) {
        for (std::size_t j = 0; j < kernel.w; ++j) {
            const double* wt = kernel.weights.data() + (i * kernel.w + j) * taps;
            double* o = out.data().data() + (i * kernel.w + j) * c;
            std::size_t t = 0;
            for (long di = -r; di <= r; ++di) {
                for (long dj = -r; dj <= r; ++dj, ++t) {
                    if (wt[t] == 0.0) continue;
                    const auto ii = static_cast<std::size_t>(static_cast<long>(i) + di);
                    const auto jj = static_cast<std::size_t>(static_cast<long>(j) + dj);
                    const double* gn = g + (ii * kernel.w + jj) * c;
                    for (std::size_t ch = 0; ch < c; ++ch) o[ch] += wt[t] * gn[ch];
                }
            }
            for (std::size_t ch = 0; ch < c; ++ch) o[ch] = std::clamp(o[ch], -clip, clip);
        }
    }
    return out;
}

Tensor adaptive_steps(const Tensor& x, const Tensor& n, double gamma0, double floor) {
    if (x.shape() != n.shape()) throw ShapeError("adaptive_steps: x " + shape_str(x.shape()) + " vs n " + shape_str(n.shape()));
    if (!(gamma0 > 0.0) || !(floor > 0.0)) throw ValidationError("adaptive_steps: gamma0 and floor must be > 0");
    Tensor out(x.shape(), 0.0);
    for (std::size_t k = 0; k < x.size(); ++k) out[k] = gamma0 / std::max(std::abs(x[k] - n[k]), floor);
    return out;
}

void adan_step(AdanState& st, Tensor& n, const Tensor& g, const Tensor& gamma, const AdanParams& p, const Mask* active) {
    if (g.shape() != n.shape() || gamma.shape() != n.shape() || st.m.shape() != n.shape()) {
        throw ShapeError("adan_step: state, gradient and step shapes must match the iterate " + shape_str(n.shape()));
    }
    const std::size_t c = n.rank() == 3 ? n.dim(2) : 1;
    if (active != nullptr && active->size() * c != n.size()) throw ShapeError("adan_step: active mask does not match iterate");
    ++st.step;
    const auto t = static_cast<double>(st.step);
    const double bc1 = 1.0 - std::pow(p.beta1, t);
    const double bc2 = 1.0 - std::pow(p.beta2, t);
    const double bc3 = 1.0 - std::pow(p.beta3, t);
    for (std::size_t k = 0; k < n.size(); ++k) {
        if (active != nullptr && !(*active)[k / c]) continue;
        const double diff = g[k] - st.g_prev[k];
        st.m[k] = p.beta1 * st.m[k] + (1.0 - p.beta1) * g[k];
        st.v[k] = p.beta2 * st.v[k] + (1.0 - p.beta2) * diff;
        const double nest = g[k] + p.beta2 * diff;
        st.s[k] = p.beta3 * st.s[k] + (1.0 - p.beta3) * nest * nest;
        st.g_prev[k] = g[k];
        const double denom = std::sqrt(st.s[k] / bc3) + p.eps;
        const double update = (st.m[k] / bc1 + p.beta2 * st.v[k] / bc2) / denom;
        const double next = n[k] - p.lr * gamma[k] * update;
        if (!std::isfinite(next)) {
            throw NumericError("adan_step: non-finite update at element " + std::to_string(k) + " (step " +
                               std::to_string(st.step) + ")");
        }
        n[k] = next;
    }
}

SolveResult solve(const Objective& objective, const Tensor& x, const Tensor& n0, const SharingKernel& kernel,
                  const Mask* active, const SolverConfig& cfg) {
    require_hwc(x, 3, "solve");
    if (n0.shape() != x.shape()) throw ShapeError("solve: n0 " + shape_str(n0.shape()) + " vs x " + shape_str(x.shape()));
    if (active != nullptr && (active->height() != x.dim(0) || active->width() != x.dim(1))) {
        throw ShapeError("solve: active mask dims do not match the image");
    }
    SolveResult res;
    res.n = n0;
    AdanState state(x.shape());
    Tensor grad;

    auto evaluate = [&](std::size_t iter) {
        double f = 0.0;
        try {
            f = objective(res.n, grad);
        } catch (const std::exception& e) {
            throw NumericError("objective failed at iteration " + std::to_string(iter) + ": " + e.what());
        }
        if (!std::isfinite(f)) throw NumericError("objective is not finite at iteration " + std::to_string(iter));
        if (grad.shape() != x.shape()) throw ShapeError("objective returned gradient of shape " + shape_str(grad.shape()));
        res.losses.push_back(f);
    };

    evaluate(0);
    const std::size_t np = x.dim(0) * x.dim(1);
    for (std::size_t it = 0; it < cfg.max_iter; ++it) {
        if (active != nullptr) {
            for (std::size_t p = 0; p < np; ++p) {
                if (!(*active)[p]) std::fill_n(grad.data().begin() + static_cast<std::ptrdiff_t>(p * 3), 3, 0.0);
            }
        }
        Tensor g = share_gradients(kernel, grad, cfg.clip);
        const Tensor gamma = adaptive_steps(x, res.n, cfg.gamma0, cfg.step_floor);
        adan_step(state, res.n, g, gamma, cfg.adan, active);
        for (std::size_t p = 0; p < np; ++p) {
            if (active != nullptr && !(*active)[p]) continue;
            for (std::size_t ch = 0; ch < 3; ++ch) res.n[p * 3 + ch] = std::clamp(res.n[p * 3 + ch], cfg.lower[ch], cfg.upper[ch]);
        }
        res.iterations = it + 1;
        evaluate(it + 1);
        const double change = res.losses[res.losses.size() - 2] - res.losses.back();
        if (std::abs(change) < cfg.loss_threshold) {
            res.converged = true;
            break;
        }
    }
    return res;
}

void write_loss_log(std::ostream& os, const std::vector<double>& losses) {
    const auto old = os.precision(17);
    for (std::size_t k = 0; k < losses.size(); ++k) os << k << '\t' << losses[k] << '\n';
    os.precision(old);
}

}  // namespace f2pad
