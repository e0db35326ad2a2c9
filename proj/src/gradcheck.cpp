#include "f2pad/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <ostream>
#include <random>

#include "f2pad/backends.hpp"
#include "f2pad/error.hpp"
#include "f2pad/extractor.hpp"
#include "f2pad/pipeline.hpp"
#include "f2pad/regularizers.hpp"

namespace f2pad {

FdComparison compare_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x, const Tensor& analytic,
                              const FdOptions& opts) {
    if (analytic.shape() != x.shape()) throw ShapeError("compare_gradient: gradient shape differs from the input");
    const double f0 = f(x);
    std::vector<double> fd(x.size()), fwd(x.size()), bwd(x.size());
    Tensor probe = x;
    for (std::size_t k = 0; k < x.size(); ++k) {
        const double orig = probe[k];
        probe[k] = orig + opts.h;
        const double fp = f(probe);
        probe[k] = orig - opts.h;
        const double fm = f(probe);
        probe[k] = orig;
        fd[k] = (fp - fm) / (2.0 * opts.h);
        fwd[k] = (fp - f0) / opts.h;
        bwd[k] = (f0 - fm) / opts.h;
    }
    double scale = 0.0;
    for (double v : fd) scale = std::max(scale, std::abs(v));
    FdComparison out;
    if (scale == 0.0) scale = 1.0;
    for (std::size_t k = 0; k < x.size(); ++k) {
        if (std::abs(fwd[k] - bwd[k]) > opts.kink_tol * scale) {
            ++out.skipped;
            continue;
        }
        ++out.checked;
        out.max_rel_error = std::max(out.max_rel_error, std::abs(analytic[k] - fd[k]) / scale);
    }
    return out;
}

namespace {

using Rng = std::mt19937_64;

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    Tensor t(std::move(shape), 0.0);
    for (double& v : t.data()) v = u(rng);
    return t;
}

std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng); }

double dot(const Tensor& a, const Tensor& b) {
    double s = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) s += a[k] * b[k];
    return s;
}

struct Accumulator {
    GradcheckEntry e;
    void add(const FdComparison& c) {
        e.max_rel_error = std::max(e.max_rel_error, c.max_rel_error);
        e.skipped += c.skipped;
        ++e.trials;
    }
    GradcheckEntry finish(double tol) {
        e.tolerance = tol;
        e.passed = e.max_rel_error < tol;
        return e;
    }
};

// Checks d(sum(r * op(x)))/dx where op is built on a tape from a single leaf.
FdComparison check_unary(const Tensor& x, const std::function<Var(Var)>& taped,
                         const std::function<Tensor(const Tensor&)>& forward, Rng& rng, double fault = 1.0) {
    Tensor r;
    Tensor grad;
    {
        Tape tape;
        const Var v = tape.leaf(x);
        const Var y = taped(v);
        r = random_tensor(y.value().shape(), rng);
        const Var out = sum(mul(y, tape.constant(r)));
        grad = tape.backward(out)[v];
    }
    for (double& g : grad.data()) g *= fault;
    return compare_gradient([&](const Tensor& p) { return dot(forward(p), r); }, x, grad);
}

}  // namespace

std::vector<GradcheckEntry> run_gradchecks(const GradcheckOptions& opts) {
    Rng rng(opts.seed);
    std::vector<GradcheckEntry> out;
    const double comp_tol = 1e-6;

    {
        Accumulator in, ker;
        in.e.name = "conv2d/input";
        ker.e.name = "conv2d/kernel";
        for (std::size_t t = 0; t < opts.trials; ++t) {
            const std::size_t k = pick(rng, 0, 1) * 2 + 1, stride = pick(rng, 1, 2), pad = pick(rng, 0, 1);
            const std::size_t h = pick(rng, k, 7), w = pick(rng, k, 7), cin = pick(rng, 1, 3), cout = pick(rng, 1, 3);
            const Tensor x = random_tensor({h, w, cin}, rng);
            const Tensor kern = random_tensor({k, k, cin, cout}, rng);
            in.add(check_unary(
                x, [&](Var v) { return conv2d(v, v.tape->constant(kern), stride, pad); },
                [&](const Tensor& p) { return conv2d_forward(p, kern, stride, pad); }, rng));
            ker.add(check_unary(
                kern, [&](Var v) { return conv2d(v.tape->constant(x), v, stride, pad); },
                [&](const Tensor& p) { return conv2d_forward(x, p, stride, pad); }, rng));
        }
        out.push_back(in.finish(comp_tol));
        out.push_back(ker.finish(comp_tol));
    }
    {
        Accumulator a;
        a.e.name = "avg_pool";
        for (std::size_t t = 0; t < opts.trials; ++t) {
            const std::size_t k = pick(rng, 1, 3), stride = pick(rng, 1, k);
            const Tensor x = random_tensor({pick(rng, k, 7), pick(rng, k, 7), pick(rng, 1, 3)}, rng);
            a.add(check_unary(
                x, [&](Var v) { return avg_pool(v, k, stride); }, [&](const Tensor& p) { return avg_pool_forward(p, k, stride); },
                rng));
        }
        out.push_back(a.finish(comp_tol));
    }
    {
        Accumulator a;
        a.e.name = "leaky_relu";
        for (std::size_t t = 0; t < opts.trials; ++t) {
            const Tensor x = random_tensor({pick(rng, 1, 6), pick(rng, 1, 6), pick(rng, 1, 3)}, rng);
            a.add(check_unary(
                x, [&](Var v) { return leaky_relu(v, 0.1); }, [&](const Tensor& p) { return leaky_relu_forward(p, 0.1); }, rng));
        }
        out.push_back(a.finish(comp_tol));
    }
    {
        Accumulator a;
        a.e.name = "upsample_nearest";
        for (std::size_t t = 0; t < opts.trials; ++t) {
            const std::size_t h = pick(rng, 1, 4), w = pick(rng, 1, 4), fh = pick(rng, 1, 3), fw = pick(rng, 1, 3);
            const Tensor x = random_tensor({h, w, pick(rng, 1, 3)}, rng);
            a.add(check_unary(
                x, [&](Var v) { return upsample_nearest(v, h * fh, w * fw); },
                [&](const Tensor& p) { return upsample_nearest_forward(p, h * fh, w * fw); }, rng));
        }
        out.push_back(a.finish(comp_tol));
    }
    {
        Accumulator a;
        a.e.name = "concat_channels";
        for (std::size_t t = 0; t < opts.trials; ++t) {
            const std::size_t h = pick(rng, 1, 4), w = pick(rng, 1, 4);
            const Tensor x = random_tensor({h, w, pick(rng, 1, 3)}, rng);
            const Tensor other = random_tensor({h, w, pick(rng, 1, 3)}, rng);
            const bool first = t % 2 == 0;
            a.add(check_unary(
                x,
                [&](Var v) {
                    const Var o = v.tape->constant(other);
                    const std::vector<Var> parts = first ? std::vector<Var>{v, o} : std::vector<Var>{o, v};
                    return concat_channels(parts);
                },
                [&](const Tensor& p) {
                    const std::vector<const Tensor*> parts = first ? std::vector<const Tensor*>{&p, &other}
                                                                   : std::vector<const Tensor*>{&other, &p};
                    return concat_channels_forward(parts);
                },
                rng));
        }
        out.push_back(a.finish(comp_tol));
    }
    {
        Accumulator ad, mu, sc, su;
        ad.e.name = "add";
        mu.e.name = "mul";
        sc.e.name = "scale";
        su.e.name = "sum";
        for (std::size_t t = 0; t < opts.trials; ++t) {
            const Shape s{pick(rng, 1, 4), pick(rng, 1, 4), pick(rng, 1, 3)};
            const Tensor x = random_tensor(s, rng), other = random_tensor(s, rng);
            auto ew = [](const Tensor& a, const Tensor& b, bool product) {
                Tensor o(a.shape(), 0.0);
                for (std::size_t k = 0; k < a.size(); ++k) o[k] = product ? a[k] * b[k] : a[k] + b[k];
                return o;
            };
            ad.add(check_unary(
                x, [&](Var v) { return add(v, v.tape->constant(other)); }, [&](const Tensor& p) { return ew(p, other, false); },
                rng));
            mu.add(check_unary(
                x, [&](Var v) { return mul(v.tape->constant(other), v); }, [&](const Tensor& p) { return ew(p, other, true); },
                rng));
            sc.add(check_unary(
                x, [&](Var v) { return scale(v, -1.7); },
                [&](const Tensor& p) {
                    Tensor o = p;
                    for (double& v : o.data()) v *= -1.7;
                    return o;
                },
                rng));
            su.add(check_unary(
                x, [&](Var v) { return sum(v); },
                [&](const Tensor& p) {
                    double s2 = 0.0;
                    for (double v : p.data()) s2 += v;
                    return Tensor({1}, s2);
                },
                rng));
        }
        for (auto* a : {&ad, &mu, &sc, &su}) out.push_back(a->finish(comp_tol));
    }

    const Extractor ex = build_extractor(ExtractorSpec::default_spec(opts.seed));
    {
        Accumulator a;
        a.e.name = "extractor";
        const Tensor img = random_tensor({16, 16, 3}, rng, -2.0, 2.0);
        a.add(check_unary(
            img, [&](Var v) { return ex.extract(v).concat; }, [&](const Tensor& p) { return ex.extract(p).concat; }, rng,
            opts.inject_fault ? 1.001 : 1.0));
        out.push_back(a.finish(comp_tol));
    }

    // Small fitted models on random 8x8 images.
    std::vector<Tensor> train;
    std::vector<FeatureStack> stacks;
    for (int k = 0; k < 6; ++k) {
        train.push_back(random_tensor({8, 8, 3}, rng, -1.5, 1.5));
        stacks.push_back(ex.extract(train.back()));
    }
    const GaussianField field = fit_gaussian_field(stacks, default_ridge(stacks));
    MemoryBank bank = build_memory_bank(stacks);
    {
        const Tensor probe = ex.extract(random_tensor({8, 8, 3}, rng, -1.5, 1.5)).concat;
        build_candidate_sets(bank, probe, 8);
        Accumulator pd, pc;
        pd.e.name = "padim_loss";
        pc.e.name = "patchcore_loss";
        auto loss_check = [&](const std::function<Var(Var)>& lossfn, Accumulator& acc) {
            Tape tape;
            const Var v = tape.leaf(probe);
            const Tensor g = tape.backward(lossfn(v))[v];
            acc.add(compare_gradient(
                [&](const Tensor& p) {
                    Tape t2;
                    return lossfn(t2.leaf(p)).value()[0];
                },
                probe, g));
        };
        loss_check([&](Var v) { return padim_loss(field, v); }, pd);
        loss_check([&](Var v) { return patchcore_loss(bank, v); }, pc);
        out.push_back(pd.finish(comp_tol));
        out.push_back(pc.finish(comp_tol));
    }

    std::vector<Pixel> pixels;
    for (const auto& im : train)
        for (std::size_t p = 0; p < 64; ++p) pixels.push_back({im[p * 3], im[p * 3 + 1], im[p * 3 + 2]});
    const MogPrior prior = fit_mog(pixels, 2, opts.seed).prior;
    {
        const Tensor a = random_tensor({6, 6, 3}, rng, -1.0, 1.0);
        const Tensor n = random_tensor({6, 6, 3}, rng, -1.5, 1.5);
        auto energy = [](const char* name, const Tensor& at, auto&& fn, double tol) {
            Accumulator acc;
            acc.e.name = name;
            Tensor g;
            fn(at, &g);
            acc.add(compare_gradient([&](const Tensor& p) { return fn(p, nullptr); }, at, g));
            return acc.finish(tol);
        };
        out.push_back(energy("log_penalty", a, [](const Tensor& p, Tensor* g) { return log_penalty(p, 1e-4, g); }, comp_tol));
        out.push_back(energy("mog_prior_energy", n, [&](const Tensor& p, Tensor* g) { return mog_prior_energy(prior, p, g); },
                             comp_tol));
        out.push_back(energy("tv_energy", n, [](const Tensor& p, Tensor* g) { return tv_energy(p, 1e-12, g); }, 1e-4));
    }
    {
        const Tensor x = random_tensor({8, 8, 3}, rng, -1.5, 1.5);
        Tensor n = x;
        std::uniform_real_distribution<double> off(0.2, 0.6), sign(-1.0, 1.0);
        for (double& v : n.data()) v += (sign(rng) < 0 ? -1.0 : 1.0) * off(rng);
        const GaussianBackend backend(field);
        ObjectiveWeights w{0.5, 0.3, 2.0, 1e-4, 1e-12};
        const F2PADObjective obj(ex, backend, &prior, x, CellWindow{}, w);
        Tensor g;
        obj(n, g);
        Accumulator acc;
        acc.e.name = "objective";
        acc.add(compare_gradient(
            [&](const Tensor& p) {
                Tensor unused;
                return obj(p, unused);
            },
            n, g));
        out.push_back(acc.finish(1e-4));
    }
    return out;
}

bool all_passed(const std::vector<GradcheckEntry>& entries) {
    return std::all_of(entries.begin(), entries.end(), [](const GradcheckEntry& e) { return e.passed; });
}

void write_gradcheck_report(std::ostream& os, const std::vector<GradcheckEntry>& entries) {
    os << std::left << std::setw(20) << "op" << std::setw(14) << "max_rel_err" << std::setw(10) << "tol" << std::setw(8)
       << "trials" << std::setw(9) << "skipped" << "status\n";
    for (const auto& e : entries) {
        os << std::left << std::setw(20) << e.name << std::setw(14) << std::scientific << std::setprecision(3)
           << e.max_rel_error << std::setw(10) << std::setprecision(0) << e.tolerance << std::defaultfloat << std::setw(8)
           << e.trials << std::setw(9) << e.skipped << (e.passed ? "ok" : "FAIL") << '\n';
    }
}

}  // namespace f2pad
