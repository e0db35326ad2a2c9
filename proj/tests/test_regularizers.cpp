#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "f2pad/error.hpp"
#include "f2pad/regularizers.hpp"
#include "support.hpp"

using namespace f2pad;
using testing::random_tensor;

namespace {

MogComponent unit_component(Pixel mean) {
    MogComponent c;
    c.weight = 0.5;
    c.mean = mean;
    c.cov = {1, 0, 0, 0, 1, 0, 0, 0, 1};
    finalize_component(c);
    return c;
}

std::vector<Pixel> gaussian_cloud(std::size_t n, Pixel mean, double sd, std::mt19937_64& rng) {
    std::normal_distribution<double> g(0, sd);
    std::vector<Pixel> out(n);
    for (auto& p : out)
        for (std::size_t c = 0; c < 3; ++c) p[c] = mean[c] + g(rng);
    return out;
}

}  // namespace

TEST_CASE("log penalty closed forms") {
    CHECK(log_penalty(Tensor({1, 1, 3}, 0.0), 1e-4) == doctest::Approx(std::log(0.01)).epsilon(1e-12));
    CHECK(log_penalty(Tensor({1, 1, 3}, 0.0), 1e-4) == doctest::Approx(-4.605170).epsilon(1e-6));
    const Tensor a({1, 1, 3}, std::vector<double>{1.0, 0.0, 0.0});
    CHECK(log_penalty(a, 1e-4) == doctest::Approx(0.693172).epsilon(1e-6));
    Tensor g;
    log_penalty(Tensor({2, 2, 3}, 0.0), 1e-4, &g);
    for (double v : g.data()) CHECK(v == 0.0);
}

TEST_CASE("log penalty is increasing and concave in the pixel norm") {
    auto per_pixel = [](double r) {
        return log_penalty(Tensor({1, 1, 3}, std::vector<double>{r / std::sqrt(2.0), -r / std::sqrt(2.0), 0.0}), 1e-4);
    };
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(0.0, 3.0);
    for (int k = 0; k < 200; ++k) {
        double r1 = u(rng), r2 = u(rng);
        if (r1 > r2) std::swap(r1, r2);
        if (r2 - r1 < 1e-6) continue;
        CHECK(per_pixel(r1) < per_pixel(r2));
        CHECK(per_pixel(0.5 * (r1 + r2)) >= 0.5 * (per_pixel(r1) + per_pixel(r2)) - 1e-12);
    }
}

TEST_CASE("log penalty gradient matches finite differences") {
    std::mt19937_64 rng(2);
    for (int t = 0; t < 20; ++t) {
        const Tensor a = random_tensor({3, 4, 3}, rng);
        Tensor g;
        log_penalty(a, 1e-4, &g);
        const Tensor fd = testing::numeric_gradient([](const Tensor& p) { return log_penalty(p, 1e-4); }, a);
        CHECK(testing::rel_error(g, fd) < 1e-6);
    }
}

TEST_CASE("mog energy examples") {
    MogPrior prior;
    prior.components = {unit_component({0, 0, 0}), unit_component({1, 1, 1})};
    CHECK(mog_prior_energy(prior, Tensor({1, 1, 3}, std::vector<double>{0.1, 0, 0})) == doctest::Approx(0.01));
    CHECK(mog_prior_energy(prior, Tensor({1, 1, 3}, 1.0)) == 0.0);
    // weights are ignored
    prior.components[1].weight = 1e-9;
    CHECK(mog_prior_energy(prior, Tensor({1, 1, 3}, std::vector<double>{0.9, 1, 1})) == doctest::Approx(0.01));
}

TEST_CASE("mog energy is invariant to component order and has FD-exact gradients") {
    std::mt19937_64 rng(3);
    std::vector<Pixel> pts = gaussian_cloud(400, {0, 0, 0}, 0.3, rng);
    const auto more = gaussian_cloud(400, {1.5, -1, 0.5}, 0.2, rng);
    pts.insert(pts.end(), more.begin(), more.end());
    MogPrior prior = fit_mog(pts, 3, 4).prior;
    MogPrior reversed = prior;
    std::reverse(reversed.components.begin(), reversed.components.end());
    for (int t = 0; t < 20; ++t) {
        const Tensor n = random_tensor({3, 3, 3}, rng, -1, 2);
        Tensor g, g2;
        const double e = mog_prior_energy(prior, n, &g);
        CHECK(mog_prior_energy(reversed, n, &g2) == doctest::Approx(e).epsilon(1e-14));
        const Tensor fd = testing::numeric_gradient([&](const Tensor& p) { return mog_prior_energy(prior, p); }, n);
        CHECK(testing::rel_error(g, fd) < 1e-6);
    }
}

TEST_CASE("single-component EM gives the sample mean and covariance") {
    std::mt19937_64 rng(5);
    const auto pts = gaussian_cloud(500, {0.2, -0.4, 1.0}, 0.5, rng);
    const MogFit fit = fit_mog(pts, 1, 1);
    REQUIRE(fit.prior.components.size() == 1);
    const auto& c = fit.prior.components[0];
    Pixel mean{};
    for (const auto& p : pts)
        for (std::size_t k = 0; k < 3; ++k) mean[k] += p[k] / static_cast<double>(pts.size());
    for (std::size_t k = 0; k < 3; ++k) CHECK(c.mean[k] == doctest::Approx(mean[k]).epsilon(1e-10));
    for (std::size_t a = 0; a < 3; ++a)
        for (std::size_t b = 0; b < 3; ++b) {
            double s = 0;
            for (const auto& p : pts) s += (p[a] - mean[a]) * (p[b] - mean[b]);
            s /= static_cast<double>(pts.size());
            CHECK(c.cov[a * 3 + b] == doctest::Approx(s).epsilon(1e-8));
        }
    CHECK(c.weight == doctest::Approx(1.0));
}

TEST_CASE("two separated clusters are recovered") {
    std::mt19937_64 rng(6);
    const Pixel m1{-2, 0, 1}, m2{2, 1, -1};
    auto pts = gaussian_cloud(2000, m1, 0.1, rng);
    const auto b = gaussian_cloud(2000, m2, 0.1, rng);
    pts.insert(pts.end(), b.begin(), b.end());
    const MogFit fit = fit_mog(pts, 2, 7);
    auto close_to = [&](const Pixel& m) {
        for (const auto& c : fit.prior.components) {
            double d = 0, n = 0;
            for (std::size_t k = 0; k < 3; ++k) {
                d += (c.mean[k] - m[k]) * (c.mean[k] - m[k]);
                n += m[k] * m[k];
            }
            if (std::sqrt(d) <= 0.02 * std::sqrt(n)) return true;
        }
        return false;
    };
    CHECK(close_to(m1));
    CHECK(close_to(m2));
    double wsum = 0;
    for (const auto& c : fit.prior.components) wsum += c.weight;
    CHECK(wsum == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("EM log-likelihood never decreases") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        std::mt19937_64 rng(seed);
        auto pts = gaussian_cloud(300, {0, 0, 0}, 0.5, rng);
        const auto b = gaussian_cloud(300, {1, 1, 0}, 0.3, rng);
        pts.insert(pts.end(), b.begin(), b.end());
        const MogFit fit = fit_mog(pts, 4, seed);
        for (std::size_t k = 1; k < fit.log_likelihood.size(); ++k)
            CHECK(fit.log_likelihood[k] >= fit.log_likelihood[k - 1] - 1e-9);
    }
}

TEST_CASE("fit_mog validates the sample size and floors covariance") {
    std::vector<Pixel> few(15, Pixel{0.5, 0.5, 0.5});
    CHECK_THROWS_AS(fit_mog(few, 2, 0), ValidationError);
    std::vector<Pixel> same(40, Pixel{0.5, 0.5, 0.5});
    const MogFit fit = fit_mog(same, 1, 0);
    CHECK(fit.prior.components[0].cov[0] >= 1e-6);
}

TEST_CASE("tv energy examples") {
    std::mt19937_64 rng(7);
    CHECK(tv_energy(Tensor({4, 5, 3}, 0.3), 0.0) == 0.0);
    const std::size_t h = 6;
    const double c = 0.4;
    Tensor step({h, 2, 3}, 0.0);
    for (std::size_t i = 0; i < h; ++i)
        for (std::size_t k = 0; k < 3; ++k) step.at(i, 1, k) = c;
    CHECK(tv_energy(step, 0.0) == doctest::Approx(static_cast<double>(h) * c * std::sqrt(3.0)));
}

TEST_CASE("tv energy invariances and gradient") {
    std::mt19937_64 rng(8);
    for (int t = 0; t < 10; ++t) {
        const Tensor n = random_tensor({4, 6, 3}, rng);
        Tensor shifted = n;
        for (double& v : shifted.data()) v += 0.37;
        CHECK(tv_energy(shifted, 0.0) == doctest::Approx(tv_energy(n, 0.0)).epsilon(1e-12));
        Tensor tr({6, 4, 3});
        for (std::size_t i = 0; i < 4; ++i)
            for (std::size_t j = 0; j < 6; ++j)
                for (std::size_t k = 0; k < 3; ++k) tr.at(j, i, k) = n.at(i, j, k);
        CHECK(tv_energy(tr, 0.0) == doctest::Approx(tv_energy(n, 0.0)).epsilon(1e-12));
        Tensor g;
        tv_energy(n, 1e-12, &g);
        const Tensor fd = testing::numeric_gradient([](const Tensor& p) { return tv_energy(p, 1e-12); }, n);
        CHECK(testing::rel_error(g, fd) < 1e-4);
    }
}

TEST_CASE("mog prior file round trip") {
    std::mt19937_64 rng(9);
    const MogPrior p = fit_mog(gaussian_cloud(200, {0, 1, 2}, 0.4, rng), 2, 3).prior;
    const auto path = std::filesystem::temp_directory_path() / "f2pad_mog_test.f2pb";
    save_mog(path, p);
    const MogPrior q = load_mog(path);
    std::filesystem::remove(path);
    REQUIRE(q.components.size() == p.components.size());
    const Tensor n = random_tensor({2, 2, 3}, rng);
    CHECK(mog_prior_energy(q, n) == mog_prior_energy(p, n));
}
