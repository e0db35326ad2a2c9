#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <limits>
#include <numeric>

#include "f2pad/backends.hpp"
#include "f2pad/error.hpp"
#include "support.hpp"

using namespace f2pad;
using testing::random_tensor;

namespace {

FeatureStack stack_of(Tensor concat) {
    FeatureStack fs;
    fs.concat = std::move(concat);
    return fs;
}

MemoryBank bank_from(const std::vector<std::vector<double>>& pts) {
    MemoryBank b;
    b.c = pts[0].size();
    for (const auto& p : pts) b.features.insert(b.features.end(), p.begin(), p.end());
    b.coreset.resize(pts.size());
    std::iota(b.coreset.begin(), b.coreset.end(), 0u);
    return b;
}

MemoryBank random_bank(std::size_t n, std::size_t c, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(-1, 1);
    std::vector<std::vector<double>> pts(n, std::vector<double>(c));
    for (auto& p : pts)
        for (double& v : p) v = u(rng);
    return bank_from(pts);
}

double loss_value(const Var& v) { return v.value()[0]; }

}  // namespace

TEST_CASE("gaussian field of identical features: mean is that vector, covariance ridge*I") {
    Tensor f({2, 2, 3});
    for (std::size_t k = 0; k < f.size(); ++k) f[k] = 0.1 * static_cast<double>(k);
    const std::vector<FeatureStack> train{stack_of(f), stack_of(f), stack_of(f)};
    const GaussianField g = fit_gaussian_field(train, 0.5);
    for (std::size_t k = 0; k < f.size(); ++k) CHECK(g.mean[k] == doctest::Approx(f[k]));
    // precision = I/0.5, so the score of mean + e_0 is 2
    std::vector<double> probe(g.mean_at(1, 0), g.mean_at(1, 0) + 3);
    probe[0] += 1.0;
    CHECK(g.score(1, 0, probe.data()) == doctest::Approx(2.0));
}

TEST_CASE("gaussian field recovers a known covariance") {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> n01(0, 1);
    std::vector<FeatureStack> train;
    for (int s = 0; s < 10000; ++s) {
        Tensor f({1, 1, 2});
        f[0] = std::sqrt(2.0) * n01(rng);
        f[1] = n01(rng);
        train.push_back(stack_of(f));
    }
    const GaussianField g = fit_gaussian_field(train, 1e-6);
    // Recover covariance from the precision Cholesky: cov = (L L^T)^-1
    const double* L = g.chol_at(0, 0);
    const double p00 = L[0] * L[0], p01 = L[2] * L[0], p11 = L[2] * L[2] + L[3] * L[3];
    const double det = p00 * p11 - p01 * p01;
    CHECK(p11 / det == doctest::Approx(2.0).epsilon(0.05));
    CHECK(p00 / det == doctest::Approx(1.0).epsilon(0.05));
    CHECK(std::abs(-p01 / det) < 0.05);
}

TEST_CASE("gaussian field rejects bad input") {
    const std::vector<FeatureStack> one{stack_of(Tensor({1, 1, 2}, 0.0))};
    CHECK_THROWS_AS(fit_gaussian_field(one, 1.0), ValidationError);
    const std::vector<FeatureStack> two{stack_of(Tensor({1, 1, 2}, 0.0)), stack_of(Tensor({1, 1, 2}, 1.0))};
    CHECK_THROWS_AS(fit_gaussian_field(two, 0.0), ValidationError);
}

TEST_CASE("padim loss examples") {
    GaussianField g;
    g.h = g.w = 1;
    g.c = 2;
    g.mean = {1.0, -1.0};
    g.precision_chol = {1.0, 0.0, 0.0, 1.0};
    Tape tape;
    CHECK(loss_value(padim_loss(g, tape.leaf(Tensor({1, 1, 2}, std::vector<double>{4.0, 3.0})))) == doctest::Approx(25.0));
    CHECK(loss_value(padim_loss(g, tape.leaf(Tensor({1, 1, 2}, std::vector<double>{1.0, -1.0})))) == 0.0);
    CHECK_THROWS_AS(padim_loss(g, tape.leaf(Tensor({1, 1, 3}))), ShapeError);
}

TEST_CASE("padim loss is non-negative and its gradient matches finite differences") {
    std::mt19937_64 rng(4);
    std::vector<FeatureStack> train;
    for (int s = 0; s < 8; ++s) train.push_back(stack_of(random_tensor({3, 2, 4}, rng)));
    const GaussianField g = fit_gaussian_field(train, 0.05);
    for (int trial = 0; trial < 20; ++trial) {
        const Tensor f = random_tensor({3, 2, 4}, rng, -2, 2);
        Tape tape;
        const Var v = tape.leaf(f);
        const Var l = padim_loss(g, v);
        CHECK(loss_value(l) >= 0.0);
        const Tensor fd = testing::numeric_gradient(
            [&](const Tensor& p) {
                Tape t2;
                return loss_value(padim_loss(g, t2.leaf(p)));
            },
            f);
        CHECK(testing::rel_error(tape.backward(l)[v], fd) < 1e-6);
    }
}

TEST_CASE("loss windows score only the included cells of a sub-grid") {
    std::mt19937_64 rng(5);
    std::vector<FeatureStack> train;
    for (int s = 0; s < 6; ++s) train.push_back(stack_of(random_tensor({4, 4, 2}, rng)));
    const GaussianField g = fit_gaussian_field(train, 0.1);
    const Tensor f = random_tensor({4, 4, 2}, rng);
    const Tensor scores = padim_scores(g, f);
    Tensor sub({2, 3, 2});
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 3; ++j)
            for (std::size_t c = 0; c < 2; ++c) sub.at(i, j, c) = f.at(1 + i, 1 + j, c);
    CellWindow win{1, 1, Mask(2, 3)};
    win.include.set(0, 0);
    win.include.set(1, 2);
    Tape tape;
    CHECK(loss_value(padim_loss(g, tape.leaf(sub), win)) == doctest::Approx(scores[1 * 4 + 1] + scores[2 * 4 + 3]));
    CellWindow off{3, 0, {}};
    CHECK_THROWS_AS(padim_loss(g, tape.leaf(sub), off), ShapeError);
}

TEST_CASE("coreset selection examples") {
    const MemoryBank line = bank_from({{0.0}, {1.0}, {10.0}});
    auto sel = coreset_select_from(line, 2, 0);
    std::sort(sel.begin(), sel.end());
    CHECK(sel == std::vector<std::uint32_t>{0, 2});
    auto all = coreset_select(line, 3, 99);
    std::sort(all.begin(), all.end());
    CHECK(all == std::vector<std::uint32_t>{0, 1, 2});
    CHECK_THROWS_AS(coreset_select(line, 0, 1), ValidationError);
    CHECK_THROWS_AS(coreset_select(line, 4, 1), ValidationError);
}

TEST_CASE("every greedy pick is the true farthest point") {
    std::mt19937_64 rng(6);
    for (int trial = 0; trial < 5; ++trial) {
        const MemoryBank b = random_bank(200, 3, rng);
        const auto sel = coreset_select(b, 40, 100 + trial);
        for (std::size_t k = 1; k < sel.size(); ++k) {
            double best = -1;
            for (std::size_t p = 0; p < b.size(); ++p) {
                double dmin = std::numeric_limits<double>::infinity();
                for (std::size_t q = 0; q < k; ++q) {
                    double d = 0;
                    for (std::size_t c = 0; c < 3; ++c) d += std::pow(b.feature(p)[c] - b.feature(sel[q])[c], 2);
                    dmin = std::min(dmin, d);
                }
                best = std::max(best, dmin);
            }
            double got = std::numeric_limits<double>::infinity();
            for (std::size_t q = 0; q < k; ++q) {
                double d = 0;
                for (std::size_t c = 0; c < 3; ++c) d += std::pow(b.feature(sel[k])[c] - b.feature(sel[q])[c], 2);
                got = std::min(got, d);
            }
            CHECK(got == doctest::Approx(best).epsilon(1e-12));
        }
    }
}

TEST_CASE("patchcore loss examples") {
    MemoryBank b = bank_from({{0.0, 0.0}, {3.0, 4.0}});
    const Tensor f({1, 1, 2}, std::vector<double>{0.0, 1.0});
    Tape tape;
    CHECK_THROWS_AS(patchcore_loss(b, tape.leaf(f)), ValidationError);
    build_candidate_sets(b, f, 2);
    CHECK(loss_value(patchcore_loss(b, tape.leaf(f))) == doctest::Approx(1.0));
    CHECK(loss_value(patchcore_loss(b, tape.leaf(Tensor({1, 1, 2}, std::vector<double>{3.0, 4.0})))) == 0.0);
}

TEST_CASE("candidate sets are exact k-NN and clamp oversize requests") {
    std::mt19937_64 rng(7);
    MemoryBank b = random_bank(60, 4, rng);
    const Tensor f0 = random_tensor({3, 3, 4}, rng);
    build_candidate_sets(b, f0, 1);
    const Tensor exact = exact_patchcore_scores(b, f0);
    const Tensor approx = patchcore_scores(b, f0);
    for (std::size_t k = 0; k < exact.size(); ++k) CHECK(approx[k] == exact[k]);
    build_candidate_sets(b, f0, 1000);
    CHECK(b.candidates_per_cell == 60);
}

TEST_CASE("candidate scores bound exact scores from above; full sets are exact") {
    std::mt19937_64 rng(8);
    MemoryBank b = random_bank(300, 5, rng);
    const Tensor f0 = random_tensor({4, 4, 5}, rng);
    build_candidate_sets(b, f0, 7);
    for (int trial = 0; trial < 10; ++trial) {
        const Tensor f = random_tensor({4, 4, 5}, rng);
        const Tensor approx = patchcore_scores(b, f), exact = exact_patchcore_scores(b, f);
        for (std::size_t k = 0; k < approx.size(); ++k) CHECK(approx[k] >= exact[k]);
    }
    build_candidate_sets(b, f0, 300);
    const Tensor f = random_tensor({4, 4, 5}, rng);
    Tape tape;
    const double l = loss_value(patchcore_loss(b, tape.leaf(f)));
    double e = 0;
    const Tensor exact = exact_patchcore_scores(b, f);
    for (double s : exact.data()) e += s;
    CHECK(std::abs(l - e) <= 1e-12 * std::max(1.0, e));
}

TEST_CASE("patchcore gradient matches finite differences away from ties") {
    std::mt19937_64 rng(9);
    MemoryBank b = random_bank(40, 3, rng);
    const Tensor f0 = random_tensor({2, 3, 3}, rng);
    build_candidate_sets(b, f0, 10);
    for (int trial = 0; trial < 20; ++trial) {
        const Tensor f = random_tensor({2, 3, 3}, rng);
        Tape tape;
        const Var v = tape.leaf(f);
        const Tensor g = tape.backward(patchcore_loss(b, v))[v];
        const Tensor fd = testing::numeric_gradient(
            [&](const Tensor& p) {
                Tape t2;
                return loss_value(patchcore_loss(b, t2.leaf(p)));
            },
            f);
        CHECK(testing::rel_error(g, fd) < 1e-6);
    }
}

TEST_CASE("model files round trip") {
    const Extractor ex = build_extractor(ExtractorSpec::default_spec(3));
    std::mt19937_64 rng(10);
    std::vector<FeatureStack> train;
    for (int s = 0; s < 4; ++s) train.push_back(ex.extract(random_tensor({8, 8, 3}, rng)));
    const auto dir = std::filesystem::temp_directory_path() / "f2pad_backends_test";
    std::filesystem::create_directories(dir);

    const GaussianField g = fit_gaussian_field(train, default_ridge(train));
    save_gaussian_field(dir / "g.f2pb", g, ex);
    const LoadedModel lg = load_model(dir / "g.f2pb");
    CHECK(lg.backend->kind() == BackendKind::gaussian);
    CHECK(lg.extractor.weights()[0] == ex.weights()[0]);
    const Tensor probe = ex.extract(random_tensor({8, 8, 3}, rng)).concat;
    CHECK(lg.backend->location_scores(probe) == padim_scores(g, probe));

    MemoryBank b = build_memory_bank(train);
    b.coreset = coreset_select(b, 20, 1);
    save_memory_bank(dir / "b.f2pb", b, ex);
    const LoadedModel lb = load_model(dir / "b.f2pb", 5);
    CHECK(lb.backend->kind() == BackendKind::memory_bank);
    CHECK(lb.backend->location_scores(probe) == exact_patchcore_scores(b, probe));
    std::filesystem::remove_all(dir);
}
