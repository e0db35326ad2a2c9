#include <doctest.h>

#include "f2pad/error.hpp"
#include "f2pad/extractor.hpp"
#include "support.hpp"

using namespace f2pad;
using testing::random_tensor;

TEST_CASE("weights are a pure function of the seed") {
    const Extractor a = build_extractor(ExtractorSpec::default_spec(11));
    const Extractor b = build_extractor(ExtractorSpec::default_spec(11));
    const Extractor c = build_extractor(ExtractorSpec::default_spec(12));
    REQUIRE(a.weights().size() == b.weights().size());
    for (std::size_t k = 0; k < a.weights().size(); ++k) CHECK(a.weights()[k] == b.weights()[k]);
    CHECK_FALSE(a.weights()[0] == c.weights()[0]);
}

TEST_CASE("weights lie in the fan-in bound") {
    const Extractor ex = build_extractor(ExtractorSpec::default_spec());
    for (std::size_t l = 0; l < ex.weights().size(); ++l) {
        const Tensor& w = ex.weights()[l];
        const double s = 1.0 / std::sqrt(static_cast<double>(w.dim(0) * w.dim(1) * w.dim(2)));
        for (double v : w.data()) CHECK(std::abs(v) <= s);
    }
}

TEST_CASE("default spec shapes on a 64x64 image") {
    const Extractor ex = build_extractor(ExtractorSpec::default_spec());
    std::mt19937_64 rng(1);
    const FeatureStack fs = ex.extract(random_tensor({64, 64, 3}, rng));
    REQUIRE(fs.maps.size() == 2);
    CHECK(fs.maps[0].shape() == Shape{32, 32, 16});
    CHECK(fs.maps[1].shape() == Shape{16, 16, 32});
    CHECK(fs.concat.shape() == Shape{32, 32, 48});
    CHECK(ex.feature_channels() == 48);
    CHECK(ex.required_divisor() == 4);
}

TEST_CASE("concat holds the tap maps, the coarse one replicated") {
    const Extractor ex = build_extractor(ExtractorSpec::default_spec());
    std::mt19937_64 rng(2);
    const FeatureStack fs = ex.extract(random_tensor({16, 16, 3}, rng));
    for (std::size_t i = 0; i < 8; ++i)
        for (std::size_t j = 0; j < 8; ++j) {
            for (std::size_t c = 0; c < 16; ++c) CHECK(fs.concat.at(i, j, c) == fs.maps[0].at(i, j, c));
            for (std::size_t c = 0; c < 32; ++c) CHECK(fs.concat.at(i, j, 16 + c) == fs.maps[1].at(i / 2, j / 2, c));
        }
}

TEST_CASE("invalid specs and images are rejected") {
    ExtractorSpec spec = ExtractorSpec::default_spec();
    spec.taps = {1, 0};
    CHECK_THROWS_AS(build_extractor(spec), ValidationError);
    spec = ExtractorSpec::default_spec();
    spec.layers[1].in_channels = 7;
    CHECK_THROWS_AS(build_extractor(spec), ValidationError);
    spec = ExtractorSpec::default_spec();
    spec.layers[0].kernel_h = 2;
    CHECK_THROWS_AS(build_extractor(spec), ValidationError);

    const Extractor ex = build_extractor(ExtractorSpec::default_spec());
    CHECK_THROWS_AS(ex.extract(Tensor({18, 16, 3})), ValidationError);
    CHECK_THROWS_AS(ex.extract(Tensor({16, 16, 1})), ShapeError);
}

TEST_CASE("extract is pure") {
    const Extractor ex = build_extractor(ExtractorSpec::default_spec());
    std::mt19937_64 rng(3);
    const Tensor img = random_tensor({16, 24, 3}, rng);
    const FeatureStack a = ex.extract(img);
    const FeatureStack b = ex.extract(img);
    CHECK(a.concat == b.concat);
    Tape tape;
    const TapedFeatures t = ex.extract(tape.leaf(img));
    CHECK(t.concat.value() == a.concat);
}

TEST_CASE("gradient of sum(concat) matches finite differences") {
    const Extractor ex = build_extractor(ExtractorSpec::default_spec(5));
    std::mt19937_64 rng(4);
    const Tensor img = random_tensor({12, 8, 3}, rng, -2, 2);
    Tape tape;
    const Var v = tape.leaf(img);
    const auto g = tape.backward(sum(ex.extract(v).concat));
    const Tensor fd = testing::numeric_gradient(
        [&](const Tensor& p) {
            double s = 0;
            const FeatureStack fs = ex.extract(p);
            for (double x : fs.concat.data()) s += x;
            return s;
        },
        img);
    CHECK(testing::rel_error(g[v], fd) < 1e-6);
}

TEST_CASE("receptive-field locality matches a brute-force perturbation") {
    const Extractor ex = build_extractor(ExtractorSpec::default_spec(9));
    std::mt19937_64 rng(5);
    const Tensor img = random_tensor({16, 16, 3}, rng);
    const Tensor base = ex.extract(img).concat;
    const std::size_t h = base.dim(0), w = base.dim(1), c = base.dim(2);
    for (auto [pi, pj] : {std::pair<std::size_t, std::size_t>{0, 0}, {5, 9}, {15, 15}, {8, 3}, {12, 0}}) {
        Tensor moved = img;
        for (std::size_t ch = 0; ch < 3; ++ch) moved.at(pi, pj, ch) += 0.5 + 0.1 * static_cast<double>(ch);
        const Tensor f = ex.extract(moved).concat;
        Mask changed(h, w);
        for (std::size_t i = 0; i < h; ++i)
            for (std::size_t j = 0; j < w; ++j)
                for (std::size_t k = 0; k < c; ++k)
                    if (f.at(i, j, k) != base.at(i, j, k)) changed.set(i, j);
        Mask px(16, 16);
        px.set(pi, pj);
        CHECK(ex.affected_cells(px) == changed);
        // every changed cell's span covers the pixel
        for (std::size_t i = 0; i < h; ++i)
            for (std::size_t j = 0; j < w; ++j) {
                if (!changed(i, j)) continue;
                const Span r = ex.receptive_span(0, i, 16, 0), s = ex.receptive_span(0, j, 16, 1);
                const Span r1 = ex.receptive_span(1, i / 2, 16, 0), s1 = ex.receptive_span(1, j / 2, 16, 1);
                const bool in0 = r.lo <= pi && pi <= r.hi && s.lo <= pj && pj <= s.hi;
                const bool in1 = r1.lo <= pi && pi <= r1.hi && s1.lo <= pj && pj <= s1.hi;
                CHECK((in0 || in1));
            }
    }
}
