#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "f2pad/datasynth.hpp"
#include "f2pad/error.hpp"
#include "f2pad/image_io.hpp"
#include "support.hpp"

using namespace f2pad;

namespace {

double pixel_dist(const Tensor& a, const Tensor& b, std::size_t p) {
    double s = 0;
    for (std::size_t c = 0; c < 3; ++c) s += (a[p * 3 + c] - b[p * 3 + c]) * (a[p * 3 + c] - b[p * 3 + c]);
    return std::sqrt(s);
}

}  // namespace

TEST_CASE("an empty mask source leaves the image alone") {
    const Tensor n = make_texture(TextureSpec{}, 1);
    SynthSpec spec;
    spec.mask_source = Mask(4, 4);
    const SynthResult r = generate(n, spec);
    CHECK(r.x == n);
    CHECK_FALSE(r.gt.any());
}

TEST_CASE("an all-one source with a fixed colour paints a constant block") {
    TextureSpec ts;
    ts.noise = 0.0;
    const Tensor n = make_texture(ts, 2);
    SynthSpec spec;
    spec.mask_source = Mask(10, 12, true);
    spec.resize_range = {1.0, 1.0};
    spec.color = Pixel{2.0, -1.5, 2.2};
    spec.seed = 3;
    const SynthResult r = generate(n, spec);
    CHECK(r.gt.count() == 120);
    for (std::size_t i = r.row; i < r.row + 10; ++i)
        for (std::size_t j = r.col; j < r.col + 12; ++j) {
            CHECK(r.gt(i, j));
            for (std::size_t c = 0; c < 3; ++c) CHECK(r.x.at(i, j, c) == r.color[c]);
        }
}

TEST_CASE("planted pixels honour the contrast floor and gt is the changed support") {
    TextureSpec ts;
    ts.h = ts.w = 32;
    ts.tile = 8;
    std::mt19937_64 rng(4);
    for (std::uint64_t k = 0; k < 1000; ++k) {
        const Tensor n = make_texture(ts, k);
        SynthSpec spec;
        spec.mask_source = blob_mask(10, 10, 30.0, k);
        spec.contrast_min = 0.2 + 0.3 * static_cast<double>(k % 3);
        spec.seed = k;
        if (k % 4 == 0) spec.color = Pixel{n[0], n[1], n[2]};  // forces the contrast rule
        const SynthResult r = generate(n, spec);
        REQUIRE(r.gt.any());
        for (std::size_t p = 0; p < r.gt.size(); ++p) {
            const double d = pixel_dist(r.x, n, p);
            if (r.gt[p]) {
                CHECK(d >= spec.contrast_min);
            } else {
                CHECK(d == 0.0);
            }
        }
    }
}

TEST_CASE("patch mode copies the co-located source pixels") {
    TextureSpec ts;
    const Tensor n = make_texture(ts, 5);
    TextureSpec other = ts;
    other.layout_seed = 99;
    const Tensor src = make_texture(other, 6);
    SynthSpec spec;
    spec.mask_source = Mask(6, 6, true);
    spec.patch_source = &src;
    spec.contrast_min = 1e-9;
    spec.seed = 1;
    const SynthResult r = generate(n, spec);
    for (std::size_t p = 0; p < r.gt.size(); ++p)
        if (r.gt[p])
            for (std::size_t c = 0; c < 3; ++c) CHECK(r.x[p * 3 + c] == src[p * 3 + c]);
    const Tensor wrong({8, 8, 3});
    spec.patch_source = &wrong;
    CHECK_THROWS_AS(generate(n, spec), ShapeError);
}

TEST_CASE("generation is a function of the seed") {
    const Tensor n = make_texture(TextureSpec{}, 7);
    SynthSpec spec;
    spec.mask_source = blob_mask(12, 12, 60.0, 8);
    spec.seed = 11;
    const SynthResult a = generate(n, spec);
    const SynthResult b = generate(n, spec);
    CHECK(a.x == b.x);
    CHECK(a.gt == b.gt);
    spec.seed = 12;
    CHECK_FALSE(generate(n, spec).gt == a.gt);
}

TEST_CASE("oversized sources give up after the retry budget") {
    const Tensor n = make_texture(TextureSpec{}, 1);
    SynthSpec spec;
    spec.mask_source = Mask(200, 200, true);
    CHECK_THROWS_AS(generate(n, spec), ValidationError);
    spec.mask_source = Mask(4, 4, true);
    spec.contrast_min = 0.0;
    CHECK_THROWS_AS(generate(n, spec), ValidationError);
}

TEST_CASE("blob masks are near the requested area") {
    for (std::uint64_t s = 0; s < 50; ++s) {
        const Mask m = blob_mask(64, 64, 200.0, s);
        CHECK(m.count() > 80);
        CHECK(m.count() < 400);
    }
}

TEST_CASE("textures are quantized and share tiles across seeds") {
    TextureSpec ts;
    ts.noise = 0.0;
    ts.jitter = 0.0;
    const Tensor a = make_texture(ts, 1), b = make_texture(ts, 2);
    CHECK(a == b);
    const Tensor round = normalize(denormalize(a));
    CHECK(round == a);
}

TEST_CASE("datasets: determinism, zero test samples and the file round trip") {
    DatasetSpec spec;
    spec.texture.h = spec.texture.w = 16;
    spec.texture.tile = 4;
    spec.n_train = 3;
    spec.n_test = 4;
    const Dataset a = synthesize_dataset(spec), b = synthesize_dataset(spec);
    REQUIRE(a.test.size() == 4);
    for (std::size_t k = 0; k < 4; ++k) {
        CHECK(a.test[k].image == b.test[k].image);
        CHECK(a.test[k].gt == b.test[k].gt);
        CHECK(a.test[k].gt.any());
    }
    CHECK(a.manifest.size() == 7);

    spec.n_test = 0;
    const Dataset none = synthesize_dataset(spec);
    CHECK(none.test.empty());
    CHECK(none.train.size() == 3);

    const auto dir = std::filesystem::temp_directory_path() / "f2pad_ds_test";
    std::filesystem::remove_all(dir);
    write_dataset(dir, a);
    const Dataset r = read_dataset(dir);
    REQUIRE(r.test.size() == 4);
    CHECK(r.train[1] == a.train[1]);
    CHECK(r.test[2].image == a.test[2].image);
    CHECK(r.test[2].gt == a.test[2].gt);

    std::filesystem::remove(dir / "test" / "0001.png");
    std::vector<std::string> missing;
    const Dataset partial = read_dataset(dir, &missing);
    CHECK(partial.test.size() == 3);
    CHECK(missing.size() == 1);
    std::filesystem::remove_all(dir);
    CHECK_THROWS_AS(read_dataset(dir), IoError);

    spec.max_area = 1.5;
    CHECK_THROWS_AS(synthesize_dataset(spec), ValidationError);
}
