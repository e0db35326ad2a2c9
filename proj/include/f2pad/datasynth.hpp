#pragma once

// Cut-paste synthetic defects with exact ground truth, plus the procedural
// textures and blob shapes used to build desk-scale datasets.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "f2pad/mask.hpp"
#include "f2pad/regularizers.hpp"
#include "f2pad/tensor.hpp"

namespace f2pad {

struct SynthSpec {
    Mask mask_source;
    std::pair<double, double> resize_range{0.75, 1.25};
    // Minimum L2 distance (normalised units) between a generated pixel and the original.
    double contrast_min = 0.2;
    std::uint64_t seed = 0;
    // Fixed colour (normalised); a random 8-bit colour is drawn when unset.
    std::optional<Pixel> color;
    // Patch mode: paste the co-located pixels of another normal image instead of a colour.
    const Tensor* patch_source = nullptr;
};

struct SynthResult {
    Tensor x;
    Mask gt;
    double scale = 1.0;
    std::size_t row = 0;
    std::size_t col = 0;
    Pixel color{};
    std::size_t retries = 0;
    std::size_t adjusted = 0;  // pixels changed by the contrast rule
};

// x = (1 - m) * n_orig + m * a_src with m the resized, randomly placed source mask.
SynthResult generate(const Tensor& n_orig, const SynthSpec& spec);

// Union of 1-3 random ellipses inside an h x w box, total area close to `area` pixels.
Mask blob_mask(std::size_t h, std::size_t w, double area, std::uint64_t seed);

struct TextureSpec {
    std::size_t h = 64;
    std::size_t w = 64;
    std::size_t tile = 16;
    std::uint64_t layout_seed = 7;
    double noise = 0.01;   // per-pixel std in [0, 1] intensity units
    double jitter = 0.01;  // per-image brightness offset bound
};

// Piecewise-constant tiles whose colours depend only on layout_seed; `seed` drives noise and jitter.
Tensor make_texture(const TextureSpec& spec, std::uint64_t seed);

struct DatasetSpec {
    TextureSpec texture;
    std::size_t n_train = 32;
    std::size_t n_test = 16;
    std::uint64_t seed = 1;
    double contrast_min = 0.2;
    double min_area = 0.005;  // anomaly area as a fraction of the image
    double max_area = 0.12;
};

struct TestSample {
    std::string name;
    Tensor image;
    Mask gt;
    nlohmann::json meta;
};

struct Dataset {
    std::vector<Tensor> train;
    std::vector<TestSample> test;
    nlohmann::json manifest = nlohmann::json::array();
};

Dataset synthesize_dataset(const DatasetSpec& spec);

// Layout: train/NNNN.png, test/NNNN.png, test/NNNN_mask.png, manifest.jsonl.
void write_dataset(const std::filesystem::path& dir, const Dataset& ds);
// Missing test files are reported in `missing` and skipped.
Dataset read_dataset(const std::filesystem::path& dir, std::vector<std::string>* missing = nullptr);

}  // namespace f2pad
