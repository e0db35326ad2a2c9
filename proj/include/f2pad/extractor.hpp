#pragma once

// Fixed, seeded multi-scale convolutional feature extractor.

#include <cstddef>
#include <cstdint>
#include <utility>
#include <vector>

#include <json.hpp>

#include "f2pad/mask.hpp"
#include "f2pad/tensor.hpp"

namespace f2pad {

struct ConvBlockSpec {
    std::size_t kernel_h = 3;
    std::size_t kernel_w = 3;
    std::size_t in_channels = 3;
    std::size_t out_channels = 16;
    std::size_t stride = 1;
    std::size_t pad = 1;
    bool leaky = true;
    // Average pool with window = stride = pool applied after the activation; 1 disables it.
    std::size_t pool = 1;

    friend bool operator==(const ConvBlockSpec&, const ConvBlockSpec&) = default;
};

struct ExtractorSpec {
    std::vector<ConvBlockSpec> layers;
    std::vector<std::size_t> taps;  // indices into `layers`
    std::uint64_t seed = 0;
    double leaky_slope = 0.1;

    // 3x3 convs 3->16->32->64, leaky ReLU, 2x2 average pools, taps after blocks 1 and 2.
    static ExtractorSpec default_spec(std::uint64_t seed = 2024);

    // Throws ValidationError naming the first violated constraint.
    void validate() const;

    nlohmann::json to_json() const;
    static ExtractorSpec from_json(const nlohmann::json& j);

    friend bool operator==(const ExtractorSpec&, const ExtractorSpec&) = default;
};

/// Per-tap feature maps plus their channel concatenation at the first tap's resolution.
struct FeatureStack {
    std::vector<Tensor> maps;
    Tensor concat;
};

struct TapedFeatures {
    std::vector<Var> maps;
    Var concat;
};

/// Inclusive pixel interval [lo, hi] along one axis.
struct Span {
    std::size_t lo = 0;
    std::size_t hi = 0;
};

class Extractor {
public:
    explicit Extractor(ExtractorSpec spec);
    Extractor(ExtractorSpec spec, std::vector<Tensor> weights);

    const ExtractorSpec& spec() const noexcept { return spec_; }
    const std::vector<Tensor>& weights() const noexcept { return weights_; }

    // Image extents must be multiples of this.
    std::size_t required_divisor() const noexcept { return divisor_; }
    // Downsampling factor of each tap relative to the image.
    const std::vector<std::size_t>& tap_factors() const noexcept { return tap_factors_; }
    std::size_t feature_channels() const noexcept { return channels_; }

    std::vector<std::pair<std::size_t, std::size_t>> tap_dims(std::size_t h, std::size_t w) const;

    FeatureStack extract(const Tensor& image) const;
    TapedFeatures extract(Var image) const;

    // Pixels along one axis (0 = rows, 1 = cols) that influence `cell` of tap `tap`.
    Span receptive_span(std::size_t tap, std::size_t cell, std::size_t extent, int axis) const;

    // Cells of tap `tap` whose receptive field intersects `pixels`.
    Mask affected_tap_cells(std::size_t tap, const Mask& pixels) const;
    // Cells of the concatenated map whose score depends on any pixel in `pixels`.
    Mask affected_cells(const Mask& pixels) const;

private:
    void check_image(const Tensor& image) const;

    ExtractorSpec spec_;
    std::vector<Tensor> weights_;
    std::size_t divisor_ = 1;
    std::vector<std::size_t> tap_factors_;
    std::size_t channels_ = 0;
};

// Weights drawn from uniform(-s, s), s = 1/sqrt(fan_in), seeded by spec.seed.
std::vector<Tensor> draw_weights(const ExtractorSpec& spec);
Extractor build_extractor(const ExtractorSpec& spec);

}  // namespace f2pad
