#pragma once

// 8-bit PNG I/O and the channelwise normalisation used for every image tensor.

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "f2pad/mask.hpp"
#include "f2pad/tensor.hpp"

namespace f2pad {

inline constexpr std::array<double, 3> kPixelMean{0.485, 0.456, 0.406};
inline constexpr std::array<double, 3> kPixelStd{0.229, 0.224, 0.225};

struct RgbImage {
    std::size_t h = 0;
    std::size_t w = 0;
    std::vector<std::uint8_t> data;  // h*w*3, row-major
};

RgbImage read_png_rgb(const std::filesystem::path& path);
void write_png_rgb(const std::filesystem::path& path, const RgbImage& image);

// Nonzero pixels of a grayscale (or RGB, first channel) PNG become 1.
Mask read_mask_png(const std::filesystem::path& path);
void write_mask_png(const std::filesystem::path& path, const Mask& mask);

// Min-max scaled scores mapped through a blue-to-red colour ramp.
void write_heatmap_png(const std::filesystem::path& path, const Tensor& scores);

// (v/255 - mean) / std per channel.
Tensor normalize(const RgbImage& image);
// Inverse of normalize, rounded to the nearest 8-bit level and clamped.
RgbImage denormalize(const Tensor& image);
// Rounds a normalised image to the nearest representable 8-bit level.
Tensor quantize(const Tensor& image);

// Normalised values of 0 and 255 per channel.
std::array<double, 3> valid_lower();
std::array<double, 3> valid_upper();

}  // namespace f2pad
