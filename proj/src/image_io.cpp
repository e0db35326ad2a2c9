#include "f2pad/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <string>

#include "f2pad/error.hpp"

namespace f2pad {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const { std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

// Decodes any PNG into 8-bit RGB.
RgbImage read_png(const std::filesystem::path& path) {
    FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw IoError("cannot open " + path.string());
    png_byte sig[8];
    if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) throw IoError(path.string() + " is not a PNG file");

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (png == nullptr) throw IoError("libpng: cannot create read struct");
    png_infop info = png_create_info_struct(png);
    if (info == nullptr) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw IoError("libpng: cannot create info struct");
    }
    RgbImage img;
    std::vector<png_bytep> rows;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("libpng: failed to decode " + path.string());
    }
    png_init_io(png, fp.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);
    const auto color = png_get_color_type(png, info);
    const auto depth = png_get_bit_depth(png, info);
    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_strip_alpha(png);
    png_read_update_info(png, info);
    img.w = png_get_image_width(png, info);
    img.h = png_get_image_height(png, info);
    if (png_get_rowbytes(png, info) != img.w * 3) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("libpng: unexpected row layout in " + path.string());
    }
    img.data.resize(img.h * img.w * 3);
    rows.resize(img.h);
    for (std::size_t i = 0; i < img.h; ++i) rows[i] = img.data.data() + i * img.w * 3;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

void write_png(const std::filesystem::path& path, std::size_t h, std::size_t w, int channels, const std::uint8_t* data) {
    FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw IoError("cannot open " + path.string() + " for writing");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (png == nullptr) throw IoError("libpng: cannot create write struct");
    png_infop info = png_create_info_struct(png);
    if (info == nullptr) {
        png_destroy_write_struct(&png, nullptr);
        throw IoError("libpng: cannot create info struct");
    }
    std::vector<png_bytep> rows(h);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("libpng: failed to encode " + path.string());
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
                 channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (std::size_t i = 0; i < h; ++i) rows[i] = const_cast<png_bytep>(data + i * w * static_cast<std::size_t>(channels));
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

}  // namespace

RgbImage read_png_rgb(const std::filesystem::path& path) { return read_png(path); }

void write_png_rgb(const std::filesystem::path& path, const RgbImage& image) {
    if (image.data.size() != image.h * image.w * 3) throw ValidationError("write_png_rgb: buffer size mismatch");
    write_png(path, image.h, image.w, 3, image.data.data());
}

Mask read_mask_png(const std::filesystem::path& path) {
    const RgbImage img = read_png(path);
    Mask m(img.h, img.w);
    for (std::size_t p = 0; p < img.h * img.w; ++p) m.set_flat(p, img.data[p * 3] != 0);
    return m;
}

void write_mask_png(const std::filesystem::path& path, const Mask& mask) {
    std::vector<std::uint8_t> buf(mask.size());
    for (std::size_t p = 0; p < mask.size(); ++p) buf[p] = mask[p] ? 255 : 0;
    write_png(path, mask.height(), mask.width(), 1, buf.data());
}

void write_heatmap_png(const std::filesystem::path& path, const Tensor& scores) {
    if (scores.rank() != 2) throw ShapeError("write_heatmap_png: expected [h, w] scores, got " + shape_str(scores.shape()));
    const std::size_t h = scores.dim(0), w = scores.dim(1);
    double lo = 0.0, hi = 0.0;
    if (!scores.empty()) {
        const auto [mn, mx] = std::minmax_element(scores.data().begin(), scores.data().end());
        lo = *mn;
        hi = *mx;
    }
    const double range = hi > lo ? hi - lo : 1.0;
    std::vector<std::uint8_t> buf(h * w * 3);
    for (std::size_t p = 0; p < h * w; ++p) {
        const double t = (scores[p] - lo) / range;
        const double r = std::clamp(1.5 - std::abs(4.0 * t - 3.0), 0.0, 1.0);
        const double g = std::clamp(1.5 - std::abs(4.0 * t - 2.0), 0.0, 1.0);
        const double b = std::clamp(1.5 - std::abs(4.0 * t - 1.0), 0.0, 1.0);
        buf[p * 3 + 0] = static_cast<std::uint8_t>(std::lround(255.0 * r));
        buf[p * 3 + 1] = static_cast<std::uint8_t>(std::lround(255.0 * g));
        buf[p * 3 + 2] = static_cast<std::uint8_t>(std::lround(255.0 * b));
    }
    write_png(path, h, w, 3, buf.data());
}

Tensor normalize(const RgbImage& image) {
    if (image.data.size() != image.h * image.w * 3) throw ValidationError("normalize: buffer size mismatch");
    Tensor t({image.h, image.w, 3}, 0.0);
    for (std::size_t p = 0; p < image.h * image.w; ++p) {
        for (std::size_t c = 0; c < 3; ++c) t[p * 3 + c] = (image.data[p * 3 + c] / 255.0 - kPixelMean[c]) / kPixelStd[c];
    }
    return t;
}

RgbImage denormalize(const Tensor& image) {
    require_hwc(image, 3, "denormalize");
    RgbImage out{image.dim(0), image.dim(1), std::vector<std::uint8_t>(image.size())};
    for (std::size_t k = 0; k < image.size(); ++k) {
        const std::size_t c = k % 3;
        const double v = (image[k] * kPixelStd[c] + kPixelMean[c]) * 255.0;
        out.data[k] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
    }
    return out;
}

Tensor quantize(const Tensor& image) { return normalize(denormalize(image)); }

std::array<double, 3> valid_lower() {
    return {-kPixelMean[0] / kPixelStd[0], -kPixelMean[1] / kPixelStd[1], -kPixelMean[2] / kPixelStd[2]};
}

std::array<double, 3> valid_upper() {
    return {(1.0 - kPixelMean[0]) / kPixelStd[0], (1.0 - kPixelMean[1]) / kPixelStd[1], (1.0 - kPixelMean[2]) / kPixelStd[2]};
}

}  // namespace f2pad
