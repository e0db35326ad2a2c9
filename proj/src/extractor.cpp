#include "f2pad/extractor.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

#include "f2pad/error.hpp"

namespace f2pad {

namespace {

std::size_t conv_out(std::size_t n, std::size_t k, std::size_t s, std::size_t p) {
    if (n + 2 * p < k) return 0;
    return (n + 2 * p - k) / s + 1;
}

std::size_t pool_out(std::size_t n, std::size_t q) {
    if (q <= 1) return n;
    if (n < q) return 0;
    return (n - q) / q + 1;
}

// 2-D inclusive prefix sums of a mask, padded with a zero row and column.
class MaskIntegral {
public:
    explicit MaskIntegral(const Mask& m) : w_(m.width() + 1), sums_((m.height() + 1) * (m.width() + 1), 0) {
        for (std::size_t i = 0; i < m.height(); ++i) {
            std::size_t row = 0;
            for (std::size_t j = 0; j < m.width(); ++j) {
                row += m(i, j) ? 1 : 0;
                sums_[(i + 1) * w_ + j + 1] = sums_[i * w_ + j + 1] + row;
            }
        }
    }

    std::size_t count(Span rows, Span cols) const {
        return sums_[(rows.hi + 1) * w_ + cols.hi + 1] - sums_[rows.lo * w_ + cols.hi + 1] -
               sums_[(rows.hi + 1) * w_ + cols.lo] + sums_[rows.lo * w_ + cols.lo];
    }

private:
    std::size_t w_;
    std::vector<std::size_t> sums_;
};

}  // namespace

ExtractorSpec ExtractorSpec::default_spec(std::uint64_t seed) {
    ExtractorSpec spec;
    const std::size_t channels[] = {3, 16, 32, 64};
    for (std::size_t l = 0; l < 3; ++l) {
        ConvBlockSpec block;
        block.in_channels = channels[l];
        block.out_channels = channels[l + 1];
        block.pool = 2;
        spec.layers.push_back(block);
    }
    spec.taps = {0, 1};
    spec.seed = seed;
    return spec;
}

void ExtractorSpec::validate() const {
    if (layers.empty()) throw ValidationError("extractor spec: no layers");
    if (taps.empty()) throw ValidationError("extractor spec: no tap points");
    if (!(leaky_slope > 0.0 && leaky_slope < 1.0)) throw ValidationError("extractor spec: leaky_slope must lie in (0,1)");
    if (layers.front().in_channels != 3) throw ValidationError("extractor spec: layer 0 must take 3 input channels");
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const auto& b = layers[l];
        const std::string at = "extractor spec: layer " + std::to_string(l) + ": ";
        if (b.kernel_h % 2 == 0 || b.kernel_w % 2 == 0) throw ValidationError(at + "kernel extents must be odd");
        if (b.stride < 1) throw ValidationError(at + "stride must be >= 1");
        if (b.pool < 1) throw ValidationError(at + "pool must be >= 1");
        if (b.in_channels == 0 || b.out_channels == 0) throw ValidationError(at + "channel counts must be positive");
        if (l > 0 && b.in_channels != layers[l - 1].out_channels) {
            throw ValidationError(at + "in_channels does not match previous out_channels");
        }
    }
    std::size_t factor = 1;
    std::size_t next_tap = 0;
    std::size_t first_factor = 0;
    for (std::size_t t = 0; t < taps.size(); ++t) {
        if (taps[t] >= layers.size()) throw ValidationError("extractor spec: tap index out of range");
        if (t > 0 && taps[t] <= taps[t - 1]) throw ValidationError("extractor spec: tap points must be strictly increasing");
    }
    for (std::size_t l = 0; l < layers.size() && next_tap < taps.size(); ++l) {
        factor *= layers[l].stride * layers[l].pool;
        if (taps[next_tap] == l) {
            if (next_tap == 0) {
                first_factor = factor;
            } else if (factor % first_factor != 0) {
                throw ValidationError("extractor spec: tap " + std::to_string(next_tap) +
                                      " resolution does not divide the first tap's resolution");
            }
            ++next_tap;
        }
    }
}

nlohmann::json ExtractorSpec::to_json() const {
    nlohmann::json j;
    j["seed"] = seed;
    j["leaky_slope"] = leaky_slope;
    j["taps"] = taps;
    j["layers"] = nlohmann::json::array();
    for (const auto& b : layers) {
        j["layers"].push_back({{"kernel_h", b.kernel_h},
                               {"kernel_w", b.kernel_w},
                               {"in", b.in_channels},
                               {"out", b.out_channels},
                               {"stride", b.stride},
                               {"pad", b.pad},
                               {"leaky", b.leaky},
                               {"pool", b.pool}});
    }
    return j;
}

ExtractorSpec ExtractorSpec::from_json(const nlohmann::json& j) {
    try {
        ExtractorSpec spec;
        spec.seed = j.at("seed").get<std::uint64_t>();
        spec.leaky_slope = j.at("leaky_slope").get<double>();
        spec.taps = j.at("taps").get<std::vector<std::size_t>>();
        for (const auto& l : j.at("layers")) {
            ConvBlockSpec b;
            b.kernel_h = l.at("kernel_h");
            b.kernel_w = l.at("kernel_w");
            b.in_channels = l.at("in");
            b.out_channels = l.at("out");
            b.stride = l.at("stride");
            b.pad = l.at("pad");
            b.leaky = l.at("leaky");
            b.pool = l.at("pool");
            spec.layers.push_back(b);
        }
        return spec;
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("extractor spec: malformed json: ") + e.what());
    }
}

std::vector<Tensor> draw_weights(const ExtractorSpec& spec) {
    spec.validate();
    std::mt19937_64 rng(spec.seed);
    std::vector<Tensor> weights;
    for (const auto& b : spec.layers) {
        const double fan_in = static_cast<double>(b.kernel_h * b.kernel_w * b.in_channels);
        const double s = 1.0 / std::sqrt(fan_in);
        std::uniform_real_distribution<double> dist(-s, s);
        Tensor k({b.kernel_h, b.kernel_w, b.in_channels, b.out_channels});
        for (double& v : k.data()) v = dist(rng);
        weights.push_back(std::move(k));
    }
    return weights;
}

Extractor::Extractor(ExtractorSpec spec) : Extractor(spec, draw_weights(spec)) {}

Extractor::Extractor(ExtractorSpec spec, std::vector<Tensor> weights) : spec_(std::move(spec)), weights_(std::move(weights)) {
    spec_.validate();
    if (weights_.size() != spec_.layers.size()) {
        throw ValidationError("extractor: expected " + std::to_string(spec_.layers.size()) + " weight tensors, got " +
                              std::to_string(weights_.size()));
    }
    for (std::size_t l = 0; l < weights_.size(); ++l) {
        const auto& b = spec_.layers[l];
        const Shape expected{b.kernel_h, b.kernel_w, b.in_channels, b.out_channels};
        if (weights_[l].shape() != expected) {
            throw ShapeError("extractor: layer " + std::to_string(l) + " weights have shape " +
                             shape_str(weights_[l].shape()) + ", expected " + shape_str(expected));
        }
        require_finite(weights_[l], "extractor weights");
    }
    std::size_t factor = 1;
    std::size_t t = 0;
    for (std::size_t l = 0; l < spec_.layers.size() && t < spec_.taps.size(); ++l) {
        factor *= spec_.layers[l].stride * spec_.layers[l].pool;
        if (spec_.taps[t] == l) {
            tap_factors_.push_back(factor);
            channels_ += spec_.layers[l].out_channels;
            ++t;
        }
    }
    divisor_ = tap_factors_.back();
}

Extractor build_extractor(const ExtractorSpec& spec) { return Extractor(spec); }

std::vector<std::pair<std::size_t, std::size_t>> Extractor::tap_dims(std::size_t h, std::size_t w) const {
    std::vector<std::pair<std::size_t, std::size_t>> dims;
    std::size_t t = 0;
    for (std::size_t l = 0; l < spec_.layers.size() && t < spec_.taps.size(); ++l) {
        const auto& b = spec_.layers[l];
        h = pool_out(conv_out(h, b.kernel_h, b.stride, b.pad), b.pool);
        w = pool_out(conv_out(w, b.kernel_w, b.stride, b.pad), b.pool);
        if (spec_.taps[t] == l) {
            dims.emplace_back(h, w);
            ++t;
        }
    }
    return dims;
}

void Extractor::check_image(const Tensor& image) const {
    require_hwc(image, 3, "extract");
    const std::size_t h = image.dim(0), w = image.dim(1);
    if (h == 0 || w == 0 || h % divisor_ != 0) {
        throw ShapeError("extract: image dim 0 (h=" + std::to_string(h) + ") is not a positive multiple of " +
                         std::to_string(divisor_));
    }
    if (w % divisor_ != 0) {
        throw ShapeError("extract: image dim 1 (w=" + std::to_string(w) + ") is not a multiple of " +
                         std::to_string(divisor_));
    }
    const auto dims = tap_dims(h, w);
    for (std::size_t t = 0; t < dims.size(); ++t) {
        if (dims[t].first == 0 || dims[t].second == 0 || dims[0].first % dims[t].first != 0 ||
            dims[0].second % dims[t].second != 0) {
            throw ShapeError("extract: tap " + std::to_string(t) + " dims do not divide the first tap's dims");
        }
    }
}

FeatureStack Extractor::extract(const Tensor& image) const {
    check_image(image);
    FeatureStack stack;
    Tensor cur = image;
    std::size_t t = 0;
    for (std::size_t l = 0; l < spec_.layers.size() && t < spec_.taps.size(); ++l) {
        const auto& b = spec_.layers[l];
        cur = conv2d_forward(cur, weights_[l], b.stride, b.pad);
        if (b.leaky) cur = leaky_relu_forward(cur, spec_.leaky_slope);
        if (b.pool > 1) cur = avg_pool_forward(cur, b.pool, b.pool);
        if (spec_.taps[t] == l) {
            stack.maps.push_back(cur);
            ++t;
        }
    }
    const std::size_t h1 = stack.maps[0].dim(0), w1 = stack.maps[0].dim(1);
    std::vector<Tensor> resized;
    resized.reserve(stack.maps.size());
    for (const auto& m : stack.maps) resized.push_back(upsample_nearest_forward(m, h1, w1));
    std::vector<const Tensor*> ptrs;
    for (const auto& r : resized) ptrs.push_back(&r);
    stack.concat = concat_channels_forward(ptrs);
    return stack;
}

TapedFeatures Extractor::extract(Var image) const {
    check_image(image.value());
    Tape& tape = *image.tape;
    TapedFeatures out;
    Var cur = image;
    std::size_t t = 0;
    for (std::size_t l = 0; l < spec_.layers.size() && t < spec_.taps.size(); ++l) {
        const auto& b = spec_.layers[l];
        Var kernel = tape.constant(weights_[l]);
        cur = conv2d(cur, kernel, b.stride, b.pad);
        if (b.leaky) cur = leaky_relu(cur, spec_.leaky_slope);
        if (b.pool > 1) cur = avg_pool(cur, b.pool, b.pool);
        if (spec_.taps[t] == l) {
            out.maps.push_back(cur);
            ++t;
        }
    }
    const std::size_t h1 = out.maps[0].value().dim(0), w1 = out.maps[0].value().dim(1);
    std::vector<Var> resized;
    for (const Var& m : out.maps) {
        const bool same = m.value().dim(0) == h1 && m.value().dim(1) == w1;
        resized.push_back(same ? m : upsample_nearest(m, h1, w1));
    }
    out.concat = resized.size() == 1 ? resized[0] : concat_channels(resized);
    return out;
}

Span Extractor::receptive_span(std::size_t tap, std::size_t cell, std::size_t extent, int axis) const {
    if (tap >= spec_.taps.size()) throw ValidationError("receptive_span: tap out of range");
    const std::size_t last = spec_.taps[tap];
    // Extents along the axis at the input of each layer and after its conv.
    std::vector<std::size_t> in_ext, conv_ext;
    std::size_t n = extent;
    for (std::size_t l = 0; l <= last; ++l) {
        const auto& b = spec_.layers[l];
        in_ext.push_back(n);
        const std::size_t k = axis == 0 ? b.kernel_h : b.kernel_w;
        n = conv_out(n, k, b.stride, b.pad);
        conv_ext.push_back(n);
        n = pool_out(n, b.pool);
    }
    if (cell >= n) throw ValidationError("receptive_span: cell index out of range");
    std::ptrdiff_t lo = static_cast<std::ptrdiff_t>(cell), hi = lo;
    for (std::size_t l = last + 1; l-- > 0;) {
        const auto& b = spec_.layers[l];
        if (b.pool > 1) {
            const auto q = static_cast<std::ptrdiff_t>(b.pool);
            lo = lo * q;
            hi = hi * q + q - 1;
            hi = std::min(hi, static_cast<std::ptrdiff_t>(conv_ext[l]) - 1);
        }
        const auto k = static_cast<std::ptrdiff_t>(axis == 0 ? b.kernel_h : b.kernel_w);
        const auto s = static_cast<std::ptrdiff_t>(b.stride);
        const auto p = static_cast<std::ptrdiff_t>(b.pad);
        lo = std::max<std::ptrdiff_t>(lo * s - p, 0);
        hi = std::min<std::ptrdiff_t>(hi * s - p + k - 1, static_cast<std::ptrdiff_t>(in_ext[l]) - 1);
    }
    return Span{static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

Mask Extractor::affected_tap_cells(std::size_t tap, const Mask& pixels) const {
    const auto dims = tap_dims(pixels.height(), pixels.width());
    const auto [th, tw] = dims.at(tap);
    Mask out(th, tw);
    if (!pixels.any()) return out;
    MaskIntegral integral(pixels);
    std::vector<Span> rows(th), cols(tw);
    for (std::size_t i = 0; i < th; ++i) rows[i] = receptive_span(tap, i, pixels.height(), 0);
    for (std::size_t j = 0; j < tw; ++j) cols[j] = receptive_span(tap, j, pixels.width(), 1);
    for (std::size_t i = 0; i < th; ++i) {
        for (std::size_t j = 0; j < tw; ++j) {
            if (integral.count(rows[i], cols[j]) > 0) out.set(i, j);
        }
    }
    return out;
}

Mask Extractor::affected_cells(const Mask& pixels) const {
    const auto dims = tap_dims(pixels.height(), pixels.width());
    const auto [h1, w1] = dims.at(0);
    Mask out(h1, w1);
    for (std::size_t t = 0; t < dims.size(); ++t) {
        const Mask cells = affected_tap_cells(t, pixels);
        const std::size_t fh = h1 / dims[t].first, fw = w1 / dims[t].second;
        for (std::size_t i = 0; i < h1; ++i) {
            for (std::size_t j = 0; j < w1; ++j) {
                if (cells(i / fh, j / fw)) out.set(i, j);
            }
        }
    }
    return out;
}

}  // namespace f2pad
