#include "f2pad/datasynth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <random>

#include "f2pad/error.hpp"
#include "f2pad/image_io.hpp"
#include "f2pad/log.hpp"

namespace f2pad {

namespace {

std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream, std::uint64_t index) {
    return splitmix(splitmix(base ^ splitmix(stream)) + index);
}

double quantize_channel(double v, std::size_t c) {
    const long level = std::clamp(std::lround((v * kPixelStd[c] + kPixelMean[c]) * 255.0), 0L, 255L);
    return (static_cast<double>(level) / 255.0 - kPixelMean[c]) / kPixelStd[c];
}

Pixel quantize_pixel(const Pixel& p) { return {quantize_channel(p[0], 0), quantize_channel(p[1], 1), quantize_channel(p[2], 2)}; }

double dist(const Pixel& a, const Pixel& b) {
    double s = 0.0;
    for (std::size_t c = 0; c < 3; ++c) s += (a[c] - b[c]) * (a[c] - b[c]);
    return std::sqrt(s);
}

// Enforces |cand - orig| >= cmin: scale the difference up, else push toward the farthest corner.
Pixel enforce_contrast(const Pixel& orig, Pixel cand, double cmin) {
    const double d = dist(cand, orig);
    if (d >= cmin) return cand;
    if (d > 1e-12) {
        Pixel scaled;
        const double f = 1.05 * cmin / d;
        for (std::size_t c = 0; c < 3; ++c) scaled[c] = orig[c] + f * (cand[c] - orig[c]);
        scaled = quantize_pixel(scaled);
        if (dist(scaled, orig) >= cmin) return scaled;
    }
    const auto lo = valid_lower(), hi = valid_upper();
    Pixel target;
    for (std::size_t c = 0; c < 3; ++c) target[c] = orig[c] < 0.5 * (lo[c] + hi[c]) ? hi[c] : lo[c];
    const double td = dist(target, orig);
    Pixel shifted;
    const double f = std::min(1.0, 1.05 * cmin / td);
    for (std::size_t c = 0; c < 3; ++c) shifted[c] = orig[c] + f * (target[c] - orig[c]);
    shifted = quantize_pixel(shifted);
    return dist(shifted, orig) >= cmin ? shifted : quantize_pixel(target);
}

Mask resize_nearest(const Mask& src, std::size_t nh, std::size_t nw) {
    Mask out(nh, nw);
    for (std::size_t i = 0; i < nh; ++i) {
        const std::size_t si = std::min(src.height() - 1, i * src.height() / nh);
        for (std::size_t j = 0; j < nw; ++j) {
            const std::size_t sj = std::min(src.width() - 1, j * src.width() / nw);
            out.set(i, j, src(si, sj));
        }
    }
    return out;
}

Mask crop_to_bbox(const Mask& m) {
    std::size_t r0 = m.height(), r1 = 0, c0 = m.width(), c1 = 0;
    for (std::size_t i = 0; i < m.height(); ++i) {
        for (std::size_t j = 0; j < m.width(); ++j) {
            if (!m(i, j)) continue;
            r0 = std::min(r0, i);
            r1 = std::max(r1, i);
            c0 = std::min(c0, j);
            c1 = std::max(c1, j);
        }
    }
    if (r0 > r1) return m;
    Mask out(r1 - r0 + 1, c1 - c0 + 1);
    for (std::size_t i = r0; i <= r1; ++i)
        for (std::size_t j = c0; j <= c1; ++j) out.set(i - r0, j - c0, m(i, j));
    return out;
}

std::string index_name(std::size_t k) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%04zu", k);
    return buf;
}

}  // namespace

SynthResult generate(const Tensor& n_orig, const SynthSpec& spec) {
    require_hwc(n_orig, 3, "generate");
    if (!(spec.contrast_min > 0.0)) throw ValidationError("generate: contrast_min must be > 0");
    if (!(spec.resize_range.first > 0.0) || spec.resize_range.second < spec.resize_range.first) {
        throw ValidationError("generate: resize range must satisfy 0 < min <= max");
    }
    if (spec.patch_source != nullptr && spec.patch_source->shape() != n_orig.shape()) {
        throw ShapeError("generate: patch source shape differs from the image");
    }
    const std::size_t H = n_orig.dim(0), W = n_orig.dim(1);
    SynthResult res;
    res.x = n_orig;
    res.gt = Mask(H, W);
    if (spec.mask_source.size() == 0 || !spec.mask_source.any()) return res;

    std::mt19937_64 rng(spec.seed);
    std::uniform_real_distribution<double> scale_dist(spec.resize_range.first, spec.resize_range.second);
    Mask placed;
    for (std::size_t attempt = 0;; ++attempt) {
        if (attempt > 10) throw ValidationError("generate: mask source did not fit after 10 retries");
        const double s = scale_dist(rng);
        const auto nh = static_cast<std::size_t>(std::lround(static_cast<double>(spec.mask_source.height()) * s));
        const auto nw = static_cast<std::size_t>(std::lround(static_cast<double>(spec.mask_source.width()) * s));
        if (nh == 0 || nw == 0 || nh > H || nw > W) continue;
        placed = resize_nearest(spec.mask_source, nh, nw);
        if (!placed.any()) continue;
        res.scale = s;
        res.retries = attempt;
        break;
    }
    res.row = std::uniform_int_distribution<std::size_t>(0, H - placed.height())(rng);
    res.col = std::uniform_int_distribution<std::size_t>(0, W - placed.width())(rng);
    if (spec.color) {
        res.color = quantize_pixel(*spec.color);
    } else {
        std::uniform_int_distribution<int> level(0, 255);
        for (std::size_t c = 0; c < 3; ++c) res.color[c] = (level(rng) / 255.0 - kPixelMean[c]) / kPixelStd[c];
    }

    for (std::size_t i = 0; i < placed.height(); ++i) {
        for (std::size_t j = 0; j < placed.width(); ++j) {
            if (!placed(i, j)) continue;
            const std::size_t p = (res.row + i) * W + res.col + j;
            const Pixel orig{n_orig[p * 3], n_orig[p * 3 + 1], n_orig[p * 3 + 2]};
            Pixel cand = res.color;
            if (spec.patch_source != nullptr) {
                for (std::size_t c = 0; c < 3; ++c) cand[c] = (*spec.patch_source)[p * 3 + c];
            }
            const Pixel out = enforce_contrast(orig, cand, spec.contrast_min);
            if (out != cand) ++res.adjusted;
            for (std::size_t c = 0; c < 3; ++c) res.x[p * 3 + c] = out[c];
            res.gt.set_flat(p);
        }
    }
    return res;
}

Mask blob_mask(std::size_t h, std::size_t w, double area, std::uint64_t seed) {
    if (h == 0 || w == 0) throw ValidationError("blob_mask: empty box");
    if (!(area > 0.0)) throw ValidationError("blob_mask: area must be > 0");
    std::mt19937_64 rng(seed);
    const int k = std::uniform_int_distribution<int>(1, 3)(rng);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double per = area / k * (k == 1 ? 1.0 : 1.25);
    Mask m(h, w);
    const double ci = 0.5 * static_cast<double>(h - 1), cj = 0.5 * static_cast<double>(w - 1);
    double first_a = 0.0;
    for (int e = 0; e < k; ++e) {
        const double ratio = 0.5 + 1.5 * u(rng);
        const double a = std::sqrt(per / std::numbers::pi * ratio);
        const double b = std::sqrt(per / std::numbers::pi / ratio);
        const double th = std::numbers::pi * u(rng);
        double oi = ci, oj = cj;
        if (e == 0) {
            first_a = std::max(a, b);
        } else {
            const double phi = 2.0 * std::numbers::pi * u(rng);
            const double r = 0.7 * first_a * u(rng);
            oi += r * std::sin(phi);
            oj += r * std::cos(phi);
        }
        const double cs = std::cos(th), sn = std::sin(th);
        for (std::size_t i = 0; i < h; ++i) {
            for (std::size_t j = 0; j < w; ++j) {
                const double di = static_cast<double>(i) - oi, dj = static_cast<double>(j) - oj;
                const double pu = cs * dj + sn * di, pv = -sn * dj + cs * di;
                if ((pu * pu) / (a * a) + (pv * pv) / (b * b) <= 1.0) m.set(i, j);
            }
        }
    }
    if (!m.any()) m.set(h / 2, w / 2);
    return m;
}

Tensor make_texture(const TextureSpec& spec, std::uint64_t seed) {
    if (spec.h == 0 || spec.w == 0 || spec.tile == 0) throw ValidationError("make_texture: dims and tile must be > 0");
    std::mt19937_64 layout(spec.layout_seed);
    std::uniform_real_distribution<double> col(0.15, 0.85);
    std::array<std::array<double, 3>, 4> palette{};
    for (auto& p : palette)
        for (auto& c : p) c = col(layout);
    const std::size_t th = (spec.h + spec.tile - 1) / spec.tile, tw = (spec.w + spec.tile - 1) / spec.tile;
    std::vector<std::size_t> tiles(th * tw);
    std::uniform_int_distribution<std::size_t> pick(0, palette.size() - 1);
    for (auto& t : tiles) t = pick(layout);

    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, spec.noise);
    const double jit = spec.jitter > 0.0 ? std::uniform_real_distribution<double>(-spec.jitter, spec.jitter)(rng) : 0.0;
    RgbImage img{spec.h, spec.w, std::vector<std::uint8_t>(spec.h * spec.w * 3)};
    for (std::size_t i = 0; i < spec.h; ++i) {
        for (std::size_t j = 0; j < spec.w; ++j) {
            const auto& base = palette[tiles[(i / spec.tile) * tw + j / spec.tile]];
            for (std::size_t c = 0; c < 3; ++c) {
                const double v = std::clamp(base[c] + jit + (spec.noise > 0.0 ? noise(rng) : 0.0), 0.0, 1.0);
                img.data[(i * spec.w + j) * 3 + c] = static_cast<std::uint8_t>(std::lround(v * 255.0));
            }
        }
    }
    return normalize(img);
}

Dataset synthesize_dataset(const DatasetSpec& spec) {
    if (spec.min_area <= 0.0 || spec.max_area < spec.min_area || spec.max_area >= 1.0) {
        throw ValidationError("synthesize_dataset: need 0 < min_area <= max_area < 1");
    }
    Dataset ds;
    for (std::size_t k = 0; k < spec.n_train; ++k) {
        const std::uint64_t s = derive_seed(spec.seed, 0, k);
        ds.train.push_back(make_texture(spec.texture, s));
        ds.manifest.push_back({{"split", "train"}, {"index", k}, {"file", "train/" + index_name(k) + ".png"}, {"seed", s}});
    }
    const std::size_t H = spec.texture.h, W = spec.texture.w;
    for (std::size_t k = 0; k < spec.n_test; ++k) {
        const std::uint64_t tex_seed = derive_seed(spec.seed, 1, k);
        const std::uint64_t blob_seed = derive_seed(spec.seed, 2, k);
        const std::uint64_t synth_seed = derive_seed(spec.seed, 3, k);
        std::mt19937_64 rng(derive_seed(spec.seed, 4, k));
        // Stratified target areas so every size group is populated.
        const double frac = spec.min_area + (spec.max_area - spec.min_area) *
                                                (static_cast<double>(k) + std::uniform_real_distribution<double>(0.0, 1.0)(rng)) /
                                                static_cast<double>(spec.n_test);
        const Tensor normal = make_texture(spec.texture, tex_seed);
        SynthSpec ss;
        ss.mask_source = crop_to_bbox(blob_mask(H, W, frac * static_cast<double>(H * W), blob_seed));
        ss.resize_range = {0.9, 1.1};
        ss.contrast_min = spec.contrast_min;
        ss.seed = synth_seed;
        SynthResult r = generate(normal, ss);
        TestSample t;
        t.name = index_name(k);
        t.image = std::move(r.x);
        t.gt = std::move(r.gt);
        t.meta = {{"split", "test"},
                  {"index", k},
                  {"file", "test/" + t.name + ".png"},
                  {"mask", "test/" + t.name + "_mask.png"},
                  {"seed", synth_seed},
                  {"texture_seed", tex_seed},
                  {"scale", r.scale},
                  {"row", r.row},
                  {"col", r.col},
                  {"color", r.color},
                  {"area", static_cast<double>(t.gt.count()) / static_cast<double>(H * W)}};
        ds.manifest.push_back(t.meta);
        ds.test.push_back(std::move(t));
    }
    return ds;
}

void write_dataset(const std::filesystem::path& dir, const Dataset& ds) {
    std::error_code ec;
    std::filesystem::create_directories(dir / "train", ec);
    std::filesystem::create_directories(dir / "test", ec);
    if (ec) throw IoError("cannot create dataset directory " + dir.string() + ": " + ec.message());
    std::size_t train_idx = 0, test_idx = 0;
    std::ofstream man(dir / "manifest.jsonl");
    if (!man) throw IoError("cannot write " + (dir / "manifest.jsonl").string());
    for (const auto& entry : ds.manifest) {
        if (entry.at("split") == "train") {
            write_png_rgb(dir / entry.at("file").get<std::string>(), denormalize(ds.train.at(train_idx++)));
        } else {
            const TestSample& t = ds.test.at(test_idx++);
            write_png_rgb(dir / entry.at("file").get<std::string>(), denormalize(t.image));
            write_mask_png(dir / entry.at("mask").get<std::string>(), t.gt);
        }
        man << entry.dump() << '\n';
    }
}

Dataset read_dataset(const std::filesystem::path& dir, std::vector<std::string>* missing) {
    std::ifstream man(dir / "manifest.jsonl");
    if (!man) throw IoError("cannot read " + (dir / "manifest.jsonl").string());
    Dataset ds;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(man, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json entry;
        try {
            entry = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw IoError("manifest line " + std::to_string(lineno) + ": " + e.what());
        }
        const std::string split = entry.value("split", "");
        const auto file = dir / entry.value("file", "");
        if (split == "train") {
            ds.train.push_back(normalize(read_png_rgb(file)));
        } else if (split == "test") {
            const auto mask = dir / entry.value("mask", "");
            if (!std::filesystem::exists(file) || !std::filesystem::exists(mask)) {
                log::warn("missing test sample files for " + file.string());
                if (missing != nullptr) missing->push_back(file.string());
                continue;
            }
            TestSample t;
            t.name = file.stem().string();
            t.image = normalize(read_png_rgb(file));
            t.gt = read_mask_png(mask);
            t.meta = entry;
            ds.test.push_back(std::move(t));
        } else {
            throw IoError("manifest line " + std::to_string(lineno) + ": unknown split '" + split + "'");
        }
        ds.manifest.push_back(entry);
    }
    return ds;
}

}  // namespace f2pad
