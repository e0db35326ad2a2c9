#include "f2pad/evalkit.hpp"

#include <chrono>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "f2pad/error.hpp"
#include "f2pad/image_io.hpp"
#include "f2pad/log.hpp"

namespace f2pad {

SegMetrics iou_dice(const Mask& m, const Mask& gt) {
    if (!m.same_dims(gt)) {
        throw ShapeError("iou_dice: mask " + std::to_string(m.height()) + "x" + std::to_string(m.width()) + " vs ground truth " +
                         std::to_string(gt.height()) + "x" + std::to_string(gt.width()));
    }
    std::size_t inter = 0, a = 0, b = 0;
    for (std::size_t p = 0; p < m.size(); ++p) {
        a += m[p] ? 1 : 0;
        b += gt[p] ? 1 : 0;
        inter += (m[p] && gt[p]) ? 1 : 0;
    }
    if (a == 0 && b == 0) {
        log::warn("iou_dice: both masks are empty; reporting (100, 100)");
        return {100.0, 100.0};
    }
    const auto i = static_cast<double>(inter);
    return {100.0 * i / static_cast<double>(a + b - inter), 100.0 * 2.0 * i / static_cast<double>(a + b)};
}

int size_group(double area) {
    for (std::size_t g = 0; g + 1 < kSizeGroupEdges.size(); ++g) {
        if (area >= kSizeGroupEdges[g] && area < kSizeGroupEdges[g + 1]) return static_cast<int>(g);
    }
    return -1;
}

std::string size_group_label(int group) {
    if (group < 0 || group + 1 >= static_cast<int>(kSizeGroupEdges.size())) return "other";
    std::ostringstream os;
    os << std::fixed << std::setprecision(2) << '[' << kSizeGroupEdges[static_cast<std::size_t>(group)] << ','
       << kSizeGroupEdges[static_cast<std::size_t>(group) + 1] << ')';
    return os.str();
}

namespace {

SegMetrics average(const std::vector<SegMetrics>& v) {
    SegMetrics s;
    for (const auto& m : v) {
        s.iou += m.iou;
        s.dice += m.dice;
    }
    if (!v.empty()) {
        s.iou /= static_cast<double>(v.size());
        s.dice /= static_cast<double>(v.size());
    }
    return s;
}

}  // namespace

SegMetrics SuiteResult::mean_baseline() const {
    std::vector<SegMetrics> v;
    for (const auto& r : rows) v.push_back(r.baseline);
    return average(v);
}

SegMetrics SuiteResult::mean(std::size_t method) const {
    std::vector<SegMetrics> v;
    for (const auto& r : rows) v.push_back(r.methods.at(method).metrics);
    return average(v);
}

std::optional<SegMetrics> SuiteResult::group_baseline(int group) const {
    std::vector<SegMetrics> v;
    for (const auto& r : rows)
        if (r.group == group) v.push_back(r.baseline);
    if (v.empty()) return std::nullopt;
    return average(v);
}

std::optional<SegMetrics> SuiteResult::group_mean(int group, std::size_t method) const {
    std::vector<SegMetrics> v;
    for (const auto& r : rows)
        if (r.group == group) v.push_back(r.methods.at(method).metrics);
    if (v.empty()) return std::nullopt;
    return average(v);
}

SuiteResult run_suite(const std::vector<TestSample>& samples, const FittedModels& models, const F2PADConfig& cfg,
                      const SuiteOptions& opts) {
    if (samples.empty()) throw ValidationError("run_suite: no test samples");
    if (opts.methods.empty()) throw ValidationError("run_suite: no methods");
    SuiteResult res;
    res.methods = opts.methods;

    F2PADConfig base = cfg;
    std::vector<Tensor> heats;
    if (opts.baseline == BaselineMode::dataset_max_f1) {
        std::vector<Mask> gts;
        for (const auto& s : samples) {
            heats.push_back(baseline_heat(models.extractor, *models.backend, s.image));
            gts.push_back(s.gt);
        }
        res.baseline_threshold = max_f1_threshold(heats, gts);
        base.init_mode = InitMaskMode::threshold;
        base.init_threshold = res.baseline_threshold;
    } else if (opts.baseline == BaselineMode::image_max_f1) {
        base.init_mode = InitMaskMode::max_f1;
    } else {
        base.init_mode = InitMaskMode::percentile;
    }

    for (const auto& dir : {opts.heatmap_dir, opts.diagnostics_dir}) {
        if (dir) std::filesystem::create_directories(*dir);
    }

    for (std::size_t k = 0; k < samples.size(); ++k) {
        const TestSample& s = samples[k];
        SampleRow row;
        row.name = s.name;
        row.area = static_cast<double>(s.gt.count()) / static_cast<double>(s.gt.size());
        row.group = size_group(row.area);
        RunInputs in{&s.image, &models.extractor, models.backend.get(), &models.prior, &s.gt};
        bool have_baseline = false;
        for (Ablation a : opts.methods) {
            const auto t0 = std::chrono::steady_clock::now();
            const RunResult r = run(in, apply_ablation(base, a));
            MethodOutcome out;
            out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            out.metrics = iou_dice(r.m_star, s.gt);
            out.final_loss = r.diag.losses.empty() ? 0.0 : r.diag.losses.back();
            out.iterations = r.diag.iterations;
            row.methods.push_back(out);
            if (opts.on_run) opts.on_run(s, a, r);
            if (!have_baseline) {
                row.baseline = iou_dice(r.m0, s.gt);
                have_baseline = true;
                if (opts.heatmap_dir) write_heatmap_png(*opts.heatmap_dir / (s.name + "_heat.png"), r.heat);
            }
            if (opts.heatmap_dir) {
                write_mask_png(*opts.heatmap_dir / (s.name + "_" + ablation_name(a) + "_mask.png"), r.m_star);
            }
            if (opts.diagnostics_dir) {
                std::ofstream os(*opts.diagnostics_dir / (s.name + "_" + ablation_name(a) + ".jsonl"));
                write_diagnostics(os, r.diag);
            }
            log::info("suite: " + s.name + " " + ablation_name(a) + " IOU " + std::to_string(out.metrics.iou));
        }
        res.rows.push_back(std::move(row));
    }
    return res;
}

void write_suite_table(std::ostream& os, const SuiteResult& r) {
    os << std::fixed << std::setprecision(3);
    os << "sample\tarea\tgroup\tbaseline_iou\tbaseline_dice";
    for (Ablation a : r.methods) {
        const std::string n = ablation_name(a);
        os << '\t' << n << "_iou\t" << n << "_dice\t" << n << "_delta_iou\t" << n << "_delta_dice\t" << n << "_final_loss";
    }
    os << '\n';
    for (const auto& row : r.rows) {
        os << row.name << '\t' << row.area << '\t' << size_group_label(row.group) << '\t' << row.baseline.iou << '\t'
           << row.baseline.dice;
        for (const auto& m : row.methods) {
            os << '\t' << m.metrics.iou << '\t' << m.metrics.dice << '\t' << m.metrics.iou - row.baseline.iou << '\t'
               << m.metrics.dice - row.baseline.dice << '\t' << m.final_loss;
        }
        os << '\n';
    }
    auto summary = [&](const std::string& label, const SegMetrics& b, auto&& method_mean) {
        os << label << "\t\t\t" << b.iou << '\t' << b.dice;
        for (std::size_t k = 0; k < r.methods.size(); ++k) {
            const SegMetrics m = method_mean(k);
            os << '\t' << m.iou << '\t' << m.dice << '\t' << m.iou - b.iou << '\t' << m.dice - b.dice << '\t';
        }
        os << '\n';
    };
    for (int g = 0; g + 1 < static_cast<int>(kSizeGroupEdges.size()); ++g) {
        const auto b = r.group_baseline(g);
        if (!b) continue;
        summary("group" + size_group_label(g), *b, [&](std::size_t k) { return *r.group_mean(g, k); });
    }
    summary("mean", r.mean_baseline(), [&](std::size_t k) { return r.mean(k); });
}

}  // namespace f2pad
