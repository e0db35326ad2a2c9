#pragma once

// Overlap metrics, anomaly-size groups and the synthetic evaluation suite.

#include <array>
#include <cstddef>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "f2pad/datasynth.hpp"
#include "f2pad/fit.hpp"
#include "f2pad/mask.hpp"
#include "f2pad/pipeline.hpp"

namespace f2pad {

struct SegMetrics {
    double iou = 0.0;   // percent
    double dice = 0.0;  // percent
};

// Both masks empty gives (100, 100) and a warning.
SegMetrics iou_dice(const Mask& m, const Mask& gt);

inline constexpr std::array<double, 6> kSizeGroupEdges{0.0, 0.02, 0.04, 0.06, 0.08, 0.13};

// Index of the [lo, hi) group holding `area` (a fraction of the image), or -1 outside the edges.
int size_group(double area);
std::string size_group_label(int group);

enum class BaselineMode { dataset_max_f1, image_max_f1, percentile };

struct SuiteOptions {
    std::vector<Ablation> methods{Ablation::full};
    BaselineMode baseline = BaselineMode::dataset_max_f1;
    std::optional<std::filesystem::path> heatmap_dir;
    std::optional<std::filesystem::path> diagnostics_dir;
    // Called after every pipeline run, e.g. to audit the full result.
    std::function<void(const TestSample&, Ablation, const RunResult&)> on_run;
};

struct MethodOutcome {
    SegMetrics metrics;
    double final_loss = 0.0;
    std::size_t iterations = 0;
    double seconds = 0.0;
};

struct SampleRow {
    std::string name;
    double area = 0.0;
    int group = -1;
    SegMetrics baseline;
    std::vector<MethodOutcome> methods;  // parallel to SuiteOptions::methods
};

struct SuiteResult {
    std::vector<Ablation> methods;
    std::vector<SampleRow> rows;
    double baseline_threshold = 0.0;  // dataset_max_f1 mode

    SegMetrics mean_baseline() const;
    SegMetrics mean(std::size_t method) const;
    // Means over the rows of one size group; nullopt when the group is empty.
    std::optional<SegMetrics> group_baseline(int group) const;
    std::optional<SegMetrics> group_mean(int group, std::size_t method) const;
};

SuiteResult run_suite(const std::vector<TestSample>& samples, const FittedModels& models, const F2PADConfig& cfg,
                      const SuiteOptions& opts);

// Tab-separated per-sample rows, then per-group and overall means with delta columns.
void write_suite_table(std::ostream& os, const SuiteResult& r);

}  // namespace f2pad
