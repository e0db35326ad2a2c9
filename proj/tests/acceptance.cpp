// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "f2pad/backends.hpp"
#include "f2pad/config.hpp"
#include "f2pad/datasynth.hpp"
#include "f2pad/evalkit.hpp"
#include "f2pad/extractor.hpp"
#include "f2pad/fit.hpp"
#include "f2pad/gradcheck.hpp"
#include "f2pad/image_io.hpp"
#include "f2pad/regularizers.hpp"

using namespace f2pad;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

int failures = 0;
std::map<int, std::string> lines;

void report(int id, bool pass, const std::string& detail) {
    std::string line = "criterion " + std::to_string(id) + ": " + (pass ? "PASS" : "FAIL") + "  " + detail;
    std::cout << line << std::endl;
    lines[id] = std::move(line);
    if (!pass) ++failures;
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int prec = 3) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(prec);
    os << v;
    return os.str();
}

std::string sci(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2e", v);
    return buf;
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

Tensor random_image(std::size_t h, std::size_t w, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(-1.5, 1.5);
    Tensor t({h, w, 3});
    for (double& v : t.data()) v = u(rng);
    return t;
}

// ---- 1 ----------------------------------------------------------------------

void gradient_integrity() {
    const auto t0 = Clock::now();
    const auto entries = run_gradchecks();
    const double secs = seconds_since(t0);
    std::string worst;
    double worst_ratio = 0;
    for (const auto& e : entries) {
        const double r = e.max_rel_error / e.tolerance;
        if (r >= worst_ratio) {
            worst_ratio = r;
            worst = e.name + " " + sci(e.max_rel_error) + " (tol " + sci(e.tolerance) + ")";
        }
    }
    report(1, all_passed(entries) && secs < 60.0,
           std::to_string(entries.size()) + " checks, worst " + worst + ", " + fmt(secs, 1) + " s");
}

// ---- 2 ----------------------------------------------------------------------

std::vector<std::uint32_t> greedy_oracle(const MemoryBank& b, std::size_t m, std::size_t start) {
    std::vector<std::uint32_t> sel{static_cast<std::uint32_t>(start)};
    auto d2 = [&](std::size_t p, std::size_t q) {
        double s = 0;
        for (std::size_t c = 0; c < b.c; ++c) s += (b.feature(p)[c] - b.feature(q)[c]) * (b.feature(p)[c] - b.feature(q)[c]);
        return s;
    };
    while (sel.size() < m) {
        double best = -1;
        std::size_t arg = 0;
        for (std::size_t p = 0; p < b.size(); ++p) {
            double dmin = std::numeric_limits<double>::infinity();
            for (auto q : sel) dmin = std::min(dmin, d2(p, q));
            if (dmin > best) {
                best = dmin;
                arg = p;
            }
        }
        sel.push_back(static_cast<std::uint32_t>(arg));
    }
    return sel;
}

void oracle_equivalence() {
    std::mt19937_64 rng(2);
    double worst = 0;
    bool ok = true;
    std::size_t cases = 0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        ExtractorSpec spec = ExtractorSpec::default_spec(seed + 40);
        const Extractor ex = build_extractor(spec);
        std::vector<FeatureStack> train;
        for (int k = 0; k < 8; ++k) train.push_back(ex.extract(random_image(16, 16, rng)));  // 8 x 64 = 512 features
        MemoryBank bank = build_memory_bank(train);
        if (bank.size() > 512) ok = false;
        const Tensor img = random_image(32, 32, rng);
        const Tensor concat = ex.extract(img).concat;
        build_candidate_sets(bank, concat, bank.coreset.size());
        const Tensor exact = exact_patchcore_scores(bank, concat);
        double exact_sum = 0;
        for (double v : exact.data()) exact_sum += v;
        Tape tape;
        const double loss = patchcore_loss(bank, tape.leaf(concat)).value()[0];
        const double err = std::abs(loss - exact_sum) / std::max(1.0, std::abs(exact_sum));
        worst = std::max(worst, err);
        ok = ok && err <= 1e-12;
        ++cases;
    }

    bool coreset_ok = true;
    for (std::uint64_t t = 0; t < 5; ++t) {
        MemoryBank b;
        b.c = 4;
        std::normal_distribution<double> g(0, 1);
        for (int k = 0; k < 256 * 4; ++k) b.features.push_back(g(rng));
        const std::size_t start = rng() % 256;
        coreset_ok = coreset_ok && coreset_select_from(b, 64, start) == greedy_oracle(b, 64, start);
    }
    report(2, ok && coreset_ok,
           std::to_string(cases) + " banks of 512 on 32x32 images, max rel. loss gap " + sci(worst) +
               "; coreset vs exhaustive greedy on 256 points: " + (coreset_ok ? "identical" : "differs"));
}

// ---- 3 ----------------------------------------------------------------------

void em_monotonicity() {
    bool ok = true;
    double worst_drop = 0;
    std::size_t iters = 0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        std::mt19937_64 rng(seed);
        std::normal_distribution<double> g(0, 1);
        std::vector<Pixel> px;
        for (int c = 0; c < 3; ++c) {
            const Pixel centre{g(rng), g(rng), g(rng)};
            const double sd = 0.1 + 0.3 * std::abs(g(rng));
            for (int k = 0; k < 500; ++k) px.push_back({centre[0] + sd * g(rng), centre[1] + sd * g(rng), centre[2] + sd * g(rng)});
        }
        const MogFit fit = fit_mog(px, 4, seed);
        for (std::size_t k = 1; k < fit.log_likelihood.size(); ++k) {
            const double drop = fit.log_likelihood[k - 1] - fit.log_likelihood[k];
            worst_drop = std::max(worst_drop, drop);
            if (drop > 1e-9) ok = false;
        }
        iters += fit.log_likelihood.size() - 1;
    }
    report(3, ok, "20 runs, " + std::to_string(iters) + " EM steps, largest decrease " + sci(worst_drop));
}

// ---- 4-7, 9 -------------------------------------------------------------------

struct InvariantAudit {
    std::size_t runs = 0;
    double worst_recon = 0;
    std::size_t outside_changed = 0;

    void operator()(const TestSample& s, Ablation, const RunResult& r) {
        ++runs;
        const Tensor a = anomaly_part(s.image, r.n_star);
        for (std::size_t k = 0; k < a.size(); ++k) worst_recon = std::max(worst_recon, std::abs(s.image[k] - (r.n_star[k] + a[k])));
        if (r.m_dilated.size() == 0) return;
        for (std::size_t p = 0; p < r.m_dilated.size(); ++p) {
            if (r.m_dilated[p]) continue;
            for (std::size_t c = 0; c < 3; ++c) {
                if (r.n[p * 3 + c] != s.image[p * 3 + c] || r.n_star[p * 3 + c] != s.image[p * 3 + c]) ++outside_changed;
            }
        }
    }
};

std::map<std::string, double> final_losses(const fs::path& dir, const std::string& method) {
    std::map<std::string, double> out;
    for (const auto& e : fs::directory_iterator(dir)) {
        const std::string name = e.path().filename().string();
        const std::string suffix = "_" + method + ".jsonl";
        if (name.size() <= suffix.size() || name.compare(name.size() - suffix.size(), suffix.size(), suffix) != 0) continue;
        std::ifstream is(e.path());
        std::string line;
        std::getline(is, line);
        const auto j = nlohmann::json::parse(line);
        if (j.contains("final_loss")) out[name.substr(0, name.size() - suffix.size())] = j["final_loss"].get<double>();
    }
    return out;
}

void synthetic_suite(const RunConfig& cfg, const fs::path& work) {
    const auto t_all = Clock::now();
    const Dataset ds = synthesize_dataset(cfg.synth);
    const auto t_fit = Clock::now();
    const FittedModels models = fit_models(ds.train, ExtractorSpec::default_spec(cfg.extractor_seed), cfg.fit);
    const double fit_secs = seconds_since(t_fit);

    InvariantAudit audit;
    SuiteOptions opts;
    opts.methods = {Ablation::full, Ablation::init_only, Ablation::no_prior, Ablation::no_sparsity, Ablation::no_sharing};
    opts.baseline = cfg.baseline;
    opts.diagnostics_dir = work / "diagnostics";
    opts.on_run = [&](const TestSample& s, Ablation a, const RunResult& r) { audit(s, a, r); };
    const SuiteResult res = run_suite(ds.test, models, cfg.f2pad, opts);
    {
        std::ofstream table(work / "results.tsv");
        write_suite_table(table, res);
    }

    report(4, audit.runs > 0 && audit.worst_recon < 1e-12 && audit.outside_changed == 0,
           std::to_string(audit.runs) + " runs, max |x-(n+a)| " + sci(audit.worst_recon) + ", " +
               std::to_string(audit.outside_changed) + " values changed outside the active region");

    double f2pad_secs = fit_secs;
    for (const auto& row : res.rows) f2pad_secs += row.methods[0].seconds;
    const double base = res.mean_baseline().iou, full = res.mean(0).iou;
    report(5, res.rows.size() >= 20 && full - base >= 10.0 && full >= 85.0 && f2pad_secs < 1200.0,
           std::to_string(res.rows.size()) + " samples, baseline IOU " + fmt(base) + ", F2PAD IOU " + fmt(full) + " (delta " +
               fmt(full - base) + "), fit + F2PAD runtime " + fmt(f2pad_secs, 1) + " s");

    const double init_only = res.mean(1).iou, no_prior = res.mean(2).iou, no_sparsity = res.mean(3).iou;
    report(6, full > init_only && full > no_prior && no_prior > no_sparsity && full - no_sparsity >= 20.0,
           "IOU F2PAD " + fmt(full) + ", init-only " + fmt(init_only) + ", no-prior " + fmt(no_prior) + ", no-sparsity " +
               fmt(no_sparsity));

    const auto shared = final_losses(work / "diagnostics", ablation_name(Ablation::full));
    const auto plain = final_losses(work / "diagnostics", ablation_name(Ablation::no_sharing));
    std::vector<double> ls, lp;
    for (const auto& [name, v] : shared) {
        if (!plain.count(name)) continue;
        ls.push_back(v);
        lp.push_back(plain.at(name));
    }
    std::size_t wins = 0;
    for (std::size_t k = 0; k < ls.size(); ++k) wins += ls[k] <= lp[k];
    report(7, ls.size() >= 10 && median(ls) <= median(lp),
           std::to_string(ls.size()) + " problems, median final objective ks=5 " + fmt(ls.empty() ? 0 : median(ls), 1) +
               " vs ks=0 " + fmt(lp.empty() ? 0 : median(lp), 1) + ", ks=5 lower or equal on " + std::to_string(wins));

    // few-shot: the same test images, models fitted on 16 training images
    const std::vector<Tensor> few(ds.train.begin(), ds.train.begin() + std::min<std::size_t>(16, ds.train.size()));
    const FittedModels small = fit_models(few, ExtractorSpec::default_spec(cfg.extractor_seed), cfg.fit);
    SuiteOptions fo;
    fo.methods = {Ablation::full};
    fo.baseline = cfg.baseline;
    const SuiteResult fr = run_suite(ds.test, small, cfg.f2pad, fo);
    const double fb = fr.mean_baseline().iou, ff = fr.mean(0).iou;
    report(9, few.size() == 16 && ff - fb > 0.0,
           "16 training images: baseline IOU " + fmt(fb) + ", F2PAD IOU " + fmt(ff) + " (delta " + fmt(ff - fb) + ")");
    std::cout << "suite wall time " << fmt(seconds_since(t_all), 1) << " s" << std::endl;
}

// ---- 8 ----------------------------------------------------------------------

void metric_identity() {
    std::mt19937_64 rng(8);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    double worst = 0;
    std::size_t n = 0;
    while (n < 1000) {
        const double pa = u(rng), pb = u(rng);
        Mask a(16, 16), b(16, 16);
        for (std::size_t k = 0; k < a.size(); ++k) {
            a.set_flat(k, u(rng) < pa);
            b.set_flat(k, u(rng) < pb);
        }
        if (!a.any() && !b.any()) continue;
        const SegMetrics s = iou_dice(a, b);
        const double i = s.iou / 100.0;
        worst = std::max(worst, std::abs(s.dice / 100.0 - 2 * i / (1 + i)));
        ++n;
    }
    report(8, worst < 1e-9, "1000 pairs, max deviation " + sci(worst));
}

// ---- 10 ---------------------------------------------------------------------

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

// Loss lines only; the summary line carries wall-clock timings.
std::string loss_lines(const fs::path& p) {
    std::ifstream is(p);
    std::string line, out;
    while (std::getline(is, line))
        if (line.find("\"event\":\"loss\"") != std::string::npos) out += line + '\n';
    return out;
}

void determinism(const fs::path& work) {
    RunConfig cfg;
    cfg.synth.texture.h = cfg.synth.texture.w = 32;
    cfg.synth.texture.tile = 8;
    cfg.synth.n_train = 12;
    cfg.synth.n_test = 1;
    cfg.synth.seed = 10;
    const Dataset ds = synthesize_dataset(cfg.synth);
    FitOptions fo;
    fo.mog_samples = 5000;
    save_models(work / "model", fit_models(ds.train, ExtractorSpec::default_spec(cfg.extractor_seed), fo));
    write_dataset(work / "data", ds);
    const std::string image = (work / "data" / "test" / "0000.png").string();
    const std::string base = std::string(F2PAD_CLI_PATH) + " -c " + F2PAD_SUITE_CONFIG + " --set model_dir=" +
                             (work / "model").string() + " --set max_iter=200 f2pad " + image + " -o ";
    bool ran = true;
    for (const char* tag : {"run1", "run2"}) ran = ran && std::system((base + (work / tag).string() + " >/dev/null 2>&1").c_str()) == 0;
    const bool masks = ran && slurp(work / "run1" / "m_star.png") == slurp(work / "run2" / "m_star.png") &&
                       slurp(work / "run1" / "m0.png") == slurp(work / "run2" / "m0.png");
    const std::string l1 = loss_lines(work / "run1" / "diagnostics.jsonl");
    const bool losses = ran && !l1.empty() && l1 == loss_lines(work / "run2" / "diagnostics.jsonl");
    report(10, masks && losses,
           std::string("two CLI runs: masks ") + (masks ? "identical" : "differ") + ", loss trajectories " +
               (losses ? "identical" : "differ"));
}

}  // namespace

int main() {
    const fs::path work = fs::temp_directory_path() / "f2pad_acceptance";
    fs::remove_all(work);
    fs::create_directories(work);
    const RunConfig cfg = load_config(F2PAD_SUITE_CONFIG);
    std::cout << "suite config " << F2PAD_SUITE_CONFIG << std::endl;

    gradient_integrity();
    oracle_equivalence();
    em_monotonicity();
    metric_identity();
    determinism(work / "det");
    synthetic_suite(cfg, work / "suite");
    std::cout << "\nsummary\n";
    for (const auto& [id, line] : lines) std::cout << line << '\n';
    std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criterion(s) failed") << std::endl;
    return failures == 0 ? 0 : 1;
}
