// f2pad command-line driver: synth | fit | detect | f2pad | eval | gradcheck.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <sstream>
#include <string>
#include <vector>

#include "f2pad/config.hpp"
#include "f2pad/error.hpp"
#include "f2pad/gradcheck.hpp"
#include "f2pad/image_io.hpp"
#include "f2pad/log.hpp"

namespace fs = std::filesystem;
using namespace f2pad;

namespace {

struct Globals {
    std::string config_path;
    std::vector<std::string> overrides;
    bool verbose = false;
};

RunConfig resolve(const Globals& g) {
    RunConfig cfg = g.config_path.empty() ? RunConfig{} : load_config(g.config_path);
    for (const auto& kv : g.overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw ValidationError("--set expects key=value, got '" + kv + "'");
        set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
    cfg.f2pad.validate();
    return cfg;
}

Tensor load_image(const std::string& path) { return normalize(read_png_rgb(path)); }

Ablation parse_method(const std::string& name) {
    for (Ablation a : {Ablation::full, Ablation::no_prior, Ablation::no_sparsity, Ablation::init_only, Ablation::no_sharing}) {
        if (name == ablation_name(a)) return a;
    }
    throw ValidationError("unknown method '" + name + "'");
}

int cmd_synth(const RunConfig& cfg) {
    const Dataset ds = synthesize_dataset(cfg.synth);
    write_dataset(cfg.data_dir, ds);
    std::cout << "wrote " << ds.train.size() << " train and " << ds.test.size() << " test images to " << cfg.data_dir << '\n';
    return 0;
}

int cmd_fit(const RunConfig& cfg, std::size_t limit) {
    std::vector<std::string> missing;
    Dataset ds = read_dataset(cfg.data_dir, &missing);
    for (const auto& m : missing) log::warn("fit: missing " + m);
    if (limit > 0 && limit < ds.train.size()) ds.train.resize(limit);
    const FittedModels models = fit_models(ds.train, ExtractorSpec::default_spec(cfg.extractor_seed), cfg.fit);
    save_models(cfg.model_dir, models);
    std::cout << "fitted " << models.backend->name() << " backend and " << models.prior.components.size()
              << "-component prior on " << ds.train.size() << " images; saved to " << cfg.model_dir << '\n';
    return 0;
}

int cmd_detect(const RunConfig& cfg, const std::string& image, const std::string& out) {
    const FittedModels models = load_models(cfg.model_dir, cfg.fit.candidate_size);
    const Tensor x = load_image(image);
    const Tensor heat = baseline_heat(models.extractor, *models.backend, x);
    const Mask m0 = cfg.f2pad.init_mode == InitMaskMode::threshold ? threshold_mask(heat, cfg.f2pad.init_threshold)
                                                                     : percentile_mask(heat, cfg.f2pad.percentile);
    if (!m0.any()) log::warn("detect: baseline mask is empty");
    fs::create_directories(out);
    write_heatmap_png(fs::path(out) / "heat.png", heat);
    write_mask_png(fs::path(out) / "m0.png", m0);
    std::cout << "m0 pixels: " << m0.count() << '\n';
    return 0;
}

int cmd_f2pad(const RunConfig& cfg, const std::string& image, const std::string& gt_path, const std::string& out) {
    const FittedModels models = load_models(cfg.model_dir, cfg.fit.candidate_size);
    const Tensor x = load_image(image);
    Mask gt;
    RunInputs in{&x, &models.extractor, models.backend.get(), &models.prior, nullptr};
    if (!gt_path.empty()) {
        gt = read_mask_png(gt_path);
        in.gt = &gt;
    }
    const RunResult r = run(in, cfg.f2pad);
    fs::create_directories(out);
    const fs::path dir(out);
    write_heatmap_png(dir / "heat.png", r.heat);
    write_mask_png(dir / "m0.png", r.m0);
    write_mask_png(dir / "m_star.png", r.m_star);
    write_png_rgb(dir / "n_star.png", denormalize(r.n_star));
    std::ofstream diag(dir / "diagnostics.jsonl");
    write_diagnostics(diag, r.diag);
    std::cout << "m0 " << r.m0.count() << " px, m* " << r.m_star.count() << " px, " << r.diag.iterations << " iterations";
    if (!r.diag.losses.empty()) std::cout << ", final loss " << r.diag.losses.back();
    std::cout << '\n';
    if (in.gt) {
        const SegMetrics b = iou_dice(r.m0, gt), m = iou_dice(r.m_star, gt);
        std::cout << "IOU " << b.iou << " -> " << m.iou << ", DICE " << b.dice << " -> " << m.dice << '\n';
    }
    return 0;
}

int cmd_eval(const RunConfig& cfg, const std::vector<std::string>& methods, bool images) {
    std::vector<std::string> missing;
    const Dataset ds = read_dataset(cfg.data_dir, &missing);
    for (const auto& m : missing) log::warn("eval: missing " + m);
    const FittedModels models = load_models(cfg.model_dir, cfg.fit.candidate_size);
    SuiteOptions opts;
    opts.methods.clear();
    for (const auto& m : methods) opts.methods.push_back(parse_method(m));
    opts.baseline = cfg.baseline;
    const fs::path out(cfg.out_dir);
    fs::create_directories(out);
    if (images) opts.heatmap_dir = out / "images";
    opts.diagnostics_dir = out / "diagnostics";
    const SuiteResult res = run_suite(ds.test, models, cfg.f2pad, opts);

    std::ofstream table(out / "results.tsv");
    write_suite_table(table, res);
    nlohmann::json summary;
    summary["baseline"] = {{"iou", res.mean_baseline().iou}, {"dice", res.mean_baseline().dice}};
    summary["baseline_threshold"] = res.baseline_threshold;
    for (std::size_t k = 0; k < res.methods.size(); ++k) {
        const SegMetrics m = res.mean(k);
        summary["methods"][ablation_name(res.methods[k])] = {{"iou", m.iou}, {"dice", m.dice}};
    }
    summary["samples"] = res.rows.size();
    std::ofstream(out / "summary.json") << summary.dump(2) << '\n';
    std::ofstream cfg_out(out / "config.txt");
    write_config(cfg_out, cfg);

    std::cout << "baseline IOU " << res.mean_baseline().iou << " DICE " << res.mean_baseline().dice << '\n';
    for (std::size_t k = 0; k < res.methods.size(); ++k) {
        const SegMetrics m = res.mean(k);
        std::cout << ablation_name(res.methods[k]) << " IOU " << m.iou << " DICE " << m.dice << '\n';
    }
    if (!missing.empty()) {
        std::cerr << missing.size() << " sample file(s) missing and skipped\n";
        return 2;
    }
    return 0;
}

int cmd_gradcheck(std::uint64_t seed, std::size_t trials, bool fault) {
    GradcheckOptions opts;
    opts.seed = seed;
    opts.trials = trials;
    opts.inject_fault = fault;
    const auto entries = run_gradchecks(opts);
    write_gradcheck_report(std::cout, entries);
    for (const auto& e : entries) {
        if (!e.passed) std::cerr << "gradcheck failed: " << e.name << " max rel. error " << e.max_rel_error << '\n';
    }
    return all_passed(entries) ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Anomaly masks by decomposing an image into a normal part and a sparse anomalous part"};
    app.require_subcommand(1);
    app.fallthrough();
    Globals g;
    app.add_option("-c,--config", g.config_path, "key = value configuration file");
    app.add_option("-s,--set", g.overrides, "override one key, e.g. --set alpha1=0.02")->allow_extra_args(false);
    app.add_flag("-v,--verbose", g.verbose, "log progress to stderr");

    auto* synth = app.add_subcommand("synth", "write a synthetic train/test dataset to data_dir");

    std::size_t limit = 0;
    auto* fit = app.add_subcommand("fit", "fit the backend and pixel prior on data_dir/train");
    fit->add_option("--limit", limit, "use only the first N training images (0 = all)");

    std::string image, out = "out", gt;
    auto* detect = app.add_subcommand("detect", "baseline heatmap and mask for one image");
    detect->add_option("image", image, "input PNG")->required();
    detect->add_option("-o,--out", out, "output directory");

    bool no_prior = false, no_sparsity = false, init_only = false, no_sharing = false;
    auto* f2 = app.add_subcommand("f2pad", "full decomposition of one image");
    f2->add_option("image", image, "input PNG")->required();
    f2->add_option("-o,--out", out, "output directory");
    f2->add_option("--gt", gt, "ground-truth mask PNG, used by init_mode=max_f1 and for reporting");
    f2->add_flag("--no-prior", no_prior, "drop the pixel prior term");
    f2->add_flag("--no-sparsity", no_sparsity, "drop the sparsity term");
    f2->add_flag("--init-only", init_only, "threshold the inpainted start without optimising");
    f2->add_flag("--no-sharing", no_sharing, "disable gradient sharing (ks = 0)");

    std::vector<std::string> methods{"f2pad"};
    bool images = false;
    auto* ev = app.add_subcommand("eval", "run the suite on data_dir/test and write out_dir/results.tsv");
    ev->add_option("-m,--methods", methods, "comma list of f2pad, no-prior, no-sparsity, init-only, no-sharing")->delimiter(',');
    ev->add_flag("--images", images, "also write heatmaps and masks");

    std::uint64_t gc_seed = 17;
    std::size_t gc_trials = 100;
    bool fault = false;
    auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every gradient");
    gc->add_option("--seed", gc_seed, "random seed");
    gc->add_option("--trials", gc_trials, "random trials per primitive op");
    gc->add_flag("--inject-fault", fault, "perturb one gradient; the check must then fail");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }
    log::set_verbose(g.verbose);

    try {
        RunConfig cfg = resolve(g);
        if (*synth) return cmd_synth(cfg);
        if (*fit) return cmd_fit(cfg, limit);
        if (*detect) return cmd_detect(cfg, image, out);
        if (*f2) {
            if (no_prior) cfg.f2pad = apply_ablation(cfg.f2pad, Ablation::no_prior);
            if (no_sparsity) cfg.f2pad = apply_ablation(cfg.f2pad, Ablation::no_sparsity);
            if (init_only) cfg.f2pad = apply_ablation(cfg.f2pad, Ablation::init_only);
            if (no_sharing) cfg.f2pad = apply_ablation(cfg.f2pad, Ablation::no_sharing);
            return cmd_f2pad(cfg, image, gt, out);
        }
        if (*ev) return cmd_eval(cfg, methods, images);
        if (*gc) return cmd_gradcheck(gc_seed, gc_trials, fault);
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}
