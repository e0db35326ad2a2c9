#include "f2pad/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <istream>
#include <map>
#include <ostream>

#include "f2pad/error.hpp"

namespace f2pad {

namespace {

struct Entry {
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

double parse_double(const std::string& v) {
    double out = 0.0;
    const auto* end = v.data() + v.size();
    const auto [ptr, ec] = std::from_chars(v.data(), end, out);
    if (ec != std::errc{} || ptr != end) throw ValidationError("expects a number, got '" + v + "'");
    return out;
}

std::uint64_t parse_uint(const std::string& v) {
    std::uint64_t out = 0;
    const auto* end = v.data() + v.size();
    const auto [ptr, ec] = std::from_chars(v.data(), end, out);
    if (ec != std::errc{} || ptr != end) throw ValidationError("expects a non-negative integer, got '" + v + "'");
    return out;
}

bool parse_bool(const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ValidationError("expects true or false, got '" + v + "'");
}

// Shortest form that reads back to the same double.
std::string fmt(double v) {
    char buf[32];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

template <class T>
Entry real(T RunConfig::*group, double T::*field) {
    return {[group, field](RunConfig& c, const std::string& v) { (c.*group).*field = parse_double(v); },
            [group, field](const RunConfig& c) { return fmt((c.*group).*field); }};
}

template <class T, class U>
Entry count(T RunConfig::*group, U T::*field) {
    return {[group, field](RunConfig& c, const std::string& v) { (c.*group).*field = static_cast<U>(parse_uint(v)); },
            [group, field](const RunConfig& c) { return std::to_string((c.*group).*field); }};
}

template <class E>
Entry enumeration(std::function<E&(RunConfig&)> ref, std::vector<std::pair<std::string, E>> names) {
    return {[ref, names](RunConfig& c, const std::string& v) {
                for (const auto& [n, e] : names) {
                    if (n == v) {
                        ref(c) = e;
                        return;
                    }
                }
                std::string allowed;
                for (const auto& [n, e] : names) allowed += (allowed.empty() ? "" : "|") + n;
                throw ValidationError("expects one of " + allowed + ", got '" + v + "'");
            },
            [ref, names](const RunConfig& c) {
                const E cur = ref(const_cast<RunConfig&>(c));
                for (const auto& [n, e] : names)
                    if (e == cur) return n;
                return std::string("?");
            }};
}

Entry text(std::string RunConfig::*field) {
    return {[field](RunConfig& c, const std::string& v) { c.*field = v; }, [field](const RunConfig& c) { return c.*field; }};
}

const std::map<std::string, Entry>& schema() {
    static const std::map<std::string, Entry> s = [] {
        std::map<std::string, Entry> m;
        using R = RunConfig;
        m["alpha1"] = real(&R::f2pad, &F2PADConfig::alpha1);
        m["alpha2"] = real(&R::f2pad, &F2PADConfig::alpha2);
        m["beta0"] = real(&R::f2pad, &F2PADConfig::beta0);
        m["eps"] = real(&R::f2pad, &F2PADConfig::eps);
        m["gamma0"] = real(&R::f2pad, &F2PADConfig::gamma0);
        m["ks"] = count(&R::f2pad, &F2PADConfig::ks);
        m["sigma0"] = real(&R::f2pad, &F2PADConfig::sigma0);
        m["sigma1"] = real(&R::f2pad, &F2PADConfig::sigma1);
        m["clip"] = real(&R::f2pad, &F2PADConfig::clip);
        m["loss_threshold"] = real(&R::f2pad, &F2PADConfig::loss_threshold);
        m["max_iter"] = count(&R::f2pad, &F2PADConfig::max_iter);
        m["step_floor"] = real(&R::f2pad, &F2PADConfig::step_floor);
        m["adan_lr"] = real(&R::f2pad, &F2PADConfig::adan_lr);
        m["tv_eps"] = real(&R::f2pad, &F2PADConfig::tv_eps);
        m["tau_a"] = real(&R::f2pad, &F2PADConfig::tau_a);
        m["dilation"] = count(&R::f2pad, &F2PADConfig::dilation);
        m["open_size"] = count(&R::f2pad, &F2PADConfig::open_size);
        m["mog_components"] = {[](R& c, const std::string& v) {
                                   c.f2pad.mog_components = c.fit.mog_components = parse_uint(v);
                               },
                               [](const R& c) { return std::to_string(c.fit.mog_components); }};
        m["candidate_size"] = {[](R& c, const std::string& v) {
                                   c.f2pad.candidate_size = c.fit.candidate_size = parse_uint(v);
                               },
                               [](const R& c) { return std::to_string(c.fit.candidate_size); }};
        m["init_mode"] = enumeration<InitMaskMode>([](R& c) -> InitMaskMode& { return c.f2pad.init_mode; },
                                                   {{"percentile", InitMaskMode::percentile},
                                                    {"threshold", InitMaskMode::threshold},
                                                    {"max_f1", InitMaskMode::max_f1}});
        m["percentile"] = real(&R::f2pad, &F2PADConfig::percentile);
        m["init_threshold"] = real(&R::f2pad, &F2PADConfig::init_threshold);
        m["init_only_threshold"] = real(&R::f2pad, &F2PADConfig::init_only_threshold);
        m["re_estimate"] = {[](R& c, const std::string& v) { c.f2pad.re_estimate = parse_bool(v); },
                            [](const R& c) { return std::string(c.f2pad.re_estimate ? "true" : "false"); }};

        m["backend"] = enumeration<BackendKind>([](R& c) -> BackendKind& { return c.fit.kind; },
                                                {{"gaussian", BackendKind::gaussian}, {"memory_bank", BackendKind::memory_bank}});
        m["ridge"] = real(&R::fit, &FitOptions::ridge);
        m["ridge_rel"] = real(&R::fit, &FitOptions::ridge_rel);
        m["coreset_fraction"] = real(&R::fit, &FitOptions::coreset_fraction);
        m["coreset_seed"] = count(&R::fit, &FitOptions::coreset_seed);
        m["mog_samples"] = count(&R::fit, &FitOptions::mog_samples);
        m["mog_seed"] = count(&R::fit, &FitOptions::mog_seed);
        m["extractor_seed"] = {[](R& c, const std::string& v) { c.extractor_seed = parse_uint(v); },
                               [](const R& c) { return std::to_string(c.extractor_seed); }};
        m["baseline"] = enumeration<BaselineMode>([](R& c) -> BaselineMode& { return c.baseline; },
                                                  {{"dataset_max_f1", BaselineMode::dataset_max_f1},
                                                   {"image_max_f1", BaselineMode::image_max_f1},
                                                   {"percentile", BaselineMode::percentile}});

        m["image_size"] = {[](R& c, const std::string& v) { c.synth.texture.h = c.synth.texture.w = parse_uint(v); },
                           [](const R& c) { return std::to_string(c.synth.texture.h); }};
        m["tile"] = {[](R& c, const std::string& v) { c.synth.texture.tile = parse_uint(v); },
                     [](const R& c) { return std::to_string(c.synth.texture.tile); }};
        m["layout_seed"] = {[](R& c, const std::string& v) { c.synth.texture.layout_seed = parse_uint(v); },
                            [](const R& c) { return std::to_string(c.synth.texture.layout_seed); }};
        m["noise"] = {[](R& c, const std::string& v) { c.synth.texture.noise = parse_double(v); },
                      [](const R& c) { return fmt(c.synth.texture.noise); }};
        m["jitter"] = {[](R& c, const std::string& v) { c.synth.texture.jitter = parse_double(v); },
                       [](const R& c) { return fmt(c.synth.texture.jitter); }};
        m["n_train"] = count(&R::synth, &DatasetSpec::n_train);
        m["n_test"] = count(&R::synth, &DatasetSpec::n_test);
        m["seed"] = count(&R::synth, &DatasetSpec::seed);
        m["contrast_min"] = real(&R::synth, &DatasetSpec::contrast_min);
        m["min_area"] = real(&R::synth, &DatasetSpec::min_area);
        m["max_area"] = real(&R::synth, &DatasetSpec::max_area);

        m["data_dir"] = text(&R::data_dir);
        m["model_dir"] = text(&R::model_dir);
        m["out_dir"] = text(&R::out_dir);
        return m;
    }();
    return s;
}

}  // namespace

void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
    const auto& s = schema();
    const auto it = s.find(key);
    if (it == s.end()) throw ValidationError("config: unknown key '" + key + "'");
    try {
        it->second.set(cfg, value);
    } catch (const ValidationError& e) {
        throw ValidationError("config: " + key + " " + e.what());
    }
}

std::string get_config_value(const RunConfig& cfg, const std::string& key) {
    const auto& s = schema();
    const auto it = s.find(key);
    if (it == s.end()) throw ValidationError("config: unknown key '" + key + "'");
    return it->second.get(cfg);
}

const std::vector<std::string>& config_keys() {
    static const std::vector<std::string> keys = [] {
        std::vector<std::string> k;
        for (const auto& [name, e] : schema()) k.push_back(name);
        return k;
    }();
    return keys;
}

void parse_config(std::istream& is, RunConfig& cfg, const std::string& source) {
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ValidationError(source + ":" + std::to_string(lineno) + ": expected key = value");
        }
        try {
            set_config_value(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
        } catch (const ValidationError& e) {
            throw ValidationError(source + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
}

RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot read config " + path.string());
    RunConfig cfg;
    parse_config(is, cfg, path.string());
    return cfg;
}

void write_config(std::ostream& os, const RunConfig& cfg) {
    for (const auto& key : config_keys()) os << key << " = " << get_config_value(cfg, key) << '\n';
}

}  // namespace f2pad
