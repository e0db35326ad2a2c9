#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "f2pad/config.hpp"
#include "f2pad/error.hpp"

using namespace f2pad;

namespace fs = std::filesystem;

namespace {

int run_cli(const std::string& args) {
    const std::string cmd = std::string(F2PAD_CLI_PATH) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("f2pad_cli_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

}  // namespace

TEST_CASE("config parsing, comments and overrides") {
    std::istringstream is("# tuned\nalpha1 = 0.5  # inline\n\nks=3\ninit_mode = threshold\nre_estimate = false\n");
    RunConfig cfg;
    parse_config(is, cfg);
    CHECK(cfg.f2pad.alpha1 == 0.5);
    CHECK(cfg.f2pad.ks == 3);
    CHECK(cfg.f2pad.init_mode == InitMaskMode::threshold);
    CHECK_FALSE(cfg.f2pad.re_estimate);
    set_config_value(cfg, "beta0", "1e6");
    CHECK(cfg.f2pad.beta0 == 1e6);
    CHECK(get_config_value(cfg, "init_mode") == "threshold");
    set_config_value(cfg, "mog_components", "3");
    CHECK(cfg.fit.mog_components == 3);
    CHECK(cfg.f2pad.mog_components == 3);
}

TEST_CASE("config errors name the key or the line") {
    RunConfig cfg;
    try {
        set_config_value(cfg, "alpha9", "1");
        FAIL("expected an error");
    } catch (const ValidationError& e) {
        CHECK(std::string(e.what()).find("alpha9") != std::string::npos);
    }
    CHECK_THROWS_AS(set_config_value(cfg, "ks", "-2"), ValidationError);
    CHECK_THROWS_AS(set_config_value(cfg, "alpha1", "abc"), ValidationError);
    CHECK_THROWS_AS(set_config_value(cfg, "backend", "flow"), ValidationError);
    std::istringstream bad("alpha1 = 1\nnot a pair\n");
    try {
        parse_config(bad, cfg, "x.cfg");
        FAIL("expected an error");
    } catch (const ValidationError& e) {
        CHECK(std::string(e.what()).rfind("x.cfg:2:", 0) == 0);
    }
    CHECK_THROWS_AS(load_config("/nonexistent/f2pad.cfg"), IoError);
}

TEST_CASE("written configs read back to the same values") {
    RunConfig a;
    set_config_value(a, "alpha1", "123.5");
    set_config_value(a, "backend", "memory_bank");
    set_config_value(a, "out_dir", "somewhere");
    std::ostringstream os;
    write_config(os, a);
    RunConfig b;
    std::istringstream is(os.str());
    parse_config(is, b);
    for (const auto& k : config_keys()) CHECK(get_config_value(a, k) == get_config_value(b, k));
}

TEST_CASE("cli exit codes") {
    CHECK(run_cli("--help") == 0);
    CHECK(run_cli("") == 1);
    CHECK(run_cli("frobnicate") == 1);
    CHECK(run_cli("synth --set alpha7=1") == 1);
    CHECK(run_cli("synth --set tau_a=-1") == 1);
    CHECK(run_cli("-c /nonexistent/x.cfg synth") == 2);

    const fs::path dir = scratch("exit");
    CHECK(run_cli("f2pad " + (dir / "missing.png").string() + " --set model_dir=" + (dir / "model").string()) == 2);
    fs::remove_all(dir);
}

TEST_CASE("cli synth, fit, detect and eval on a tiny dataset") {
    const fs::path dir = scratch("flow");
    const std::string common = " --set data_dir=" + (dir / "data").string() + " --set model_dir=" + (dir / "model").string() +
                               " --set out_dir=" + (dir / "out").string() +
                               " --set image_size=16 --set tile=4 --set n_train=6 --set n_test=2 --set mog_samples=500"
                               " --set mog_components=2 --set max_iter=5 --set dilation=1";
    REQUIRE(run_cli("synth" + common) == 0);
    CHECK(fs::exists(dir / "data" / "manifest.jsonl"));
    REQUIRE(run_cli("fit" + common) == 0);
    CHECK(fs::exists(dir / "model" / "backend.f2pb"));
    CHECK(run_cli("detect " + (dir / "data" / "test" / "0000.png").string() + " -o " + (dir / "det").string() + common) == 0);
    CHECK(fs::exists(dir / "det" / "heat.png"));
    CHECK(run_cli("eval -m f2pad,init-only" + common) == 0);
    CHECK(fs::exists(dir / "out" / "results.tsv"));
    CHECK(run_cli("eval -m bogus" + common) == 1);
    fs::remove(dir / "data" / "test" / "0001_mask.png");
    CHECK(run_cli("eval -m init-only" + common) == 2);
    fs::remove_all(dir);
}

TEST_CASE("cli gradcheck fails when a fault is injected") {
    CHECK(run_cli("gradcheck --trials 2") == 0);
    CHECK(run_cli("gradcheck --trials 2 --inject-fault") == 2);
}
