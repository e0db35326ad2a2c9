#pragma once

// Plain-text "key = value" run configuration with a fixed schema.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "f2pad/datasynth.hpp"
#include "f2pad/evalkit.hpp"
#include "f2pad/fit.hpp"
#include "f2pad/pipeline.hpp"

namespace f2pad {

struct RunConfig {
    F2PADConfig f2pad;
    FitOptions fit;
    DatasetSpec synth;
    std::uint64_t extractor_seed = 2024;
    BaselineMode baseline = BaselineMode::dataset_max_f1;
    std::string data_dir = "data";
    std::string model_dir = "model";
    std::string out_dir = "out";
};

// Throws ValidationError for unknown keys and unparsable values.
void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value);
std::string get_config_value(const RunConfig& cfg, const std::string& key);
const std::vector<std::string>& config_keys();

// '#' starts a comment; blank lines are ignored.
void parse_config(std::istream& is, RunConfig& cfg, const std::string& source = "<config>");
RunConfig load_config(const std::filesystem::path& path);
void write_config(std::ostream& os, const RunConfig& cfg);

}  // namespace f2pad
