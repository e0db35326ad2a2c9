#pragma once

// F2TD binary tensor records and the bundle container built on top of them.
//
// Tensor record (little-endian):
//   "F2TD" | u32 rank | u64 extent[rank] | f64 payload[product(extents)]
//
// Bundle file:
//   one text line "F2PB <json>\n" whose JSON object carries a "kind", free-form
//   metadata and a "tensors" array of names, followed by one F2TD record per name.

#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>

#include <json.hpp>

#include "f2pad/tensor.hpp"

namespace f2pad {

void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);

void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

struct Bundle {
    nlohmann::json header = nlohmann::json::object();
    std::map<std::string, Tensor> tensors;

    const Tensor& tensor(const std::string& name) const;
};

void save_bundle(const std::filesystem::path& path, const Bundle& bundle);
Bundle load_bundle(const std::filesystem::path& path);

}  // namespace f2pad
