#include "f2pad/tensor_io.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "f2pad/error.hpp"

namespace f2pad {

namespace {

constexpr std::array<char, 4> kMagic = {'F', '2', 'T', 'D'};
constexpr std::string_view kBundleTag = "F2PB ";
constexpr std::uint64_t kMaxElements = std::uint64_t{1} << 36;

template <typename T>
void put_le(std::ostream& os, T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    std::array<unsigned char, sizeof(T)> bytes{};
    std::memcpy(bytes.data(), &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
    os.write(reinterpret_cast<const char*>(bytes.data()), sizeof(T));
}

template <typename T>
T get_le(std::istream& is) {
    std::array<unsigned char, sizeof(T)> bytes{};
    is.read(reinterpret_cast<char*>(bytes.data()), sizeof(T));
    if (!is) throw IoError("f2td: unexpected end of stream");
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
    T value;
    std::memcpy(&value, bytes.data(), sizeof(T));
    return value;
}

}  // namespace

void write_tensor(std::ostream& os, const Tensor& t) {
    os.write(kMagic.data(), kMagic.size());
    put_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t e : t.shape()) put_le<std::uint64_t>(os, e);
    for (double v : t.data()) put_le<double>(os, v);
    if (!os) throw IoError("f2td: write failed");
}

Tensor read_tensor(std::istream& is) {
    std::array<char, 4> magic{};
    is.read(magic.data(), magic.size());
    if (!is || magic != kMagic) throw IoError("f2td: bad magic");
    const auto rank = get_le<std::uint32_t>(is);
    if (rank > 16) throw IoError("f2td: implausible rank " + std::to_string(rank));
    Shape shape;
    std::uint64_t count = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
        const auto e = get_le<std::uint64_t>(is);
        shape.push_back(static_cast<std::size_t>(e));
        count *= e;
        if (count > kMaxElements) throw IoError("f2td: tensor too large");
    }
    std::vector<double> data(static_cast<std::size_t>(count));
    for (double& v : data) v = get_le<double>(is);
    try {
        return Tensor(std::move(shape), std::move(data));
    } catch (const NumericError& e) {
        throw IoError(std::string("f2td: corrupt payload (") + e.what() + ")");
    }
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    write_tensor(os, t);
}

Tensor load_tensor(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path.string());
    return read_tensor(is);
}

const Tensor& Bundle::tensor(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw IoError("bundle: missing tensor '" + name + "'");
    return it->second;
}

void save_bundle(const std::filesystem::path& path, const Bundle& bundle) {
    nlohmann::json header = bundle.header;
    header["tensors"] = nlohmann::json::array();
    for (const auto& [name, t] : bundle.tensors) header["tensors"].push_back(name);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    os << kBundleTag << header.dump() << '\n';
    for (const auto& [name, t] : bundle.tensors) write_tensor(os, t);
    if (!os) throw IoError("bundle: write failed for " + path.string());
}

Bundle load_bundle(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path.string());
    std::string line;
    std::getline(is, line);
    if (line.rfind(kBundleTag, 0) != 0) throw IoError("bundle: bad header in " + path.string());
    Bundle bundle;
    try {
        bundle.header = nlohmann::json::parse(line.substr(kBundleTag.size()));
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("bundle: unparsable header: ") + e.what());
    }
    if (!bundle.header.contains("tensors") || !bundle.header["tensors"].is_array()) {
        throw IoError("bundle: header lacks a tensors array");
    }
    for (const auto& name : bundle.header["tensors"]) {
        bundle.tensors.emplace(name.get<std::string>(), read_tensor(is));
    }
    return bundle;
}

}  // namespace f2pad
