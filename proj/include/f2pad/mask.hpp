#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace f2pad {

/// Binary H x W grid. Values are 0 or 1.
class Mask {
public:
    Mask() = default;
    Mask(std::size_t height, std::size_t width, bool value = false)
        : h_(height), w_(width), bits_(height * width, value ? 1 : 0) {}

    std::size_t height() const noexcept { return h_; }
    std::size_t width() const noexcept { return w_; }
    std::size_t size() const noexcept { return bits_.size(); }

    bool operator()(std::size_t i, std::size_t j) const { return bits_[i * w_ + j] != 0; }
    void set(std::size_t i, std::size_t j, bool v = true) { bits_[i * w_ + j] = v ? 1 : 0; }
    bool operator[](std::size_t flat) const { return bits_[flat] != 0; }
    void set_flat(std::size_t flat, bool v = true) { bits_[flat] = v ? 1 : 0; }

    std::size_t count() const noexcept {
        std::size_t n = 0;
        for (auto b : bits_) n += b;
        return n;
    }
    bool any() const noexcept { return count() > 0; }
    bool same_dims(const Mask& o) const noexcept { return h_ == o.h_ && w_ == o.w_; }

    const std::vector<std::uint8_t>& bits() const noexcept { return bits_; }

    friend bool operator==(const Mask&, const Mask&) = default;

private:
    std::size_t h_ = 0;
    std::size_t w_ = 0;
    std::vector<std::uint8_t> bits_;
};

using AnomalyMask = Mask;

}  // namespace f2pad
