#pragma once

// Dense double-precision tensors and a small tape-based reverse-mode
// differentiator covering the op set needed by the feature extractor.

#include <cstddef>
#include <deque>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace f2pad {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    // Throws ShapeError if product(shape) != data.size(), NumericError on NaN/Inf.
    Tensor(Shape shape, std::vector<double> data);

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<const double> data() const noexcept { return data_; }
    std::span<double> data() noexcept { return data_; }
    const std::vector<double>& vec() const noexcept { return data_; }

    double operator[](std::size_t i) const { return data_[i]; }
    double& operator[](std::size_t i) { return data_[i]; }

    // Rank-3 (row, col, channel) accessors; layout is row-major HWC.
    double at(std::size_t i, std::size_t j, std::size_t k) const {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }
    double& at(std::size_t i, std::size_t j, std::size_t k) {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }

    bool all_finite() const noexcept;

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    Shape shape_;
    std::vector<double> data_;
};

// Throws NumericError naming `what` if any element is NaN or infinite.
void require_finite(const Tensor& t, std::string_view what);

// Throws ShapeError unless `t` is rank 3 with `channels` channels (0 = any).
void require_hwc(const Tensor& t, std::size_t channels, std::string_view what);

class Tape;

/// Handle to a node recorded on a Tape.
struct Var {
    Tape* tape = nullptr;
    std::size_t id = 0;

    const Tensor& value() const;
};

// Vector-Jacobian product of one node. `parent_grads[k]` is null when parent k
// does not require gradients; otherwise contributions must be added into it.
using VjpFn = std::function<void(const Tensor& grad_out, std::span<Tensor* const> parent_grads)>;

class Gradients {
public:
    bool has(Var v) const;
    // Throws ValidationError if no gradient was computed for `v`.
    const Tensor& operator[](Var v) const;
    // Node ids whose VJP ran, in the order they ran.
    const std::vector<std::size_t>& visit_order() const noexcept { return visit_order_; }

private:
    friend class Tape;
    std::vector<std::optional<Tensor>> grads_;
    std::vector<std::size_t> visit_order_;
};

class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var leaf(Tensor value, bool requires_grad = true);
    Var constant(Tensor value) { return leaf(std::move(value), false); }
    Var record(Tensor value, std::vector<Var> parents, VjpFn vjp);

    const Tensor& value(Var v) const;
    bool requires_grad(Var v) const;
    std::size_t size() const noexcept { return nodes_.size(); }

    // Reverse sweep from a scalar output. Throws ShapeError if the output is not a scalar.
    Gradients backward(Var output) const;

private:
    struct Node {
        Tensor value;
        std::vector<std::size_t> parents;
        bool requires_grad = false;
        VjpFn vjp;
    };

    void check_owned(Var v) const;

    // deque keeps node addresses stable; VJP closures hold pointers to values.
    std::deque<Node> nodes_;
};

// ---- primitive ops -------------------------------------------------------

// input [h,w,cin], kernel [kh,kw,cin,cout]; kh and kw must be odd.
Var conv2d(Var input, Var kernel, std::size_t stride, std::size_t pad);
Var avg_pool(Var input, std::size_t k, std::size_t stride);
Var leaky_relu(Var input, double slope);
Var upsample_nearest(Var input, std::size_t target_h, std::size_t target_w);
Var concat_channels(std::span<const Var> inputs);

Var add(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var sum(Var a);

// Untaped forward kernels, shared by the taped ops and by inference paths.
Tensor conv2d_forward(const Tensor& input, const Tensor& kernel, std::size_t stride, std::size_t pad);
Tensor avg_pool_forward(const Tensor& input, std::size_t k, std::size_t stride);
Tensor leaky_relu_forward(const Tensor& input, double slope);
Tensor upsample_nearest_forward(const Tensor& input, std::size_t target_h, std::size_t target_w);
Tensor concat_channels_forward(std::span<const Tensor* const> inputs);

}  // namespace f2pad
