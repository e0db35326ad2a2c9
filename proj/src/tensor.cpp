#include "f2pad/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "f2pad/error.hpp"

namespace f2pad {

namespace {

std::size_t product(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

#ifndef NDEBUG
void debug_check(const Tensor& t, std::string_view op) { require_finite(t, op); }
#else
void debug_check(const Tensor&, std::string_view) {}
#endif

Tape& common_tape(std::initializer_list<Var> vars, std::string_view op) {
    Tape* tape = vars.begin()->tape;
    for (const Var& v : vars) {
        if (v.tape == nullptr || v.tape != tape) {
            throw ValidationError(std::string(op) + ": operands belong to different tapes");
        }
    }
    return *tape;
}

void add_into(Tensor* dst, const Tensor& src) {
    if (dst == nullptr) return;
    auto d = dst->data();
    auto s = src.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

}  // namespace

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(product(shape_), fill) {
    if (!std::isfinite(fill)) throw NumericError("tensor: non-finite fill value");
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (product(shape_) != data_.size()) {
        throw ShapeError("tensor: shape " + shape_str(shape_) + " holds " + std::to_string(product(shape_)) +
                         " elements but " + std::to_string(data_.size()) + " were given");
    }
    require_finite(*this, "tensor construction");
}

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= shape_.size()) {
        throw ShapeError("tensor: axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape_));
    }
    return shape_[axis];
}

bool Tensor::all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void require_finite(const Tensor& t, std::string_view what) {
    auto d = t.data();
    for (std::size_t i = 0; i < d.size(); ++i) {
        if (!std::isfinite(d[i])) {
            throw NumericError(std::string(what) + ": non-finite value at flat index " + std::to_string(i));
        }
    }
}

void require_hwc(const Tensor& t, std::size_t channels, std::string_view what) {
    if (t.rank() != 3) {
        throw ShapeError(std::string(what) + ": expected rank-3 [h,w,c] tensor, got " + shape_str(t.shape()));
    }
    if (channels != 0 && t.dim(2) != channels) {
        throw ShapeError(std::string(what) + ": dim 2 (channels) is " + std::to_string(t.dim(2)) + ", expected " +
                         std::to_string(channels));
    }
}

// ---- tape -----------------------------------------------------------------

const Tensor& Var::value() const {
    if (tape == nullptr) throw ValidationError("var: not attached to a tape");
    return tape->value(*this);
}

bool Gradients::has(Var v) const { return v.id < grads_.size() && grads_[v.id].has_value(); }

const Tensor& Gradients::operator[](Var v) const {
    if (!has(v)) throw ValidationError("gradients: no gradient recorded for node " + std::to_string(v.id));
    return *grads_[v.id];
}

void Tape::check_owned(Var v) const {
    if (v.tape != this || v.id >= nodes_.size()) throw ValidationError("tape: var does not belong to this tape");
}

Var Tape::leaf(Tensor value, bool requires_grad) {
    require_finite(value, "tape leaf");
    nodes_.push_back(Node{std::move(value), {}, requires_grad, nullptr});
    return Var{this, nodes_.size() - 1};
}

Var Tape::record(Tensor value, std::vector<Var> parents, VjpFn vjp) {
    Node node;
    node.value = std::move(value);
    for (const Var& p : parents) {
        check_owned(p);
        node.parents.push_back(p.id);
        node.requires_grad = node.requires_grad || nodes_[p.id].requires_grad;
    }
    node.vjp = std::move(vjp);
    nodes_.push_back(std::move(node));
    return Var{this, nodes_.size() - 1};
}

const Tensor& Tape::value(Var v) const {
    check_owned(v);
    return nodes_[v.id].value;
}

bool Tape::requires_grad(Var v) const {
    check_owned(v);
    return nodes_[v.id].requires_grad;
}

Gradients Tape::backward(Var output) const {
    check_owned(output);
    const Tensor& out = nodes_[output.id].value;
    if (out.size() != 1) {
        throw ShapeError("backward: output must be a scalar, got shape " + shape_str(out.shape()));
    }
    Gradients result;
    result.grads_.resize(output.id + 1);
    result.grads_[output.id] = Tensor(out.shape(), 1.0);

    std::vector<Tensor*> parent_grads;
    for (std::size_t id = output.id + 1; id-- > 0;) {
        const Node& node = nodes_[id];
        if (!result.grads_[id] || !node.requires_grad || !node.vjp) continue;
        parent_grads.assign(node.parents.size(), nullptr);
        for (std::size_t k = 0; k < node.parents.size(); ++k) {
            const std::size_t pid = node.parents[k];
            if (!nodes_[pid].requires_grad) continue;
            if (!result.grads_[pid]) result.grads_[pid] = Tensor(nodes_[pid].value.shape(), 0.0);
            parent_grads[k] = &*result.grads_[pid];
        }
        node.vjp(*result.grads_[id], parent_grads);
        result.visit_order_.push_back(id);
    }
    return result;
}

// ---- forward kernels ------------------------------------------------------

Tensor conv2d_forward(const Tensor& input, const Tensor& kernel, std::size_t stride, std::size_t pad) {
    require_hwc(input, 0, "conv2d input");
    if (kernel.rank() != 4) {
        throw ShapeError("conv2d: kernel must be rank 4 [kh,kw,cin,cout], got " + shape_str(kernel.shape()));
    }
    const std::size_t h = input.dim(0), w = input.dim(1), c = input.dim(2);
    const std::size_t kh = kernel.dim(0), kw = kernel.dim(1), ci = kernel.dim(2), co = kernel.dim(3);
    if (ci != c) {
        throw ShapeError("conv2d: kernel dim 2 (cin=" + std::to_string(ci) + ") does not match input dim 2 (channels=" +
                         std::to_string(c) + ")");
    }
    if (kh % 2 == 0) throw ShapeError("conv2d: kernel dim 0 (kh=" + std::to_string(kh) + ") must be odd");
    if (kw % 2 == 0) throw ShapeError("conv2d: kernel dim 1 (kw=" + std::to_string(kw) + ") must be odd");
    if (stride < 1) throw ValidationError("conv2d: stride must be >= 1");
    if (h + 2 * pad < kh) throw ShapeError("conv2d: input dim 0 (h=" + std::to_string(h) + ") too small for kernel");
    if (w + 2 * pad < kw) throw ShapeError("conv2d: input dim 1 (w=" + std::to_string(w) + ") too small for kernel");

    const std::size_t ho = (h + 2 * pad - kh) / stride + 1;
    const std::size_t wo = (w + 2 * pad - kw) / stride + 1;
    Tensor out({ho, wo, co}, 0.0);
    const double* x = input.data().data();
    const double* k = kernel.data().data();
    double* y = out.data().data();
    for (std::size_t oi = 0; oi < ho; ++oi) {
        for (std::size_t oj = 0; oj < wo; ++oj) {
            double* o = y + (oi * wo + oj) * co;
            for (std::size_t ki = 0; ki < kh; ++ki) {
                const std::ptrdiff_t ii = static_cast<std::ptrdiff_t>(oi * stride + ki) - static_cast<std::ptrdiff_t>(pad);
                if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(h)) continue;
                for (std::size_t kj = 0; kj < kw; ++kj) {
                    const std::ptrdiff_t jj =
                        static_cast<std::ptrdiff_t>(oj * stride + kj) - static_cast<std::ptrdiff_t>(pad);
                    if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(w)) continue;
                    const double* xp = x + (static_cast<std::size_t>(ii) * w + static_cast<std::size_t>(jj)) * c;
                    const double* kp = k + (ki * kw + kj) * ci * co;
                    for (std::size_t a = 0; a < ci; ++a) {
                        const double xv = xp[a];
                        const double* kr = kp + a * co;
                        for (std::size_t b = 0; b < co; ++b) o[b] += xv * kr[b];
                    }
                }
            }
        }
    }
    return out;
}

Tensor avg_pool_forward(const Tensor& input, std::size_t k, std::size_t stride) {
    require_hwc(input, 0, "avg_pool input");
    if (k < 1) throw ValidationError("avg_pool: k must be >= 1");
    if (stride < 1) throw ValidationError("avg_pool: stride must be >= 1");
    const std::size_t h = input.dim(0), w = input.dim(1), c = input.dim(2);
    if (k > h) throw ShapeError("avg_pool: k=" + std::to_string(k) + " exceeds input dim 0 (h=" + std::to_string(h) + ")");
    if (k > w) throw ShapeError("avg_pool: k=" + std::to_string(k) + " exceeds input dim 1 (w=" + std::to_string(w) + ")");
    const std::size_t ho = (h - k) / stride + 1, wo = (w - k) / stride + 1;
    Tensor out({ho, wo, c}, 0.0);
    const double inv = 1.0 / static_cast<double>(k * k);
    for (std::size_t oi = 0; oi < ho; ++oi) {
        for (std::size_t oj = 0; oj < wo; ++oj) {
            for (std::size_t di = 0; di < k; ++di) {
                for (std::size_t dj = 0; dj < k; ++dj) {
                    const std::size_t ii = oi * stride + di, jj = oj * stride + dj;
                    for (std::size_t ch = 0; ch < c; ++ch) out.at(oi, oj, ch) += input.at(ii, jj, ch);
                }
            }
            for (std::size_t ch = 0; ch < c; ++ch) out.at(oi, oj, ch) *= inv;
        }
    }
    return out;
}

Tensor leaky_relu_forward(const Tensor& input, double slope) {
    if (!(slope > 0.0 && slope < 1.0)) throw ValidationError("leaky_relu: slope must lie in (0, 1)");
    Tensor out = input;
    for (double& v : out.data()) v = v >= 0.0 ? v : slope * v;
    return out;
}

Tensor upsample_nearest_forward(const Tensor& input, std::size_t target_h, std::size_t target_w) {
    require_hwc(input, 0, "upsample_nearest input");
    const std::size_t h = input.dim(0), w = input.dim(1), c = input.dim(2);
    if (h == 0 || w == 0) throw ShapeError("upsample_nearest: empty input");
    if (target_h < h || target_h % h != 0) {
        throw ShapeError("upsample_nearest: target dim 0 (" + std::to_string(target_h) +
                         ") is not an integer multiple of input dim 0 (" + std::to_string(h) + ")");
    }
    if (target_w < w || target_w % w != 0) {
        throw ShapeError("upsample_nearest: target dim 1 (" + std::to_string(target_w) +
                         ") is not an integer multiple of input dim 1 (" + std::to_string(w) + ")");
    }
    const std::size_t fh = target_h / h, fw = target_w / w;
    Tensor out({target_h, target_w, c}, 0.0);
    for (std::size_t i = 0; i < target_h; ++i) {
        for (std::size_t j = 0; j < target_w; ++j) {
            for (std::size_t ch = 0; ch < c; ++ch) out.at(i, j, ch) = input.at(i / fh, j / fw, ch);
        }
    }
    return out;
}

Tensor concat_channels_forward(std::span<const Tensor* const> inputs) {
    if (inputs.empty()) throw ValidationError("concat_channels: no inputs");
    const std::size_t h = inputs[0]->dim(0), w = inputs[0]->dim(1);
    std::size_t total = 0;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        require_hwc(*inputs[k], 0, "concat_channels input");
        if (inputs[k]->dim(0) != h) {
            throw ShapeError("concat_channels: input " + std::to_string(k) + " dim 0 (" +
                             std::to_string(inputs[k]->dim(0)) + ") != " + std::to_string(h));
        }
        if (inputs[k]->dim(1) != w) {
            throw ShapeError("concat_channels: input " + std::to_string(k) + " dim 1 (" +
                             std::to_string(inputs[k]->dim(1)) + ") != " + std::to_string(w));
        }
        total += inputs[k]->dim(2);
    }
    Tensor out({h, w, total}, 0.0);
    for (std::size_t p = 0; p < h * w; ++p) {
        double* dst = out.data().data() + p * total;
        for (const Tensor* t : inputs) {
            const std::size_t c = t->dim(2);
            const double* src = t->data().data() + p * c;
            std::copy(src, src + c, dst);
            dst += c;
        }
    }
    return out;
}

// ---- taped ops ------------------------------------------------------------

Var conv2d(Var input, Var kernel, std::size_t stride, std::size_t pad) {
    Tape& tape = common_tape({input, kernel}, "conv2d");
    Tensor out = conv2d_forward(input.value(), kernel.value(), stride, pad);
    debug_check(out, "conv2d");
    const Tensor* x = &input.value();
    const Tensor* k = &kernel.value();
    return tape.record(std::move(out), {input, kernel}, [x, k, stride, pad](const Tensor& g, std::span<Tensor* const> pg) {
        const std::size_t h = x->dim(0), w = x->dim(1), c = x->dim(2);
        const std::size_t kh = k->dim(0), kw = k->dim(1), co = k->dim(3);
        const std::size_t ho = g.dim(0), wo = g.dim(1);
        Tensor* gx = pg[0];
        Tensor* gk = pg[1];
        const double* xd = x->data().data();
        const double* kd = k->data().data();
        for (std::size_t oi = 0; oi < ho; ++oi) {
            for (std::size_t oj = 0; oj < wo; ++oj) {
                const double* go = g.data().data() + (oi * wo + oj) * co;
                for (std::size_t ki = 0; ki < kh; ++ki) {
                    const std::ptrdiff_t ii =
                        static_cast<std::ptrdiff_t>(oi * stride + ki) - static_cast<std::ptrdiff_t>(pad);
                    if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(h)) continue;
                    for (std::size_t kj = 0; kj < kw; ++kj) {
                        const std::ptrdiff_t jj =
                            static_cast<std::ptrdiff_t>(oj * stride + kj) - static_cast<std::ptrdiff_t>(pad);
                        if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(w)) continue;
                        const std::size_t pix = (static_cast<std::size_t>(ii) * w + static_cast<std::size_t>(jj)) * c;
                        const std::size_t kofs = (ki * kw + kj) * c * co;
                        if (gx != nullptr) {
                            double* gxp = gx->data().data() + pix;
                            for (std::size_t a = 0; a < c; ++a) {
                                const double* kr = kd + kofs + a * co;
                                double acc = 0.0;
                                for (std::size_t b = 0; b < co; ++b) acc += go[b] * kr[b];
                                gxp[a] += acc;
                            }
                        }
                        if (gk != nullptr) {
                            const double* xp = xd + pix;
                            double* gkp = gk->data().data() + kofs;
                            for (std::size_t a = 0; a < c; ++a) {
                                const double xv = xp[a];
                                double* gr = gkp + a * co;
                                for (std::size_t b = 0; b < co; ++b) gr[b] += xv * go[b];
                            }
                        }
                    }
                }
            }
        }
    });
}

Var avg_pool(Var input, std::size_t k, std::size_t stride) {
    Tape& tape = common_tape({input}, "avg_pool");
    Tensor out = avg_pool_forward(input.value(), k, stride);
    debug_check(out, "avg_pool");
    return tape.record(std::move(out), {input}, [k, stride](const Tensor& g, std::span<Tensor* const> pg) {
        Tensor* gx = pg[0];
        if (gx == nullptr) return;
        const double inv = 1.0 / static_cast<double>(k * k);
        const std::size_t ho = g.dim(0), wo = g.dim(1), c = g.dim(2);
        for (std::size_t oi = 0; oi < ho; ++oi) {
            for (std::size_t oj = 0; oj < wo; ++oj) {
                for (std::size_t di = 0; di < k; ++di) {
                    for (std::size_t dj = 0; dj < k; ++dj) {
                        for (std::size_t ch = 0; ch < c; ++ch) {
                            gx->at(oi * stride + di, oj * stride + dj, ch) += g.at(oi, oj, ch) * inv;
                        }
                    }
                }
            }
        }
    });
}

Var leaky_relu(Var input, double slope) {
    Tape& tape = common_tape({input}, "leaky_relu");
    Tensor out = leaky_relu_forward(input.value(), slope);
    debug_check(out, "leaky_relu");
    const Tensor* x = &input.value();
    return tape.record(std::move(out), {input}, [x, slope](const Tensor& g, std::span<Tensor* const> pg) {
        Tensor* gx = pg[0];
        if (gx == nullptr) return;
        auto xv = x->data();
        auto gv = g.data();
        auto out = gx->data();
        for (std::size_t i = 0; i < xv.size(); ++i) out[i] += (xv[i] > 0.0 ? 1.0 : slope) * gv[i];
    });
}

Var upsample_nearest(Var input, std::size_t target_h, std::size_t target_w) {
    Tape& tape = common_tape({input}, "upsample_nearest");
    Tensor out = upsample_nearest_forward(input.value(), target_h, target_w);
    const std::size_t fh = target_h / input.value().dim(0), fw = target_w / input.value().dim(1);
    return tape.record(std::move(out), {input}, [fh, fw](const Tensor& g, std::span<Tensor* const> pg) {
        Tensor* gx = pg[0];
        if (gx == nullptr) return;
        const std::size_t th = g.dim(0), tw = g.dim(1), c = g.dim(2);
        for (std::size_t i = 0; i < th; ++i) {
            for (std::size_t j = 0; j < tw; ++j) {
                for (std::size_t ch = 0; ch < c; ++ch) gx->at(i / fh, j / fw, ch) += g.at(i, j, ch);
            }
        }
    });
}

Var concat_channels(std::span<const Var> inputs) {
    if (inputs.empty()) throw ValidationError("concat_channels: no inputs");
    Tape& tape = *inputs[0].tape;
    std::vector<const Tensor*> values;
    std::vector<std::size_t> channels;
    for (const Var& v : inputs) {
        if (v.tape != &tape) throw ValidationError("concat_channels: operands belong to different tapes");
        values.push_back(&v.value());
        channels.push_back(v.value().rank() == 3 ? v.value().dim(2) : 0);
    }
    Tensor out = concat_channels_forward(values);
    const std::size_t total = out.dim(2);
    return tape.record(std::move(out), std::vector<Var>(inputs.begin(), inputs.end()),
                       [channels, total](const Tensor& g, std::span<Tensor* const> pg) {
                           const std::size_t pixels = g.size() / total;
                           std::size_t offset = 0;
                           for (std::size_t k = 0; k < channels.size(); ++k) {
                               const std::size_t c = channels[k];
                               if (pg[k] != nullptr) {
                                   for (std::size_t p = 0; p < pixels; ++p) {
                                       const double* src = g.data().data() + p * total + offset;
                                       double* dst = pg[k]->data().data() + p * c;
                                       for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += src[ch];
                                   }
                               }
                               offset += c;
                           }
                       });
}

Var add(Var a, Var b) {
    Tape& tape = common_tape({a, b}, "add");
    if (a.value().shape() != b.value().shape()) {
        throw ShapeError("add: shapes " + shape_str(a.value().shape()) + " and " + shape_str(b.value().shape()) +
                         " differ");
    }
    Tensor out = a.value();
    auto o = out.data();
    auto bv = b.value().data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] += bv[i];
    return tape.record(std::move(out), {a, b}, [](const Tensor& g, std::span<Tensor* const> pg) {
        add_into(pg[0], g);
        add_into(pg[1], g);
    });
}

Var mul(Var a, Var b) {
    Tape& tape = common_tape({a, b}, "mul");
    if (a.value().shape() != b.value().shape()) {
        throw ShapeError("mul: shapes " + shape_str(a.value().shape()) + " and " + shape_str(b.value().shape()) +
                         " differ");
    }
    Tensor out = a.value();
    auto o = out.data();
    auto bv = b.value().data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bv[i];
    debug_check(out, "mul");
    const Tensor* av = &a.value();
    const Tensor* bt = &b.value();
    return tape.record(std::move(out), {a, b}, [av, bt](const Tensor& g, std::span<Tensor* const> pg) {
        auto gv = g.data();
        if (pg[0] != nullptr) {
            auto d = pg[0]->data();
            auto other = bt->data();
            for (std::size_t i = 0; i < d.size(); ++i) d[i] += gv[i] * other[i];
        }
        if (pg[1] != nullptr) {
            auto d = pg[1]->data();
            auto other = av->data();
            for (std::size_t i = 0; i < d.size(); ++i) d[i] += gv[i] * other[i];
        }
    });
}

Var scale(Var a, double factor) {
    Tape& tape = common_tape({a}, "scale");
    Tensor out = a.value();
    for (double& v : out.data()) v *= factor;
    debug_check(out, "scale");
    return tape.record(std::move(out), {a}, [factor](const Tensor& g, std::span<Tensor* const> pg) {
        if (pg[0] == nullptr) return;
        auto d = pg[0]->data();
        auto gv = g.data();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += factor * gv[i];
    });
}

Var sum(Var a) {
    Tape& tape = common_tape({a}, "sum");
    auto v = a.value().data();
    const double s = std::accumulate(v.begin(), v.end(), 0.0);
    Tensor out({1}, s);
    return tape.record(std::move(out), {a}, [](const Tensor& g, std::span<Tensor* const> pg) {
        if (pg[0] == nullptr) return;
        const double gs = g[0];
        for (double& d : pg[0]->data()) d += gs;
    });
}

}  // namespace f2pad
