#pragma once

// Dense tensors with tape-based reverse-mode differentiation.
//
// A Tensor is an immutable value (shape + shared row-major storage). Tensors
// produced from at least one tape-tracked operand are recorded on that tape;
// everything else is a constant. Tape::backward replays the record in reverse
// and yields exact gradients for every leaf registered with Tape::variable.
//
// A tape and the tensors recorded on it belong to one thread. Constant
// tensors (e.g. model parameters during an attack) may be shared freely.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace rap::ad {

using Shape = std::vector<std::size_t>;
using Mask = std::vector<std::uint8_t>;

inline std::size_t element_count(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        out << (i ? "," : "") << shape[i];
    }
    out << ']';
    return out.str();
}

class Tape;
class Tensor;

namespace detail {
struct Recorder;
}

class Tensor {
public:
    Tensor() : Tensor(Shape{}, std::vector<double>{0.0}) {}

    Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)) {
        for (auto extent : shape_) {
            if (extent == 0) {
                throw std::invalid_argument("tensor: zero extent in shape " + shape_string(shape_));
            }
        }
        if (element_count(shape_) != values.size()) {
            throw std::invalid_argument("tensor: shape " + shape_string(shape_) + " needs " +
                                        std::to_string(element_count(shape_)) + " values, got " +
                                        std::to_string(values.size()));
        }
        values_ = std::make_shared<const std::vector<double>>(std::move(values));
    }

    static Tensor scalar(double v) { return Tensor(Shape{}, {v}); }
    static Tensor full(Shape shape, double v) {
        auto n = element_count(shape);
        return Tensor(std::move(shape), std::vector<double>(n, v));
    }
    static Tensor zeros(Shape shape) { return full(std::move(shape), 0.0); }

    const Shape& shape() const { return shape_; }
    std::size_t size() const { return values_->size(); }
    std::span<const double> values() const { return *values_; }
    double operator[](std::size_t i) const { return (*values_)[i]; }
    double item() const {
        if (size() != 1) {
            throw std::invalid_argument("tensor: item() on non-scalar shape " + shape_string(shape_));
        }
        return (*values_)[0];
    }

    bool tracked() const { return tape_ != nullptr; }
    Tape* tape() const { return tape_; }
    std::optional<std::size_t> node() const {
        return tape_ ? std::optional<std::size_t>(node_) : std::nullopt;
    }

    /// Same values, detached from any tape.
    Tensor detach() const {
        Tensor t = *this;
        t.tape_ = nullptr;
        return t;
    }

private:
    friend class Tape;
    friend class Gradients;
    friend struct detail::Recorder;

    Shape shape_;
    std::shared_ptr<const std::vector<double>> values_;
    Tape* tape_ = nullptr;
    std::size_t node_ = 0;
    std::uint64_t generation_ = 0;
};

/// Gradient accumulators of one node's operands during backward replay.
class GradSink {
public:
    /// Gradient buffer of the k-th operand; empty when that operand is constant.
    std::span<double> operand(std::size_t k) const { return buffers_[k]; }

private:
    friend class Tape;
    std::vector<std::span<double>> buffers_;
};

using BackwardFn = std::function<void(std::span<const double> out_grad, const GradSink& sink)>;

class Gradients {
public:
    /// Gradient of the root with respect to `leaf`, shaped like the leaf. Zero
    /// when the root does not depend on it.
    Tensor wrt(const Tensor& leaf) const;

private:
    friend class Tape;
    const Tape* tape_ = nullptr;
    std::uint64_t generation_ = 0;
    std::vector<std::vector<double>> grads_;
    std::vector<Shape> shapes_;
};

class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Registers a leaf whose gradient backward() will report.
    Tensor variable(const Tensor& value) {
        if (value.tracked()) {
            throw std::invalid_argument("tape: variable() expects a constant tensor");
        }
        Tensor leaf = value;
        leaf.tape_ = this;
        leaf.generation_ = generation_;
        leaf.node_ = nodes_.size();
        nodes_.push_back(Node{value.shape(), value.size(), {}, nullptr});
        return leaf;
    }

    std::size_t size() const { return nodes_.size(); }

    /// Drops every node; tensors recorded before become unusable with this tape.
    void clear() {
        nodes_.clear();
        ++generation_;
    }

    Gradients backward(const Tensor& root) const {
        if (root.size() != 1) {
            throw std::invalid_argument("backward: root must be scalar, got shape " +
                                        shape_string(root.shape()));
        }
        Gradients result;
        result.tape_ = this;
        result.generation_ = generation_;
        result.grads_.resize(nodes_.size());
        result.shapes_.reserve(nodes_.size());
        for (const auto& n : nodes_) {
            result.shapes_.push_back(n.shape);
        }
        if (!root.tracked()) {
            return result;
        }
        check_owned(root, "backward");
        result.grads_[root.node_].assign(1, 1.0);
        GradSink sink;
        for (std::size_t i = root.node_ + 1; i-- > 0;) {
            const Node& n = nodes_[i];
            if (!n.backward || result.grads_[i].empty()) {
                continue;
            }
            sink.buffers_.clear();
            for (auto input : n.inputs) {
                if (!input) {
                    sink.buffers_.emplace_back();
                    continue;
                }
                auto& g = result.grads_[*input];
                if (g.empty()) {
                    g.assign(nodes_[*input].size, 0.0);
                }
                sink.buffers_.emplace_back(g);
            }
            n.backward(result.grads_[i], sink);
            // Interior gradients are no longer needed once propagated.
            if (!n.inputs.empty()) {
                std::vector<double>().swap(result.grads_[i]);
            }
        }
        return result;
    }

private:
    friend struct detail::Recorder;
    friend class Gradients;

    struct Node {
        Shape shape;
        std::size_t size;
        std::vector<std::optional<std::size_t>> inputs;
        BackwardFn backward;
    };

    void check_owned(const Tensor& t, const char* op) const {
        if (t.tape_ != this || t.generation_ != generation_ || t.node_ >= nodes_.size()) {
            throw std::logic_error(std::string(op) + ": tensor belongs to a cleared or foreign tape");
        }
    }

    std::vector<Node> nodes_;
    std::uint64_t generation_ = 0;
};

inline Tensor Gradients::wrt(const Tensor& leaf) const {
    if (!leaf.tracked()) {
        return Tensor::zeros(leaf.shape());
    }
    if (leaf.tape_ != tape_ || leaf.generation_ != generation_ || leaf.node_ >= grads_.size()) {
        throw std::logic_error("gradients: leaf is not part of this tape");
    }
    const auto& g = grads_[leaf.node_];
    if (g.empty()) {
        return Tensor::zeros(leaf.shape());
    }
    return Tensor(shapes_[leaf.node_], g);
}

namespace detail {

struct Recorder {
    static Tensor record(const char* op, Shape shape, std::vector<double> values,
                         std::initializer_list<const Tensor*> operands, BackwardFn backward) {
        for (double v : values) {
            if (!std::isfinite(v)) {
                throw std::domain_error(std::string(op) + ": produced a non-finite value");
            }
        }
        Tensor out(std::move(shape), std::move(values));
        Tape* tape = nullptr;
        for (const Tensor* t : operands) {
            if (!t->tracked()) {
                continue;
            }
            if (tape && t->tape_ != tape) {
                throw std::logic_error(std::string(op) + ": operands recorded on different tapes");
            }
            tape = t->tape_;
            tape->check_owned(*t, op);
        }
        if (!tape) {
            return out;
        }
        Tape::Node node{out.shape(), out.size(), {}, std::move(backward)};
        for (const Tensor* t : operands) {
            node.inputs.push_back(t->node());
        }
        out.tape_ = tape;
        out.generation_ = tape->generation_;
        out.node_ = tape->nodes_.size();
        tape->nodes_.push_back(std::move(node));
        return out;
    }
};

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                                    " vs " + shape_string(b.shape()));
    }
}

template <class F, class DF>
Tensor unary(const char* op, const Tensor& a, F f, DF df) {
    std::vector<double> out(a.size());
    auto x = a.values();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = f(x[i]);
    }
    auto y = std::make_shared<std::vector<double>>(out);
    return Recorder::record(op, a.shape(), std::move(out), {&a},
                            [a, y, df](std::span<const double> g, const GradSink& sink) {
                                auto ga = sink.operand(0);
                                auto x = a.values();
                                for (std::size_t i = 0; i < ga.size(); ++i) {
                                    ga[i] += g[i] * df(x[i], (*y)[i]);
                                }
                            });
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape("add", a, b);
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = a[i] + b[i];
    }
    return detail::Recorder::record("add", a.shape(), std::move(out), {&a, &b},
                                    [](std::span<const double> g, const GradSink& sink) {
                                        for (std::size_t k = 0; k < 2; ++k) {
                                            auto gk = sink.operand(k);
                                            for (std::size_t i = 0; i < gk.size(); ++i) {
                                                gk[i] += g[i];
                                            }
                                        }
                                    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require_same_shape("sub", a, b);
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = a[i] - b[i];
    }
    return detail::Recorder::record("sub", a.shape(), std::move(out), {&a, &b},
                                    [](std::span<const double> g, const GradSink& sink) {
                                        auto ga = sink.operand(0);
                                        for (std::size_t i = 0; i < ga.size(); ++i) {
                                            ga[i] += g[i];
                                        }
                                        auto gb = sink.operand(1);
                                        for (std::size_t i = 0; i < gb.size(); ++i) {
                                            gb[i] -= g[i];
                                        }
                                    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape("mul", a, b);
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = a[i] * b[i];
    }
    return detail::Recorder::record("mul", a.shape(), std::move(out), {&a, &b},
                                    [a, b](std::span<const double> g, const GradSink& sink) {
                                        auto ga = sink.operand(0);
                                        for (std::size_t i = 0; i < ga.size(); ++i) {
                                            ga[i] += g[i] * b[i];
                                        }
                                        auto gb = sink.operand(1);
                                        for (std::size_t i = 0; i < gb.size(); ++i) {
                                            gb[i] += g[i] * a[i];
                                        }
                                    });
}

inline Tensor scale(const Tensor& a, double s) {
    return detail::unary(
        "scale", a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

inline Tensor add_scalar(const Tensor& a, double c) {
    return detail::unary(
        "add_scalar", a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

inline Tensor square(const Tensor& a) {
    return detail::unary(
        "square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

inline Tensor log(const Tensor& a) {
    for (double v : a.values()) {
        if (!(v > 0.0)) {
            throw std::domain_error("log: non-positive input " + std::to_string(v));
        }
    }
    return detail::unary(
        "log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Tensor exp(const Tensor& a) {
    return detail::unary(
        "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline double sigmoid_value(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    double e = std::exp(x);
    return e / (1.0 + e);
}

inline Tensor sigmoid(const Tensor& a) {
    return detail::unary("sigmoid", a, sigmoid_value, [](double, double y) { return y * (1.0 - y); });
}

inline Tensor relu(const Tensor& a) {
    return detail::unary(
        "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
        [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

/// log(1 + e^x), evaluated without overflow.
inline Tensor softplus(const Tensor& a) {
    return detail::unary(
        "softplus", a,
        [](double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); },
        [](double x, double) { return sigmoid_value(x); });
}

/// max(x, lo); gradient passes through where x > lo.
inline Tensor clamp_min(const Tensor& a, double lo) {
    return detail::unary(
        "clamp_min", a, [lo](double x) { return x > lo ? x : lo; },
        [lo](double x, double) { return x > lo ? 1.0 : 0.0; });
}

/// Elementwise Huber-style smooth L1 with transition point `beta`.
inline Tensor smooth_l1(const Tensor& a, double beta) {
    return detail::unary(
        "smooth_l1", a,
        [beta](double x) {
            double ax = std::abs(x);
            return ax < beta ? 0.5 * x * x / beta : ax - 0.5 * beta;
        },
        [beta](double x, double) {
            if (std::abs(x) < beta) {
                return x / beta;
            }
            return x > 0.0 ? 1.0 : -1.0;
        });
}

inline Tensor sum(const Tensor& a) {
    double total = 0.0;
    for (double v : a.values()) {
        total += v;
    }
    return detail::Recorder::record("sum", Shape{}, {total}, {&a},
                                    [](std::span<const double> g, const GradSink& sink) {
                                        auto ga = sink.operand(0);
                                        for (double& v : ga) {
                                            v += g[0];
                                        }
                                    });
}

/// Entries of `a` where `mask` is 1, flattened in row-major order. The mask is
/// a constant; at least one entry must be selected.
inline Tensor masked_select(const Tensor& a, const Mask& mask) {
    if (mask.size() != a.size()) {
        throw std::invalid_argument("masked_select: mask of " + std::to_string(mask.size()) +
                                    " entries for shape " + shape_string(a.shape()));
    }
    auto index = std::make_shared<std::vector<std::size_t>>();
    for (std::size_t i = 0; i < mask.size(); ++i) {
        if (mask[i] > 1) {
            throw std::invalid_argument("masked_select: mask entries must be 0 or 1");
        }
        if (mask[i]) {
            index->push_back(i);
        }
    }
    if (index->empty()) {
        throw std::invalid_argument("masked_select: mask selects nothing");
    }
    std::vector<double> out;
    out.reserve(index->size());
    for (auto i : *index) {
        out.push_back(a[i]);
    }
    Shape shape{index->size()};
    return detail::Recorder::record("masked_select", std::move(shape), std::move(out), {&a},
                                    [index](std::span<const double> g, const GradSink& sink) {
                                        auto ga = sink.operand(0);
                                        if (ga.empty()) {
                                            return;
                                        }
                                        for (std::size_t k = 0; k < index->size(); ++k) {
                                            ga[(*index)[k]] += g[k];
                                        }
                                    });
}

struct Conv2dOptions {
    std::size_t stride = 1;
    std::size_t padding = 0;
};

/// Cross-correlation of x [C,H,W] with weight [O,C,K,K], plus bias [O].
inline Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias,
                     Conv2dOptions opt = {}) {
    const auto& xs = x.shape();
    const auto& ws = weight.shape();
    if (xs.size() != 3 || ws.size() != 4 || ws[1] != xs[0] || ws[2] != ws[3] ||
        bias.shape() != Shape{ws[0]}) {
        throw std::invalid_argument("conv2d: incompatible shapes input " + shape_string(xs) +
                                    ", weight " + shape_string(ws) + ", bias " +
                                    shape_string(bias.shape()));
    }
    if (opt.stride == 0) {
        throw std::invalid_argument("conv2d: stride must be positive");
    }
    const std::size_t C = xs[0], H = xs[1], W = xs[2];
    const std::size_t O = ws[0], K = ws[2], S = opt.stride, P = opt.padding;
    if (H + 2 * P < K || W + 2 * P < K) {
        throw std::invalid_argument("conv2d: kernel " + std::to_string(K) +
                                    " larger than padded input " + shape_string(xs));
    }
    const std::size_t Ho = (H + 2 * P - K) / S + 1;
    const std::size_t Wo = (W + 2 * P - K) / S + 1;

    // Range of output indices whose input index o*S - P + k lies inside [0, n).
    auto valid_range = [S, P](std::size_t k, std::size_t n, std::size_t out_n) {
        long lo = 0;
        long shift = static_cast<long>(P) - static_cast<long>(k);
        if (shift > 0) {
            lo = (shift + static_cast<long>(S) - 1) / static_cast<long>(S);
        }
        long hi = (static_cast<long>(n) - 1 + shift);
        hi = hi < 0 ? -1 : hi / static_cast<long>(S);
        hi = std::min(hi, static_cast<long>(out_n) - 1);
        return std::pair<long, long>{lo, hi};
    };

    std::vector<double> out(O * Ho * Wo);
    auto xv = x.values();
    auto wv = weight.values();
    for (std::size_t o = 0; o < O; ++o) {
        double* plane = out.data() + o * Ho * Wo;
        std::fill(plane, plane + Ho * Wo, bias[o]);
        for (std::size_t c = 0; c < C; ++c) {
            const double* xin = xv.data() + c * H * W;
            for (std::size_t ky = 0; ky < K; ++ky) {
                auto [oy0, oy1] = valid_range(ky, H, Ho);
                for (std::size_t kx = 0; kx < K; ++kx) {
                    auto [ox0, ox1] = valid_range(kx, W, Wo);
                    const double w = wv[((o * C + c) * K + ky) * K + kx];
                    for (long oy = oy0; oy <= oy1; ++oy) {
                        const double* row = xin + (oy * S + ky - P) * W;
                        double* orow = plane + oy * Wo;
                        if (S == 1) {
                            const double* r = row + kx - P;
                            for (long ox = ox0; ox <= ox1; ++ox) {
                                orow[ox] += w * r[ox];
                            }
                        } else {
                            for (long ox = ox0; ox <= ox1; ++ox) {
                                orow[ox] += w * row[ox * S + kx - P];
                            }
                        }
                    }
                }
            }
        }
    }

    return detail::Recorder::record(
        "conv2d", Shape{O, Ho, Wo}, std::move(out), {&x, &weight, &bias},
        [x, weight, C, H, W, O, K, S, P, Ho, Wo, valid_range](std::span<const double> g,
                                                              const GradSink& sink) {
            auto gx = sink.operand(0);
            auto gw = sink.operand(1);
            auto gb = sink.operand(2);
            auto xv = x.values();
            auto wv = weight.values();
            for (std::size_t o = 0; o < O; ++o) {
                const double* gplane = g.data() + o * Ho * Wo;
                if (!gb.empty()) {
                    double acc = 0.0;
                    for (std::size_t i = 0; i < Ho * Wo; ++i) {
                        acc += gplane[i];
                    }
                    gb[o] += acc;
                }
                if (gx.empty() && gw.empty()) {
                    continue;
                }
                for (std::size_t c = 0; c < C; ++c) {
                    const double* xin = xv.data() + c * H * W;
                    double* gxin = gx.empty() ? nullptr : gx.data() + c * H * W;
                    for (std::size_t ky = 0; ky < K; ++ky) {
                        auto [oy0, oy1] = valid_range(ky, H, Ho);
                        for (std::size_t kx = 0; kx < K; ++kx) {
                            auto [ox0, ox1] = valid_range(kx, W, Wo);
                            const std::size_t widx = ((o * C + c) * K + ky) * K + kx;
                            const double w = wv[widx];
                            double wacc = 0.0;
                            for (long oy = oy0; oy <= oy1; ++oy) {
                                const std::size_t in_off = (oy * S + ky - P) * W;
                                const double* grow = gplane + oy * Wo;
                                if (S == 1) {
                                    const double* r = xin + in_off + kx - P;
                                    if (gxin) {
                                        double* gr = gxin + in_off + kx - P;
                                        for (long ox = ox0; ox <= ox1; ++ox) {
                                            gr[ox] += w * grow[ox];
                                        }
                                    }
                                    if (!gw.empty()) {
                                        for (long ox = ox0; ox <= ox1; ++ox) {
                                            wacc += grow[ox] * r[ox];
                                        }
                                    }
                                } else {
                                    for (long ox = ox0; ox <= ox1; ++ox) {
                                        const std::size_t ix = in_off + ox * S + kx - P;
                                        if (gxin) {
                                            gxin[ix] += w * grow[ox];
                                        }
                                        wacc += grow[ox] * xin[ix];
                                    }
                                }
                            }
                            if (!gw.empty()) {
                                gw[widx] += wacc;
                            }
                        }
                    }
                }
            }
        });
}

/// Non-overlapping k×k max pooling of x [C,H,W]; H and W must be multiples of k.
/// Ties resolve to the first element in row-major window order.
inline Tensor max_pool2d(const Tensor& x, std::size_t k) {
    const auto& xs = x.shape();
    if (xs.size() != 3 || k == 0 || xs[1] % k != 0 || xs[2] % k != 0) {
        throw std::invalid_argument("max_pool2d: window " + std::to_string(k) +
                                    " does not tile shape " + shape_string(xs));
    }
    const std::size_t C = xs[0], H = xs[1], W = xs[2], Ho = H / k, Wo = W / k;
    std::vector<double> out(C * Ho * Wo);
    auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
    auto xv = x.values();
    for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t oy = 0; oy < Ho; ++oy) {
            for (std::size_t ox = 0; ox < Wo; ++ox) {
                std::size_t best = (c * H + oy * k) * W + ox * k;
                for (std::size_t dy = 0; dy < k; ++dy) {
                    for (std::size_t dx = 0; dx < k; ++dx) {
                        std::size_t idx = (c * H + oy * k + dy) * W + ox * k + dx;
                        if (xv[idx] > xv[best]) {
                            best = idx;
                        }
                    }
                }
                std::size_t o = (c * Ho + oy) * Wo + ox;
                out[o] = xv[best];
                (*argmax)[o] = best;
            }
        }
    }
    return detail::Recorder::record("max_pool2d", Shape{C, Ho, Wo}, std::move(out), {&x},
                                    [argmax](std::span<const double> g, const GradSink& sink) {
                                        auto gx = sink.operand(0);
                                        for (std::size_t i = 0; i < g.size(); ++i) {
                                            gx[(*argmax)[i]] += g[i];
                                        }
                                    });
}

/// Max over coordinates of |analytic - central difference| / max(1, |analytic|)
/// for the gradient of scalar-valued `f` at `x`.
inline double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                                double step) {
    Tape tape;
    Tensor leaf = tape.variable(x.detach());
    Tensor root = f(leaf);
    Tensor analytic = tape.backward(root).wrt(leaf);

    std::vector<double> probe(x.values().begin(), x.values().end());
    double worst = 0.0;
    for (std::size_t i = 0; i < probe.size(); ++i) {
        const double orig = probe[i];
        probe[i] = orig + step;
        double up = f(Tensor(x.shape(), probe)).item();
        probe[i] = orig - step;
        double down = f(Tensor(x.shape(), probe)).item();
        probe[i] = orig;
        double numeric = (up - down) / (2.0 * step);
        double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
        worst = std::max(worst, err);
    }
    return worst;
}

}  // namespace rap::ad
