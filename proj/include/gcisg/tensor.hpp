#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace gcisg {

// ============================================================================
// Errors
// ============================================================================

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class DegenerateInputError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DivergenceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << 'x';
        os << s[i];
    }
    os << ']';
    return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

// ============================================================================
// Tensor: dense row-major f64 value with optional reverse-mode tape
// ============================================================================

namespace detail {

struct TensorNode {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;   // empty until backward touches this node
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward_fn;  // pulls node.grad into parents

    std::size_t numel() const { return data.size(); }

    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), 0.0);
    }
};

// thread-local depth counter; >0 disables graph construction
inline thread_local int no_grad_depth = 0;

}  // namespace detail

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

struct NoGradGuard {
    NoGradGuard() { ++detail::no_grad_depth; }
    ~NoGradGuard() { --detail::no_grad_depth; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return from_data(std::move(shape), {}, requires_grad, true);
    }

    static Tensor full(Shape shape, double v, bool requires_grad = false) {
        auto t = zeros(std::move(shape), requires_grad);
        std::fill(t.node_->data.begin(), t.node_->data.end(), v);
        return t;
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        auto t = zeros(Shape{}, requires_grad);
        t.node_->data[0] = v;
        return t;
    }

    static Tensor from_data(Shape shape, std::vector<double> data,
                            bool requires_grad = false, bool allow_empty = false) {
        auto node = std::make_shared<detail::TensorNode>();
        node->shape = std::move(shape);
        for (std::size_t e : node->shape)
            if (e == 0) throw ShapeError("tensor extents must be positive: " + shape_str(node->shape));
        const std::size_t n = shape_numel(node->shape);
        if (allow_empty && data.empty()) data.assign(n, 0.0);
        if (data.size() != n) {
            throw ShapeError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(node->shape));
        }
        node->data = std::move(data);
        node->requires_grad = requires_grad;
        Tensor t;
        t.node_ = std::move(node);
        return t;
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t numel() const { return node_->data.size(); }
    std::size_t extent(std::size_t axis) const { return node_->shape.at(axis); }

    // The handle is a shared reference; data mutation through a const handle
    // mirrors shared_ptr semantics.
    std::span<const double> data() const { return node_->data; }
    std::span<double> mutable_data() const { return node_->data; }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool v) {
        if (v && node_->backward_fn)
            throw std::logic_error("requires_grad may only be toggled on leaf tensors");
        node_->requires_grad = v;
    }

    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const double> grad() const { return node_->grad; }
    void zero_grad() const { std::fill(node_->grad.begin(), node_->grad.end(), 0.0); }
    void drop_grad() const { node_->grad.clear(); }

    double value() const {
        if (numel() != 1)
            throw ShapeError("value() requires a scalar tensor, got " + shape_str(shape()));
        return node_->data[0];
    }

    double at(std::initializer_list<std::size_t> idx) const {
        if (idx.size() != rank())
            throw ShapeError("index rank mismatch for shape " + shape_str(shape()));
        std::size_t flat = 0;
        auto it = idx.begin();
        for (std::size_t d = 0; d < rank(); ++d, ++it) {
            if (*it >= node_->shape[d]) throw std::out_of_range("tensor index out of range");
            flat = flat * node_->shape[d] + *it;
        }
        return node_->data[flat];
    }

    // New leaf with copied data and no tape participation.
    Tensor detach() const {
        return from_data(node_->shape, node_->data, false);
    }

    std::shared_ptr<detail::TensorNode> node() const { return node_; }

    friend Tensor make_op_result(Shape shape, std::vector<double> data,
                                 std::vector<Tensor> parents,
                                 std::function<void(detail::TensorNode&)> backward_fn);
    friend void backward(const Tensor& loss);

private:
    std::shared_ptr<detail::TensorNode> node_;
};

// Builds the result node of a differentiable op. The tape edge (parents +
// backward_fn) is recorded only when grad mode is on and some parent needs it.
inline Tensor make_op_result(Shape shape, std::vector<double> data,
                             std::vector<Tensor> parents,
                             std::function<void(detail::TensorNode&)> backward_fn) {
    Tensor t = Tensor::from_data(std::move(shape), std::move(data), false);
    bool needs = false;
    if (grad_enabled()) {
        for (const auto& p : parents)
            if (p.requires_grad()) { needs = true; break; }
    }
    if (needs) {
        t.node_->requires_grad = true;
        t.node_->parents.reserve(parents.size());
        for (auto& p : parents) t.node_->parents.push_back(p.node());
        t.node_->backward_fn = std::move(backward_fn);
    }
    return t;
}

// Reverse sweep from a scalar loss. Topological order is a deterministic
// depth-first post-order over each node's parents; every node is visited once
// and gradients accumulate additively across uses.
inline void backward(const Tensor& loss) {
    if (!loss.defined()) throw std::logic_error("backward on undefined tensor");
    if (loss.numel() != 1)
        throw ShapeError("backward requires a scalar loss, got " + shape_str(loss.shape()));

    using Node = detail::TensorNode;
    Node* root = loss.node_.get();
    if (!root->requires_grad) return;  // loss does not depend on any tracked leaf

    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root, 0);
    seen.insert(root);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* parent = node->parents[next++].get();
            if (parent->requires_grad && seen.insert(parent).second)
                stack.emplace_back(parent, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root->ensure_grad();
    root->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        if (node->backward_fn) node->backward_fn(*node);
    }
}

namespace detail {

inline std::span<double> parent_grad(TensorNode& node, std::size_t i) {
    TensorNode& p = *node.parents[i];
    p.ensure_grad();
    return p.grad;
}

inline bool parent_needs(TensorNode& node, std::size_t i) {
    return node.parents[i]->requires_grad;
}

}  // namespace detail

// ============================================================================
// Elementwise and scalar ops
// ============================================================================

namespace detail {

enum class BinKind { AddK, SubK, MulK, DivK };

inline Tensor binary_ew(const Tensor& a, const Tensor& b, BinKind kind, const char* name) {
    const bool same = a.shape() == b.shape();
    const bool a_scalar = a.numel() == 1;
    const bool b_scalar = b.numel() == 1;
    if (!same && !a_scalar && !b_scalar) {
        throw ShapeError(std::string(name) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()) + " (only scalar broadcast is supported)");
    }
    const Shape& out_shape = a_scalar && !same ? b.shape() : a.shape();
    const std::size_t n = shape_numel(out_shape);
    const auto av = a.data();
    const auto bv = b.data();
    std::vector<double> out(n);
    auto ai = [&](std::size_t i) { return av[a_scalar ? 0 : i]; };
    auto bi = [&](std::size_t i) { return bv[b_scalar ? 0 : i]; };
    switch (kind) {
        case BinKind::AddK: for (std::size_t i = 0; i < n; ++i) out[i] = ai(i) + bi(i); break;
        case BinKind::SubK: for (std::size_t i = 0; i < n; ++i) out[i] = ai(i) - bi(i); break;
        case BinKind::MulK: for (std::size_t i = 0; i < n; ++i) out[i] = ai(i) * bi(i); break;
        case BinKind::DivK: for (std::size_t i = 0; i < n; ++i) out[i] = ai(i) / bi(i); break;
    }

    return make_op_result(out_shape, std::move(out), {a, b},
        [kind, a_scalar, b_scalar, n](TensorNode& node) {
            const auto& dy = node.grad;
            const auto& ad = node.parents[0]->data;
            const auto& bd = node.parents[1]->data;
            auto aval = [&](std::size_t i) { return ad[a_scalar ? 0 : i]; };
            auto bval = [&](std::size_t i) { return bd[b_scalar ? 0 : i]; };
            if (parent_needs(node, 0)) {
                auto ga = parent_grad(node, 0);
                for (std::size_t i = 0; i < n; ++i) {
                    double g = 0.0;
                    switch (kind) {
                        case BinKind::AddK: g = dy[i]; break;
                        case BinKind::SubK: g = dy[i]; break;
                        case BinKind::MulK: g = dy[i] * bval(i); break;
                        case BinKind::DivK: g = dy[i] / bval(i); break;
                    }
                    ga[a_scalar ? 0 : i] += g;
                }
            }
            if (parent_needs(node, 1)) {
                auto gb = parent_grad(node, 1);
                for (std::size_t i = 0; i < n; ++i) {
                    double g = 0.0;
                    switch (kind) {
                        case BinKind::AddK: g = dy[i]; break;
                        case BinKind::SubK: g = -dy[i]; break;
                        case BinKind::MulK: g = dy[i] * aval(i); break;
                        case BinKind::DivK: {
                            const double b = bval(i);
                            g = -dy[i] * aval(i) / (b * b);
                            break;
                        }
                    }
                    gb[b_scalar ? 0 : i] += g;
                }
            }
        });
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) { return detail::binary_ew(a, b, detail::BinKind::AddK, "add"); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return detail::binary_ew(a, b, detail::BinKind::SubK, "sub"); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return detail::binary_ew(a, b, detail::BinKind::MulK, "mul"); }
inline Tensor div(const Tensor& a, const Tensor& b) { return detail::binary_ew(a, b, detail::BinKind::DivK, "div"); }

inline Tensor add_scalar(const Tensor& a, double c) {
    std::vector<double> out(a.data().begin(), a.data().end());
    for (auto& v : out) v += c;
    return make_op_result(a.shape(), std::move(out), {a}, [](detail::TensorNode& node) {
        if (!detail::parent_needs(node, 0)) return;
        auto g = detail::parent_grad(node, 0);
        for (std::size_t i = 0; i < node.grad.size(); ++i) g[i] += node.grad[i];
    });
}

inline Tensor mul_scalar(const Tensor& a, double c) {
    std::vector<double> out(a.data().begin(), a.data().end());
    for (auto& v : out) v *= c;
    return make_op_result(a.shape(), std::move(out), {a}, [c](detail::TensorNode& node) {
        if (!detail::parent_needs(node, 0)) return;
        auto g = detail::parent_grad(node, 0);
        for (std::size_t i = 0; i < node.grad.size(); ++i) g[i] += c * node.grad[i];
    });
}

inline Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

inline Tensor relu(const Tensor& a) {
    std::vector<double> out(a.numel());
    const auto av = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] > 0.0 ? av[i] : 0.0;
    return make_op_result(a.shape(), std::move(out), {a}, [](detail::TensorNode& node) {
        if (!detail::parent_needs(node, 0)) return;
        auto g = detail::parent_grad(node, 0);
        const auto& x = node.parents[0]->data;
        for (std::size_t i = 0; i < node.grad.size(); ++i)
            if (x[i] > 0.0) g[i] += node.grad[i];
    });
}

inline Tensor exp(const Tensor& a) {
    std::vector<double> out(a.numel());
    const auto av = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(av[i]);
    return make_op_result(a.shape(), std::move(out), {a}, [](detail::TensorNode& node) {
        if (!detail::parent_needs(node, 0)) return;
        auto g = detail::parent_grad(node, 0);
        for (std::size_t i = 0; i < node.grad.size(); ++i) g[i] += node.grad[i] * node.data[i];
    });
}

inline Tensor log(const Tensor& a) {
    std::vector<double> out(a.numel());
    const auto av = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (!(av[i] > 0.0))
            throw DegenerateInputError("log: input must be positive, got " + std::to_string(av[i]));
        out[i] = std::log(av[i]);
    }
    return make_op_result(a.shape(), std::move(out), {a}, [](detail::TensorNode& node) {
        if (!detail::parent_needs(node, 0)) return;
        auto g = detail::parent_grad(node, 0);
        const auto& x = node.parents[0]->data;
        for (std::size_t i = 0; i < node.grad.size(); ++i) g[i] += node.grad[i] / x[i];
    });
}

// y = sign(x) * max(|x|, eps), with sign(0) taken as +1. Gradient passes
// through unchanged where |x| >= eps and is zero inside the clamp band.
inline Tensor clamp_away_from_zero(const Tensor& a, double eps) {
    std::vector<double> out(a.numel());
    const auto av = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double x = av[i];
        if (std::abs(x) >= eps) out[i] = x;
        else out[i] = (x < 0.0) ? -eps : eps;
    }
    return make_op_result(a.shape(), std::move(out), {a}, [eps](detail::TensorNode& node) {
        if (!detail::parent_needs(node, 0)) return;
        auto g = detail::parent_grad(node, 0);
        const auto& x = node.parents[0]->data;
        for (std::size_t i = 0; i < node.grad.size(); ++i)
            if (std::abs(x[i]) >= eps) g[i] += node.grad[i];
    });
}

// ============================================================================
// Reductions
// ============================================================================

inline Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    return make_op_result(Shape{}, {s}, {a}, [](detail::TensorNode& node) {
        if (!detail::parent_needs(node, 0)) return;
        auto g = detail::parent_grad(node, 0);
        const double dy = node.grad[0];
        for (auto& gv : g) gv += dy;
    });
}

inline Tensor mean(const Tensor& a) {
    const double inv = 1.0 / static_cast<double>(a.numel());
    double s = 0.0;
    for (double v : a.data()) s += v;
    return make_op_result(Shape{}, {s * inv}, {a}, [inv](detail::TensorNode& node) {
        if (!detail::parent_needs(node, 0)) return;
        auto g = detail::parent_grad(node, 0);
        const double dy = node.grad[0] * inv;
        for (auto& gv : g) gv += dy;
    });
}

namespace detail {

inline Tensor reduce_last(const Tensor& a, bool take_mean, const char* name) {
    if (a.rank() == 0) throw ShapeError(std::string(name) + ": rank-0 input");
    const std::size_t inner = a.shape().back();
    const std::size_t outer = a.numel() / inner;
    Shape out_shape(a.shape().begin(), a.shape().end() - 1);
    std::vector<double> out(outer, 0.0);
    const auto av = a.data();
    for (std::size_t o = 0; o < outer; ++o) {
        double s = 0.0;
        for (std::size_t i = 0; i < inner; ++i) s += av[o * inner + i];
        out[o] = take_mean ? s / static_cast<double>(inner) : s;
    }
    return make_op_result(std::move(out_shape), std::move(out), {a},
        [inner, outer, take_mean](TensorNode& node) {
            if (!parent_needs(node, 0)) return;
            auto g = parent_grad(node, 0);
            const double scale = take_mean ? 1.0 / static_cast<double>(inner) : 1.0;
            for (std::size_t o = 0; o < outer; ++o) {
                const double dy = node.grad[o] * scale;
                for (std::size_t i = 0; i < inner; ++i) g[o * inner + i] += dy;
            }
        });
}

}  // namespace detail

inline Tensor sum_last(const Tensor& a) { return detail::reduce_last(a, false, "sum_last"); }
inline Tensor mean_last(const Tensor& a) { return detail::reduce_last(a, true, "mean_last"); }

// ============================================================================
// Shape ops
// ============================================================================

inline Tensor reshape(const Tensor& a, Shape new_shape) {
    if (shape_numel(new_shape) != a.numel()) {
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                         shape_str(new_shape));
    }
    std::vector<double> out(a.data().begin(), a.data().end());
    return make_op_result(std::move(new_shape), std::move(out), {a}, [](detail::TensorNode& node) {
        if (!detail::parent_needs(node, 0)) return;
        auto g = detail::parent_grad(node, 0);
        for (std::size_t i = 0; i < node.grad.size(); ++i) g[i] += node.grad[i];
    });
}

namespace detail {

inline std::vector<std::size_t> row_major_strides(const Shape& s) {
    std::vector<std::size_t> st(s.size(), 1);
    for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
    return st;
}

// out[i0,...,ik] = in[perm applied]; used by both directions of transpose.
inline void permute_copy(const Shape& in_shape, const double* in,
                         const std::vector<std::size_t>& perm, double* out) {
    const std::size_t rank = in_shape.size();
    Shape out_shape(rank);
    for (std::size_t i = 0; i < rank; ++i) out_shape[i] = in_shape[perm[i]];
    const auto in_strides = row_major_strides(in_shape);
    std::vector<std::size_t> out_to_in(rank);
    for (std::size_t i = 0; i < rank; ++i) out_to_in[i] = in_strides[perm[i]];
    const std::size_t n = shape_numel(in_shape);
    std::vector<std::size_t> idx(rank, 0);
    for (std::size_t flat = 0; flat < n; ++flat) {
        std::size_t src = 0;
        for (std::size_t d = 0; d < rank; ++d) src += idx[d] * out_to_in[d];
        out[flat] = in[src];
        for (std::size_t d = rank; d-- > 0;) {
            if (++idx[d] < out_shape[d]) break;
            idx[d] = 0;
        }
    }
}

}  // namespace detail

inline Tensor transpose(const Tensor& a, std::vector<std::size_t> perm) {
    if (perm.size() != a.rank())
        throw ShapeError("transpose: permutation rank " + std::to_string(perm.size()) +
                         " does not match tensor " + shape_str(a.shape()));
    std::vector<bool> hit(perm.size(), false);
    for (auto p : perm) {
        if (p >= perm.size() || hit[p]) throw ShapeError("transpose: invalid permutation");
        hit[p] = true;
    }
    Shape out_shape(a.rank());
    for (std::size_t i = 0; i < a.rank(); ++i) out_shape[i] = a.shape()[perm[i]];
    std::vector<double> out(a.numel());
    detail::permute_copy(a.shape(), a.data().data(), perm, out.data());

    std::vector<std::size_t> inv(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = i;
    return make_op_result(std::move(out_shape), std::move(out), {a},
        [inv](detail::TensorNode& node) {
            if (!detail::parent_needs(node, 0)) return;
            auto g = detail::parent_grad(node, 0);
            std::vector<double> tmp(node.grad.size());
            detail::permute_copy(node.shape, node.grad.data(), inv, tmp.data());
            for (std::size_t i = 0; i < tmp.size(); ++i) g[i] += tmp[i];
        });
}

inline Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw ShapeError("transpose: expected rank-2 tensor, got " + shape_str(a.shape()));
    return transpose(a, {1, 0});
}

inline Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t len) {
    if (axis >= a.rank()) throw ShapeError("slice: axis out of range for " + shape_str(a.shape()));
    if (start + len > a.shape()[axis] || len == 0)
        throw ShapeError("slice: range [" + std::to_string(start) + "," +
                         std::to_string(start + len) + ") invalid for " + shape_str(a.shape()));
    Shape out_shape = a.shape();
    out_shape[axis] = len;
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= a.shape()[d];
    for (std::size_t d = axis + 1; d < a.rank(); ++d) inner *= a.shape()[d];
    const std::size_t in_axis = a.shape()[axis];
    std::vector<double> out(outer * len * inner);
    const auto av = a.data();
    for (std::size_t o = 0; o < outer; ++o) {
        const double* src = av.data() + (o * in_axis + start) * inner;
        double* dst = out.data() + o * len * inner;
        std::copy(src, src + len * inner, dst);
    }
    return make_op_result(std::move(out_shape), std::move(out), {a},
        [outer, inner, len, in_axis, start](detail::TensorNode& node) {
            if (!detail::parent_needs(node, 0)) return;
            auto g = detail::parent_grad(node, 0);
            for (std::size_t o = 0; o < outer; ++o) {
                const double* src = node.grad.data() + o * len * inner;
                double* dst = g.data() + (o * in_axis + start) * inner;
                for (std::size_t i = 0; i < len * inner; ++i) dst[i] += src[i];
            }
        });
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const Shape& ref = parts[0].shape();
    if (axis >= ref.size()) throw ShapeError("concat: axis out of range for " + shape_str(ref));
    std::size_t axis_total = 0;
    for (const auto& p : parts) {
        if (p.rank() != ref.size()) throw ShapeError("concat: rank mismatch");
        for (std::size_t d = 0; d < ref.size(); ++d) {
            if (d != axis && p.shape()[d] != ref[d])
                throw ShapeError("concat: shape mismatch " + shape_str(p.shape()) + " vs " +
                                 shape_str(ref));
        }
        axis_total += p.shape()[axis];
    }
    Shape out_shape = ref;
    out_shape[axis] = axis_total;
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= ref[d];
    for (std::size_t d = axis + 1; d < ref.size(); ++d) inner *= ref[d];

    std::vector<double> out(outer * axis_total * inner);
    std::vector<std::size_t> axis_sizes;
    axis_sizes.reserve(parts.size());
    std::size_t offset = 0;
    for (const auto& p : parts) {
        const std::size_t alen = p.shape()[axis];
        axis_sizes.push_back(alen);
        const auto pv = p.data();
        for (std::size_t o = 0; o < outer; ++o) {
            const double* src = pv.data() + o * alen * inner;
            double* dst = out.data() + (o * axis_total + offset) * inner;
            std::copy(src, src + alen * inner, dst);
        }
        offset += alen;
    }
    return make_op_result(std::move(out_shape), std::move(out), parts,
        [outer, inner, axis_total, axis_sizes](detail::TensorNode& node) {
            std::size_t offset = 0;
            for (std::size_t pi = 0; pi < axis_sizes.size(); ++pi) {
                const std::size_t alen = axis_sizes[pi];
                if (detail::parent_needs(node, pi)) {
                    auto g = detail::parent_grad(node, pi);
                    for (std::size_t o = 0; o < outer; ++o) {
                        const double* src = node.grad.data() + (o * axis_total + offset) * inner;
                        double* dst = g.data() + o * alen * inner;
                        for (std::size_t i = 0; i < alen * inner; ++i) dst[i] += src[i];
                    }
                }
                offset += alen;
            }
        });
}

inline Tensor stop_gradient(const Tensor& a) { return a.detach(); }

}  // namespace gcisg
