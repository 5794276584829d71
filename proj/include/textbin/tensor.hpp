#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "textbin/errors.hpp"

namespace textbin {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "x" : "") << shape[i];
    out << ']';
    return out.str();
}

namespace detail {

struct Node {
    Shape shape;
    std::vector<float> data;
    std::vector<float> grad;  // empty until something accumulates into it
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;
    const char* op = "leaf";
    // Reductions keep their double accumulator here; only the grad checker reads it.
    double extended = std::numeric_limits<double>::quiet_NaN();

    bool has_grad() const { return !grad.empty(); }

    std::span<float> grad_buffer() {
        if (grad.empty()) grad.assign(data.size(), 0.0f);
        return grad;
    }

    // The first contribution is copied rather than added so that a single
    // upstream gradient arrives bitwise intact (0 + -0 would flip the sign).
    void accumulate(std::span<const float> g) {
        if (grad.empty()) {
            grad.assign(g.begin(), g.end());
            return;
        }
        for (std::size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
    }
};

inline void check_finite(std::span<const float> values, const char* what) {
    for (float v : values) {
        if (!std::isfinite(v)) throw NumericError(std::string("non-finite value in ") + what);
    }
}

}  // namespace detail

/// Dense row-major float32 tensor with an optional gradient buffer.
///
/// Tensors are handles: copying one shares the underlying storage. Operations
/// that involve a tensor with requires_grad record a backward closure on the
/// result, and backward() on a scalar walks those closures in reverse
/// topological order.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, float fill = 0.0f, bool requires_grad = false)
        : node_(std::make_shared<detail::Node>()) {
        for (std::size_t d : shape) {
            if (d == 0) throw DimensionError("tensor dimensions must be positive: " + shape_str(shape));
        }
        node_->data.assign(shape_numel(shape), fill);
        node_->shape = std::move(shape);
        node_->requires_grad = requires_grad;
    }

    Tensor(Shape shape, std::vector<float> data, bool requires_grad = false)
        : node_(std::make_shared<detail::Node>()) {
        for (std::size_t d : shape) {
            if (d == 0) throw DimensionError("tensor dimensions must be positive: " + shape_str(shape));
        }
        if (shape_numel(shape) != data.size()) {
            throw DimensionError("data length " + std::to_string(data.size()) + " does not match shape " +
                                 shape_str(shape));
        }
        node_->shape = std::move(shape);
        node_->data = std::move(data);
        node_->requires_grad = requires_grad;
    }

    static Tensor scalar(float value, bool requires_grad = false) {
        return Tensor(Shape{1}, std::vector<float>{value}, requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
    std::size_t numel() const { return node_->data.size(); }

    std::span<float> data() { return node_->data; }
    std::span<const float> data() const { return node_->data; }
    const std::vector<float>& values() const { return node_->data; }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool value) { node_->requires_grad = value; }

    bool has_grad() const { return node_->has_grad(); }
    /// Gradient view; empty span when nothing has been accumulated.
    std::span<const float> grad() const { return node_->grad; }
    std::span<float> mutable_grad() { return node_->grad_buffer(); }
    void zero_grad() { node_->grad.clear(); }

    float item() const {
        if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
        return node_->data[0];
    }

    /// Scalar value at the precision the producing reduction accumulated in.
    double item_extended() const {
        const double e = node_->extended;
        return std::isnan(e) ? double(item()) : e;
    }

    /// Copy of the values with no history.
    Tensor detach() const { return Tensor(shape(), node_->data, false); }

    const char* op_name() const { return node_->op; }

    /// Reverse-mode sweep from a scalar. Gradients accumulate into every leaf
    /// that requires them.
    void backward() {
        if (numel() != 1) throw DimensionError("backward() requires a scalar, got " + shape_str(shape()));
        if (!requires_grad()) return;
        std::vector<detail::Node*> order;
        std::unordered_set<detail::Node*> seen;
        // Iterative post-order DFS; recursion depth would scale with graph depth.
        std::vector<std::pair<detail::Node*, std::size_t>> stack{{node_.get(), 0}};
        seen.insert(node_.get());
        while (!stack.empty()) {
            auto& [node, next] = stack.back();
            if (next < node->parents.size()) {
                detail::Node* parent = node->parents[next++].get();
                if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
            } else {
                order.push_back(node);
                stack.pop_back();
            }
        }
        std::vector<float> seed{1.0f};
        node_->accumulate(seed);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            detail::Node* node = *it;
            if (!node->backward || !node->has_grad()) continue;
            detail::check_finite(node->grad, node->op);
            node->backward(*node);
        }
        for (detail::Node* node : order) {
            if (!node->backward && node->has_grad()) detail::check_finite(node->grad, "leaf gradient");
        }
    }

    /// Drops the recorded history so intermediate buffers can be released.
    void release_graph() {
        node_->parents.clear();
        node_->backward = nullptr;
    }

    const std::shared_ptr<detail::Node>& node() const { return node_; }

private:
    std::shared_ptr<detail::Node> node_;
};

namespace detail {

/// Builds an op result. The backward closure only runs when at least one
/// input requires a gradient; otherwise the result is a plain constant.
inline Tensor make_result(Shape shape, std::vector<float> data, std::initializer_list<const Tensor*> inputs,
                          const char* op, std::function<void(Node&)> backward) {
    check_finite(data, op);
    Tensor out(std::move(shape), std::move(data));
    bool needs = false;
    for (const Tensor* in : inputs) needs = needs || in->requires_grad();
    if (needs) {
        auto& node = *out.node();
        node.requires_grad = true;
        for (const Tensor* in : inputs) node.parents.push_back(in->node());
        node.backward = std::move(backward);
    }
    out.node()->op = op;
    return out;
}

inline Tensor with_extended(Tensor t, double value) {
    t.node()->extended = value;
    return t;
}

}  // namespace detail

inline bool same_values(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return false;
    auto x = a.data();
    auto y = b.data();
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (std::bit_cast<std::uint32_t>(x[i]) != std::bit_cast<std::uint32_t>(y[i])) return false;
    }
    return true;
}

}  // namespace textbin
