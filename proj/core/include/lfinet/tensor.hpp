#pragma once

#include <algorithm>
#include <functional>
#include <memory>
#include <span>
#include <unordered_set>
#include <vector>

#include "lfinet/common.hpp"

namespace lfinet {

// Thread-local switch for gradient recording. Forward passes run inside a
// NoGradGuard when the graph is not needed (inference, finite differences).
struct GradMode {
    static bool& flag() {
        thread_local bool enabled = true;
        return enabled;
    }
    static bool enabled() { return flag(); }
};

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(GradMode::flag()) { GradMode::flag() = false; }
    ~NoGradGuard() { GradMode::flag() = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

namespace detail {

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // empty until touched; same size as value afterwards
    bool requires_grad = false;
    bool is_leaf = true;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    void ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), T(0));
    }
};

}  // namespace detail

// Dense N-d array participating in a reverse-mode differentiation graph.
// Copying a Tensor copies the handle, not the storage. The scalar type is the
// dtype: the float instantiation trains, the double one drives gradient
// checks through the exact same code paths.
template <typename T>
class Tensor {
public:
    using Node = detail::Node<T>;

    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return filled(std::move(shape), T(0), requires_grad);
    }

    static Tensor filled(Shape shape, T value, bool requires_grad = false) {
        Tensor t;
        t.node_ = std::make_shared<Node>();
        t.node_->shape = std::move(shape);
        t.node_->value.assign(static_cast<size_t>(lfinet::numel(t.node_->shape)), value);
        t.node_->requires_grad = requires_grad;
        if (requires_grad) t.node_->ensure_grad();
        return t;
    }

    static Tensor from_data(Shape shape, std::vector<T> data, bool requires_grad = false) {
        require(lfinet::numel(shape) == static_cast<index_t>(data.size()),
                "tensor: shape ", shape_str(shape), " does not match ", data.size(), " values");
        Tensor t;
        t.node_ = std::make_shared<Node>();
        t.node_->shape = std::move(shape);
        t.node_->value = std::move(data);
        t.node_->requires_grad = requires_grad;
        if (requires_grad) t.node_->ensure_grad();
        return t;
    }

    static Tensor scalar(T value) { return from_data({1}, {value}); }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    index_t dim(size_t i) const { return node_->shape[i]; }
    size_t ndim() const { return node_->shape.size(); }
    index_t numel() const { return static_cast<index_t>(node_->value.size()); }

    std::span<T> data() { return {node_->value.data(), node_->value.size()}; }
    std::span<const T> data() const { return {node_->value.data(), node_->value.size()}; }

    bool requires_grad() const { return node_ && node_->requires_grad; }
    bool is_leaf() const { return node_->is_leaf; }

    // Marks a leaf as trainable. Only valid before the tensor is used in ops.
    Tensor& set_requires_grad(bool on = true) {
        require(node_->is_leaf, "set_requires_grad: only leaves can change trainability");
        node_->requires_grad = on;
        if (on) node_->ensure_grad();
        return *this;
    }

    std::span<const T> grad() const {
        const_cast<Node*>(node_.get())->ensure_grad();
        return {node_->grad.data(), node_->grad.size()};
    }
    std::span<T> grad_mut() {
        node_->ensure_grad();
        return {node_->grad.data(), node_->grad.size()};
    }

    void zero_grad() {
        node_->ensure_grad();
        std::fill(node_->grad.begin(), node_->grad.end(), T(0));
    }

    T item() const {
        require(numel() == 1, "item: tensor has ", numel(), " values, expected 1");
        return node_->value[0];
    }

    // Reverse pass from a scalar. Visits each reachable node exactly once in
    // reverse topological order; contributions accumulate by summation.
    void backward() const {
        require(numel() == 1, "backward: seed tensor must be scalar, got ", shape_str(shape()));
        backward_with_seed(std::vector<T>{T(1)});
    }

    void backward_with_seed(std::vector<T> seed) const {
        require(static_cast<index_t>(seed.size()) == numel(),
                "backward: seed size ", seed.size(), " does not match ", numel(), " outputs");
        std::vector<Node*> order;
        topo_sort(order);
        node_->ensure_grad();
        for (size_t i = 0; i < seed.size(); ++i) node_->grad[i] += seed[i];
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            Node* n = *it;
            if (n->backward && !n->grad.empty()) n->backward(*n);
        }
    }

    std::shared_ptr<Node> node() const { return node_; }

    // Detached copy of values: a fresh leaf outside any graph.
    Tensor detach_copy() const {
        Tensor t;
        t.node_ = std::make_shared<Node>();
        t.node_->shape = node_->shape;
        t.node_->value = node_->value;
        return t;
    }

    // Internal: build a graph-producing op result in one step.
    static Tensor make_result(Shape shape, std::vector<T> value,
                              std::vector<std::shared_ptr<Node>> parents,
                              std::function<void(Node&)> backward) {
        Tensor t;
        t.node_ = std::make_shared<Node>();
        t.node_->shape = std::move(shape);
        t.node_->value = std::move(value);
        bool track = GradMode::enabled();
        bool any = false;
        if (track) {
            for (const auto& p : parents)
                if (p->requires_grad) { any = true; break; }
        }
        if (track && any) {
            t.node_->requires_grad = true;
            t.node_->is_leaf = false;
            t.node_->parents = std::move(parents);
            t.node_->backward = std::move(backward);
        }
        return t;
    }

private:
    void topo_sort(std::vector<Node*>& order) const {
        std::unordered_set<Node*> seen;
        std::vector<std::pair<Node*, size_t>> stack;
        stack.emplace_back(node_.get(), 0);
        seen.insert(node_.get());
        while (!stack.empty()) {
            auto& [n, next] = stack.back();
            if (next < n->parents.size()) {
                Node* p = n->parents[next++].get();
                if (seen.insert(p).second) stack.emplace_back(p, 0);
            } else {
                order.push_back(n);
                stack.pop_back();
            }
        }
    }

    std::shared_ptr<Node> node_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

// Accumulates `src` into the parent's gradient buffer.
template <typename T>
inline void accumulate_grad(detail::Node<T>& parent, std::span<const T> src) {
    parent.ensure_grad();
    T* g = parent.grad.data();
    for (size_t i = 0; i < src.size(); ++i) g[i] += src[i];
}

}  // namespace lfinet
