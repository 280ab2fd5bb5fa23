#pragma once

// Minimal reverse-mode automatic differentiation over Tensor<T>.
//
// Every op produces a Var whose node remembers its parents and a closure that
// pushes the node's gradient into them. backward() walks the graph in reverse
// topological order. Leaves created with requires_grad keep their gradient
// after the walk; intermediate gradients are released as soon as they have
// been propagated.

#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "palgan/tensor.hpp"

namespace palgan {

namespace detail {
inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode(); }

/// Disables graph construction for the current thread while alive.
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

template <class T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    /// Gradient buffer, zero-initialised on first touch.
    Tensor<T>& grad_ref() {
        if (grad.size() != value.size()) grad = Tensor<T>(value.shape());
        return grad;
    }
};

template <class T>
class Var {
public:
    Var() = default;
    explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
        node_->value = std::move(value);
        node_->requires_grad = requires_grad;
    }
    explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

    bool defined() const noexcept { return static_cast<bool>(node_); }
    const Tensor<T>& value() const { return node_->value; }
    Tensor<T>& mutable_value() { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }
    int dim(int i) const { return node_->value.dim(i); }
    std::size_t size() const { return node_->value.size(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }

    /// Gradient accumulated by backward(); zeros if none reached this node.
    const Tensor<T>& grad() const { return node_->grad_ref(); }
    Tensor<T>& mutable_grad() { return node_->grad_ref(); }
    void zero_grad() {
        if (!node_->grad.empty()) node_->grad.fill(T(0));
    }

    /// Scalar value of a single-element Var.
    T item() const {
        if (size() != 1) throw ValidationError("item() on tensor of shape " + shape_string(shape()));
        return node_->value[0];
    }

    Node<T>* node() const noexcept { return node_.get(); }
    const std::shared_ptr<Node<T>>& ptr() const noexcept { return node_; }

private:
    std::shared_ptr<Node<T>> node_;
};

/// Builds the result of an op. The backward closure is attached only when
/// grad mode is on and some parent needs a gradient.
template <class T>
Var<T> make_result(Tensor<T> value, std::vector<Var<T>> parents, std::function<void(Node<T>&)> backward_fn) {
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(value);
    if (grad_enabled()) {
        bool any = false;
        for (const auto& p : parents) any = any || p.requires_grad();
        if (any) {
            node->requires_grad = true;
            node->parents.reserve(parents.size());
            for (auto& p : parents) node->parents.push_back(p.ptr());
            node->backward_fn = std::move(backward_fn);
        }
    }
    return Var<T>(std::move(node));
}

/// Parent `i` of `self` if it wants a gradient, else nullptr.
template <class T>
Tensor<T>* parent_grad(Node<T>& self, std::size_t i) {
    auto& p = self.parents[i];
    return (p && p->requires_grad) ? &p->grad_ref() : nullptr;
}

/// Reverse-mode sweep from a single-element root.
template <class T>
void backward(const Var<T>& root) {
    if (root.size() != 1) throw ValidationError("backward() needs a scalar root, got " + shape_string(root.shape()));
    if (!root.requires_grad()) return;

    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.node(), 0}};
    seen.insert(root.node());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node<T>* p = node->parents[next++].get();
            if (p && p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root.node()->grad_ref()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* node = *it;
        if (!node->backward_fn) continue;
        if (node->grad.empty()) continue;
        node->backward_fn(*node);
        node->grad = Tensor<T>();
    }
}

}  // namespace palgan
