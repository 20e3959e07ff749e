#pragma once

// Minimal reverse-mode automatic differentiation over dense tensors.
//
// A Var is a handle to a graph node. Operations on Vars that require
// gradients record a backward closure and keep their parents alive; the
// graph is released when the last handle to its root goes away.

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "synthid/tensor.hpp"

namespace synthid::ag {

template <typename T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;
    bool requires_grad = false;

    Tensor<T>& grad_buffer() {
        if (grad.size() != value.size() || grad.shape != value.shape) grad = Tensor<T>(value.shape);
        return grad;
    }

    /// Gradient buffer of parent i, or nullptr when that parent is frozen.
    Tensor<T>* parent_grad(std::size_t i) {
        auto& p = parents[i];
        return (p && p->requires_grad) ? &p->grad_buffer() : nullptr;
    }
    const Tensor<T>& parent_value(std::size_t i) const { return parents[i]->value; }
};

template <typename T>
class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

    static Var constant(Tensor<T> v) {
        auto n = std::make_shared<Node<T>>();
        n->value = std::move(v);
        return Var(std::move(n));
    }
    static Var leaf(Tensor<T> v, bool requires_grad = true) {
        auto n = std::make_shared<Node<T>>();
        n->value = std::move(v);
        n->requires_grad = requires_grad;
        return Var(std::move(n));
    }

    bool defined() const noexcept { return static_cast<bool>(node_); }
    const Tensor<T>& value() const { return node_->value; }
    Tensor<T>& mutable_value() { return node_->value; }
    Tensor<T>& grad() { return node_->grad_buffer(); }
    const Shape& shape() const { return node_->value.shape; }
    int dim(int i) const { return node_->value.dim(i); }
    std::size_t size() const { return node_->value.size(); }
    T item() const { return node_->value.data.at(0); }

    bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
    void set_requires_grad(bool on) { node_->requires_grad = on; }
    void zero_grad() {
        if (node_->grad.size()) node_->grad.fill(T(0));
    }

    /// Copy of the value with no history.
    Var detach() const { return constant(node_->value); }

    Node<T>* node() const noexcept { return node_.get(); }
    const std::shared_ptr<Node<T>>& shared() const noexcept { return node_; }

private:
    std::shared_ptr<Node<T>> node_;
};

/// Record an operation. The closure runs only if some parent needs gradients.
template <typename T, typename F>
Var<T> make_op(Tensor<T> value, std::initializer_list<Var<T>> parents, F&& fn) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    for (const auto& p : parents) {
        if (p.defined() && p.requires_grad()) n->requires_grad = true;
    }
    if (n->requires_grad) {
        n->parents.reserve(parents.size());
        for (const auto& p : parents) n->parents.push_back(p.shared());
        n->backward = std::forward<F>(fn);
    }
    return Var<T>(std::move(n));
}

template <typename T, typename F>
Var<T> make_op(Tensor<T> value, const std::vector<Var<T>>& parents, F&& fn) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    for (const auto& p : parents) {
        if (p.requires_grad()) n->requires_grad = true;
    }
    if (n->requires_grad) {
        for (const auto& p : parents) n->parents.push_back(p.shared());
        n->backward = std::forward<F>(fn);
    }
    return Var<T>(std::move(n));
}

/// Propagate `seed` (same shape as root) back through the graph.
template <typename T>
void backward(const Var<T>& root, const Tensor<T>& seed) {
    if (!root.requires_grad()) return;
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    // Iterative post-order DFS; graphs from deep nets overflow recursion easily.
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.node(), 0}};
    seen.insert(root.node());
    while (!stack.empty()) {
        auto& [n, i] = stack.back();
        if (i < n->parents.size()) {
            Node<T>* p = n->parents[i++].get();
            if (p && p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    auto& g = root.node()->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->backward && n->grad.size()) n->backward(*n);
    }
}

/// Backward from a scalar root with seed 1.
template <typename T>
void backward(const Var<T>& root) {
    if (root.size() != 1) throw ConfigError("backward(): root must be scalar, got " + shape_str(root.shape()));
    backward(root, Tensor<T>(root.shape(), T(1)));
}

} // namespace synthid::ag
