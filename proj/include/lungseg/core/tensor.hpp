#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "lungseg/core/shape.hpp"

namespace lungseg {

template <typename T>
class Tensor;

namespace detail {

// One recorded primitive application. Parents always carry a smaller seq
// than their consumers, so descending seq is a reverse topological order.
template <typename T>
struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // empty until backward (or an optimizer) needs it
    bool requires_grad = false;
    std::uint64_t seq = 0;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(const std::vector<T>&)> backward;

    bool tracked() const { return requires_grad || !parents.empty(); }
    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    }
};

inline std::uint64_t next_seq() {
    static std::atomic<std::uint64_t> counter{0};
    return ++counter;
}

inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

}  // namespace detail

// Disables graph recording for the enclosing scope (validation passes,
// finite-difference re-evaluations, inference).
struct NoGradGuard {
    NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

// Value handle over a graph node. Values are immutable once produced by an
// op; only leaves (parameters, state buffers) may be mutated in place.
template <typename T>
class Tensor {
public:
    using Node = detail::Node<T>;

    Tensor() = default;

    static Tensor zeros(Shape s, bool requires_grad = false) {
        return from(s, std::vector<T>(s.numel(), T(0)), requires_grad);
    }
    static Tensor full(Shape s, T v, bool requires_grad = false) {
        return from(s, std::vector<T>(s.numel(), v), requires_grad);
    }
    static Tensor from(Shape s, std::vector<T> data, bool requires_grad = false) {
        require(data.size() == s.numel(),
                "tensor: data length " + std::to_string(data.size()) +
                    " != numel of shape " + s.str());
        auto n = std::make_shared<Node>();
        n->shape = s;
        n->value = std::move(data);
        n->requires_grad = requires_grad;
        n->seq = detail::next_seq();
        return Tensor(std::move(n));
    }
    static Tensor scalar(T v) { return full(Shape{1, 1, 1, 1}, v); }

    // Op-result constructor. Records parents and the backward closure only
    // while grad mode is on and at least one parent is tracked.
    static Tensor make_op(Shape s, std::vector<T> value,
                          std::vector<Tensor> parents,
                          std::function<void(const std::vector<T>&)> backward) {
        auto n = std::make_shared<Node>();
        n->shape = s;
        n->value = std::move(value);
        n->seq = detail::next_seq();
        if (detail::grad_mode()) {
            bool any_tracked = false;
            for (const auto& p : parents) any_tracked = any_tracked || p.tracked();
            if (any_tracked) {
                for (auto& p : parents) n->parents.push_back(p.node_);
                n->backward = std::move(backward);
            }
        }
        return Tensor(std::move(n));
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t numel() const { return node_->value.size(); }

    const std::vector<T>& value() const { return node_->value; }
    // In-place access for leaves: weight init, optimizer updates, running
    // statistics. Never call on an op result.
    std::vector<T>& mutable_value() { return node_->value; }

    bool requires_grad() const { return node_->requires_grad; }
    bool tracked() const { return node_->tracked(); }

    bool has_grad() const { return node_->grad.size() == node_->value.size(); }
    const std::vector<T>& grad() const { return node_->grad; }
    std::vector<T>& grad_buffer() {
        node_->ensure_grad();
        return node_->grad;
    }
    void clear_grad() { node_->grad.clear(); }
    void zero_grad() { node_->grad.assign(node_->value.size(), T(0)); }

    T item() const {
        require(numel() == 1, "item: tensor " + shape().str() + " is not scalar");
        return node_->value[0];
    }
    T at(int n, int c, int h, int w) const {
        return node_->value[node_->shape.index(n, c, h, w)];
    }

    bool all_finite() const {
        for (T v : node_->value)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    // Same value, cut loose from the graph.
    Tensor detach() const { return from(shape(), node_->value); }

    Node* node() const { return node_.get(); }

private:
    explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}
    std::shared_ptr<Node> node_;
};

// Reverse-mode sweep from a scalar loss. Populates grad on every tracked
// node reachable through the recorded graph, leaves included.
template <typename T>
void backward(const Tensor<T>& loss) {
    require(loss.numel() == 1,
            "backward: loss must be scalar, got " + loss.shape().str());
    using Node = detail::Node<T>;

    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<Node*> stack{loss.node()};
    seen.insert(loss.node());
    while (!stack.empty()) {
        Node* n = stack.back();
        stack.pop_back();
        order.push_back(n);
        for (const auto& p : n->parents)
            if (seen.insert(p.get()).second) stack.push_back(p.get());
    }
    std::sort(order.begin(), order.end(),
              [](const Node* a, const Node* b) { return a->seq > b->seq; });

    for (Node* n : order) n->ensure_grad();
    loss.node()->grad[0] += T(1);

    for (Node* n : order)
        if (n->backward) n->backward(n->grad);
}

}  // namespace lungseg
