#pragma once

// Dense row-major tensors with a dynamically recorded reverse-mode graph.
//
// A Tensor is a cheap handle onto a shared Node. Values are immutable once an op
// has produced them; only leaves (parameters, inputs) may be written in place,
// and only the grad slot is mutated during backward.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dit4sr/errors.hpp"

namespace dit4sr {

inline std::size_t numel_of(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

namespace detail {
inline thread_local bool grad_mode = true;
}

/// Disables graph recording for its lifetime (evaluation, finite differences).
class NoGradGuard {
public:
    NoGradGuard() : prev_(detail::grad_mode) { detail::grad_mode = false; }
    ~NoGradGuard() { detail::grad_mode = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

inline bool grad_enabled() { return detail::grad_mode; }

template <class T>
struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> inputs;
    // Reads this node's grad and accumulates into the inputs' grads.
    std::function<void(Node&)> backward;

    T* grad_data() {
        if (grad.empty()) grad.assign(value.size(), T{0});
        return grad.data();
    }
    bool is_leaf() const { return inputs.empty(); }
};

template <class T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T{0}) : node_(std::make_shared<Node<T>>()) {
        node_->value.assign(numel_of(shape), fill);
        node_->shape = std::move(shape);
    }

    Tensor(Shape shape, std::vector<T> values) : node_(std::make_shared<Node<T>>()) {
        if (numel_of(shape) != values.size())
            throw DimensionError("tensor " + shape_str(shape) + " needs " + std::to_string(numel_of(shape)) +
                                 " values, got " + std::to_string(values.size()));
        node_->shape = std::move(shape);
        node_->value = std::move(values);
    }

    static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
    static Tensor full(Shape s, T v) { return Tensor(std::move(s), v); }
    static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t numel() const { return node_->value.size(); }

    std::span<const T> data() const { return node_->value; }
    const T* ptr() const { return node_->value.data(); }
    T operator[](std::size_t i) const { return node_->value[i]; }
    T item() const {
        if (numel() != 1) throw ContractError("item() on tensor " + shape_str(shape()));
        return node_->value[0];
    }

    /// In-place write access; only leaves qualify, since op outputs are saved by the graph.
    std::span<T> mutable_data() {
        if (!node_->is_leaf()) throw ContractError("in-place write to a non-leaf tensor");
        return node_->value;
    }

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool on = true) {
        if (!node_->is_leaf()) throw ContractError("requires_grad can only be set on leaves");
        node_->requires_grad = on;
        return *this;
    }

    bool has_grad() const { return !node_->grad.empty(); }
    /// Gradient values; zeros if backward never reached this tensor.
    std::vector<T> grad() const {
        if (node_->grad.empty()) return std::vector<T>(numel(), T{0});
        return node_->grad;
    }
    std::span<T> grad_span() { return {node_->grad_data(), numel()}; }
    void zero_grad() { node_->grad.clear(); }

    /// Fresh leaf holding a copy of the values; cuts the graph.
    Tensor detach() const { return Tensor(shape(), node_->value); }

    Node<T>* node() const { return node_.get(); }
    const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

    static Tensor from_node(std::shared_ptr<Node<T>> n) {
        Tensor t;
        t.node_ = std::move(n);
        return t;
    }

    bool same_object(const Tensor& o) const { return node_ == o.node_; }

private:
    std::shared_ptr<Node<T>> node_;
};

namespace detail {

/// Builds an op output. When recording is active and any input requires grad,
/// the node keeps its inputs and the returned flag says the caller must attach
/// a backward closure.
template <class T>
std::pair<Tensor<T>, bool> make_result(Shape shape, std::vector<T> value, std::initializer_list<Tensor<T>> inputs,
                                       const char* op) {
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->op = op;
    bool record = false;
    if (grad_enabled())
        for (const auto& in : inputs) record = record || in.requires_grad();
    if (record) {
        n->requires_grad = true;
        for (const auto& in : inputs) n->inputs.push_back(in.node_ptr());
    }
    return {Tensor<T>::from_node(std::move(n)), record};
}

template <class T>
std::pair<Tensor<T>, bool> make_result(Shape shape, std::vector<T> value, const std::vector<Tensor<T>>& inputs,
                                       const char* op) {
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->op = op;
    bool record = false;
    if (grad_enabled())
        for (const auto& in : inputs) record = record || in.requires_grad();
    if (record) {
        n->requires_grad = true;
        for (const auto& in : inputs) n->inputs.push_back(in.node_ptr());
    }
    return {Tensor<T>::from_node(std::move(n)), record};
}

// Inputs that do not require grad are still kept in `inputs` so closures can
// index them positionally; their grads are simply never read.
template <class T>
inline bool wants_grad(const Node<T>& n) {
    return n.requires_grad;
}

/// Post-order over the recorded graph: inputs precede the nodes that consume them.
template <class T>
std::vector<Node<T>*> topological_order(Node<T>* root) {
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> visited;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{root, 0}};
    visited.insert(root);
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->inputs.size()) {
            Node<T>* child = n->inputs[next++].get();
            if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    return order;
}

}  // namespace detail

/// Populates grad of every requires_grad leaf reachable from `loss` with d loss / d leaf.
/// Gradients accumulate additively into existing leaf grads. Unless `retain_graph`,
/// interior nodes drop their closures and saved inputs afterwards.
template <class T>
void backward(const Tensor<T>& loss, bool retain_graph = false) {
    if (loss.numel() != 1) throw ContractError("backward() needs a scalar loss, got " + shape_str(loss.shape()));
    if (!loss.requires_grad()) throw ContractError("backward() on a tensor that does not depend on any parameter");
    Node<T>* root = loss.node();
    auto order = detail::topological_order(root);
    // The root may be a leaf whose grad already holds something; seed additively.
    if (root->is_leaf()) {
        root->grad_data()[0] += T{1};
        return;
    }
    root->grad.assign(1, T{1});
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->is_leaf() || !n->backward || n->grad.empty()) continue;
        n->backward(*n);
    }
    if (!retain_graph) {
        for (Node<T>* n : order) {
            if (n->is_leaf()) continue;
            n->backward = nullptr;
            n->inputs.clear();
            n->grad.clear();
            n->grad.shrink_to_fit();
        }
    }
}

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every element of leaf `x`.
template <class T, class F>
std::vector<T> finite_diff_grad(F&& f, Tensor<T>& x, T h) {
    NoGradGuard guard;
    auto data = x.mutable_data();
    std::vector<T> out(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
        const T orig = data[i];
        data[i] = orig + h;
        const T fp = f().item();
        data[i] = orig - h;
        const T fm = f().item();
        data[i] = orig;
        out[i] = (fp - fm) / (T{2} * h);
    }
    return out;
}

struct GradCheckResult {
    double worst_rel = 0;  // over elements whose magnitude is at least `small`
    double worst_abs = 0;  // over elements below `small`
    std::size_t checked = 0;
    bool passed(double rel_tol, double abs_tol) const { return worst_rel < rel_tol && worst_abs < abs_tol; }
};

/// Compares analytic and numeric gradients elementwise; elements where both are
/// below `small` in magnitude are judged by absolute error instead of relative.
template <class T>
void accumulate_grad_error(GradCheckResult& r, std::span<const T> analytic, std::span<const T> numeric,
                           double small = 1e-8) {
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        const double a = static_cast<double>(analytic[i]);
        const double n = static_cast<double>(numeric[i]);
        const double mag = std::max(std::abs(a), std::abs(n));
        if (mag < small)
            r.worst_abs = std::max(r.worst_abs, std::abs(a - n));
        else
            r.worst_rel = std::max(r.worst_rel, std::abs(a - n) / mag);
        ++r.checked;
    }
}

}  // namespace dit4sr
