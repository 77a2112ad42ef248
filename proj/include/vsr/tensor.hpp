#pragma once

// Rank-N tensor with reverse-mode automatic differentiation.
//
// A Tensor is a shared handle onto a graph node. Operations in ops.hpp build
// new nodes whose backward closures push gradients into their parents.
// backward() accumulates into leaf gradients; call zero_grad() between steps.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace vsr {

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class ContractError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

class StateError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class Mode { train, eval };

using Rng = std::mt19937_64;
using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape)
{
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape)
{
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace detail {

inline bool& grad_mode()
{
    thread_local bool enabled = true;
    return enabled;
}

inline bool& validation_mode()
{
    thread_local bool enabled = false;
    return enabled;
}

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void()> backward;

    bool is_leaf() const { return !backward; }

    std::vector<T>& grad_buffer()
    {
        if (grad.size() != data.size()) grad.assign(data.size(), T(0));
        return grad;
    }
};

} // namespace detail

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

/// While alive, every forward op checks its output for NaN/Inf and throws ContractError.
class ValidationGuard {
public:
    ValidationGuard() : previous_(detail::validation_mode()) { detail::validation_mode() = true; }
    ~ValidationGuard() { detail::validation_mode() = previous_; }
    ValidationGuard(const ValidationGuard&) = delete;
    ValidationGuard& operator=(const ValidationGuard&) = delete;

private:
    bool previous_;
};

template <typename T>
class Tensor {
public:
    using value_type = T;
    using NodePtr = std::shared_ptr<detail::Node<T>>;

    Tensor() = default;

    Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
        : node_(std::make_shared<detail::Node<T>>())
    {
        for (auto d : shape)
            if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + to_string(shape));
        if (vsr::numel(shape) != values.size())
            throw ShapeError("shape " + to_string(shape) + " holds " + std::to_string(vsr::numel(shape)) +
                             " values, got " + std::to_string(values.size()));
        node_->shape = std::move(shape);
        node_->data = std::move(values);
        node_->requires_grad = requires_grad;
    }

    static Tensor zeros(const Shape& shape, bool requires_grad = false)
    {
        return Tensor(shape, std::vector<T>(vsr::numel(shape), T(0)), requires_grad);
    }

    static Tensor full(const Shape& shape, T value, bool requires_grad = false)
    {
        return Tensor(shape, std::vector<T>(vsr::numel(shape), value), requires_grad);
    }

    static Tensor scalar(T value, bool requires_grad = false) { return Tensor({}, {value}, requires_grad); }

    static Tensor from_node(NodePtr node)
    {
        Tensor t;
        t.node_ = std::move(node);
        return t;
    }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t numel() const { return node_->data.size(); }

    std::span<const T> data() const { return node_->data; }
    std::span<T> data() { return node_->data; }
    T operator[](std::size_t i) const { return node_->data[i]; }

    T item() const
    {
        if (numel() != 1) throw ContractError("item() on tensor of shape " + to_string(shape()));
        return node_->data[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool on) { node_->requires_grad = on; }

    bool has_grad() const { return node_->grad.size() == node_->data.size(); }
    std::span<const T> grad() const { return node_->grad; }
    void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), T(0)); }

    /// Leaf copy of the values, cut from the graph.
    Tensor detach() const { return Tensor(node_->shape, node_->data, false); }

    /// Deep copy preserving requires_grad.
    Tensor clone() const { return Tensor(node_->shape, node_->data, node_->requires_grad); }

    const NodePtr& node() const { return node_; }

private:
    NodePtr node_;
};

template <typename T>
bool all_finite(const Tensor<T>& t)
{
    return std::all_of(t.data().begin(), t.data().end(), [](T v) { return std::isfinite(v); });
}

/// Throws ContractError if any value is NaN or infinite.
template <typename T>
void validate_finite(const Tensor<T>& t, const std::string& what = "tensor")
{
    if (!all_finite(t)) throw ContractError(what + " contains non-finite values");
}

namespace detail {

// Builds a result node. The backward closure is attached only when some
// parent is tracked and grad mode is on.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, std::vector<std::shared_ptr<Node<T>>> parents,
                      std::function<void(Node<T>& out)> backward, const char* op)
{
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    if (validation_mode()) {
        for (T v : node->data)
            if (!std::isfinite(v)) throw ContractError(std::string(op) + " produced a non-finite value");
    }
    bool tracked = false;
    if (grad_mode())
        for (auto& p : parents) tracked = tracked || p->requires_grad;
    if (tracked) {
        node->requires_grad = true;
        node->parents = std::move(parents);
        Node<T>* self = node.get();
        node->backward = [self, fn = std::move(backward)]() { fn(*self); };
    }
    return Tensor<T>::from_node(std::move(node));
}

template <typename T>
std::vector<Node<T>*> topo_order(Node<T>* root)
{
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{root, 0}};
    seen.insert(root);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node<T>* p = node->parents[next++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    return order;
}

} // namespace detail

/// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate across
/// calls; intermediate gradients are scratch and released afterwards.
template <typename T>
void backward(const Tensor<T>& loss)
{
    if (!loss.defined() || loss.numel() != 1)
        throw ContractError("backward() needs a scalar loss, got shape " +
                            (loss.defined() ? to_string(loss.shape()) : std::string("<undefined>")));
    if (!loss.requires_grad()) throw ContractError("backward() on a loss that is not tracked");

    auto order = detail::topo_order(loss.node().get());
    for (auto* n : order)
        if (!n->is_leaf()) n->grad.assign(n->data.size(), T(0));
    loss.node()->grad_buffer()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if (!(*it)->is_leaf()) (*it)->backward();
    for (auto* n : order)
        if (!n->is_leaf()) std::vector<T>().swap(n->grad);
}

} // namespace vsr
