#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "hye/errors.hpp"

namespace hye {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::int64_t{1},
                           std::multiplies<>{});
}

inline std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

template <class T>
class BasicTensor;

namespace detail {

template <class T>
struct Node;

template <class T>
struct Storage {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
    std::shared_ptr<Node<T>> grad_fn;

    std::vector<T>& grad_buffer() {
        if (grad.size() != data.size()) grad.assign(data.size(), T(0));
        return grad;
    }
};

// One recorded operation. `backward` receives the gradient of the op's output
// and accumulates into the grad buffers of the inputs that require it.
template <class T>
struct Node {
    const char* op = "";
    std::vector<std::shared_ptr<Storage<T>>> inputs;
    std::function<void(const std::vector<T>&)> backward;
};

inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

} // namespace detail

// Disables tape recording on the current thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

/// Dense row-major tensor with an optional reverse-mode tape node.
///
/// Copies are shallow handles onto the same storage. Values are treated as
/// immutable once an operation has consumed them; the only sanctioned
/// in-place writes are optimizer updates on leaf parameters and grad buffers.
template <class T>
class BasicTensor {
public:
    using value_type = T;
    using StoragePtr = std::shared_ptr<detail::Storage<T>>;

    BasicTensor() = default;

    explicit BasicTensor(Shape shape, T fill = T(0)) {
        validate_shape(shape);
        storage_ = std::make_shared<detail::Storage<T>>();
        storage_->data.assign(static_cast<std::size_t>(hye::numel(shape)), fill);
        storage_->shape = std::move(shape);
    }

    BasicTensor(Shape shape, std::vector<T> values) {
        validate_shape(shape);
        if (hye::numel(shape) != static_cast<std::int64_t>(values.size()))
            throw DimensionError("tensor data length " + std::to_string(values.size()) +
                                 " does not match shape " + to_string(shape));
        storage_ = std::make_shared<detail::Storage<T>>();
        storage_->shape = std::move(shape);
        storage_->data = std::move(values);
    }

    static BasicTensor zeros(Shape shape) { return BasicTensor(std::move(shape), T(0)); }
    static BasicTensor ones(Shape shape) { return BasicTensor(std::move(shape), T(1)); }
    static BasicTensor scalar(T value) { return BasicTensor(Shape{1}, value); }

    bool defined() const { return static_cast<bool>(storage_); }
    const Shape& shape() const { return storage_->shape; }
    std::int64_t dim(std::size_t axis) const { return storage_->shape.at(axis); }
    std::size_t ndim() const { return storage_->shape.size(); }
    std::int64_t numel() const { return static_cast<std::int64_t>(storage_->data.size()); }

    std::span<const T> data() const { return storage_->data; }
    std::span<T> mutable_data() { return storage_->data; }
    const std::vector<T>& values() const { return storage_->data; }

    T item() const {
        if (numel() != 1)
            throw UsageError("item() on tensor of shape " + to_string(shape()));
        return storage_->data[0];
    }

    T operator[](std::int64_t i) const { return storage_->data[static_cast<std::size_t>(i)]; }

    bool requires_grad() const { return storage_ && storage_->requires_grad; }
    BasicTensor& set_requires_grad(bool on) {
        if (storage_->grad_fn)
            throw UsageError("requires_grad can only be set on leaf tensors");
        storage_->requires_grad = on;
        return *this;
    }
    bool is_leaf() const { return !storage_->grad_fn; }

    bool has_grad() const { return storage_->grad.size() == storage_->data.size(); }
    std::span<const T> grad() const { return storage_->grad; }
    std::span<T> mutable_grad() { return storage_->grad_buffer(); }
    void zero_grad() {
        if (has_grad()) std::fill(storage_->grad.begin(), storage_->grad.end(), T(0));
    }
    // Drops the gradient buffer; has_grad() is false until the next backward
    // reaches this tensor.
    void clear_grad() { std::vector<T>().swap(storage_->grad); }

    // Fresh leaf sharing no history; data is copied.
    BasicTensor detach() const { return BasicTensor(shape(), storage_->data); }
    BasicTensor clone() const { return detach(); }

    void backward() const {
        if (numel() != 1)
            throw UsageError("backward() on a tensor with " + std::to_string(numel()) +
                             " elements needs an explicit seed");
        backward(std::vector<T>{T(1)});
    }

    void backward(const std::vector<T>& seed) const;

    const StoragePtr& storage() const { return storage_; }
    static BasicTensor from_storage(StoragePtr s) {
        BasicTensor t;
        t.storage_ = std::move(s);
        return t;
    }

private:
    static void validate_shape(const Shape& shape) {
        if (shape.empty()) throw DimensionError("tensor shape must have at least one axis");
        for (auto d : shape)
            if (d <= 0) throw DimensionError("non-positive dimension in shape " + to_string(shape));
    }

    StoragePtr storage_;
};

template <class T>
void BasicTensor<T>::backward(const std::vector<T>& seed) const {
    if (seed.size() != storage_->data.size())
        throw UsageError("backward seed length does not match tensor size");
    if (!storage_->grad_fn && !storage_->requires_grad)
        throw UsageError("backward() on a tensor with no recorded computation history");

    // Reverse topological order over recorded nodes (iterative DFS).
    std::vector<detail::Storage<T>*> order;
    std::unordered_set<detail::Storage<T>*> visited;
    std::vector<std::pair<detail::Storage<T>*, std::size_t>> stack;
    stack.emplace_back(storage_.get(), 0);
    visited.insert(storage_.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (node->grad_fn && next < node->grad_fn->inputs.size()) {
            auto* child = node->grad_fn->inputs[next++].get();
            if (child->grad_fn && visited.insert(child).second) stack.emplace_back(child, 0);
            continue;
        }
        order.push_back(node);
        stack.pop_back();
    }

    // Interior gradients are scratch for this pass, allocated on first
    // contribution; leaves accumulate.
    for (auto* s : order)
        if (s->grad_fn) std::vector<T>().swap(s->grad);

    auto& root = storage_->grad_buffer();
    for (std::size_t i = 0; i < seed.size(); ++i) root[i] += seed[i];

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        auto* s = *it;
        if (!s->grad_fn || s->grad.empty()) continue;
        s->grad_fn->backward(s->grad);
        std::vector<T>().swap(s->grad);
    }
}

using Tensor = BasicTensor<float>;

namespace detail {

template <class T>
bool any_requires_grad(std::initializer_list<const BasicTensor<T>*> inputs) {
    for (auto* t : inputs)
        if (t && t->defined() && t->requires_grad()) return true;
    return false;
}

template <class T>
void check_finite(const std::vector<T>& v, const char* op) {
#ifndef HYE_NO_FINITE_CHECKS
    for (const T& x : v)
        if (!std::isfinite(x))
            throw NumericError(std::string("non-finite value produced by ") + op);
#else
    (void)v;
    (void)op;
#endif
}

// Wraps an op's output and, when any input is on the tape, records the node.
template <class T, class Backward>
BasicTensor<T> make_result(const char* op, Shape shape, std::vector<T> out,
                           std::initializer_list<const BasicTensor<T>*> inputs,
                           Backward&& backward) {
    check_finite(out, op);
    BasicTensor<T> result(std::move(shape), std::move(out));
    if (grad_mode() && any_requires_grad<T>(inputs)) {
        auto node = std::make_shared<Node<T>>();
        node->op = op;
        for (auto* t : inputs)
            if (t && t->defined() && t->requires_grad()) node->inputs.push_back(t->storage());
        node->backward = std::forward<Backward>(backward);
        result.storage()->grad_fn = std::move(node);
        result.storage()->requires_grad = true;
    }
    return result;
}

// Gradient sink for an input: null when the input is off the tape.
template <class T>
std::vector<T>* sink(const BasicTensor<T>& t) {
    if (!t.defined() || !t.requires_grad()) return nullptr;
    return &t.storage()->grad_buffer();
}

} // namespace detail

} // namespace hye
