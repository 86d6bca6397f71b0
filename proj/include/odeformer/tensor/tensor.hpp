#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "odeformer/errors.hpp"

namespace odeformer::tensor {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    out += "]";
    return out;
}

template <class T>
struct TensorNode {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // sized lazily; empty means "no gradient yet"
    bool requires_grad = false;
    const void* tape_tag = nullptr;  // tape that produced this node, null for leaves
};

// Shared handle to a dense row-major array. Copies alias the same storage;
// clone() makes an independent leaf.
template <class T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    static Tensor zeros(Shape shape) {
        Tensor t;
        t.node_ = std::make_shared<TensorNode<T>>();
        t.node_->value.assign(shape_numel(shape), T(0));
        t.node_->shape = std::move(shape);
        return t;
    }

    static Tensor full(Shape shape, T v) {
        Tensor t = zeros(std::move(shape));
        for (T& x : t.node_->value) x = v;
        return t;
    }

    static Tensor from_data(Shape shape, std::vector<T> data) {
        if (shape_numel(shape) != static_cast<int64_t>(data.size())) {
            throw shape_error("tensor data length " + std::to_string(data.size()) +
                              " does not match shape " + shape_str(shape));
        }
        Tensor t;
        t.node_ = std::make_shared<TensorNode<T>>();
        t.node_->shape = std::move(shape);
        t.node_->value = std::move(data);
        return t;
    }

    static Tensor scalar(T v) { return from_data({1}, {v}); }

    bool defined() const { return node_ != nullptr; }

    const Shape& shape() const { return node_->shape; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    int64_t dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
    int64_t numel() const { return static_cast<int64_t>(node_->value.size()); }

    std::vector<T>& value() { return node_->value; }
    const std::vector<T>& value() const { return node_->value; }

    T item() const {
        if (numel() != 1) {
            throw shape_error("item() on tensor of shape " + shape_str(node_->shape));
        }
        return node_->value[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool b) { node_->requires_grad = b; }

    bool has_grad() const { return !node_->grad.empty(); }
    void ensure_grad() {
        if (node_->grad.empty()) node_->grad.assign(node_->value.size(), T(0));
    }
    void zero_grad() { node_->grad.clear(); }
    std::vector<T>& grad() {
        ensure_grad();
        return node_->grad;
    }

    // Independent detached copy of the values.
    Tensor clone() const {
        Tensor t = from_data(node_->shape, node_->value);
        return t;
    }

    std::shared_ptr<TensorNode<T>>& node() { return node_; }
    const std::shared_ptr<TensorNode<T>>& node() const { return node_; }

private:
    std::shared_ptr<TensorNode<T>> node_;
};

// Per-forward-pass record of backward rules. Entries are appended in
// execution order, which is a topological order of the value graph; backward
// replays them once in reverse.
template <class T>
class Tape {
public:
    void record(std::function<void()> fn) { entries_.push_back(std::move(fn)); }

    bool recording() const { return recording_; }
    void set_recording(bool b) { recording_ = b; }

    size_t size() const { return entries_.size(); }
    void clear() { entries_.clear(); }

    const void* tag() const { return this; }

    // Populates grads of every requires_grad tensor reachable from `loss`.
    void backward(Tensor<T>& loss) {
        if (!loss.defined() || loss.node()->tape_tag != tag()) {
            throw detached_graph_error("backward: tensor was not produced by this tape");
        }
        if (loss.numel() != 1) {
            throw shape_error("backward: loss must be scalar, got " + shape_str(loss.shape()));
        }
        loss.ensure_grad();
        loss.grad()[0] = T(1);
        for (size_t i = entries_.size(); i-- > 0;) {
            entries_[i]();
        }
    }

    // RAII guard for value-only evaluation.
    class NoGrad {
    public:
        explicit NoGrad(Tape& t) : tape_(t), prev_(t.recording()) { tape_.set_recording(false); }
        ~NoGrad() { tape_.set_recording(prev_); }

    private:
        Tape& tape_;
        bool prev_;
    };

private:
    std::vector<std::function<void()>> entries_;
    bool recording_ = true;
};

} // namespace odeformer::tensor
