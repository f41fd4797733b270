#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "mbt/common.hpp"

namespace mbt {

/// Dense row-major tensor with an optional gradient buffer. Copying a Tensor
/// copies the handle, not the storage: two copies alias the same payload,
/// which is what ties parameters, optimizer state, and recorded tape nodes
/// together.
template <typename T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<i64> shape, bool requires_grad = false)
        : p_(std::make_shared<Payload>()) {
        for (i64 d : shape) {
            if (d <= 0) throw ShapeError("tensor dim must be positive, got " + shape_str(shape));
        }
        p_->shape = std::move(shape);
        p_->data.assign(static_cast<size_t>(numel_of(p_->shape)), T(0));
        p_->requires_grad = requires_grad;
    }

    static Tensor from_data(std::vector<i64> shape, std::vector<T> data, bool requires_grad = false) {
        Tensor t(std::move(shape), requires_grad);
        if (data.size() != t.p_->data.size())
            throw ShapeError("data length does not match shape " + shape_str(t.shape()));
        t.p_->data = std::move(data);
        return t;
    }

    static Tensor scalar(T v) { return from_data({1}, {v}); }

    static Tensor full(std::vector<i64> shape, T v, bool requires_grad = false) {
        Tensor t(std::move(shape), requires_grad);
        std::fill(t.p_->data.begin(), t.p_->data.end(), v);
        return t;
    }

    bool defined() const { return static_cast<bool>(p_); }
    const std::vector<i64>& shape() const { return p_->shape; }
    i64 rank() const { return static_cast<i64>(p_->shape.size()); }
    i64 dim(i64 i) const { return p_->shape[static_cast<size_t>(i)]; }
    i64 numel() const { return static_cast<i64>(p_->data.size()); }

    T* data() { return p_->data.data(); }
    const T* data() const { return p_->data.data(); }
    std::vector<T>& buffer() { return p_->data; }
    const std::vector<T>& buffer() const { return p_->data; }

    T item() const {
        if (numel() != 1) throw ShapeError("item() requires a single-element tensor");
        return p_->data[0];
    }

    bool requires_grad() const { return p_->requires_grad; }
    void set_requires_grad(bool rg) { p_->requires_grad = rg; }

    bool has_grad() const { return !p_->grad.empty(); }
    /// Grad buffer, allocated (zeroed) on first access.
    T* grad() {
        if (p_->grad.empty()) p_->grad.assign(p_->data.size(), T(0));
        return p_->grad.data();
    }
    const std::vector<T>& grad_buffer() const { return p_->grad; }
    void zero_grad() {
        if (p_->grad.empty())
            p_->grad.assign(p_->data.size(), T(0));
        else
            std::fill(p_->grad.begin(), p_->grad.end(), T(0));
    }
    void clear_grad() { p_->grad.clear(); }

    void accumulate_grad(const T* g) {
        T* dst = grad();
        const size_t n = p_->data.size();
        for (size_t i = 0; i < n; ++i) dst[i] += g[i];
    }

    /// Deep copy (data only; grad not copied, no graph attachment).
    Tensor clone() const {
        Tensor t;
        t.p_ = std::make_shared<Payload>();
        t.p_->shape = p_->shape;
        t.p_->data = p_->data;
        t.p_->requires_grad = p_->requires_grad;
        return t;
    }

    bool same_payload(const Tensor& other) const { return p_ == other.p_; }

    bool all_finite() const {
        for (T v : p_->data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    // Tape bookkeeping: id of the tape that produced this tensor (0 = leaf).
    u64 producer_tape() const { return p_->producer_tape; }
    void mark_produced_by(u64 tape_id) { p_->producer_tape = tape_id; }

private:
    struct Payload {
        std::vector<i64> shape;
        std::vector<T> data;
        std::vector<T> grad;  // empty until touched
        bool requires_grad = false;
        u64 producer_tape = 0;
    };
    std::shared_ptr<Payload> p_;
};

/// Records the operations of one forward pass so they can be replayed in
/// reverse. A tape belongs to one logical training step and one thread.
template <typename T>
class Tape {
public:
    Tape() : id_(next_id()) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    u64 id() const { return id_; }
    size_t size() const { return nodes_.size(); }

    /// Appends a node. Inputs of the node necessarily precede it on the tape,
    /// so the node order is a topological order of the graph.
    void record(const char* op, std::vector<Tensor<T>> outputs, std::function<void()> backward) {
        for (auto& out : outputs) out.mark_produced_by(id_);
        nodes_.push_back(Node{op, std::move(outputs), std::move(backward)});
    }

    /// Seeds d(loss)/d(loss) = 1 and replays every node exactly once in
    /// reverse order. Leaf gradients accumulate (+=) across calls; interior
    /// gradients are reset per call, so calling twice doubles leaf grads.
    void backward(Tensor<T> loss) {
        if (loss.numel() != 1) throw ShapeError("backward() requires a scalar loss");
        if (loss.producer_tape() != id_)
            throw ValueError("backward(): loss is not attached to this tape");
        for (auto& node : nodes_)
            for (auto& out : node.outputs) out.zero_grad();
        loss.grad()[0] = T(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->backward();
    }

    void clear() { nodes_.clear(); }

    static Tape* active() { return active_ptr(); }

private:
    struct Node {
        const char* op;
        std::vector<Tensor<T>> outputs;
        std::function<void()> backward;
    };

    static u64 next_id() {
        static u64 counter = 0;
        return ++counter;
    }
    static Tape*& active_ptr() {
        thread_local Tape* active = nullptr;
        return active;
    }

    std::vector<Node> nodes_;
    u64 id_;

    template <typename U>
    friend class TapeScope;
};

/// Makes a tape the active recording target for the enclosing scope.
template <typename T>
class TapeScope {
public:
    explicit TapeScope(Tape<T>& tape) : prev_(Tape<T>::active_ptr()) {
        Tape<T>::active_ptr() = &tape;
    }
    ~TapeScope() { Tape<T>::active_ptr() = prev_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape<T>* prev_;
};

}  // namespace mbt
