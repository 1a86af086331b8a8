#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "matchseg/errors.hpp"

namespace matchseg {

// Dimension sizes, outermost first. Data is flat row-major 32-bit floats.
using Shape = std::vector<int>;

std::size_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

struct TensorData {
    Shape shape;
    std::vector<float> value;
    std::vector<float> grad; // empty until backward first touches this tensor
    bool requires_grad = false;
};

// Value-semantics handle to a shared dense float array. The stored values are
// immutable once an operation has produced them; only the grad buffer (and,
// for trainable parameters, the optimizer's in-place update) mutates state.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, float v, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<float> data, bool requires_grad = false);

    bool defined() const { return static_cast<bool>(d_); }
    const Shape& shape() const { return d_->shape; }
    int rank() const { return static_cast<int>(d_->shape.size()); }
    int dim(int axis) const { return d_->shape[static_cast<std::size_t>(axis)]; }
    std::size_t numel() const { return d_->value.size(); }

    std::span<const float> values() const { return d_->value; }
    std::span<float> values_mut() { return d_->value; }
    float item() const;

    bool requires_grad() const { return d_->requires_grad; }
    Tensor& set_requires_grad(bool rg) {
        d_->requires_grad = rg;
        return *this;
    }

    bool has_grad() const { return !d_->grad.empty(); }
    std::span<const float> grad() const;
    std::span<float> grad_mut(); // allocates zeros on first use
    void zero_grad();

    // Deep copy of the values; grad is not copied.
    Tensor clone(bool requires_grad = false) const;

    std::shared_ptr<TensorData> node() const { return d_; }
    static Tensor wrap(std::shared_ptr<TensorData> d) { return Tensor(std::move(d)); }

private:
    explicit Tensor(std::shared_ptr<TensorData> d) : d_(std::move(d)) {}
    std::shared_ptr<TensorData> d_;
};

// Per-backward-call adjoint buffers, keyed by tensor identity. T is float for
// the training path and double for the verification harness.
template <class T>
class AdjointStore {
public:
    const std::vector<T>* find(TensorData* n) const {
        auto it = map_.find(n);
        return it == map_.end() ? nullptr : &it->second;
    }
    std::vector<T>& at_or_zero(TensorData* n) {
        auto [it, inserted] = map_.try_emplace(n);
        if (inserted) it->second.assign(n->value.size(), T(0));
        return it->second;
    }
    auto begin() { return map_.begin(); }
    auto end() { return map_.end(); }

private:
    std::unordered_map<TensorData*, std::vector<T>> map_;
};

// One executed operation. pull() reads the result's adjoint from the store
// and accumulates operand adjoints.
struct OpNode {
    virtual ~OpNode() = default;
    virtual void pull(AdjointStore<float>&) const = 0;
    virtual void pull(AdjointStore<double>&) const = 0;
};

// Ordered record of executed operations. Operations append themselves while a
// TapeScope is active on the current thread; entries are replayed in reverse
// by backward(). A tape and its tensors belong to one thread at a time.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    void clear() { ops_.clear(); }
    std::size_t size() const { return ops_.size(); }

    static Tape* current();
    void push(std::unique_ptr<OpNode> op) { ops_.push_back(std::move(op)); }
    const std::vector<std::unique_ptr<OpNode>>& ops() const { return ops_; }

private:
    std::vector<std::unique_ptr<OpNode>> ops_;
};

// RAII activation of a tape on the current thread.
class TapeScope {
public:
    explicit TapeScope(Tape& tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* prev_;
};

// --- differentiable operations ---------------------------------------------

// 2-D convolution, stride 1, zero same-padding, odd kernel sizes.
// input (Cin,H,W), weight (Cout,Cin,kh,kw), bias (Cout) -> (Cout,H,W).
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias);

// Elementwise max(x, slope*x); slope in (0,1).
Tensor leaky_relu(const Tensor& x, float slope);

// Bilinear resample of (C,H,W) to (C,out_h,out_w), align-corners=false.
Tensor bilinear_resize(const Tensor& x, int out_h, int out_w);

// (M,N) x (N,P) -> (M,P).
Tensor matmul(const Tensor& a, const Tensor& b);

// Softmax along the given axis, max-subtracted for stability.
Tensor softmax(const Tensor& x, int axis);

// Arithmetic mean along the given axis; the axis is removed from the shape.
Tensor reduce_mean(const Tensor& x, int axis);

Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor sigmoid(const Tensor& x);
Tensor log(const Tensor& x);           // requires strictly positive inputs
Tensor power(const Tensor& x, float p); // requires non-negative inputs
Tensor clamp(const Tensor& x, float lo, float hi);
Tensor scale(const Tensor& x, float s);
Tensor add_scalar(const Tensor& x, float c);

Tensor concat(std::span<const Tensor> parts, int axis);
Tensor reshape(const Tensor& x, Shape new_shape);
// Tiles the tensor `times` times along an existing axis (copies concatenated).
Tensor repeat(const Tensor& x, int axis, int times);
Tensor transpose2d(const Tensor& x);
// Slice of the leading axis: (k,...) -> (...).
Tensor select0(const Tensor& x, int index);
// Stack along a new leading axis: k tensors (...) -> (k,...).
Tensor stack0(std::span<const Tensor> parts);

Tensor reduce_sum_all(const Tensor& x);  // -> scalar of shape {1}
Tensor reduce_mean_all(const Tensor& x); // -> scalar of shape {1}

// --- reverse-mode gradient computation --------------------------------------

// Populates/accumulates grad on every requires_grad tensor reachable from
// loss. Adjoints are accumulated in 32-bit floats; call repeatedly to
// accumulate gradients (trainer zeroes between steps).
void backward(const Tensor& loss, Tape& tape);

// Same replay but with 64-bit adjoint accumulation; used by grad_check.
void backward_fp64(const Tensor& loss, Tape& tape);

// Central-difference check of a scalar-valued function of one tensor.
// Returns max over elements of |analytic - numeric| / max(|analytic|,
// |numeric|, 1e-8). eps must lie in (0, 1e-2].
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps);

} // namespace matchseg
