#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "sdit/error.hpp"
#include "sdit/rng.hpp"

namespace sdit {

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& shape);

struct TensorImpl;
using TensorImplPtr = std::shared_ptr<TensorImpl>;

// Dense row-major double tensor with reverse-mode autodiff. The graph is
// dynamic: each op result holds references to its parents and a backward
// closure, so a tape exists per forward invocation and is freed with the
// tensors that reference it.
struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // allocated lazily, same size as data
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<TensorImplPtr> parents;
    // Accumulates d(loss)/d(parent) into each parent's grad, reading this
    // node's grad.
    std::function<void(TensorImpl&)> backward_fn;

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
};

class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(TensorImplPtr impl) : impl_(std::move(impl)) {}

    static Tensor zeros(const Shape& shape);
    static Tensor full(const Shape& shape, double value);
    static Tensor from(const Shape& shape, std::vector<double> values);
    static Tensor scalar(double value);
    static Tensor randn(const Shape& shape, Rng& rng, double stddev = 1.0);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int64_t numel() const { return impl_->numel(); }
    // 2D helpers: last dim is columns, everything before is rows.
    int rows() const;
    int cols() const;

    const std::vector<double>& data() const { return impl_->data; }
    std::vector<double>& mutable_data() { return impl_->data; }
    double item() const;
    double at(int64_t flat_index) const { return impl_->data[static_cast<size_t>(flat_index)]; }

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool value) {
        impl_->requires_grad = value;
        return *this;
    }
    bool has_grad() const { return !impl_->grad.empty(); }
    const std::vector<double>& grad() const;
    void zero_grad() { impl_->grad.assign(impl_->data.size(), 0.0); }

    Tensor clone() const;  // deep copy, detached leaf

    TensorImplPtr impl() const { return impl_; }

  private:
    TensorImplPtr impl_;
};

// Autograd recording toggle, thread local. Used to run long streaming
// rollouts without building graphs.
bool grad_enabled();
class NoGradGuard {
  public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool prev_;
};

// loss must be scalar. Accumulates into existing grads; call zero_grad on
// leaves between steps.
void backward(const Tensor& loss);

// Elementwise (shapes must match exactly).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);

// 2D linear algebra.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// Row/column structure ops (2D view: rows() x cols()).
Tensor slice_rows(const Tensor& a, int start, int count);
Tensor slice_cols(const Tensor& a, int start, int count);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
// Row i of the input becomes rows i*times .. i*times+times-1 of the output.
Tensor repeat_rows(const Tensor& a, int times);
Tensor add_rowvec(const Tensor& a, const Tensor& v);  // v broadcast over rows

// Activations and normalization.
Tensor softmax_rows(const Tensor& a);  // stabilized, along the last axis
Tensor silu(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor rmsnorm(const Tensor& x, const Tensor& gain);  // gain: [cols]

// Rotates consecutive value pairs of each row: angles is a constant
// [rows, cols/2] tensor. Orthogonal, so the backward is rotation by -angle.
Tensor rope_rows(const Tensor& x, const Tensor& angles);

// Reductions.
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor mse(const Tensor& a, const Tensor& b);

// Graph control.
Tensor detach(const Tensor& a);

void check_finite(const Tensor& t, const std::string& context);

}  // namespace sdit
