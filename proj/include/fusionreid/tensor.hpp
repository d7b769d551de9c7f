#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fusionreid/error.hpp"

namespace fusionreid {

using Shape = std::vector<std::size_t>;

std::size_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

struct Node;

// Storage and autograd bookkeeping behind a Tensor handle.
struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
  std::shared_ptr<Node> grad_fn;

  void ensure_grad();
};

// One recorded operation. `backward` reads the output gradient and
// accumulates into the gradients of `inputs`.
struct Node {
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  std::function<void(const TensorImpl& out)> backward;
};

// Reference-counted handle to a dense row-major array of doubles.
// Copies share storage; use clone() for a deep copy.
class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor ones(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t dim() const { return impl_->shape.size(); }
  std::size_t size(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<double> data() { return impl_->data; }
  std::span<const double> data() const { return impl_->data; }
  std::vector<double> to_vector() const { return impl_->data; }

  // Empty span when no gradient has been accumulated.
  std::span<const double> grad() const { return impl_->grad; }
  std::span<double> mutable_grad() { return impl_->grad; }
  bool has_grad() const { return !impl_->grad.empty(); }
  void zero_grad() { impl_->grad.clear(); }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool value);

  double item() const;
  double operator[](std::size_t flat) const { return impl_->data[flat]; }

  Tensor clone() const;
  Tensor detach() const;

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }
  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<TensorImpl> impl_;

  friend Tensor make_result(Shape, std::vector<double>, std::initializer_list<Tensor>,
                            std::function<void(const TensorImpl&)>);
  friend Tensor make_result(Shape, std::vector<double>, const std::vector<Tensor>&,
                            std::function<void(const TensorImpl&)>);
};

// Builds an op output. Records a Node only when grad mode is on and some
// input requires grad.
Tensor make_result(Shape shape, std::vector<double> data, std::initializer_list<Tensor> inputs,
                   std::function<void(const TensorImpl&)> backward);
Tensor make_result(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs,
                   std::function<void(const TensorImpl&)> backward);

bool grad_enabled();

// Disables graph recording for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Reverse-mode pass from a scalar loss. Gradients accumulate into every
// reachable tensor that requires grad.
void backward(const Tensor& loss);

// ---------------------------------------------------------------------------
// Elementwise (numpy-style broadcasting)

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);
Tensor square(const Tensor& x);
Tensor broadcast_to(const Tensor& x, const Shape& shape);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum(const Tensor& x, std::size_t axis, bool keepdim = false);

// ---------------------------------------------------------------------------
// Linear algebra

// op(a) @ op(b) over the last two axes. Leading batch axes of `a` and `b`
// must match, or `b` may be a plain 2-D matrix shared across the batch.
Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_a = false,
              bool transpose_b = false);

// y = x @ weight + bias over the last axis; weight is [In, Out].
Tensor linear(const Tensor& x, const Tensor& weight, const std::optional<Tensor>& bias = {});

enum class ConvMode { standard, depthwise, pointwise };

struct ConvParams {
  ConvMode mode = ConvMode::standard;
  std::size_t stride = 1;
  std::size_t padding = 0;
};

std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                            std::size_t padding);

// Cross-correlation on [B, C_in, H, W] or a single [C_in, H, W] image.
// Kernel layout: standard/pointwise [C_out, C_in, kh, kw]; depthwise [C, 1, kh, kw].
Tensor conv2d(const Tensor& x, const Tensor& kernel, const std::optional<Tensor>& bias,
              const ConvParams& params);

// ---------------------------------------------------------------------------
// Normalization

// x is [B, C, ...]. running_mean/running_var are [C] buffers updated in place
// during training (unbiased variance, PyTorch-style momentum).
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                  Tensor& running_var, bool training, double eps = 1e-5, double momentum = 0.1);

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

// ---------------------------------------------------------------------------
// Activations and pointwise nonlinearities

Tensor softmax(const Tensor& x);
Tensor log_softmax(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);
// One slope per channel on axis 1 ([B, C, ...]); a single-element slope
// applies to every element.
Tensor prelu(const Tensor& x, const Tensor& slope);
Tensor softplus(const Tensor& x);

// Generalized-mean pooling [B, C, H, W] -> [B, C] (or [C, H, W] -> [C]).
// `p` is a one-element tensor; values are clamped to >= eps first.
Tensor gem_pool(const Tensor& x, const Tensor& p, double eps = 1e-6);

// ---------------------------------------------------------------------------
// Data movement

Tensor reshape(const Tensor& x, const Shape& shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& order);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
std::vector<Tensor> split(const Tensor& x, std::size_t axis, const std::vector<std::size_t>& sizes);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length);
// [B, C, H, W] -> [B, H*W, C] token-major layout.
Tensor flatten_spatial(const Tensor& x);
// Inverse of flatten_spatial: [B, H*W, C] -> [B, C, H, W].
Tensor unflatten_spatial(const Tensor& x, std::size_t height, std::size_t width);
// Rows of x along axis 0.
Tensor index_select(const Tensor& x, const std::vector<std::size_t>& indices);

}  // namespace fusionreid
