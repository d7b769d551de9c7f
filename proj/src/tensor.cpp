#include "fusionreid/tensor.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace fusionreid {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

thread_local bool g_grad_enabled = true;

using ImplPtr = std::shared_ptr<TensorImpl>;

bool wants_grad(const ImplPtr& impl) { return impl && impl->requires_grad; }

double* grad_ptr(const ImplPtr& impl) {
  impl->ensure_grad();
  return impl->grad.data();
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t nd = std::max(a.size(), b.size());
  Shape out(nd);
  for (std::size_t i = 0; i < nd; ++i) {
    const std::size_t da = i < nd - a.size() ? 1 : a[i - (nd - a.size())];
    const std::size_t db = i < nd - b.size() ? 1 : b[i - (nd - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw DimensionError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    out[i] = da == 1 ? db : da;
  }
  return out;
}

// Strides of `in` when viewed with the extents of `out` (0 on broadcast axes).
std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t stride = 1;
  const std::size_t offset = out.size() - in.size();
  for (std::size_t i = in.size(); i-- > 0;) {
    strides[i + offset] = in[i] == 1 ? 0 : stride;
    stride *= in[i];
  }
  return strides;
}

template <class Fn>
void broadcast_loop(const Shape& out, const std::vector<std::size_t>& sa,
                    const std::vector<std::size_t>& sb, Fn&& fn) {
  const std::size_t n = numel_of(out);
  const std::size_t nd = out.size();
  std::vector<std::size_t> idx(nd, 0);
  std::size_t ia = 0;
  std::size_t ib = 0;
  for (std::size_t i = 0; i < n; ++i) {
    fn(i, ia, ib);
    for (std::size_t d = nd; d-- > 0;) {
      ++idx[d];
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < out[d]) break;
      ia -= sa[d] * out[d];
      ib -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

// Elementwise binary op with broadcasting. `fwd(a, b)` is the value,
// `dfa(a, b)` and `dfb(a, b)` the partial derivatives.
template <class F, class DA, class DB>
Tensor binary_op(const Tensor& a, const Tensor& b, F fwd, DA dfa, DB dfb) {
  const Shape out_shape = a.shape() == b.shape() ? a.shape() : broadcast_shape(a.shape(), b.shape());
  const auto sa = broadcast_strides(a.shape(), out_shape);
  const auto sb = broadcast_strides(b.shape(), out_shape);
  std::vector<double> out(numel_of(out_shape));
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  if (a.shape() == b.shape()) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(pa[i], pb[i]);
  } else {
    broadcast_loop(out_shape, sa, sb,
                   [&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = fwd(pa[ia], pb[ib]); });
  }
  ImplPtr ai = a.impl();
  ImplPtr bi = b.impl();
  return make_result(out_shape, std::move(out), {a, b}, [ai, bi, sa, sb, dfa, dfb](const TensorImpl& o) {
    const double* g = o.grad.data();
    const double* va = ai->data.data();
    const double* vb = bi->data.data();
    double* ga = wants_grad(ai) ? grad_ptr(ai) : nullptr;
    double* gb = wants_grad(bi) ? grad_ptr(bi) : nullptr;
    broadcast_loop(o.shape, sa, sb, [&](std::size_t i, std::size_t ia, std::size_t ib) {
      if (ga) ga[ia] += g[i] * dfa(va[ia], vb[ib]);
      if (gb) gb[ib] += g[i] * dfb(va[ia], vb[ib]);
    });
  });
}

template <class F, class DF>
Tensor unary_op(const Tensor& x, F fwd, DF dfx) {
  std::vector<double> out(x.numel());
  const double* px = x.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(px[i]);
  ImplPtr xi = x.impl();
  return make_result(x.shape(), std::move(out), {x}, [xi, dfx](const TensorImpl& o) {
    double* gx = grad_ptr(xi);
    const double* vx = xi->data.data();
    for (std::size_t i = 0; i < o.grad.size(); ++i) gx[i] += o.grad[i] * dfx(vx[i]);
  });
}

// Splits a shape around `axis` into outer * extent * inner.
struct AxisSplit {
  std::size_t outer = 1;
  std::size_t extent = 1;
  std::size_t inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace

// ---------------------------------------------------------------------------

std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

void TensorImpl::ensure_grad() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
}

Tensor::Tensor() = default;

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad)
    : impl_(std::make_shared<TensorImpl>()) {
  if (numel_of(shape) != data.size()) {
    throw DimensionError("shape " + shape_str(shape) + " does not hold " + std::to_string(data.size()) +
                         " values");
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) { return full(shape, 0.0, requires_grad); }
Tensor Tensor::ones(const Shape& shape, bool requires_grad) { return full(shape, 1.0, requires_grad); }

Tensor Tensor::full(const Shape& shape, double value, bool requires_grad) {
  return Tensor(shape, std::vector<double>(numel_of(shape), value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor({1}, {value}, requires_grad); }

Tensor& Tensor::set_requires_grad(bool value) {
  impl_->requires_grad = value;
  return *this;
}

double Tensor::item() const {
  if (numel() != 1) throw UsageError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

Tensor Tensor::clone() const { return Tensor(impl_->shape, impl_->data, impl_->requires_grad); }
Tensor Tensor::detach() const { return Tensor(impl_->shape, impl_->data, false); }

Tensor make_result(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs,
                   std::function<void(const TensorImpl&)> backward_fn) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  if (g_grad_enabled) {
    const bool any = std::any_of(inputs.begin(), inputs.end(),
                                 [](const Tensor& t) { return t.defined() && t.requires_grad(); });
    if (any) {
      auto node = std::make_shared<Node>();
      for (const auto& t : inputs) {
        if (t.defined()) node->inputs.push_back(t.impl());
      }
      node->backward = std::move(backward_fn);
      impl->requires_grad = true;
      impl->grad_fn = std::move(node);
    }
  }
  return Tensor(std::move(impl));
}

Tensor make_result(Shape shape, std::vector<double> data, std::initializer_list<Tensor> inputs,
                   std::function<void(const TensorImpl&)> backward_fn) {
  return make_result(std::move(shape), std::move(data), std::vector<Tensor>(inputs), std::move(backward_fn));
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw UsageError("backward() needs a scalar loss, got " +
                     (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  }
  if (!loss.requires_grad()) throw UsageError("backward() on a tensor that does not require grad");

  // Iterative post-order DFS; reversed, it is a valid reverse-topological order.
  std::vector<TensorImpl*> order;
  std::unordered_set<TensorImpl*> visited;
  std::vector<std::pair<TensorImpl*, std::size_t>> stack;
  stack.emplace_back(loss.impl().get(), 0);
  visited.insert(loss.impl().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    const auto* fn = node->grad_fn.get();
    if (fn && next < fn->inputs.size()) {
      TensorImpl* child = fn->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  TensorImpl* root = loss.impl().get();
  root->ensure_grad();
  root->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* t = *it;
    if (t->grad_fn && !t->grad.empty()) t->grad_fn->backward(*t);
  }
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor scale(const Tensor& x, double factor) {
  return unary_op(
      x, [factor](double v) { return v * factor; }, [factor](double) { return factor; });
}

Tensor add_scalar(const Tensor& x, double value) {
  return unary_op(
      x, [value](double v) { return v + value; }, [](double) { return 1.0; });
}

Tensor square(const Tensor& x) {
  return unary_op(
      x, [](double v) { return v * v; }, [](double v) { return 2.0 * v; });
}

Tensor broadcast_to(const Tensor& x, const Shape& shape) {
  if (broadcast_shape(x.shape(), shape) != shape) {
    throw DimensionError("cannot broadcast " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  const auto sx = broadcast_strides(x.shape(), shape);
  const std::vector<std::size_t> unused(shape.size(), 0);
  std::vector<double> out(numel_of(shape));
  const double* px = x.data().data();
  broadcast_loop(shape, sx, unused, [&](std::size_t i, std::size_t ix, std::size_t) { out[i] = px[ix]; });
  ImplPtr xi = x.impl();
  return make_result(shape, std::move(out), {x}, [xi, sx, unused](const TensorImpl& o) {
    double* gx = grad_ptr(xi);
    broadcast_loop(o.shape, sx, unused, [&](std::size_t i, std::size_t ix, std::size_t) { gx[ix] += o.grad[i]; });
  });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  ImplPtr xi = x.impl();
  return make_result({1}, {total}, {x}, [xi](const TensorImpl& o) {
    double* gx = grad_ptr(xi);
    for (std::size_t i = 0; i < xi->data.size(); ++i) gx[i] += o.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw DimensionError("mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor sum(const Tensor& x, std::size_t axis, bool keepdim) {
  if (axis >= x.dim()) throw DimensionError("sum axis out of range for " + shape_str(x.shape()));
  const AxisSplit s = split_at(x.shape(), axis);
  Shape out_shape = x.shape();
  if (keepdim) {
    out_shape[axis] = 1;
  } else {
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  }
  std::vector<double> out(s.outer * s.inner, 0.0);
  const double* px = x.data().data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t e = 0; e < s.extent; ++e)
      for (std::size_t i = 0; i < s.inner; ++i) out[o * s.inner + i] += px[(o * s.extent + e) * s.inner + i];
  ImplPtr xi = x.impl();
  return make_result(out_shape, std::move(out), {x}, [xi, s](const TensorImpl& g) {
    double* gx = grad_ptr(xi);
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t e = 0; e < s.extent; ++e)
        for (std::size_t i = 0; i < s.inner; ++i) gx[(o * s.extent + e) * s.inner + i] += g.grad[o * s.inner + i];
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_a, bool transpose_b) {
  if (a.dim() < 2 || b.dim() < 2) {
    throw DimensionError("matmul needs >= 2-D operands, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::size_t ra = a.shape()[a.dim() - 2];
  const std::size_t ca = a.shape()[a.dim() - 1];
  const std::size_t rb = b.shape()[b.dim() - 2];
  const std::size_t cb = b.shape()[b.dim() - 1];
  const std::size_t m = transpose_a ? ca : ra;
  const std::size_t k = transpose_a ? ra : ca;
  const std::size_t kb = transpose_b ? cb : rb;
  const std::size_t n = transpose_b ? rb : cb;
  const Shape batch_a(a.shape().begin(), a.shape().end() - 2);
  const Shape batch_b(b.shape().begin(), b.shape().end() - 2);
  const bool shared_b = batch_b.empty();
  if (k != kb || (!shared_b && batch_a != batch_b)) {
    throw DimensionError("matmul shape mismatch: " + shape_str(a.shape()) + (transpose_a ? "^T" : "") + " x " +
                         shape_str(b.shape()) + (transpose_b ? "^T" : ""));
  }
  const std::size_t batches = numel_of(batch_a);
  Shape out_shape = batch_a;
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<double> out(batches * m * n);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  const Eigen::Index er_a = static_cast<Eigen::Index>(ra), ec_a = static_cast<Eigen::Index>(ca);
  const Eigen::Index er_b = static_cast<Eigen::Index>(rb), ec_b = static_cast<Eigen::Index>(cb);
  const Eigen::Index em = static_cast<Eigen::Index>(m), en = static_cast<Eigen::Index>(n);
  for (std::size_t i = 0; i < batches; ++i) {
    ConstMap A(pa + i * ra * ca, er_a, ec_a);
    ConstMap B(pb + (shared_b ? 0 : i * rb * cb), er_b, ec_b);
    MutMap C(out.data() + i * m * n, em, en);
    if (!transpose_a && !transpose_b) C.noalias() = A * B;
    else if (transpose_a && !transpose_b) C.noalias() = A.transpose() * B;
    else if (!transpose_a && transpose_b) C.noalias() = A * B.transpose();
    else C.noalias() = A.transpose() * B.transpose();
  }
  ImplPtr ai = a.impl();
  ImplPtr bi = b.impl();
  return make_result(out_shape, std::move(out), {a, b}, [=](const TensorImpl& o) {
    double* ga = wants_grad(ai) ? grad_ptr(ai) : nullptr;
    double* gb = wants_grad(bi) ? grad_ptr(bi) : nullptr;
    for (std::size_t i = 0; i < batches; ++i) {
      ConstMap A(ai->data.data() + i * ra * ca, er_a, ec_a);
      ConstMap B(bi->data.data() + (shared_b ? 0 : i * rb * cb), er_b, ec_b);
      ConstMap G(o.grad.data() + i * m * n, em, en);
      if (ga) {
        MutMap dA(ga + i * ra * ca, er_a, ec_a);
        if (!transpose_a) {
          if (transpose_b) dA.noalias() += G * B;
          else dA.noalias() += G * B.transpose();
        } else {
          if (transpose_b) dA.noalias() += B.transpose() * G.transpose();
          else dA.noalias() += B * G.transpose();
        }
      }
      if (gb) {
        MutMap dB(gb + (shared_b ? 0 : i * rb * cb), er_b, ec_b);
        if (!transpose_b) {
          if (transpose_a) dB.noalias() += A * G;
          else dB.noalias() += A.transpose() * G;
        } else {
          if (transpose_a) dB.noalias() += G.transpose() * A.transpose();
          else dB.noalias() += G.transpose() * A;
        }
      }
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& weight, const std::optional<Tensor>& bias) {
  if (weight.dim() != 2 || x.dim() == 0 || x.shape().back() != weight.size(0)) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                         shape_str(weight.shape()));
  }
  const std::size_t in = weight.size(0);
  const std::size_t out_dim = weight.size(1);
  if (bias && bias->numel() != out_dim) {
    throw DimensionError("linear: bias " + shape_str(bias->shape()) + " does not match weight " +
                         shape_str(weight.shape()));
  }
  const std::size_t rows = x.numel() / in;
  Shape out_shape = x.shape();
  out_shape.back() = out_dim;
  std::vector<double> out(rows * out_dim);
  const auto er = static_cast<Eigen::Index>(rows), ei = static_cast<Eigen::Index>(in),
             eo = static_cast<Eigen::Index>(out_dim);
  {
    ConstMap X(x.data().data(), er, ei);
    ConstMap W(weight.data().data(), ei, eo);
    MutMap Y(out.data(), er, eo);
    Y.noalias() = X * W;
    if (bias) {
      Eigen::Map<const Eigen::RowVectorXd> b(bias->data().data(), eo);
      Y.rowwise() += b;
    }
  }
  ImplPtr xi = x.impl();
  ImplPtr wi = weight.impl();
  ImplPtr bi = bias ? bias->impl() : nullptr;
  std::vector<Tensor> inputs{x, weight};
  if (bias) inputs.push_back(*bias);
  return make_result(out_shape, std::move(out), inputs, [=](const TensorImpl& o) {
    ConstMap G(o.grad.data(), er, eo);
    if (wants_grad(xi)) {
      MutMap dX(grad_ptr(xi), er, ei);
      ConstMap W(wi->data.data(), ei, eo);
      dX.noalias() += G * W.transpose();
    }
    if (wants_grad(wi)) {
      MutMap dW(grad_ptr(wi), ei, eo);
      ConstMap X(xi->data.data(), er, ei);
      dW.noalias() += X.transpose() * G;
    }
    if (wants_grad(bi)) {
      Eigen::Map<Eigen::RowVectorXd> db(grad_ptr(bi), eo);
      db += G.colwise().sum();
    }
  });
}

std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t padding) {
  if (stride == 0) throw ConfigError("convolution stride must be >= 1");
  if (in + 2 * padding < kernel) {
    throw DimensionError("kernel extent " + std::to_string(kernel) + " exceeds padded input extent " +
                         std::to_string(in + 2 * padding));
  }
  return (in + 2 * padding - kernel) / stride + 1;
}

namespace {

struct ConvGeometry {
  std::size_t batch, c_in, h, w, c_out, kh, kw, ho, wo, stride, pad;
};

void im2col(const double* img, const ConvGeometry& g, double* cols) {
  const std::size_t plane = g.ho * g.wo;
  for (std::size_t c = 0; c < g.c_in; ++c)
    for (std::size_t i = 0; i < g.kh; ++i)
      for (std::size_t j = 0; j < g.kw; ++j) {
        double* row = cols + ((c * g.kh + i) * g.kw + j) * plane;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + i) - static_cast<std::ptrdiff_t>(g.pad);
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * g.stride + j) - static_cast<std::ptrdiff_t>(g.pad);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(g.h) &&
                                ix < static_cast<std::ptrdiff_t>(g.w);
            row[oy * g.wo + ox] = inside ? img[(c * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)] : 0.0;
          }
        }
      }
}

void col2im(const double* cols, const ConvGeometry& g, double* img) {
  const std::size_t plane = g.ho * g.wo;
  for (std::size_t c = 0; c < g.c_in; ++c)
    for (std::size_t i = 0; i < g.kh; ++i)
      for (std::size_t j = 0; j < g.kw; ++j) {
        const double* row = cols + ((c * g.kh + i) * g.kw + j) * plane;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + i) - static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * g.stride + j) - static_cast<std::ptrdiff_t>(g.pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
            img[(c * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)] += row[oy * g.wo + ox];
          }
        }
      }
}

Tensor conv2d_dense(const Tensor& x, const Tensor& kernel, const std::optional<Tensor>& bias, const ConvGeometry& g) {
  const std::size_t ckk = g.c_in * g.kh * g.kw;
  const std::size_t plane = g.ho * g.wo;
  std::vector<double> out(g.batch * g.c_out * plane);
  std::vector<double> cols(ckk * plane);
  const auto e_out = static_cast<Eigen::Index>(g.c_out), e_ckk = static_cast<Eigen::Index>(ckk),
             e_plane = static_cast<Eigen::Index>(plane);
  ConstMap W(kernel.data().data(), e_out, e_ckk);
  for (std::size_t b = 0; b < g.batch; ++b) {
    im2col(x.data().data() + b * g.c_in * g.h * g.w, g, cols.data());
    MutMap Y(out.data() + b * g.c_out * plane, e_out, e_plane);
    Y.noalias() = W * ConstMap(cols.data(), e_ckk, e_plane);
    if (bias) {
      for (std::size_t c = 0; c < g.c_out; ++c) Y.row(static_cast<Eigen::Index>(c)).array() += (*bias)[c];
    }
  }
  ImplPtr xi = x.impl();
  ImplPtr ki = kernel.impl();
  ImplPtr bi = bias ? bias->impl() : nullptr;
  std::vector<Tensor> inputs{x, kernel};
  if (bias) inputs.push_back(*bias);
  return make_result({g.batch, g.c_out, g.ho, g.wo}, std::move(out), inputs, [=](const TensorImpl& o) {
    std::vector<double> buf(ckk * plane);
    ConstMap Wm(ki->data.data(), e_out, e_ckk);
    for (std::size_t b = 0; b < g.batch; ++b) {
      ConstMap G(o.grad.data() + b * g.c_out * plane, e_out, e_plane);
      if (wants_grad(ki)) {
        im2col(xi->data.data() + b * g.c_in * g.h * g.w, g, buf.data());
        MutMap dW(grad_ptr(ki), e_out, e_ckk);
        dW.noalias() += G * ConstMap(buf.data(), e_ckk, e_plane).transpose();
      }
      if (wants_grad(xi)) {
        MutMap dcols(buf.data(), e_ckk, e_plane);
        dcols.noalias() = Wm.transpose() * G;
        col2im(buf.data(), g, grad_ptr(xi) + b * g.c_in * g.h * g.w);
      }
      if (wants_grad(bi)) {
        double* gb = grad_ptr(bi);
        for (std::size_t c = 0; c < g.c_out; ++c) gb[c] += G.row(static_cast<Eigen::Index>(c)).sum();
      }
    }
  });
}

Tensor conv2d_depthwise(const Tensor& x, const Tensor& kernel, const std::optional<Tensor>& bias,
                        const ConvGeometry& g) {
  const std::size_t plane = g.ho * g.wo;
  std::vector<double> out(g.batch * g.c_in * plane, 0.0);
  const double* px = x.data().data();
  const double* pk = kernel.data().data();
  auto for_each_tap = [g](auto&& fn) {
    for (std::size_t b = 0; b < g.batch; ++b)
      for (std::size_t c = 0; c < g.c_in; ++c)
        for (std::size_t oy = 0; oy < g.ho; ++oy)
          for (std::size_t ox = 0; ox < g.wo; ++ox)
            for (std::size_t i = 0; i < g.kh; ++i) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + i) - static_cast<std::ptrdiff_t>(g.pad);
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
              for (std::size_t j = 0; j < g.kw; ++j) {
                const std::ptrdiff_t ix =
                    static_cast<std::ptrdiff_t>(ox * g.stride + j) - static_cast<std::ptrdiff_t>(g.pad);
                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
                const std::size_t out_idx = ((b * g.c_in + c) * g.ho + oy) * g.wo + ox;
                const std::size_t in_idx =
                    ((b * g.c_in + c) * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix);
                const std::size_t k_idx = (c * g.kh + i) * g.kw + j;
                fn(out_idx, in_idx, k_idx);
              }
            }
  };
  for_each_tap([&](std::size_t o, std::size_t in, std::size_t k) { out[o] += pk[k] * px[in]; });
  if (bias) {
    for (std::size_t b = 0; b < g.batch; ++b)
      for (std::size_t c = 0; c < g.c_in; ++c)
        for (std::size_t p = 0; p < plane; ++p) out[(b * g.c_in + c) * plane + p] += (*bias)[c];
  }
  ImplPtr xi = x.impl();
  ImplPtr ki = kernel.impl();
  ImplPtr bi = bias ? bias->impl() : nullptr;
  std::vector<Tensor> inputs{x, kernel};
  if (bias) inputs.push_back(*bias);
  return make_result({g.batch, g.c_in, g.ho, g.wo}, std::move(out), inputs, [=](const TensorImpl& o) {
    double* gx = wants_grad(xi) ? grad_ptr(xi) : nullptr;
    double* gk = wants_grad(ki) ? grad_ptr(ki) : nullptr;
    const double* vx = xi->data.data();
    const double* vk = ki->data.data();
    for_each_tap([&](std::size_t oi, std::size_t in, std::size_t k) {
      if (gx) gx[in] += vk[k] * o.grad[oi];
      if (gk) gk[k] += vx[in] * o.grad[oi];
    });
    if (wants_grad(bi)) {
      double* gb = grad_ptr(bi);
      for (std::size_t b = 0; b < g.batch; ++b)
        for (std::size_t c = 0; c < g.c_in; ++c)
          for (std::size_t p = 0; p < plane; ++p) gb[c] += o.grad[(b * g.c_in + c) * plane + p];
    }
  });
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& kernel, const std::optional<Tensor>& bias, const ConvParams& params) {
  if (x.dim() == 3) {
    Tensor y = conv2d(reshape(x, {1, x.size(0), x.size(1), x.size(2)}), kernel, bias, params);
    return reshape(y, {y.size(1), y.size(2), y.size(3)});
  }
  if (x.dim() != 4 || kernel.dim() != 4) {
    throw DimensionError("conv2d expects [B,C,H,W] input and 4-D kernel, got " + shape_str(x.shape()) + " and " +
                         shape_str(kernel.shape()));
  }
  ConvGeometry g{};
  g.batch = x.size(0);
  g.c_in = x.size(1);
  g.h = x.size(2);
  g.w = x.size(3);
  g.c_out = kernel.size(0);
  g.kh = kernel.size(2);
  g.kw = kernel.size(3);
  g.stride = params.stride;
  g.pad = params.padding;
  g.ho = conv_out_extent(g.h, g.kh, g.stride, g.pad);
  g.wo = conv_out_extent(g.w, g.kw, g.stride, g.pad);
  if (bias && bias->numel() != g.c_out) {
    throw DimensionError("conv2d bias " + shape_str(bias->shape()) + " does not match kernel " +
                         shape_str(kernel.shape()));
  }
  switch (params.mode) {
    case ConvMode::depthwise:
      if (kernel.size(1) != 1 || g.c_out != g.c_in) {
        throw DimensionError("depthwise kernel must be [C,1,kh,kw] with C == " + std::to_string(g.c_in) + ", got " +
                             shape_str(kernel.shape()));
      }
      return conv2d_depthwise(x, kernel, bias, g);
    case ConvMode::pointwise:
      if (g.kh != 1 || g.kw != 1) {
        throw DimensionError("pointwise kernel must be 1x1, got " + shape_str(kernel.shape()));
      }
      [[fallthrough]];
    case ConvMode::standard:
      if (kernel.size(1) != g.c_in) {
        throw DimensionError("kernel " + shape_str(kernel.shape()) + " does not match input channels of " +
                             shape_str(x.shape()));
      }
      return conv2d_dense(x, kernel, bias, g);
  }
  throw UsageError("unknown convolution mode");
}

// ---------------------------------------------------------------------------
// Normalization

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                  Tensor& running_var, bool training, double eps, double momentum) {
  if (x.dim() < 2) throw DimensionError("batch_norm expects [B,C,...], got " + shape_str(x.shape()));
  const std::size_t batch = x.size(0);
  const std::size_t channels = x.size(1);
  const std::size_t spatial = x.numel() / (batch * channels);
  if (gamma.numel() != channels || beta.numel() != channels || running_mean.numel() != channels ||
      running_var.numel() != channels) {
    throw DimensionError("batch_norm parameters do not match " + std::to_string(channels) + " channels");
  }
  if (training && batch < 2) throw UsageError("batch_norm in training mode needs batch >= 2");

  const std::size_t count = batch * spatial;
  std::vector<double> mean_c(channels), invstd(channels);
  const double* px = x.data().data();
  auto at = [&](std::size_t b, std::size_t c, std::size_t s) { return (b * channels + c) * spatial + s; };
  if (training) {
    for (std::size_t c = 0; c < channels; ++c) {
      double m = 0.0;
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t s = 0; s < spatial; ++s) m += px[at(b, c, s)];
      m /= static_cast<double>(count);
      double v = 0.0;
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t s = 0; s < spatial; ++s) {
          const double d = px[at(b, c, s)] - m;
          v += d * d;
        }
      v /= static_cast<double>(count);
      mean_c[c] = m;
      invstd[c] = 1.0 / std::sqrt(v + eps);
      const double unbiased = count > 1 ? v * static_cast<double>(count) / static_cast<double>(count - 1) : v;
      running_mean.data()[c] = (1.0 - momentum) * running_mean[c] + momentum * m;
      running_var.data()[c] = (1.0 - momentum) * running_var[c] + momentum * unbiased;
    }
  } else {
    for (std::size_t c = 0; c < channels; ++c) {
      mean_c[c] = running_mean[c];
      invstd[c] = 1.0 / std::sqrt(running_var[c] + eps);
    }
  }
  std::vector<double> xhat(x.numel()), out(x.numel());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t s = 0; s < spatial; ++s) {
        const std::size_t i = at(b, c, s);
        xhat[i] = (px[i] - mean_c[c]) * invstd[c];
        out[i] = gamma[c] * xhat[i] + beta[c];
      }
  ImplPtr xi = x.impl();
  ImplPtr gi = gamma.impl();
  ImplPtr bi = beta.impl();
  return make_result(x.shape(), std::move(out), {x, gamma, beta},
                     [=, xhat = std::move(xhat), invstd = std::move(invstd)](const TensorImpl& o) {
                       auto idx = [&](std::size_t b, std::size_t c, std::size_t s) {
                         return (b * channels + c) * spatial + s;
                       };
                       const double* g = o.grad.data();
                       for (std::size_t c = 0; c < channels; ++c) {
                         double sum_g = 0.0, sum_gx = 0.0;
                         for (std::size_t b = 0; b < batch; ++b)
                           for (std::size_t s = 0; s < spatial; ++s) {
                             const std::size_t i = idx(b, c, s);
                             sum_g += g[i];
                             sum_gx += g[i] * xhat[i];
                           }
                         if (wants_grad(gi)) grad_ptr(gi)[c] += sum_gx;
                         if (wants_grad(bi)) grad_ptr(bi)[c] += sum_g;
                         if (!wants_grad(xi)) continue;
                         double* gx = grad_ptr(xi);
                         const double gam = gi->data[c];
                         if (training) {
                           const double n = static_cast<double>(count);
                           for (std::size_t b = 0; b < batch; ++b)
                             for (std::size_t s = 0; s < spatial; ++s) {
                               const std::size_t i = idx(b, c, s);
                               gx[i] += gam * invstd[c] * (g[i] - sum_g / n - xhat[i] * sum_gx / n);
                             }
                         } else {
                           for (std::size_t b = 0; b < batch; ++b)
                             for (std::size_t s = 0; s < spatial; ++s) {
                               const std::size_t i = idx(b, c, s);
                               gx[i] += gam * invstd[c] * g[i];
                             }
                         }
                       }
                     });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.dim() == 0 || x.shape().back() == 0) throw DimensionError("layer_norm over an empty axis");
  const std::size_t d = x.shape().back();
  if (gamma.numel() != d || beta.numel() != d) {
    throw DimensionError("layer_norm affine params do not match last extent " + std::to_string(d));
  }
  const std::size_t rows = x.numel() / d;
  std::vector<double> xhat(x.numel()), out(x.numel()), invstd(rows);
  const double* px = x.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = px + r * d;
    double m = 0.0;
    for (std::size_t i = 0; i < d; ++i) m += row[i];
    m /= static_cast<double>(d);
    double v = 0.0;
    for (std::size_t i = 0; i < d; ++i) v += (row[i] - m) * (row[i] - m);
    v /= static_cast<double>(d);
    invstd[r] = 1.0 / std::sqrt(v + eps);
    for (std::size_t i = 0; i < d; ++i) {
      xhat[r * d + i] = (row[i] - m) * invstd[r];
      out[r * d + i] = gamma[i] * xhat[r * d + i] + beta[i];
    }
  }
  ImplPtr xi = x.impl();
  ImplPtr gi = gamma.impl();
  ImplPtr bi = beta.impl();
  return make_result(x.shape(), std::move(out), {x, gamma, beta},
                     [=, xhat = std::move(xhat), invstd = std::move(invstd)](const TensorImpl& o) {
                       const double* g = o.grad.data();
                       double* gg = wants_grad(gi) ? grad_ptr(gi) : nullptr;
                       double* gb = wants_grad(bi) ? grad_ptr(bi) : nullptr;
                       double* gx = wants_grad(xi) ? grad_ptr(xi) : nullptr;
                       const double n = static_cast<double>(d);
                       for (std::size_t r = 0; r < rows; ++r) {
                         double mean_dx = 0.0, mean_dxx = 0.0;
                         for (std::size_t i = 0; i < d; ++i) {
                           const std::size_t k = r * d + i;
                           if (gg) gg[i] += g[k] * xhat[k];
                           if (gb) gb[i] += g[k];
                           const double dxhat = g[k] * gi->data[i];
                           mean_dx += dxhat;
                           mean_dxx += dxhat * xhat[k];
                         }
                         if (!gx) continue;
                         mean_dx /= n;
                         mean_dxx /= n;
                         for (std::size_t i = 0; i < d; ++i) {
                           const std::size_t k = r * d + i;
                           gx[k] += invstd[r] * (g[k] * gi->data[i] - mean_dx - xhat[k] * mean_dxx);
                         }
                       }
                     });
}

// ---------------------------------------------------------------------------
// Activations

Tensor softmax(const Tensor& x) {
  if (x.dim() == 0 || x.shape().back() == 0) throw DimensionError("softmax over an empty axis");
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  std::vector<double> out(x.numel());
  const double* px = x.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = px + r * n;
    double* y = out.data() + r * n;
    const double mx = *std::max_element(row, row + n);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) total += (y[i] = std::exp(row[i] - mx));
    for (std::size_t i = 0; i < n; ++i) y[i] /= total;
  }
  ImplPtr xi = x.impl();
  std::vector<double> saved = out;
  return make_result(x.shape(), std::move(out), {x}, [xi, n, rows, saved = std::move(saved)](const TensorImpl& o) {
    double* gx = grad_ptr(xi);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = saved.data() + r * n;
      const double* g = o.grad.data() + r * n;
      double dot = 0.0;
      for (std::size_t i = 0; i < n; ++i) dot += g[i] * y[i];
      for (std::size_t i = 0; i < n; ++i) gx[r * n + i] += y[i] * (g[i] - dot);
    }
  });
}

Tensor log_softmax(const Tensor& x) {
  if (x.dim() == 0 || x.shape().back() == 0) throw DimensionError("log_softmax over an empty axis");
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  std::vector<double> out(x.numel());
  const double* px = x.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = px + r * n;
    const double mx = *std::max_element(row, row + n);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) total += std::exp(row[i] - mx);
    const double lse = mx + std::log(total);
    for (std::size_t i = 0; i < n; ++i) out[r * n + i] = row[i] - lse;
  }
  ImplPtr xi = x.impl();
  std::vector<double> saved = out;
  return make_result(x.shape(), std::move(out), {x}, [xi, n, rows, saved = std::move(saved)](const TensorImpl& o) {
    double* gx = grad_ptr(xi);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* g = o.grad.data() + r * n;
      double total = 0.0;
      for (std::size_t i = 0; i < n; ++i) total += g[i];
      for (std::size_t i = 0; i < n; ++i) gx[r * n + i] += g[i] - std::exp(saved[r * n + i]) * total;
    }
  });
}

Tensor relu(const Tensor& x) {
  return unary_op(
      x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& x) {
  return unary_op(
      x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0)); },
      [](double v) {
        const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
        const double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * std::numbers::pi);
        return cdf + v * pdf;
      });
}

Tensor prelu(const Tensor& x, const Tensor& slope) {
  std::size_t channels = 1;
  std::size_t inner = x.numel();
  std::size_t outer = 1;
  if (slope.numel() != 1) {
    if (x.dim() < 2 || x.size(1) != slope.numel()) {
      throw DimensionError("prelu slope " + shape_str(slope.shape()) + " does not match channels of " +
                           shape_str(x.shape()));
    }
    outer = x.size(0);
    channels = x.size(1);
    inner = x.numel() / (outer * channels);
  }
  std::vector<double> out(x.numel());
  const double* px = x.data().data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t c = 0; c < channels; ++c) {
      const double a = slope[c];
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t k = (o * channels + c) * inner + i;
        out[k] = px[k] >= 0.0 ? px[k] : a * px[k];
      }
    }
  ImplPtr xi = x.impl();
  ImplPtr si = slope.impl();
  return make_result(x.shape(), std::move(out), {x, slope}, [=](const TensorImpl& o) {
    double* gx = wants_grad(xi) ? grad_ptr(xi) : nullptr;
    double* gs = wants_grad(si) ? grad_ptr(si) : nullptr;
    for (std::size_t b = 0; b < outer; ++b)
      for (std::size_t c = 0; c < channels; ++c) {
        const double a = si->data[c];
        for (std::size_t i = 0; i < inner; ++i) {
          const std::size_t k = (b * channels + c) * inner + i;
          const double v = xi->data[k];
          if (gx) gx[k] += o.grad[k] * (v >= 0.0 ? 1.0 : a);
          if (gs && v < 0.0) gs[c] += o.grad[k] * v;
        }
      }
  });
}

Tensor softplus(const Tensor& x) {
  return unary_op(
      x, [](double v) { return v > 0.0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); },
      [](double v) { return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); });
}

Tensor gem_pool(const Tensor& x, const Tensor& p, double eps) {
  if (p.numel() != 1) throw ConfigError("gem_pool exponent must be a single value");
  const double pv = p[0];
  if (!(pv > 0.0) || !std::isfinite(pv)) {
    throw NumericalError("gem_pool exponent must be finite and > 0, got " + std::to_string(pv));
  }
  if (x.dim() == 3) {
    Tensor y = gem_pool(reshape(x, {1, x.size(0), x.size(1), x.size(2)}), p, eps);
    return reshape(y, {x.size(0)});
  }
  if (x.dim() != 4) throw DimensionError("gem_pool expects [B,C,H,W], got " + shape_str(x.shape()));
  const std::size_t rows = x.size(0) * x.size(1);
  const std::size_t n = x.size(2) * x.size(3);
  if (n == 0) throw DimensionError("gem_pool over empty spatial extent");
  std::vector<double> out(rows), moment(rows);
  const double* px = x.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    double m = 0.0;
    for (std::size_t i = 0; i < n; ++i) m += std::pow(std::max(px[r * n + i], eps), pv);
    m /= static_cast<double>(n);
    moment[r] = m;
    out[r] = std::pow(m, 1.0 / pv);
  }
  ImplPtr xi = x.impl();
  ImplPtr pi = p.impl();
  std::vector<double> pooled = out;
  return make_result({x.size(0), x.size(1)}, std::move(out), {x, p},
                     [=, pooled = std::move(pooled), moment = std::move(moment)](const TensorImpl& o) {
                       double* gx = wants_grad(xi) ? grad_ptr(xi) : nullptr;
                       double* gp = wants_grad(pi) ? grad_ptr(pi) : nullptr;
                       const double* vx = xi->data.data();
                       const double nn = static_cast<double>(n);
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double g = o.grad[r];
                         const double y = pooled[r];
                         double moment_log = 0.0;
                         for (std::size_t i = 0; i < n; ++i) {
                           const double v = vx[r * n + i];
                           const double xc = std::max(v, eps);
                           if (gx && v >= eps) gx[r * n + i] += g * std::pow(xc / y, pv - 1.0) / nn;
                           if (gp) moment_log += std::pow(xc, pv) * std::log(xc);
                         }
                         if (gp) {
                           moment_log /= nn;
                           gp[0] += g * y * (moment_log / (pv * moment[r]) - std::log(moment[r]) / (pv * pv));
                         }
                       }
                     });
}

// ---------------------------------------------------------------------------
// Data movement

Tensor reshape(const Tensor& x, const Shape& shape) {
  if (numel_of(shape) != x.numel()) {
    throw DimensionError("cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  ImplPtr xi = x.impl();
  return make_result(shape, x.to_vector(), {x}, [xi](const TensorImpl& o) {
    double* gx = grad_ptr(xi);
    for (std::size_t i = 0; i < o.grad.size(); ++i) gx[i] += o.grad[i];
  });
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& order) {
  const std::size_t nd = x.dim();
  std::vector<bool> seen(nd, false);
  if (order.size() != nd) throw DimensionError("permute order rank does not match " + shape_str(x.shape()));
  for (std::size_t a : order) {
    if (a >= nd || seen[a]) throw DimensionError("permute order is not a permutation");
    seen[a] = true;
  }
  std::vector<std::size_t> in_strides(nd, 1);
  for (std::size_t i = nd; i-- > 1;) in_strides[i - 1] = in_strides[i] * x.size(i);
  Shape out_shape(nd);
  std::vector<std::size_t> gather(nd);
  for (std::size_t d = 0; d < nd; ++d) {
    out_shape[d] = x.size(order[d]);
    gather[d] = in_strides[order[d]];
  }
  const std::vector<std::size_t> unused(nd, 0);
  std::vector<double> out(x.numel());
  const double* px = x.data().data();
  broadcast_loop(out_shape, gather, unused, [&](std::size_t i, std::size_t src, std::size_t) { out[i] = px[src]; });
  ImplPtr xi = x.impl();
  return make_result(out_shape, std::move(out), {x}, [xi, gather, unused](const TensorImpl& o) {
    double* gx = grad_ptr(xi);
    broadcast_loop(o.shape, gather, unused, [&](std::size_t i, std::size_t src, std::size_t) { gx[src] += o.grad[i]; });
  });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  const Shape& ref = parts.front().shape();
  if (axis >= ref.size()) throw DimensionError("concat axis out of range for " + shape_str(ref));
  Shape out_shape = ref;
  out_shape[axis] = 0;
  for (const auto& t : parts) {
    if (t.dim() != ref.size()) throw DimensionError("concat rank mismatch");
    for (std::size_t d = 0; d < ref.size(); ++d) {
      if (d != axis && t.size(d) != ref[d]) {
        throw DimensionError("concat extents differ: " + shape_str(ref) + " vs " + shape_str(t.shape()));
      }
    }
    out_shape[axis] += t.size(axis);
  }
  const AxisSplit s = split_at(out_shape, axis);
  std::vector<double> out(numel_of(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& t : parts) {
    offsets.push_back(offset);
    const std::size_t ext = t.size(axis);
    const double* pt = t.data().data();
    for (std::size_t o = 0; o < s.outer; ++o)
      std::copy_n(pt + o * ext * s.inner, ext * s.inner, out.data() + (o * s.extent + offset) * s.inner);
    offset += ext;
  }
  std::vector<ImplPtr> impls;
  for (const auto& t : parts) impls.push_back(t.impl());
  return make_result(out_shape, std::move(out), parts, [impls, offsets, s, axis](const TensorImpl& g) {
    for (std::size_t p = 0; p < impls.size(); ++p) {
      if (!wants_grad(impls[p])) continue;
      const std::size_t ext = impls[p]->shape[axis];
      double* gp = grad_ptr(impls[p]);
      for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t k = 0; k < ext * s.inner; ++k)
          gp[o * ext * s.inner + k] += g.grad[(o * s.extent + offsets[p]) * s.inner + k];
    }
  });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
  if (axis >= x.dim() || start + length > x.size(axis)) {
    throw DimensionError("slice [" + std::to_string(start) + ", +" + std::to_string(length) + ") on axis " +
                         std::to_string(axis) + " out of range for " + shape_str(x.shape()));
  }
  const AxisSplit s = split_at(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  std::vector<double> out(numel_of(out_shape));
  const double* px = x.data().data();
  for (std::size_t o = 0; o < s.outer; ++o)
    std::copy_n(px + (o * s.extent + start) * s.inner, length * s.inner, out.data() + o * length * s.inner);
  ImplPtr xi = x.impl();
  return make_result(out_shape, std::move(out), {x}, [xi, s, start, length](const TensorImpl& g) {
    double* gx = grad_ptr(xi);
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t k = 0; k < length * s.inner; ++k)
        gx[(o * s.extent + start) * s.inner + k] += g.grad[o * length * s.inner + k];
  });
}

std::vector<Tensor> split(const Tensor& x, std::size_t axis, const std::vector<std::size_t>& sizes) {
  if (axis >= x.dim()) throw DimensionError("split axis out of range for " + shape_str(x.shape()));
  const std::size_t total = std::accumulate(sizes.begin(), sizes.end(), std::size_t{0});
  if (total != x.size(axis)) {
    throw DimensionError("split sizes sum to " + std::to_string(total) + " but axis extent is " +
                         std::to_string(x.size(axis)));
  }
  std::vector<Tensor> parts;
  std::size_t start = 0;
  for (std::size_t len : sizes) {
    parts.push_back(slice(x, axis, start, len));
    start += len;
  }
  return parts;
}

Tensor flatten_spatial(const Tensor& x) {
  if (x.dim() == 3) {
    return permute(reshape(x, {x.size(0), x.size(1) * x.size(2)}), {1, 0});
  }
  if (x.dim() != 4) throw DimensionError("flatten_spatial expects [B,C,H,W], got " + shape_str(x.shape()));
  return permute(reshape(x, {x.size(0), x.size(1), x.size(2) * x.size(3)}), {0, 2, 1});
}

Tensor unflatten_spatial(const Tensor& x, std::size_t height, std::size_t width) {
  if (x.dim() != 3 || x.size(1) != height * width) {
    throw DimensionError("cannot unflatten " + shape_str(x.shape()) + " to a " + std::to_string(height) + "x" +
                         std::to_string(width) + " grid");
  }
  return reshape(permute(x, {0, 2, 1}), {x.size(0), x.size(2), height, width});
}

Tensor index_select(const Tensor& x, const std::vector<std::size_t>& indices) {
  if (x.dim() == 0) throw DimensionError("index_select on a 0-d tensor");
  const std::size_t rows = x.size(0);
  const std::size_t row_len = x.numel() / std::max<std::size_t>(rows, 1);
  for (std::size_t i : indices) {
    if (i >= rows) throw DimensionError("index " + std::to_string(i) + " out of range for " + shape_str(x.shape()));
  }
  Shape out_shape = x.shape();
  out_shape[0] = indices.size();
  std::vector<double> out(indices.size() * row_len);
  const double* px = x.data().data();
  for (std::size_t r = 0; r < indices.size(); ++r) std::copy_n(px + indices[r] * row_len, row_len, out.data() + r * row_len);
  ImplPtr xi = x.impl();
  return make_result(out_shape, std::move(out), {x}, [xi, indices, row_len](const TensorImpl& g) {
    double* gx = grad_ptr(xi);
    for (std::size_t r = 0; r < indices.size(); ++r)
      for (std::size_t k = 0; k < row_len; ++k) gx[indices[r] * row_len + k] += g.grad[r * row_len + k];
  });
}

}  // namespace fusionreid
