#pragma once

#include <optional>
#include <string>
#include <vector>

#include "fusionreid/param_store.hpp"
#include "fusionreid/tensor.hpp"

namespace fusionreid::nn {

// Layers register their tensors in a ParamStore under `prefix` at
// construction and keep shared handles; forward passes read them directly.

class Linear {
 public:
  Linear() = default;
  Linear(ParamStore& store, const std::string& prefix, std::size_t in, std::size_t out, Rng& rng,
         bool with_bias = true, double init_std = 0.02);
  Tensor operator()(const Tensor& x) const;

  Tensor weight;  // [in, out]
  std::optional<Tensor> bias;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParamStore& store, const std::string& prefix, std::size_t dim);
  Tensor operator()(const Tensor& x) const { return layer_norm(x, gamma, beta, eps); }

  Tensor gamma, beta;
  double eps = 1e-5;
};

class BatchNorm {
 public:
  BatchNorm() = default;
  BatchNorm(ParamStore& store, const std::string& prefix, std::size_t channels);
  Tensor operator()(const Tensor& x, bool training) {
    return batch_norm(x, gamma, beta, running_mean, running_var, training, eps, momentum);
  }

  Tensor gamma, beta, running_mean, running_var;
  double eps = 1e-5;
  double momentum = 0.1;
};

class Conv2d {
 public:
  Conv2d() = default;
  // Kaiming-normal (fan-out) initialization.
  Conv2d(ParamStore& store, const std::string& prefix, std::size_t c_in, std::size_t c_out, std::size_t kernel,
         ConvParams params, Rng& rng, bool with_bias = false);
  Tensor operator()(const Tensor& x) const { return conv2d(x, weight, bias, params); }

  Tensor weight;
  std::optional<Tensor> bias;
  ConvParams params;
};

class PRelu {
 public:
  PRelu() = default;
  PRelu(ParamStore& store, const std::string& prefix, std::size_t channels, double init = 0.25);
  Tensor operator()(const Tensor& x) const { return prelu(x, slope); }

  Tensor slope;
};

enum class Pooling { gem, average };

// GeM with learnable p, or plain average pooling (p fixed at 1, no parameter).
class GemPool {
 public:
  GemPool() = default;
  GemPool(ParamStore& store, const std::string& prefix, Pooling kind, double p_init = 3.0);
  Tensor operator()(const Tensor& x) const { return gem_pool(x, p, eps); }

  Tensor p;
  double eps = 1e-6;
};

// Two linear layers with a GELU in between.
class FeedForward {
 public:
  FeedForward() = default;
  FeedForward(ParamStore& store, const std::string& prefix, std::size_t dim, std::size_t hidden, Rng& rng);
  Tensor operator()(const Tensor& x) const { return fc2(gelu(fc1(x))); }

  Linear fc1, fc2;
};

// Attention probabilities of one query row (the first token) per head,
// laid out [B, heads, keys].
struct AttentionTap {
  Shape shape;
  std::vector<double> weights;
};

// Multi-head self-attention over [B, T, D] with fused QKV and an output
// projection.
class SelfAttention {
 public:
  SelfAttention() = default;
  SelfAttention(ParamStore& store, const std::string& prefix, std::size_t dim, std::size_t heads, Rng& rng);
  Tensor operator()(const Tensor& x, AttentionTap* tap = nullptr) const;

  Linear qkv, proj;
  std::size_t heads = 1;
};

// Pre-norm transformer block: x + MHSA(LN(x)), then + FFN(LN(.)).
class TransformerBlock {
 public:
  TransformerBlock() = default;
  TransformerBlock(ParamStore& store, const std::string& prefix, std::size_t dim, std::size_t heads,
                   std::size_t hidden, Rng& rng);
  Tensor operator()(const Tensor& x, AttentionTap* tap = nullptr) const;

  LayerNorm norm1, norm2;
  SelfAttention attn;
  FeedForward ffn;
};

// Splits [B, T, heads*d] into [B, heads, T, d].
Tensor split_heads(const Tensor& x, std::size_t heads);
// Inverse of split_heads.
Tensor merge_heads(const Tensor& x);

}  // namespace fusionreid::nn
