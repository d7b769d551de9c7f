#include "fusionreid/nn.hpp"

#include <cmath>

namespace fusionreid::nn {

Linear::Linear(ParamStore& store, const std::string& prefix, std::size_t in, std::size_t out, Rng& rng,
               bool with_bias, double init_std) {
  weight = store.add_param(prefix + ".weight", normal_init({in, out}, init_std, rng));
  if (with_bias) bias = store.add_param(prefix + ".bias", Tensor::zeros({out}));
}

Tensor Linear::operator()(const Tensor& x) const { return linear(x, weight, bias); }

LayerNorm::LayerNorm(ParamStore& store, const std::string& prefix, std::size_t dim) {
  gamma = store.add_param(prefix + ".gamma", Tensor::ones({dim}));
  beta = store.add_param(prefix + ".beta", Tensor::zeros({dim}));
}

BatchNorm::BatchNorm(ParamStore& store, const std::string& prefix, std::size_t channels) {
  gamma = store.add_param(prefix + ".gamma", Tensor::ones({channels}));
  beta = store.add_param(prefix + ".beta", Tensor::zeros({channels}));
  running_mean = store.add_buffer(prefix + ".running_mean", Tensor::zeros({channels}));
  running_var = store.add_buffer(prefix + ".running_var", Tensor::ones({channels}));
}

Conv2d::Conv2d(ParamStore& store, const std::string& prefix, std::size_t c_in, std::size_t c_out,
               std::size_t kernel, ConvParams conv_params, Rng& rng, bool with_bias)
    : params(conv_params) {
  const std::size_t in_per_group = params.mode == ConvMode::depthwise ? 1 : c_in;
  const std::size_t fan_out = (params.mode == ConvMode::depthwise ? 1 : c_out) * kernel * kernel;
  weight = store.add_param(prefix + ".weight",
                           normal_init({c_out, in_per_group, kernel, kernel}, std::sqrt(2.0 / fan_out), rng));
  if (with_bias) bias = store.add_param(prefix + ".bias", Tensor::zeros({c_out}));
}

PRelu::PRelu(ParamStore& store, const std::string& prefix, std::size_t channels, double init) {
  slope = store.add_param(prefix + ".slope", Tensor::full({channels}, init));
}

GemPool::GemPool(ParamStore& store, const std::string& prefix, Pooling kind, double p_init) {
  if (kind == Pooling::gem) {
    p = store.add_param(prefix + ".p", Tensor::scalar(p_init));
  } else {
    p = Tensor::scalar(1.0);
  }
}

FeedForward::FeedForward(ParamStore& store, const std::string& prefix, std::size_t dim, std::size_t hidden,
                         Rng& rng)
    : fc1(store, prefix + ".fc1", dim, hidden, rng), fc2(store, prefix + ".fc2", hidden, dim, rng) {}

Tensor split_heads(const Tensor& x, std::size_t heads) {
  const std::size_t b = x.size(0), t = x.size(1), d = x.size(2);
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("dimension " + std::to_string(d) + " not divisible by " + std::to_string(heads) + " heads");
  }
  return permute(reshape(x, {b, t, heads, d / heads}), {0, 2, 1, 3});
}

Tensor merge_heads(const Tensor& x) {
  const std::size_t b = x.size(0), h = x.size(1), t = x.size(2), d = x.size(3);
  return reshape(permute(x, {0, 2, 1, 3}), {b, t, h * d});
}

SelfAttention::SelfAttention(ParamStore& store, const std::string& prefix, std::size_t dim, std::size_t num_heads,
                             Rng& rng)
    : heads(num_heads) {
  if (num_heads == 0 || dim % num_heads != 0) {
    throw ConfigError("dimension " + std::to_string(dim) + " not divisible by " + std::to_string(num_heads) +
                      " heads");
  }
  qkv = Linear(store, prefix + ".qkv", dim, 3 * dim, rng);
  proj = Linear(store, prefix + ".proj", dim, dim, rng);
}

Tensor SelfAttention::operator()(const Tensor& x, AttentionTap* tap) const {
  const std::size_t dim = x.size(2);
  auto parts = split(qkv(x), 2, {dim, dim, dim});
  const Tensor q = split_heads(parts[0], heads);
  const Tensor k = split_heads(parts[1], heads);
  const Tensor v = split_heads(parts[2], heads);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(dim / heads));
  const Tensor attn = softmax(scale(matmul(q, k, false, true), inv_sqrt_d));
  if (tap) {
    const std::size_t b = attn.size(0), h = attn.size(1), t = attn.size(2);
    tap->shape = {b, h, t};
    tap->weights.assign(b * h * t, 0.0);
    for (std::size_t i = 0; i < b * h; ++i)
      for (std::size_t j = 0; j < t; ++j) tap->weights[i * t + j] = attn[i * t * t + j];
  }
  return proj(merge_heads(matmul(attn, v)));
}

TransformerBlock::TransformerBlock(ParamStore& store, const std::string& prefix, std::size_t dim,
                                   std::size_t num_heads, std::size_t hidden, Rng& rng)
    : norm1(store, prefix + ".norm1", dim),
      norm2(store, prefix + ".norm2", dim),
      attn(store, prefix + ".attn", dim, num_heads, rng),
      ffn(store, prefix + ".ffn", dim, hidden, rng) {}

Tensor TransformerBlock::operator()(const Tensor& x, AttentionTap* tap) const {
  const Tensor h = add(attn(norm1(x), tap), x);
  return add(ffn(norm2(h)), h);
}

}  // namespace fusionreid::nn
