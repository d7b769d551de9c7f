#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "fusionreid/backbones.hpp"
#include "fusionreid/nn.hpp"

namespace fusionreid {

// Order of the self-encoding (SEU) and cross-fusion (MFU) units inside
// each stacked layer.
enum class HtmVariant { seu_then_mfu, seu_only, mfu_then_seu, mfu_only };

std::string to_string(HtmVariant v);
HtmVariant parse_variant(const std::string& name);

struct DmfConfig {
  std::size_t dim = 64;
  std::size_t heads = 4;
  std::size_t layers = 2;
  bool seu_shared = true;   // one SEU per layer serves both branches
  bool mfu_shared = false;  // one MFU per layer serves both branches
  HtmVariant variant = HtmVariant::seu_then_mfu;
  double ffn_ratio = 4.0;
  nn::Pooling pooling = nn::Pooling::gem;
  std::size_t lru_kernel = 3;
  // Fused grid; zero means "use the Transformer branch grid".
  Grid grid{};

  std::size_t head_dim() const { return dim / heads; }
  std::size_t ffn_hidden() const;
  bool uses_seu() const { return variant != HtmVariant::mfu_only; }
  bool uses_mfu() const { return variant != HtmVariant::seu_only; }
  void validate() const;
};

// Output of both LRUs: aligned maps and their pooled global tokens.
// Maps are [B, D, H, W]; `*_tokens` hold the same values flattened to
// [B, H*W, D] and are the locals recycled by every layer.
struct RefinedPair {
  Tensor map_c, map_t;
  Tensor tokens_c, tokens_t;
  Tensor global_c, global_t;
};

// Global tokens after `layer` stacked layers (layer 0 == RefinedPair globals).
struct HtmState {
  std::size_t layer = 0;
  Tensor global_c, global_t;
};

enum class Branch { cnn, vit };
std::string to_string(Branch b);

// Per-call attention probabilities recorded while capture is enabled.
struct AttentionRecord {
  std::size_t layer;
  Branch branch;
  std::string unit;  // "seu" or "mfu"
  nn::AttentionTap tap;
};

// Tensors handed to each unit; lets tests check the wiring.
struct WiringRecord {
  std::size_t layer;
  Branch branch;
  std::string unit;
  Tensor query_global;
  Tensor locals;
};

struct DmfTrace {
  bool capture_attention = false;
  std::vector<AttentionRecord> attention;
  std::vector<WiringRecord> wiring;
};

// Depthwise (spatial resampling) + pointwise (channel projection) refinement,
// each followed by BN and PReLU, then pooling to a global token.
class Lru {
 public:
  Lru(ParamStore& store, const std::string& prefix, std::size_t d_in, Grid in_grid, const DmfConfig& cfg,
      Grid out_grid, Rng& rng);
  std::pair<Tensor, Tensor> operator()(const Tensor& x, bool training);

  std::size_t stride() const { return depthwise_.params.stride; }

  nn::Conv2d depthwise_, pointwise_;
  nn::BatchNorm bn1_, bn2_;
  nn::PRelu act1_, act2_;
  nn::GemPool pool_;
};

// Depthwise stride mapping in_grid onto out_grid; ConfigError when none exists.
std::size_t lru_stride(Grid in_grid, Grid out_grid, std::size_t kernel);

// Pre-norm self-attention block over [global; locals].
class Seu {
 public:
  Seu(ParamStore& store, const std::string& prefix, std::size_t dim, std::size_t heads, std::size_t hidden,
      Rng& rng);
  // global [B, D], locals [B, HW, D] -> (S^g [B, D], S^l [B, HW, D]).
  std::pair<Tensor, Tensor> operator()(const Tensor& global, const Tensor& locals,
                                       nn::AttentionTap* tap = nullptr) const;

  nn::TransformerBlock block;
};

// Multi-head cross-attention of one query token over a set of key/value tokens.
class CrossAttention {
 public:
  CrossAttention(ParamStore& store, const std::string& prefix, std::size_t dim, std::size_t heads, Rng& rng);
  // query [B, D], tokens [B, HW, D] -> [B, D] (heads concatenated).
  Tensor operator()(const Tensor& query, const Tensor& tokens, nn::AttentionTap* tap = nullptr) const;

  nn::Linear q, k, v;
  std::size_t heads;
};

// f' = FFN(M) + M with M = cross-attention(own global, other branch locals).
class Mfu {
 public:
  Mfu(ParamStore& store, const std::string& prefix, std::size_t dim, std::size_t heads, std::size_t hidden,
      Rng& rng);
  Tensor operator()(const Tensor& own_global, const Tensor& other_locals, nn::AttentionTap* tap = nullptr) const;

  CrossAttention mhca;
  nn::FeedForward ffn;
};

// One stacked layer. Shared units are the same object for both branches.
struct HtmLayer {
  std::shared_ptr<Seu> seu_c, seu_t;
  std::shared_ptr<Mfu> mfu_c, mfu_t;
};

struct DmfOutput {
  RefinedPair refined;
  std::vector<HtmState> states;  // layers + 1 entries
  const Tensor& final_c() const { return states.back().global_c; }
  const Tensor& final_t() const { return states.back().global_t; }
};

class Dmf {
 public:
  // d_c / d_t: backbone channel dims; grids: backbone output grids.
  Dmf(ParamStore& store, const std::string& prefix, const DmfConfig& cfg, std::size_t d_c, Grid grid_c,
      std::size_t d_t, Grid grid_t, Rng& rng);

  RefinedPair refine(const Tensor& map_c, const Tensor& tokens_t, bool training);
  HtmState step(const HtmState& state, const RefinedPair& refined, DmfTrace* trace = nullptr) const;
  // map_c: [B, D_c, H_c, W_c]; tokens_t: [B, N, D_t].
  DmfOutput operator()(const Tensor& map_c, const Tensor& tokens_t, bool training, DmfTrace* trace = nullptr);

  const DmfConfig& config() const { return cfg_; }
  const Grid& grid() const { return cfg_.grid; }
  const std::vector<HtmLayer>& layers() const { return layers_; }

 private:
  DmfConfig cfg_;
  Grid grid_t_;
  Lru lru_c_, lru_t_;
  std::vector<HtmLayer> layers_;
};

// Closed-form parameter counts. Pure functions of the configuration.
struct DmfParamCounts {
  std::size_t lru_c = 0;
  std::size_t lru_t = 0;
  std::size_t seu = 0;        // one SEU
  std::size_t mfu = 0;        // one MFU
  std::size_t per_layer = 0;  // all units of one layer after sharing
  std::size_t stack = 0;      // layers * per_layer
  std::size_t total = 0;      // LRUs + stack
};

std::size_t seu_param_count(std::size_t dim, std::size_t hidden);
std::size_t mfu_param_count(std::size_t dim, std::size_t hidden);
// Q, K, V (and output, for self-attention) projection weights + biases.
std::size_t attention_projection_params(std::size_t dim, bool with_output_projection);
std::size_t lru_param_count(std::size_t d_in, std::size_t d_out, std::size_t kernel, nn::Pooling pooling);
DmfParamCounts count_params(const DmfConfig& cfg, std::size_t d_c, std::size_t d_t);

// Analytic multiply-accumulate x 2 estimate of the stacked layers for one image.
double htm_flops(const DmfConfig& cfg);

}  // namespace fusionreid
