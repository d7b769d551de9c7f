#include "fusionreid/dmf.hpp"

#include <cmath>

namespace fusionreid {

std::string to_string(HtmVariant v) {
  switch (v) {
    case HtmVariant::seu_then_mfu: return "seu_then_mfu";
    case HtmVariant::seu_only: return "seu_only";
    case HtmVariant::mfu_then_seu: return "mfu_then_seu";
    case HtmVariant::mfu_only: return "mfu_only";
  }
  return "?";
}

HtmVariant parse_variant(const std::string& name) {
  for (auto v : {HtmVariant::seu_then_mfu, HtmVariant::seu_only, HtmVariant::mfu_then_seu, HtmVariant::mfu_only}) {
    if (to_string(v) == name) return v;
  }
  throw ConfigError("unknown HTM variant '" + name +
                    "' (expected seu_then_mfu, seu_only, mfu_then_seu or mfu_only)");
}

std::string to_string(Branch b) { return b == Branch::cnn ? "cnn" : "vit"; }

std::size_t DmfConfig::ffn_hidden() const {
  return static_cast<std::size_t>(std::lround(ffn_ratio * static_cast<double>(dim)));
}

void DmfConfig::validate() const {
  if (dim == 0 || heads == 0 || dim % heads != 0) {
    throw ConfigError("dmf: dim " + std::to_string(dim) + " not divisible by heads " + std::to_string(heads));
  }
  if (layers == 0) throw ConfigError("dmf: layers must be >= 1");
  if (ffn_ratio <= 0.0) throw ConfigError("dmf: ffn_ratio must be > 0");
  if (lru_kernel == 0 || lru_kernel % 2 == 0) throw ConfigError("dmf: lru_kernel must be odd");
}

// ---------------------------------------------------------------------------

std::size_t lru_stride(Grid in_grid, Grid out_grid, std::size_t kernel) {
  auto fail = [&]() -> std::size_t {
    throw ConfigError("lru: cannot map grid " + std::to_string(in_grid.height) + "x" + std::to_string(in_grid.width) +
                      " onto " + std::to_string(out_grid.height) + "x" + std::to_string(out_grid.width) +
                      " with a strided depthwise convolution");
  };
  if (out_grid.height == 0 || out_grid.width == 0 || in_grid.height % out_grid.height != 0 ||
      in_grid.width % out_grid.width != 0) {
    return fail();
  }
  const std::size_t s = in_grid.height / out_grid.height;
  if (in_grid.width / out_grid.width != s) return fail();
  const std::size_t pad = kernel / 2;
  if (conv_out_extent(in_grid.height, kernel, s, pad) != out_grid.height ||
      conv_out_extent(in_grid.width, kernel, s, pad) != out_grid.width) {
    return fail();
  }
  return s;
}

Lru::Lru(ParamStore& store, const std::string& prefix, std::size_t d_in, Grid in_grid, const DmfConfig& cfg,
         Grid out_grid, Rng& rng) {
  const std::size_t s = lru_stride(in_grid, out_grid, cfg.lru_kernel);
  depthwise_ = nn::Conv2d(store, prefix + ".depthwise", d_in, d_in, cfg.lru_kernel,
                          {ConvMode::depthwise, s, cfg.lru_kernel / 2}, rng);
  bn1_ = nn::BatchNorm(store, prefix + ".bn1", d_in);
  act1_ = nn::PRelu(store, prefix + ".act1", d_in);
  pointwise_ = nn::Conv2d(store, prefix + ".pointwise", d_in, cfg.dim, 1, {ConvMode::pointwise, 1, 0}, rng);
  bn2_ = nn::BatchNorm(store, prefix + ".bn2", cfg.dim);
  act2_ = nn::PRelu(store, prefix + ".act2", cfg.dim);
  pool_ = nn::GemPool(store, prefix + ".pool", cfg.pooling);
}

std::pair<Tensor, Tensor> Lru::operator()(const Tensor& x, bool training) {
  const Tensor spatial = act1_(bn1_(depthwise_(x), training));
  const Tensor out = act2_(bn2_(pointwise_(spatial), training));
  return {out, pool_(out)};
}

Seu::Seu(ParamStore& store, const std::string& prefix, std::size_t dim, std::size_t heads, std::size_t hidden,
         Rng& rng)
    : block(store, prefix, dim, heads, hidden, rng) {}

std::pair<Tensor, Tensor> Seu::operator()(const Tensor& global, const Tensor& locals, nn::AttentionTap* tap) const {
  const std::size_t b = global.size(0), d = global.size(1), n = locals.size(1);
  const Tensor seq = concat({reshape(global, {b, 1, d}), locals}, 1);
  auto parts = split(block(seq, tap), 1, {1, n});
  return {reshape(parts[0], {b, d}), parts[1]};
}

CrossAttention::CrossAttention(ParamStore& store, const std::string& prefix, std::size_t dim, std::size_t num_heads,
                               Rng& rng)
    : q(store, prefix + ".q", dim, dim, rng),
      k(store, prefix + ".k", dim, dim, rng),
      v(store, prefix + ".v", dim, dim, rng),
      heads(num_heads) {
  if (num_heads == 0 || dim % num_heads != 0) {
    throw ConfigError("mhca: dim " + std::to_string(dim) + " not divisible by heads " + std::to_string(num_heads));
  }
}

Tensor CrossAttention::operator()(const Tensor& query, const Tensor& tokens, nn::AttentionTap* tap) const {
  if (tokens.dim() != 3 || tokens.size(1) == 0) throw DataError("mhca: empty key/value token set");
  const std::size_t b = query.size(0), d = query.size(1);
  const Tensor qh = nn::split_heads(reshape(q(query), {b, 1, d}), heads);
  const Tensor kh = nn::split_heads(k(tokens), heads);
  const Tensor vh = nn::split_heads(v(tokens), heads);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d / heads));
  const Tensor attn = softmax(scale(matmul(qh, kh, false, true), inv_sqrt_d));  // [B, H, 1, HW]
  if (tap) {
    tap->shape = {b, heads, tokens.size(1)};
    tap->weights = attn.to_vector();
  }
  return reshape(nn::merge_heads(matmul(attn, vh)), {b, d});
}

Mfu::Mfu(ParamStore& store, const std::string& prefix, std::size_t dim, std::size_t heads, std::size_t hidden,
         Rng& rng)
    : mhca(store, prefix + ".mhca", dim, heads, rng), ffn(store, prefix + ".ffn", dim, hidden, rng) {}

Tensor Mfu::operator()(const Tensor& own_global, const Tensor& other_locals, nn::AttentionTap* tap) const {
  const Tensor m = mhca(own_global, other_locals, tap);
  return add(ffn(m), m);
}

// ---------------------------------------------------------------------------

Dmf::Dmf(ParamStore& store, const std::string& prefix, const DmfConfig& cfg, std::size_t d_c, Grid grid_c,
         std::size_t d_t, Grid grid_t, Rng& rng)
    : cfg_([&] {
        DmfConfig c = cfg;
        c.validate();
        if (c.grid.cells() == 0) c.grid = grid_t;
        return c;
      }()),
      grid_t_(grid_t),
      lru_c_(store, prefix + ".lru_c", d_c, grid_c, cfg_, cfg_.grid, rng),
      lru_t_(store, prefix + ".lru_t", d_t, grid_t, cfg_, cfg_.grid, rng) {
  const std::size_t hidden = cfg_.ffn_hidden();
  for (std::size_t l = 0; l < cfg_.layers; ++l) {
    const std::string p = prefix + ".htm" + std::to_string(l);
    HtmLayer layer;
    if (cfg_.uses_seu()) {
      if (cfg_.seu_shared) {
        layer.seu_c = layer.seu_t = std::make_shared<Seu>(store, p + ".seu", cfg_.dim, cfg_.heads, hidden, rng);
      } else {
        layer.seu_c = std::make_shared<Seu>(store, p + ".seu_c", cfg_.dim, cfg_.heads, hidden, rng);
        layer.seu_t = std::make_shared<Seu>(store, p + ".seu_t", cfg_.dim, cfg_.heads, hidden, rng);
      }
    }
    if (cfg_.uses_mfu()) {
      if (cfg_.mfu_shared) {
        layer.mfu_c = layer.mfu_t = std::make_shared<Mfu>(store, p + ".mfu", cfg_.dim, cfg_.heads, hidden, rng);
      } else {
        layer.mfu_c = std::make_shared<Mfu>(store, p + ".mfu_c", cfg_.dim, cfg_.heads, hidden, rng);
        layer.mfu_t = std::make_shared<Mfu>(store, p + ".mfu_t", cfg_.dim, cfg_.heads, hidden, rng);
      }
    }
    layers_.push_back(std::move(layer));
  }
}

RefinedPair Dmf::refine(const Tensor& map_c, const Tensor& tokens_t, bool training) {
  RefinedPair r;
  std::tie(r.map_c, r.global_c) = lru_c_(map_c, training);
  std::tie(r.map_t, r.global_t) = lru_t_(unflatten_spatial(tokens_t, grid_t_.height, grid_t_.width), training);
  r.tokens_c = flatten_spatial(r.map_c);
  r.tokens_t = flatten_spatial(r.map_t);
  return r;
}

HtmState Dmf::step(const HtmState& state, const RefinedPair& refined, DmfTrace* trace) const {
  if (state.layer >= cfg_.layers) {
    throw UsageError("htm step at layer " + std::to_string(state.layer) + " of " + std::to_string(cfg_.layers));
  }
  const HtmLayer& layer = layers_[state.layer];
  const std::size_t k = state.layer;

  auto tap_for = [&](Branch b, const char* unit) -> nn::AttentionTap* {
    if (!trace || !trace->capture_attention) return nullptr;
    trace->attention.push_back({k, b, unit, {}});
    return &trace->attention.back().tap;
  };
  auto note = [&](Branch b, const char* unit, const Tensor& query, const Tensor& locals) {
    if (trace) trace->wiring.push_back({k, b, unit, query, locals});
  };
  auto run_seu = [&](const Seu& seu, Branch b, const Tensor& global, const Tensor& locals) {
    note(b, "seu", global, locals);
    return seu(global, locals, tap_for(b, "seu"));
  };
  auto run_mfu = [&](const Mfu& mfu, Branch b, const Tensor& global, const Tensor& other_locals) {
    note(b, "mfu", global, other_locals);
    return mfu(global, other_locals, tap_for(b, "mfu"));
  };

  HtmState next;
  next.layer = k + 1;
  switch (cfg_.variant) {
    case HtmVariant::seu_then_mfu: {
      auto [sg_c, sl_c] = run_seu(*layer.seu_c, Branch::cnn, state.global_c, refined.tokens_c);
      auto [sg_t, sl_t] = run_seu(*layer.seu_t, Branch::vit, state.global_t, refined.tokens_t);
      next.global_c = run_mfu(*layer.mfu_c, Branch::cnn, sg_c, sl_t);
      next.global_t = run_mfu(*layer.mfu_t, Branch::vit, sg_t, sl_c);
      break;
    }
    case HtmVariant::seu_only:
      next.global_c = run_seu(*layer.seu_c, Branch::cnn, state.global_c, refined.tokens_c).first;
      next.global_t = run_seu(*layer.seu_t, Branch::vit, state.global_t, refined.tokens_t).first;
      break;
    case HtmVariant::mfu_then_seu: {
      const Tensor m_c = run_mfu(*layer.mfu_c, Branch::cnn, state.global_c, refined.tokens_t);
      const Tensor m_t = run_mfu(*layer.mfu_t, Branch::vit, state.global_t, refined.tokens_c);
      next.global_c = run_seu(*layer.seu_c, Branch::cnn, m_c, refined.tokens_c).first;
      next.global_t = run_seu(*layer.seu_t, Branch::vit, m_t, refined.tokens_t).first;
      break;
    }
    case HtmVariant::mfu_only:
      next.global_c = run_mfu(*layer.mfu_c, Branch::cnn, state.global_c, refined.tokens_t);
      next.global_t = run_mfu(*layer.mfu_t, Branch::vit, state.global_t, refined.tokens_c);
      break;
  }
  return next;
}

DmfOutput Dmf::operator()(const Tensor& map_c, const Tensor& tokens_t, bool training, DmfTrace* trace) {
  DmfOutput out;
  out.refined = refine(map_c, tokens_t, training);
  out.states.push_back({0, out.refined.global_c, out.refined.global_t});
  for (std::size_t l = 0; l < cfg_.layers; ++l) out.states.push_back(step(out.states.back(), out.refined, trace));
  return out;
}

// ---------------------------------------------------------------------------

std::size_t attention_projection_params(std::size_t dim, bool with_output_projection) {
  return (with_output_projection ? 4 : 3) * (dim * dim + dim);
}

namespace {
std::size_t ffn_params(std::size_t dim, std::size_t hidden) { return dim * hidden + hidden + hidden * dim + dim; }
}  // namespace

std::size_t seu_param_count(std::size_t dim, std::size_t hidden) {
  return 2 * (2 * dim) + attention_projection_params(dim, true) + ffn_params(dim, hidden);
}

std::size_t mfu_param_count(std::size_t dim, std::size_t hidden) {
  return attention_projection_params(dim, false) + ffn_params(dim, hidden);
}

std::size_t lru_param_count(std::size_t d_in, std::size_t d_out, std::size_t kernel, nn::Pooling pooling) {
  const std::size_t depthwise = d_in * kernel * kernel + 2 * d_in + d_in;
  const std::size_t pointwise = d_in * d_out + 2 * d_out + d_out;
  return depthwise + pointwise + (pooling == nn::Pooling::gem ? 1 : 0);
}

DmfParamCounts count_params(const DmfConfig& cfg, std::size_t d_c, std::size_t d_t) {
  cfg.validate();
  DmfParamCounts c;
  const std::size_t hidden = cfg.ffn_hidden();
  c.lru_c = lru_param_count(d_c, cfg.dim, cfg.lru_kernel, cfg.pooling);
  c.lru_t = lru_param_count(d_t, cfg.dim, cfg.lru_kernel, cfg.pooling);
  c.seu = seu_param_count(cfg.dim, hidden);
  c.mfu = mfu_param_count(cfg.dim, hidden);
  if (cfg.uses_seu()) c.per_layer += (cfg.seu_shared ? 1 : 2) * c.seu;
  if (cfg.uses_mfu()) c.per_layer += (cfg.mfu_shared ? 1 : 2) * c.mfu;
  c.stack = cfg.layers * c.per_layer;
  c.total = c.lru_c + c.lru_t + c.stack;
  return c;
}

double htm_flops(const DmfConfig& cfg) {
  cfg.validate();
  const double d = static_cast<double>(cfg.dim);
  const double h = static_cast<double>(cfg.ffn_hidden());
  const double n = static_cast<double>(cfg.grid.cells());
  const double t = n + 1.0;
  const double seu = 2.0 * (t * d * 3.0 * d + 2.0 * t * t * d + t * d * d + 2.0 * t * d * h);
  const double mfu = 2.0 * (d * d + 2.0 * n * d * d + 2.0 * n * d + 2.0 * d * h);
  double per_layer = 0.0;
  if (cfg.uses_seu()) per_layer += 2.0 * seu;
  if (cfg.uses_mfu()) per_layer += 2.0 * mfu;
  return per_layer * static_cast<double>(cfg.layers);
}

}  // namespace fusionreid
