#include "fusionreid/backbones.hpp"

#include <cmath>

namespace fusionreid {

std::size_t CnnConfig::total_stride() const {
  std::size_t s = stem_stride;
  for (std::size_t i = 0; i < stage_channels.size(); ++i) s *= (i + 1 == stage_channels.size()) ? last_stride : 2;
  return s;
}

void CnnConfig::validate() const {
  if (stage_channels.empty()) throw ConfigError("cnn: stage_channels must not be empty");
  if (blocks_per_stage.size() != stage_channels.size()) {
    throw ConfigError("cnn: blocks_per_stage has " + std::to_string(blocks_per_stage.size()) +
                      " entries, stage_channels has " + std::to_string(stage_channels.size()));
  }
  for (std::size_t b : blocks_per_stage) {
    if (b == 0) throw ConfigError("cnn: every stage needs at least one block");
  }
  for (std::size_t c : stage_channels) {
    if (c == 0) throw ConfigError("cnn: stage channels must be positive");
  }
  if (stem_stride == 0) throw ConfigError("cnn: stem_stride must be >= 1");
  if (last_stride != 1 && last_stride != 2) throw ConfigError("cnn: last_stride must be 1 or 2");
}

void VitConfig::validate() const {
  if (patch_size == 0 || patch_stride == 0) throw ConfigError("vit: patch_size and patch_stride must be >= 1");
  if (patch_stride > patch_size) throw ConfigError("vit: patch_stride may not exceed patch_size");
  if (embed_dim == 0 || heads == 0 || embed_dim % heads != 0) {
    throw ConfigError("vit: embed_dim " + std::to_string(embed_dim) + " not divisible by heads " +
                      std::to_string(heads));
  }
  if (mlp_ratio <= 0.0) throw ConfigError("vit: mlp_ratio must be > 0");
  if (num_cameras == 0) throw ConfigError("vit: num_cameras must be >= 1");
  if (camera_scale < 0.0) throw ConfigError("vit: camera_scale must be >= 0");
}

Grid cnn_grid(const CnnConfig& cfg, std::size_t image_h, std::size_t image_w) {
  cfg.validate();
  const std::size_t s = cfg.total_stride();
  if (image_h % s != 0 || image_w % s != 0) {
    throw ConfigError("cnn: input " + std::to_string(image_h) + "x" + std::to_string(image_w) +
                      " not divisible by total stride " + std::to_string(s));
  }
  return {image_h / s, image_w / s};
}

Grid vit_grid(const VitConfig& cfg, std::size_t image_h, std::size_t image_w) {
  cfg.validate();
  auto axis = [&](std::size_t extent, const char* name) {
    if (extent < cfg.patch_size || (extent - cfg.patch_size) % cfg.patch_stride != 0) {
      throw ConfigError(std::string("vit: patch grid does not tile image ") + name + " " + std::to_string(extent) +
                        " (patch " + std::to_string(cfg.patch_size) + ", stride " +
                        std::to_string(cfg.patch_stride) + ")");
    }
    return (extent - cfg.patch_size) / cfg.patch_stride + 1;
  };
  return {axis(image_h, "height"), axis(image_w, "width")};
}

// ---------------------------------------------------------------------------

ResidualBlock::ResidualBlock(ParamStore& store, const std::string& prefix, std::size_t c_in, std::size_t c_out,
                             std::size_t stride, Rng& rng)
    : conv1_(store, prefix + ".conv1", c_in, c_out, 3, {ConvMode::standard, stride, 1}, rng),
      conv2_(store, prefix + ".conv2", c_out, c_out, 3, {ConvMode::standard, 1, 1}, rng),
      bn1_(store, prefix + ".bn1", c_out),
      bn2_(store, prefix + ".bn2", c_out) {
  if (stride != 1 || c_in != c_out) {
    has_projection_ = true;
    proj_ = nn::Conv2d(store, prefix + ".proj", c_in, c_out, 1, {ConvMode::pointwise, stride, 0}, rng);
    proj_bn_ = nn::BatchNorm(store, prefix + ".proj_bn", c_out);
  }
}

Tensor ResidualBlock::operator()(const Tensor& x, bool training) {
  Tensor h = relu(bn1_(conv1_(x), training));
  h = bn2_(conv2_(h), training);
  const Tensor shortcut = has_projection_ ? proj_bn_(proj_(x), training) : x;
  return relu(add(h, shortcut));
}

CnnBackbone::CnnBackbone(ParamStore& store, const std::string& prefix, const CnnConfig& cfg, Rng& rng)
    : cfg_(cfg) {
  cfg_.validate();
  stem_ = nn::Conv2d(store, prefix + ".stem", 3, cfg_.stage_channels[0], 3, {ConvMode::standard, cfg_.stem_stride, 1},
                     rng);
  stem_bn_ = nn::BatchNorm(store, prefix + ".stem_bn", cfg_.stage_channels[0]);
  std::size_t c_in = cfg_.stage_channels[0];
  for (std::size_t s = 0; s < cfg_.stage_channels.size(); ++s) {
    const std::size_t stage_stride = (s + 1 == cfg_.stage_channels.size()) ? cfg_.last_stride : 2;
    for (std::size_t b = 0; b < cfg_.blocks_per_stage[s]; ++b) {
      const std::string path = prefix + ".stage" + std::to_string(s) + ".block" + std::to_string(b);
      blocks_.emplace_back(store, path, c_in, cfg_.stage_channels[s], b == 0 ? stage_stride : 1, rng);
      c_in = cfg_.stage_channels[s];
    }
  }
  pool_ = nn::GemPool(store, prefix + ".gem", nn::Pooling::gem);
}

BranchOutput CnnBackbone::operator()(const Tensor& images, bool training) {
  if (images.dim() == 3) {
    BranchOutput out = (*this)(reshape(images, {1, images.size(0), images.size(1), images.size(2)}), training);
    out.feature_map = reshape(out.feature_map, {out.feature_map.size(1), out.grid.height, out.grid.width});
    out.global_vec = reshape(out.global_vec, {out.global_vec.size(1)});
    return out;
  }
  const Grid grid = cnn_grid(cfg_, images.size(2), images.size(3));
  Tensor h = relu(stem_bn_(stem_(images), training));
  for (auto& block : blocks_) h = block(h, training);
  return {h, pool_(h), grid};
}

// ---------------------------------------------------------------------------

Tensor add_camera_embedding(const Tensor& tokens, const std::vector<std::size_t>& cam_ids, const Tensor& table,
                            double scale_factor) {
  if (tokens.dim() != 3 || tokens.size(0) != cam_ids.size()) {
    throw DimensionError("camera embedding: tokens " + shape_str(tokens.shape()) + " vs " +
                         std::to_string(cam_ids.size()) + " camera ids");
  }
  for (std::size_t c : cam_ids) {
    if (c >= table.size(0)) {
      throw DataError("camera id " + std::to_string(c) + " out of range [0, " + std::to_string(table.size(0)) + ")");
    }
  }
  if (scale_factor == 0.0) return tokens;
  const Tensor rows = reshape(index_select(table, cam_ids), {cam_ids.size(), 1, table.size(1)});
  return add(tokens, scale(rows, scale_factor));
}

VitBackbone::VitBackbone(ParamStore& store, const std::string& prefix, const VitConfig& cfg, std::size_t image_h,
                         std::size_t image_w, Rng& rng)
    : cfg_(cfg), grid_(vit_grid(cfg, image_h, image_w)), image_h_(image_h), image_w_(image_w) {
  const std::size_t d = cfg_.embed_dim;
  proj_ = nn::Conv2d(store, prefix + ".patch_embed", 3, d, cfg_.patch_size,
                     {ConvMode::standard, cfg_.patch_stride, 0}, rng, true);
  cls_token = store.add_param(prefix + ".cls_token", Tensor::zeros({1, 1, d}));
  pos_embed = store.add_param(prefix + ".pos_embed", normal_init({1, 1 + grid_.cells(), d}, 0.02, rng));
  camera_table = store.add_param(prefix + ".camera_embed", normal_init({cfg_.num_cameras, d}, 0.02, rng));
  const auto hidden = static_cast<std::size_t>(std::lround(cfg_.mlp_ratio * static_cast<double>(d)));
  for (std::size_t i = 0; i < cfg_.depth; ++i) {
    blocks_.emplace_back(store, prefix + ".block" + std::to_string(i), d, cfg_.heads, hidden, rng);
  }
  if (cfg_.depth > 0) final_norm_ = nn::LayerNorm(store, prefix + ".norm", d);
}

Tensor VitBackbone::patch_embed(const Tensor& images) const {
  if (images.dim() != 4 || images.size(1) != 3 || images.size(2) != image_h_ || images.size(3) != image_w_) {
    throw DimensionError("vit expects [B,3," + std::to_string(image_h_) + "," + std::to_string(image_w_) +
                         "], got " + shape_str(images.shape()));
  }
  return flatten_spatial(proj_(images));
}

Tensor VitBackbone::embed(const Tensor& images, const std::vector<std::size_t>& cam_ids) const {
  const Tensor patches = patch_embed(images);
  const std::size_t b = patches.size(0);
  const Tensor cls = broadcast_to(cls_token, {b, 1, cfg_.embed_dim});
  Tensor seq = add(concat({cls, patches}, 1), pos_embed);
  return add_camera_embedding(seq, cam_ids, camera_table, cfg_.camera_scale);
}

BranchOutput VitBackbone::operator()(const Tensor& images, const std::vector<std::size_t>& cam_ids) {
  if (images.dim() == 3) {
    BranchOutput out = (*this)(reshape(images, {1, images.size(0), images.size(1), images.size(2)}), cam_ids);
    out.feature_map = reshape(out.feature_map, {out.feature_map.size(1), out.feature_map.size(2)});
    out.global_vec = reshape(out.global_vec, {out.global_vec.size(1)});
    return out;
  }
  Tensor seq = embed(images, cam_ids);
  for (const auto& block : blocks_) seq = block(seq);
  if (cfg_.depth > 0) seq = final_norm_(seq);
  const std::size_t n = grid_.cells();
  auto parts = split(seq, 1, {1, n});
  return {parts[1], reshape(parts[0], {seq.size(0), cfg_.embed_dim}), grid_};
}

}  // namespace fusionreid
