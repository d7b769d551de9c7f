#pragma once

#include <string>
#include <vector>

#include "fusionreid/nn.hpp"

namespace fusionreid {

struct CnnConfig {
  std::vector<std::size_t> stage_channels{8, 16, 16};
  std::vector<std::size_t> blocks_per_stage{1, 1, 1};
  std::size_t stem_stride = 2;
  // Stride of the final stage; every earlier stage downsamples by 2.
  std::size_t last_stride = 1;

  std::size_t total_stride() const;
  std::size_t out_channels() const { return stage_channels.back(); }
  void validate() const;
};

struct VitConfig {
  std::size_t patch_size = 8;
  // == patch_size for non-overlapping patches; smaller values overlap.
  std::size_t patch_stride = 8;
  std::size_t embed_dim = 64;
  std::size_t depth = 2;
  std::size_t heads = 4;
  double mlp_ratio = 4.0;
  std::size_t num_cameras = 2;
  double camera_scale = 1.0;

  void validate() const;
};

struct Grid {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t cells() const { return height * width; }
  bool operator==(const Grid&) const = default;
};

Grid cnn_grid(const CnnConfig& cfg, std::size_t image_h, std::size_t image_w);
Grid vit_grid(const VitConfig& cfg, std::size_t image_h, std::size_t image_w);

// One backbone's output. For the CNN, feature_map is [B, D_c, H_c, W_c];
// for the ViT it is the patch tokens X_t in token-major layout [B, N, D_t]
// (class token removed). global_vec is [B, D].
struct BranchOutput {
  Tensor feature_map;
  Tensor global_vec;
  Grid grid;
};

class ResidualBlock {
 public:
  ResidualBlock(ParamStore& store, const std::string& prefix, std::size_t c_in, std::size_t c_out,
                std::size_t stride, Rng& rng);
  Tensor operator()(const Tensor& x, bool training);

 private:
  nn::Conv2d conv1_, conv2_;
  nn::BatchNorm bn1_, bn2_;
  bool has_projection_ = false;
  nn::Conv2d proj_;
  nn::BatchNorm proj_bn_;
};

// Scaled-down residual CNN: stem conv + stages of residual blocks + GeM.
class CnnBackbone {
 public:
  CnnBackbone(ParamStore& store, const std::string& prefix, const CnnConfig& cfg, Rng& rng);
  // images: [B, 3, H, W] or a single [3, H, W].
  BranchOutput operator()(const Tensor& images, bool training);

  const CnnConfig& config() const { return cfg_; }

 private:
  CnnConfig cfg_;
  nn::Conv2d stem_;
  nn::BatchNorm stem_bn_;
  std::vector<ResidualBlock> blocks_;
  nn::GemPool pool_;
};

// tokens [B, T, D]; adds scale * table[cam_ids[b]] to every token of sample b.
// A zero scale returns the input untouched.
Tensor add_camera_embedding(const Tensor& tokens, const std::vector<std::size_t>& cam_ids, const Tensor& table,
                            double scale);

// Scaled-down ViT: patch projection, class token, learnable position and
// camera embeddings, pre-norm encoder.
class VitBackbone {
 public:
  VitBackbone(ParamStore& store, const std::string& prefix, const VitConfig& cfg, std::size_t image_h,
              std::size_t image_w, Rng& rng);

  // [B, 3, H, W] -> [B, N, D] projected patches (no embeddings added).
  Tensor patch_embed(const Tensor& images) const;
  // [B, 1 + N, D] sequence entering the encoder.
  Tensor embed(const Tensor& images, const std::vector<std::size_t>& cam_ids) const;
  BranchOutput operator()(const Tensor& images, const std::vector<std::size_t>& cam_ids);

  const VitConfig& config() const { return cfg_; }
  const Grid& grid() const { return grid_; }

  Tensor cls_token;      // [1, 1, D]
  Tensor pos_embed;      // [1, 1 + N, D]
  Tensor camera_table;   // [num_cameras, D]

 private:
  VitConfig cfg_;
  Grid grid_;
  std::size_t image_h_, image_w_;
  nn::Conv2d proj_;
  std::vector<nn::TransformerBlock> blocks_;
  nn::LayerNorm final_norm_;
};

}  // namespace fusionreid
