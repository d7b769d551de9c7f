#include "fusionreid/model.hpp"

namespace fusionreid {

std::string to_string(Arch a) {
  switch (a) {
    case Arch::fusion: return "fusion";
    case Arch::cnn_only: return "cnn_only";
    case Arch::vit_only: return "vit_only";
  }
  return "?";
}

Arch parse_arch(const std::string& name) {
  for (auto a : {Arch::fusion, Arch::cnn_only, Arch::vit_only}) {
    if (to_string(a) == name) return a;
  }
  throw ConfigError("unknown arch '" + name + "' (expected fusion, cnn_only or vit_only)");
}

void ModelConfig::validate() const {
  if (num_classes < 2) throw ConfigError("model: num_classes must be >= 2");
  if (arch != Arch::vit_only) cnn_grid(cnn, image_h, image_w);
  if (arch != Arch::cnn_only) vit_grid(vit, image_h, image_w);
  if (arch == Arch::fusion) dmf.validate();
}

std::vector<std::string> head_names(Arch arch) {
  switch (arch) {
    case Arch::fusion: return {std::begin(kHeadNames), std::end(kHeadNames)};
    case Arch::cnn_only: return {"c_hat"};
    case Arch::vit_only: return {"t_hat"};
  }
  return {};
}

std::vector<std::size_t> head_dims(const ModelConfig& cfg) {
  switch (cfg.arch) {
    case Arch::fusion: {
      const std::size_t d = cfg.dmf.dim;
      return {cfg.cnn.out_channels(), cfg.vit.embed_dim, d, d, d, d};
    }
    case Arch::cnn_only: return {cfg.cnn.out_channels()};
    case Arch::vit_only: return {cfg.vit.embed_dim};
  }
  return {};
}

FusionReid::FusionReid(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(cfg_.init_seed);
  input_mean_ = store_.add_buffer("input.mean", Tensor({1, 3, 1, 1}, {0.0, 0.0, 0.0}));
  input_std_ = store_.add_buffer("input.std", Tensor({1, 3, 1, 1}, {1.0, 1.0, 1.0}));
  if (cfg_.arch != Arch::vit_only) cnn_ = std::make_unique<CnnBackbone>(store_, "cnn", cfg_.cnn, rng);
  if (cfg_.arch != Arch::cnn_only) {
    vit_ = std::make_unique<VitBackbone>(store_, "vit", cfg_.vit, cfg_.image_h, cfg_.image_w, rng);
  }
  if (cfg_.arch == Arch::fusion) {
    dmf_ = std::make_unique<Dmf>(store_, "dmf", cfg_.dmf, cfg_.cnn.out_channels(),
                                 cnn_grid(cfg_.cnn, cfg_.image_h, cfg_.image_w), cfg_.vit.embed_dim, vit_->grid(), rng);
  }
  const auto names = head_names(cfg_.arch);
  const auto dims = head_dims(cfg_);
  for (std::size_t i = 0; i < names.size(); ++i) {
    Head h;
    h.name = names[i];
    const std::string p = "head." + names[i];
    if (cfg_.bnneck) h.neck = nn::BatchNorm(store_, p + ".neck", dims[i]);
    h.classifier = store_.add_param(p + ".classifier", normal_init({cfg_.num_classes, dims[i]}, 0.001, rng));
    heads_.push_back(std::move(h));
  }
}

void FusionReid::set_input_normalization(const std::vector<double>& mean, const std::vector<double>& stddev) {
  if (mean.size() != 3 || stddev.size() != 3) throw ConfigError("input normalization needs 3 channels");
  for (std::size_t c = 0; c < 3; ++c) {
    if (!(stddev[c] > 0.0)) throw ConfigError("input normalization std must be > 0");
    input_mean_.data()[c] = mean[c];
    input_std_.data()[c] = stddev[c];
  }
}

ModelOutput FusionReid::forward(const Tensor& images, const std::vector<std::size_t>& cam_ids, bool training,
                                DmfTrace* trace) {
  if (images.dim() != 4 || images.size(1) != 3 || images.size(2) != cfg_.image_h || images.size(3) != cfg_.image_w) {
    throw DimensionError("model expects [B,3," + std::to_string(cfg_.image_h) + "," + std::to_string(cfg_.image_w) +
                         "], got " + shape_str(images.shape()));
  }
  if (cam_ids.size() != images.size(0)) throw DataError("one camera id per image required");
  std::vector<double> inv_std(3);
  for (std::size_t c = 0; c < 3; ++c) inv_std[c] = 1.0 / input_std_[c];
  const Tensor x = mul(sub(images, input_mean_), Tensor({1, 3, 1, 1}, inv_std));

  ModelOutput out;
  if (cnn_) out.cnn = (*cnn_)(x, training);
  if (vit_) out.vit = (*vit_)(x, cam_ids);
  switch (cfg_.arch) {
    case Arch::cnn_only: out.features = {out.cnn->global_vec}; break;
    case Arch::vit_only: out.features = {out.vit->global_vec}; break;
    case Arch::fusion: {
      out.dmf = (*dmf_)(out.cnn->feature_map, out.vit->feature_map, training, trace);
      const auto& r = out.dmf->refined;
      out.features = {out.cnn->global_vec, out.vit->global_vec, r.global_c, r.global_t, out.dmf->final_c(),
                      out.dmf->final_t()};
      break;
    }
  }
  return out;
}

std::vector<HeadInput> FusionReid::heads(const ModelOutput& out, bool training) {
  if (out.features.size() != heads_.size()) {
    throw ConfigError("model produced " + std::to_string(out.features.size()) + " features for " +
                      std::to_string(heads_.size()) + " heads");
  }
  std::vector<HeadInput> inputs;
  for (std::size_t i = 0; i < heads_.size(); ++i) {
    Head& h = heads_[i];
    const Tensor& f = out.features[i];
    inputs.push_back({h.name, f, h.neck ? (*h.neck)(f, training) : f, h.classifier});
  }
  return inputs;
}

}  // namespace fusionreid
