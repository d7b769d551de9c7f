#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "fusionreid/backbones.hpp"
#include "fusionreid/dmf.hpp"

namespace fusionreid {

// fusion: both backbones + DMF, six supervised features.
// cnn_only / vit_only: a single backbone and its global feature.
enum class Arch { fusion, cnn_only, vit_only };

std::string to_string(Arch a);
Arch parse_arch(const std::string& name);

struct ModelConfig {
  std::size_t image_h = 32;
  std::size_t image_w = 16;
  Arch arch = Arch::fusion;
  CnnConfig cnn;
  VitConfig vit;
  DmfConfig dmf;
  std::size_t num_classes = 8;
  bool bnneck = true;
  std::uint64_t init_seed = 0;

  void validate() const;
};

// Fixed head order of the supervised features.
inline constexpr const char* kHeadNames[6] = {"c_hat", "t_hat", "c_0", "t_0", "c_L", "t_L"};

std::vector<std::string> head_names(Arch arch);
std::vector<std::size_t> head_dims(const ModelConfig& cfg);

struct ModelOutput {
  // One [B, D_g] tensor per head, in head_names() order.
  std::vector<Tensor> features;
  std::optional<BranchOutput> cnn, vit;
  std::optional<DmfOutput> dmf;
};

// Feature presented to a loss head: raw feature for the metric loss, the
// (optionally BN-necked) feature and classifier weights for cross-entropy.
struct HeadInput {
  std::string name;
  Tensor feature;           // [B, D]
  Tensor classifier_input;  // [B, D]
  Tensor classifier;        // [J, D]
};

class FusionReid {
 public:
  explicit FusionReid(const ModelConfig& cfg);
  FusionReid(const FusionReid&) = delete;
  FusionReid& operator=(const FusionReid&) = delete;

  // images: [B, 3, H, W] in [0, 1]; normalized internally with input.mean/std.
  ModelOutput forward(const Tensor& images, const std::vector<std::size_t>& cam_ids, bool training,
                      DmfTrace* trace = nullptr);
  std::vector<HeadInput> heads(const ModelOutput& out, bool training);

  void set_input_normalization(const std::vector<double>& mean, const std::vector<double>& stddev);

  const ModelConfig& config() const { return cfg_; }
  ParamStore& store() { return store_; }
  const ParamStore& store() const { return store_; }
  CnnBackbone* cnn() { return cnn_.get(); }
  VitBackbone* vit() { return vit_.get(); }
  Dmf* dmf() { return dmf_.get(); }

 private:
  struct Head {
    std::string name;
    std::optional<nn::BatchNorm> neck;
    Tensor classifier;
  };

  ModelConfig cfg_;
  ParamStore store_;
  Tensor input_mean_, input_std_;
  std::unique_ptr<CnnBackbone> cnn_;
  std::unique_ptr<VitBackbone> vit_;
  std::unique_ptr<Dmf> dmf_;
  std::vector<Head> heads_;
};

}  // namespace fusionreid
