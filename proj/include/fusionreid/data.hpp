#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "fusionreid/param_store.hpp"
#include "fusionreid/tensor.hpp"

namespace fusionreid {

enum class Split { train, query, gallery };

std::string to_string(Split s);
Split parse_split(const std::string& name);

struct Sample {
  Tensor image;  // [3, H, W], values in [0, 1]
  int pid = 0;
  int cam_id = 0;
  Split split = Split::train;
  std::string path;  // relative to the dataset root; empty for in-memory samples
};

struct Dataset {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
  std::vector<std::size_t> indices(Split split) const;
  // Distinct pids over the given sample indices, ascending.
  std::vector<int> pids(const std::vector<std::size_t>& subset) const;
  int max_cam_id() const;
};

struct SynthConfig {
  std::size_t num_pids = 8;
  std::size_t cams = 2;
  std::size_t views_per_cam = 4;
  std::size_t height = 32;
  std::size_t width = 16;
  double noise = 0.05;
  // The last `holdout_views` views of every (pid, camera) go to the gallery.
  std::size_t holdout_views = 1;
  std::uint64_t seed = 0;

  void validate() const;
};

// Colour/stripe prototype per pid, camera-specific brightness and channel
// gains, per-view jitter and pixel noise. Values are quantized to 8 bits so
// the PPM export round-trips exactly.
Dataset synth_generate(const SynthConfig& cfg);

// Writes every sample as a PPM under `root/images` plus `root/manifest.csv`.
// Sample paths are updated to the written relative paths.
void write_dataset(Dataset& dataset, const std::filesystem::path& root);

// Reads a `path,pid,cam_id,split` manifest; image paths are relative to the
// manifest's directory. Images whose size differs from (height, width) are
// resized bilinearly. All row problems are collected into one DataError.
Dataset load_dataset(const std::filesystem::path& manifest, std::size_t height, std::size_t width);

struct Batch {
  std::size_t step = 0;
  std::size_t epoch = 0;
  std::vector<std::size_t> indices;  // dataset sample indices, P groups of K
  std::vector<int> pids;             // pid of each entry
  std::vector<int> resampled_pids;   // pids drawn with replacement (fewer than K samples)
};

// Identity-balanced batches: P distinct pids x K samples each. Batches are
// a pure function of (seed, step); an epoch is one seeded permutation of the
// pids, cut into floor(num_pids / P) batches.
class PkSampler {
 public:
  PkSampler(const Dataset& dataset, const std::vector<std::size_t>& pool, std::size_t p, std::size_t k,
            std::uint64_t seed);

  std::size_t batches_per_epoch() const { return pid_list_.size() / p_; }
  std::size_t batch_size() const { return p_ * k_; }
  Batch batch(std::size_t step) const;

 private:
  std::size_t p_, k_;
  std::uint64_t seed_;
  std::vector<int> pid_list_;
  std::vector<std::vector<std::size_t>> members_;  // per entry of pid_list_
};

struct AugmentPolicy {
  double flip_prob = 0.5;
  double crop_prob = 1.0;
  std::size_t crop_pad = 10;
  double erase_prob = 0.5;
  double erase_area_min = 0.02;
  double erase_area_max = 0.4;
  double erase_aspect_min = 0.3;
  double erase_aspect_max = 3.33;
  std::vector<double> fill{0.5, 0.5, 0.5};  // per-channel erase value

  void validate() const;
};

Tensor hflip(const Tensor& image);
// Reflect-pads by `pad` on every side, then crops (H, W) at (top, left) of the padded image.
Tensor pad_crop(const Tensor& image, std::size_t pad, std::size_t top, std::size_t left);
Tensor erase_region(const Tensor& image, std::size_t top, std::size_t left, std::size_t height, std::size_t width,
                    const std::vector<double>& fill);

// Flip, pad-and-crop and random erasing on a [3, H, W] image.
Tensor augment(const Tensor& image, Rng& rng, const AugmentPolicy& policy);

struct ChannelStats {
  std::vector<double> mean, stddev;
};
ChannelStats channel_stats(const Dataset& dataset, const std::vector<std::size_t>& subset);

// Deterministic seed derived from a base seed and a list of stream ids.
std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> ids);

// Stacks the given samples into [B, 3, H, W].
Tensor stack_images(const Dataset& dataset, const std::vector<std::size_t>& indices);

}  // namespace fusionreid
