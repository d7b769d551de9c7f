#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fusionreid/data.hpp"
#include "fusionreid/model.hpp"
#include "fusionreid/trainer.hpp"

namespace fusionreid {

using FlatConfig = std::map<std::string, std::string>;

// `[section]` headers, `key = value` lines and `#` comments. Keys become
// "section.key"; values keep their text with string quotes removed.
FlatConfig parse_config_text(const std::string& text, const std::string& origin = "<config>");
FlatConfig read_config_file(const std::filesystem::path& path);

enum class EvalPolicy { train_vs_gallery, query_vs_gallery };

struct RunConfig {
  std::uint64_t seed = 0;
  std::string data_source = "synthetic";  // synthetic | manifest
  std::string manifest;
  SynthConfig synth;
  AugmentPolicy augment;
  ModelConfig model;
  OptimConfig optim;
  TrainConfig train;
  EvalPolicy eval_policy = EvalPolicy::train_vs_gallery;
  std::size_t eval_batch = 32;

  void validate() const;
};

// Every key with its default value and a one-line description, in key order.
struct KeyInfo {
  std::string key;
  std::string default_value;
  std::string help;
};
std::vector<KeyInfo> config_keys();

FlatConfig to_flat(const RunConfig& cfg);
// Unknown keys and unparsable values raise ConfigError naming the key.
RunConfig from_flat(const FlatConfig& flat);
FlatConfig model_flat(const ModelConfig& model);

// Applies "key=value" strings; unknown keys raise ConfigError.
void apply_overrides(FlatConfig& flat, const std::vector<std::string>& overrides);

// Defaults <- file <- FUSIONREID_SEED <- overrides ("key=value").
RunConfig resolve_config(const std::optional<std::filesystem::path>& file, const std::vector<std::string>& overrides,
                         const char* env_seed);

std::string to_config_text(const RunConfig& cfg);
void write_resolved_config(const RunConfig& cfg, const std::filesystem::path& out_dir);

// Field-by-field differences "key: a != b"; empty when equal.
std::vector<std::string> diff_flat(const FlatConfig& expected, const FlatConfig& actual);

// Builds the dataset a run config describes (synthetic or manifest).
Dataset load_run_dataset(const RunConfig& cfg);

// Fills model.num_classes / vit.num_cameras when left at 0 and sets the
// augmentation fill to the train-split channel means.
void resolve_data_dependent(RunConfig& cfg, const Dataset& data);

}  // namespace fusionreid
