#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "fusionreid/config.hpp"
#include "fusionreid/model.hpp"
#include "fusionreid/trainer.hpp"

namespace fusionreid {

// File layout (all integers little-endian):
//   8 bytes   magic "FRIDCKPT"
//   u32       format version
//   u64       length N of the JSON header
//   N bytes   UTF-8 JSON: {"config": {flat run config}, "seed", "step",
//             "tensors": [{"group", "path", "shape"}, ...]}
//   f64 blobs one per tensor entry, in header order: params, then buffers,
//             then momentum, each group in lexicographic path order
//   u64       FNV-1a hash of every preceding byte
//
// The data pipeline is a pure function of (seed, step), so seed and step are
// the only random state a resumed run needs.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointState {
  FlatConfig config;
  std::uint64_t seed = 0;
  std::size_t step = 0;
  std::map<std::string, Tensor> params;
  std::map<std::string, Tensor> buffers;
  std::map<std::string, Tensor> momentum;
};

// Writes to "<path>.tmp" and renames over `path`.
void checkpoint_save(const CheckpointState& state, const std::filesystem::path& path);
// IoError for unreadable files; DataError for a bad magic, unsupported
// version, truncation or checksum mismatch.
CheckpointState checkpoint_load(const std::filesystem::path& path);

// Deep copies of the model (and optimizer, when given) state.
CheckpointState capture_state(const RunConfig& cfg, const FusionReid& model, const Sgd* sgd, std::size_t step);

// Copies values into an already constructed model. Throws ConfigError listing
// every differing model.* field when the checkpoint was written by a different
// architecture, and DimensionError on missing or mis-shaped tensors.
void restore_state(const CheckpointState& state, FusionReid& model, Sgd* sgd);

}  // namespace fusionreid
