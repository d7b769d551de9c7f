#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "fusionreid/data.hpp"
#include "fusionreid/model.hpp"

namespace fusionreid {

struct EmbeddingRecord {
  std::vector<double> feature;  // L2-normalized concatenation of the head features
  int pid = 0;
  int cam_id = 0;
};

// Eval-mode forward (running BN statistics, no augmentation, no graph) in
// chunks of `batch_size`; features are concatenated in head order and
// L2-normalized.
std::vector<EmbeddingRecord> extract_features(FusionReid& model, const Dataset& data,
                                              const std::vector<std::size_t>& indices, std::size_t batch_size = 32);

// Squared Euclidean distances, row-major [Q, G].
std::vector<double> distance_matrix(const std::vector<EmbeddingRecord>& queries,
                                    const std::vector<EmbeddingRecord>& gallery);

struct EvalReport {
  double mAP = 0.0;
  std::vector<double> cmc;  // cmc[r] = fraction of valid queries with a match within rank r + 1
  std::vector<double> ap;   // per valid query
  std::size_t num_queries = 0;
  std::size_t skipped = 0;

  std::string to_json() const;
};

// Ranks each query's gallery by ascending distance (ties by gallery index),
// after removing items with the query's pid AND camera. Queries with no
// remaining match are skipped and counted.
EvalReport evaluate(const std::vector<EmbeddingRecord>& queries, const std::vector<EmbeddingRecord>& gallery,
                    std::size_t max_rank = 10);

// Same as evaluate() on a precomputed distance matrix.
EvalReport evaluate_distances(const std::vector<double>& dist, const std::vector<int>& q_pids,
                              const std::vector<int>& q_cams, const std::vector<int>& g_pids,
                              const std::vector<int>& g_cams, std::size_t max_rank = 10);

// Average precision of a ranked relevance list: mean over relevant
// positions k of (relevant up to k) / k.
double average_precision(const std::vector<int>& relevance);

// Writes per-head attention of the global-token row of every SEU and MFU call
// for one image: a CSV per (layer, branch, unit) with one row per head, and one
// PGM per head. Returns the written paths.
std::vector<std::filesystem::path> export_attention(FusionReid& model, const Tensor& image, std::size_t cam_id,
                                                    const std::filesystem::path& out_dir);

}  // namespace fusionreid
