#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>

#include "fusionreid/tensor.hpp"

namespace fusionreid {

// Trainable parameters and non-trainable buffers (BN running stats, input
// normalization), keyed by dot-separated path. std::map gives the
// lexicographic traversal order the optimizer and checkpoints rely on.
class ParamStore {
 public:
  // Registers a trainable tensor; throws ConfigError on a duplicate path.
  Tensor add_param(const std::string& path, Tensor value);
  Tensor add_buffer(const std::string& path, Tensor value);

  const std::map<std::string, Tensor>& params() const { return params_; }
  const std::map<std::string, Tensor>& buffers() const { return buffers_; }

  Tensor param(const std::string& path) const;
  Tensor buffer(const std::string& path) const;
  bool has_param(const std::string& path) const { return params_.count(path) != 0; }

  // Scalar count over all parameters, or over those whose path starts with `prefix`.
  std::size_t num_scalars() const;
  std::size_t num_scalars(const std::string& prefix) const;

  void zero_grad();

 private:
  void check_unique(const std::string& path) const;

  std::map<std::string, Tensor> params_;
  std::map<std::string, Tensor> buffers_;
};

using Rng = std::mt19937_64;

Tensor normal_init(const Shape& shape, double stddev, Rng& rng);
Tensor uniform_init(const Shape& shape, double bound, Rng& rng);

}  // namespace fusionreid
