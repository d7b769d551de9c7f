#include "fusionreid/param_store.hpp"

namespace fusionreid {

void ParamStore::check_unique(const std::string& path) const {
  if (params_.count(path) || buffers_.count(path)) throw ConfigError("duplicate parameter path: " + path);
}

Tensor ParamStore::add_param(const std::string& path, Tensor value) {
  check_unique(path);
  value.set_requires_grad(true);
  params_.emplace(path, value);
  return value;
}

Tensor ParamStore::add_buffer(const std::string& path, Tensor value) {
  check_unique(path);
  value.set_requires_grad(false);
  buffers_.emplace(path, value);
  return value;
}

Tensor ParamStore::param(const std::string& path) const {
  auto it = params_.find(path);
  if (it == params_.end()) throw ConfigError("unknown parameter: " + path);
  return it->second;
}

Tensor ParamStore::buffer(const std::string& path) const {
  auto it = buffers_.find(path);
  if (it == buffers_.end()) throw ConfigError("unknown buffer: " + path);
  return it->second;
}

std::size_t ParamStore::num_scalars() const {
  std::size_t n = 0;
  for (const auto& [_, t] : params_) n += t.numel();
  return n;
}

std::size_t ParamStore::num_scalars(const std::string& prefix) const {
  std::size_t n = 0;
  for (auto it = params_.lower_bound(prefix); it != params_.end() && it->first.starts_with(prefix); ++it) {
    n += it->second.numel();
  }
  return n;
}

void ParamStore::zero_grad() {
  for (auto& [_, t] : params_) {
    Tensor handle = t;
    handle.zero_grad();
  }
}

Tensor normal_init(const Shape& shape, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(numel_of(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor(shape, std::move(v));
}

Tensor uniform_init(const Shape& shape, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> v(numel_of(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor(shape, std::move(v));
}

}  // namespace fusionreid
