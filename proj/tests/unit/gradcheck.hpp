#pragma once

// Central-difference gradient oracle used by the unit and acceptance tests.
// It only ever calls the scalar forward function, so it stays independent
// of the reverse-mode implementation it checks.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "fusionreid/tensor.hpp"

namespace fusionreid::testing {

inline double numeric_partial(const std::function<double()>& f, Tensor& t, std::size_t i, double h) {
  const double orig = t.data()[i];
  t.data()[i] = orig + h;
  const double up = f();
  t.data()[i] = orig - h;
  const double down = f();
  t.data()[i] = orig;
  return (up - down) / (2.0 * h);
}

inline double rel_err(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::size_t checked = 0;
};

// Compares the analytic gradient of `loss_fn` against central differences
// for every element of every tensor in `inputs`.
inline GradCheckResult gradcheck(const std::function<Tensor()>& loss_fn, std::vector<Tensor> inputs,
                                 double h = 1e-5, double floor = 1e-6) {
  for (auto& t : inputs) t.zero_grad();
  backward(loss_fn());
  std::vector<std::vector<double>> analytic;
  for (auto& t : inputs) {
    analytic.push_back(t.has_grad() ? std::vector<double>(t.grad().begin(), t.grad().end())
                                    : std::vector<double>(t.numel(), 0.0));
  }
  auto scalar = [&] {
    NoGradGuard guard;
    return loss_fn().item();
  };
  GradCheckResult r;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (std::size_t i = 0; i < inputs[k].numel(); ++i) {
      const double num = numeric_partial(scalar, inputs[k], i, h);
      r.max_rel_err = std::max(r.max_rel_err, rel_err(analytic[k][i], num, floor));
      ++r.checked;
    }
  }
  return r;
}

inline Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0,
                            bool requires_grad = true) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(numel_of(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor(shape, std::move(v), requires_grad);
}

}  // namespace fusionreid::testing
