#pragma once

#include <string>
#include <vector>

#include "fusionreid/model.hpp"
#include "fusionreid/tensor.hpp"

namespace fusionreid {

// Mean over the batch of -sum_j q_j log softmax(W f)_j with
// q_j = (1 - eps) [j == y] + eps / J. W is [J, D].
Tensor ce_label_smooth(const Tensor& features, const Tensor& classifier, const std::vector<std::size_t>& labels,
                       double epsilon);

struct TripletSet {
  std::vector<std::size_t> anchors, positives, negatives;
  std::size_t size() const { return anchors.size(); }
};

// Per anchor: farthest same-pid sample and nearest other-pid sample by
// squared Euclidean distance. Ties resolve to the lowest batch index.
TripletSet batch_hard_mine(const Tensor& features, const std::vector<int>& pids);

// Mean over triples of log(1 + exp(|a - p|^2 - |a - n|^2)).
Tensor triplet_softmargin(const TripletSet& triples, const Tensor& features);

struct HeadLoss {
  std::string name;
  double ce = 0.0;
  double tri = 0.0;
};

struct LossBreakdown {
  Tensor total;
  std::vector<HeadLoss> heads;
  double ce_sum() const;
  double tri_sum() const;
};

// Unweighted sum of (CE + triplet) over every head. `expected_heads` guards
// against a missing head. Terms are added in ascending value order so the
// result does not depend on head order.
LossBreakdown total_loss(const std::vector<HeadInput>& heads, const std::vector<std::size_t>& labels,
                         const std::vector<int>& pids, double epsilon, std::size_t expected_heads = 6);

}  // namespace fusionreid
