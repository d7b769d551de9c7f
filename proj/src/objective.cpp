#include "fusionreid/objective.hpp"

#include <algorithm>
#include <map>
#include <numeric>

namespace fusionreid {

Tensor ce_label_smooth(const Tensor& features, const Tensor& classifier, const std::vector<std::size_t>& labels,
                       double epsilon) {
  if (features.dim() != 2 || classifier.dim() != 2 || features.size(1) != classifier.size(1)) {
    throw DimensionError("ce: features " + shape_str(features.shape()) + " vs classifier " +
                         shape_str(classifier.shape()));
  }
  const std::size_t batch = features.size(0);
  const std::size_t classes = classifier.size(0);
  if (classes < 2) throw ConfigError("ce: need at least 2 classes");
  if (labels.size() != batch) throw DataError("ce: one label per sample required");
  if (epsilon < 0.0 || epsilon > 1.0) throw ConfigError("ce: label smoothing must lie in [0, 1]");
  std::vector<double> target(batch * classes, epsilon / static_cast<double>(classes));
  for (std::size_t b = 0; b < batch; ++b) {
    if (labels[b] >= classes) {
      throw DataError("ce: label " + std::to_string(labels[b]) + " out of range [0, " + std::to_string(classes) + ")");
    }
    target[b * classes + labels[b]] += 1.0 - epsilon;
  }
  const Tensor logp = log_softmax(matmul(features, classifier, false, true));
  return scale(sum(mul(logp, Tensor({batch, classes}, std::move(target)))), -1.0 / static_cast<double>(batch));
}

TripletSet batch_hard_mine(const Tensor& features, const std::vector<int>& pids) {
  if (features.dim() != 2 || features.size(0) != pids.size()) {
    throw DimensionError("mining: features " + shape_str(features.shape()) + " vs " + std::to_string(pids.size()) +
                         " pids");
  }
  const std::size_t n = pids.size();
  std::map<int, std::size_t> counts;
  for (int p : pids) ++counts[p];
  for (const auto& [pid, c] : counts) {
    if (c < 2) throw DataError("mining: pid " + std::to_string(pid) + " has a single sample in the batch");
  }
  if (counts.size() < 2) throw DataError("mining: batch needs at least two distinct pids");

  const std::size_t d = features.size(1);
  const auto f = features.data();
  std::vector<double> dist(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = f[i * d + k] - f[j * d + k];
        s += diff * diff;
      }
      dist[i * n + j] = s;
    }

  TripletSet t;
  for (std::size_t a = 0; a < n; ++a) {
    std::size_t pos = n, neg = n;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == a) continue;
      if (pids[j] == pids[a]) {
        if (pos == n || dist[a * n + j] > dist[a * n + pos]) pos = j;
      } else if (neg == n || dist[a * n + j] < dist[a * n + neg]) {
        neg = j;
      }
    }
    t.anchors.push_back(a);
    t.positives.push_back(pos);
    t.negatives.push_back(neg);
  }
  return t;
}

Tensor triplet_softmargin(const TripletSet& triples, const Tensor& features) {
  if (triples.size() == 0) throw DataError("triplet: empty triplet set");
  const Tensor a = index_select(features, triples.anchors);
  const Tensor p = index_select(features, triples.positives);
  const Tensor n = index_select(features, triples.negatives);
  const Tensor d_ap = sum(square(sub(a, p)), 1);
  const Tensor d_an = sum(square(sub(a, n)), 1);
  return mean(softplus(sub(d_ap, d_an)));
}

double LossBreakdown::ce_sum() const {
  return std::accumulate(heads.begin(), heads.end(), 0.0, [](double s, const HeadLoss& h) { return s + h.ce; });
}

double LossBreakdown::tri_sum() const {
  return std::accumulate(heads.begin(), heads.end(), 0.0, [](double s, const HeadLoss& h) { return s + h.tri; });
}

LossBreakdown total_loss(const std::vector<HeadInput>& heads, const std::vector<std::size_t>& labels,
                         const std::vector<int>& pids, double epsilon, std::size_t expected_heads) {
  if (heads.size() != expected_heads) {
    throw ConfigError("loss: expected " + std::to_string(expected_heads) + " heads, got " +
                      std::to_string(heads.size()));
  }
  LossBreakdown out;
  std::vector<Tensor> terms;
  for (const auto& h : heads) {
    if (!h.feature.defined() || !h.classifier.defined()) throw ConfigError("loss: head '" + h.name + "' is empty");
    const Tensor ce = ce_label_smooth(h.classifier_input, h.classifier, labels, epsilon);
    const Tensor tri = triplet_softmargin(batch_hard_mine(h.feature, pids), h.feature);
    out.heads.push_back({h.name, ce.item(), tri.item()});
    terms.push_back(add(ce, tri));
  }
  std::stable_sort(terms.begin(), terms.end(), [](const Tensor& x, const Tensor& y) { return x.item() < y.item(); });
  Tensor total = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) total = add(total, terms[i]);
  out.total = total;
  return out;
}

}  // namespace fusionreid
