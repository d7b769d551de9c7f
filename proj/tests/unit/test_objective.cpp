#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <random>

#include "fusionreid/objective.hpp"
#include "gradcheck.hpp"

using namespace fusionreid;
using fusionreid::testing::gradcheck;
using fusionreid::testing::random_tensor;

namespace {

double sqdist(const Tensor& f, std::size_t i, std::size_t j) {
  const std::size_t d = f.size(1);
  double s = 0.0;
  for (std::size_t k = 0; k < d; ++k) s += (f[i * d + k] - f[j * d + k]) * (f[i * d + k] - f[j * d + k]);
  return s;
}

HeadInput head_of(const std::string& name, const Tensor& f, const Tensor& w) { return {name, f, f, w}; }

}  // namespace

TEST_CASE("smoothed cross-entropy at the uniform point") {
  const Tensor f = Tensor::zeros({3, 5});
  CHECK(ce_label_smooth(f, Tensor::zeros({2, 5}), {0, 1, 1}, 0.0).item() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));
  for (double eps : {0.0, 0.1, 0.5, 1.0}) {
    CHECK(std::abs(ce_label_smooth(f, Tensor::zeros({4, 5}), {0, 3, 2}, eps).item() - std::log(4.0)) < 1e-9);
  }
}

TEST_CASE("smoothed cross-entropy vanishes for a confident correct prediction") {
  const Tensor f({1, 1}, {1.0});
  const Tensor w({3, 1}, {0.0, 200.0, 0.0});
  CHECK(ce_label_smooth(f, w, {1}, 0.0).item() < 1e-12);
  CHECK_THROWS_AS(ce_label_smooth(f, w, {3}, 0.1), DataError);
}

TEST_CASE("smoothed cross-entropy is bounded below by the target entropy") {
  std::mt19937_64 rng(1);
  const double eps = 0.1;
  const std::size_t j = 4;
  const double q_hi = 1.0 - eps + eps / j, q_lo = eps / j;
  const double entropy = -(q_hi * std::log(q_hi) + (j - 1) * q_lo * std::log(q_lo));
  for (int t = 0; t < 50; ++t) {
    const Tensor f = random_tensor({2, 3}, rng, -3, 3, false);
    const Tensor w = random_tensor({j, 3}, rng, -3, 3, false);
    CHECK(ce_label_smooth(f, w, {0, 2}, eps).item() >= entropy - 1e-12);
  }
  // At p == q the bound is attained: logits log q.
  std::vector<double> logits{std::log(q_hi), std::log(q_lo), std::log(q_lo), std::log(q_lo)};
  const Tensor f({1, 1}, {1.0});
  CHECK(ce_label_smooth(f, Tensor({4, 1}, logits), {0}, eps).item() == doctest::Approx(entropy).epsilon(1e-12));
}

TEST_CASE("cross-entropy gradients") {
  std::mt19937_64 rng(2);
  Tensor f = random_tensor({4, 3}, rng);
  Tensor w = random_tensor({5, 3}, rng);
  CHECK(gradcheck([&] { return ce_label_smooth(f, w, {0, 4, 2, 2}, 0.1); }, {f, w}).max_rel_err < 1e-4);
}

TEST_CASE("batch-hard mining on a unit square") {
  // pid 0 at (0,0),(0,1); pid 1 at (1,0),(1,1): same-pid pairs are adjacent vertically.
  const Tensor f({4, 2}, {0, 0, 0, 1, 1, 0, 1, 1});
  const TripletSet t = batch_hard_mine(f, {0, 0, 1, 1});
  CHECK(t.positives == std::vector<std::size_t>{1, 0, 3, 2});
  CHECK(t.negatives == std::vector<std::size_t>{2, 3, 0, 1});
}

TEST_CASE("mining matches exhaustive search on random batches") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t pids_n = 2 + rng() % 3;
    const std::size_t k = 2 + rng() % 3;
    std::vector<int> pids;
    for (std::size_t p = 0; p < pids_n; ++p)
      for (std::size_t i = 0; i < k && pids.size() < 12; ++i) pids.push_back(static_cast<int>(p));
    std::shuffle(pids.begin(), pids.end(), rng);
    std::map<int, int> counts;
    for (int p : pids) ++counts[p];
    if (std::any_of(counts.begin(), counts.end(), [](auto& kv) { return kv.second < 2; }) || counts.size() < 2)
      continue;
    const Tensor f = random_tensor({pids.size(), 3}, rng, -1, 1, false);
    const TripletSet t = batch_hard_mine(f, pids);
    for (std::size_t a = 0; a < pids.size(); ++a) {
      // Oracle: enumerate every valid (p, n) pair and take the one maximizing d_ap - d_an,
      // breaking ties by lowest indices.
      double best = -std::numeric_limits<double>::infinity();
      std::size_t bp = 0, bn = 0;
      for (std::size_t p = 0; p < pids.size(); ++p) {
        if (p == a || pids[p] != pids[a]) continue;
        for (std::size_t n = 0; n < pids.size(); ++n) {
          if (pids[n] == pids[a]) continue;
          const double v = sqdist(f, a, p) - sqdist(f, a, n);
          if (v > best) {
            best = v;
            bp = p;
            bn = n;
          }
        }
      }
      CHECK(t.anchors[a] == a);
      CHECK(sqdist(f, a, t.positives[a]) == sqdist(f, a, bp));
      CHECK(sqdist(f, a, t.negatives[a]) == sqdist(f, a, bn));
      for (std::size_t p = 0; p < pids.size(); ++p)
        if (p != a && pids[p] == pids[a]) CHECK(sqdist(f, a, t.positives[a]) >= sqdist(f, a, p));
    }
  }
}

TEST_CASE("mining contract violations") {
  const Tensor f = Tensor::zeros({3, 2});
  CHECK_THROWS_AS(batch_hard_mine(f, {0, 0, 1}), DataError);
  CHECK_THROWS_AS(batch_hard_mine(Tensor::zeros({2, 2}), {0, 0}), DataError);
}

TEST_CASE("identical embeddings give ln 2 per anchor") {
  const Tensor f = Tensor::full({4, 3}, 0.7);
  const std::vector<int> pids{0, 1, 0, 1};
  CHECK(triplet_softmargin(batch_hard_mine(f, pids), f).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("soft-margin triplet hand cases") {
  // anchor 0, positive 1 at squared distance 2, negative 2 at squared distance 1.
  const Tensor f({3, 2}, {0, 0, 1, 1, 1, 0});
  TripletSet t;
  t.anchors = {0};
  t.positives = {1};
  t.negatives = {2};
  CHECK(triplet_softmargin(t, f).item() == doctest::Approx(std::log1p(std::exp(1.0))).epsilon(1e-12));
  const Tensor far({3, 2}, {0, 0, 1, 0, 60, 0});
  CHECK(triplet_softmargin(t, far).item() < 1e-12);
  const Tensor bal({3, 2}, {0, 0, 1, 0, 0, 1});
  CHECK(triplet_softmargin(t, bal).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK_THROWS_AS(triplet_softmargin(TripletSet{}, f), DataError);
}

TEST_CASE("triplet loss is positive and monotone in both distances") {
  std::mt19937_64 rng(4);
  TripletSet t;
  t.anchors = {0};
  t.positives = {1};
  t.negatives = {2};
  for (int i = 0; i < 50; ++i) {
    Tensor f = random_tensor({3, 2}, rng, -1, 1, false);
    const double base = triplet_softmargin(t, f).item();
    CHECK(base > 0.0);
    // Move the positive away from the anchor along their difference.
    Tensor g = f.clone();
    for (std::size_t k = 0; k < 2; ++k) g.data()[2 + k] += 0.1 * (f[2 + k] - f[k]);
    CHECK(triplet_softmargin(t, g).item() > base);
    Tensor h = f.clone();
    for (std::size_t k = 0; k < 2; ++k) h.data()[4 + k] += 0.1 * (f[4 + k] - f[k]);
    CHECK(triplet_softmargin(t, h).item() < base);
  }
}

TEST_CASE("triplet gradients") {
  std::mt19937_64 rng(5);
  Tensor f = random_tensor({6, 3}, rng);
  const std::vector<int> pids{0, 1, 2, 0, 1, 2};
  const TripletSet t = batch_hard_mine(f, pids);
  CHECK(gradcheck([&] { return triplet_softmargin(t, f); }, {f}).max_rel_err < 1e-4);
}

TEST_CASE("total loss is six times a single identical head") {
  std::mt19937_64 rng(6);
  const Tensor f = random_tensor({4, 3}, rng, -1, 1, false);
  const Tensor w = random_tensor({3, 3}, rng, -1, 1, false);
  const std::vector<std::size_t> labels{0, 0, 2, 2};
  const std::vector<int> pids{0, 0, 2, 2};
  const double single = ce_label_smooth(f, w, labels, 0.1).item() +
                        triplet_softmargin(batch_hard_mine(f, pids), f).item();
  std::vector<HeadInput> six;
  for (const char* n : kHeadNames) six.push_back(head_of(n, f, w));
  const LossBreakdown lb = total_loss(six, labels, pids, 0.1);
  CHECK(std::abs(lb.total.item() - 6.0 * single) < 1e-9);
  CHECK(std::abs(lb.total.item() - (lb.ce_sum() + lb.tri_sum())) < 1e-9);
  CHECK(lb.heads.size() == 6);
}

TEST_CASE("total loss rejects a missing head") {
  const Tensor f = Tensor::zeros({4, 3});
  std::vector<HeadInput> five;
  for (int i = 0; i < 5; ++i) five.push_back(head_of(kHeadNames[i], f, Tensor::zeros({3, 3})));
  CHECK_THROWS_AS(total_loss(five, {0, 0, 1, 1}, {0, 0, 1, 1}, 0.1), ConfigError);
}

TEST_CASE("head order does not change the total, bitwise") {
  std::mt19937_64 rng(7);
  const std::vector<std::size_t> labels{0, 0, 1, 1, 2, 2};
  const std::vector<int> pids{0, 0, 1, 1, 2, 2};
  std::vector<HeadInput> heads;
  for (const char* n : kHeadNames) {
    heads.push_back(head_of(n, random_tensor({6, 4}, rng, -1, 1, false), random_tensor({3, 4}, rng, -1, 1, false)));
  }
  const double ref = total_loss(heads, labels, pids, 0.1).total.item();
  for (int t = 0; t < 20; ++t) {
    std::shuffle(heads.begin(), heads.end(), rng);
    CHECK(total_loss(heads, labels, pids, 0.1).total.item() == ref);
  }
}

TEST_CASE("gradient of the total is the sum of per-head gradients") {
  std::mt19937_64 rng(8);
  Tensor shared = random_tensor({6, 4}, rng);
  std::vector<Tensor> ws;
  for (int i = 0; i < 6; ++i) ws.push_back(random_tensor({3, 4}, rng, -1, 1, false));
  const std::vector<std::size_t> labels{0, 0, 1, 1, 2, 2};
  const std::vector<int> pids{0, 0, 1, 1, 2, 2};
  auto heads_of = [&] {
    std::vector<HeadInput> hs;
    for (int i = 0; i < 6; ++i) {
      const Tensor f = scale(shared, 1.0 + 0.1 * i);
      hs.push_back(head_of(kHeadNames[i], f, ws[i]));
    }
    return hs;
  };
  shared.zero_grad();
  backward(total_loss(heads_of(), labels, pids, 0.1).total);
  const std::vector<double> total_grad(shared.grad().begin(), shared.grad().end());
  std::vector<double> summed(shared.numel(), 0.0);
  for (int i = 0; i < 6; ++i) {
    shared.zero_grad();
    const Tensor f = scale(shared, 1.0 + 0.1 * i);
    backward(add(ce_label_smooth(f, ws[i], labels, 0.1), triplet_softmargin(batch_hard_mine(f, pids), f)));
    for (std::size_t k = 0; k < summed.size(); ++k) summed[k] += shared.grad()[k];
  }
  for (std::size_t k = 0; k < summed.size(); ++k) CHECK(total_grad[k] == doctest::Approx(summed[k]).epsilon(1e-10));
  CHECK(gradcheck([&] { return total_loss(heads_of(), labels, pids, 0.1).total; }, {shared}).max_rel_err < 1e-4);
}
