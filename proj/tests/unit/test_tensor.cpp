#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "fusionreid/param_store.hpp"
#include "fusionreid/tensor.hpp"
#include "gradcheck.hpp"

using namespace fusionreid;
using fusionreid::testing::gradcheck;
using fusionreid::testing::random_tensor;

namespace {

void check_values(const Tensor& t, const std::vector<double>& expected, double tol = 1e-12) {
  REQUIRE(t.numel() == expected.size());
  for (std::size_t i = 0; i < expected.size(); ++i) {
    if (tol == 0.0) {
      CHECK(t[i] == expected[i]);
    } else {
      CHECK(t[i] == doctest::Approx(expected[i]).epsilon(tol));
    }
  }
}

constexpr double kGradTol = 1e-4;

}  // namespace

TEST_CASE("tensor construction keeps numel and shape consistent") {
  CHECK_THROWS_AS(Tensor({2, 3}, std::vector<double>(5)), DimensionError);
  const Tensor t = Tensor::full({2, 3}, 1.5);
  CHECK(t.numel() == 6);
  CHECK(t[5] == 1.5);
}

TEST_CASE("item requires a single element") {
  CHECK_THROWS(Tensor::zeros({2}).item());
  CHECK(Tensor::scalar(4.0).item() == 4.0);
}

TEST_CASE("linear evaluates affine maps") {
  const Tensor x({1, 2}, {1.0, 2.0});
  const Tensor eye({2, 2}, {1.0, 0.0, 0.0, 1.0});
  check_values(linear(x, eye, Tensor::zeros({2})), {1.0, 2.0});
  const Tensor x2({1, 2}, {1.0, 1.0});
  const Tensor w({2, 1}, {1.0, 1.0});
  check_values(linear(x2, w, Tensor({1}, {0.5})), {2.5});
}

TEST_CASE("linear reports both shapes on mismatch") {
  const Tensor x = Tensor::zeros({2, 3});
  const Tensor w = Tensor::zeros({4, 2});
  try {
    linear(x, w);
    FAIL("expected a DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[4,2]") != std::string::npos);
  }
}

TEST_CASE("linear gradients match central differences") {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = random_tensor({3, 4}, rng);
    Tensor w = random_tensor({4, 5}, rng);
    Tensor b = random_tensor({5}, rng);
    const auto r = gradcheck([&] { return sum(linear(x, w, b)); }, {x, w, b});
    CHECK(r.max_rel_err < kGradTol);
  }
}

TEST_CASE("matmul batched and transposed gradients") {
  std::mt19937_64 rng(2);
  Tensor a = random_tensor({2, 3, 4}, rng);
  Tensor b = random_tensor({2, 5, 4}, rng);
  const auto r = gradcheck([&] { return sum(square(matmul(a, b, false, true))); }, {a, b});
  CHECK(r.max_rel_err < kGradTol);
  Tensor c = random_tensor({4, 3}, rng);
  const auto r2 = gradcheck([&] { return sum(square(matmul(a, c, true, true))); }, {a, c});
  CHECK(r2.max_rel_err < kGradTol);
}

TEST_CASE("depthwise identity kernel returns the input") {
  std::mt19937_64 rng(3);
  const Tensor x = random_tensor({2, 4, 5}, rng, -1, 1, false);
  const Tensor k = Tensor::ones({2, 1, 1, 1});
  const Tensor y = conv2d(x, k, std::nullopt, {ConvMode::depthwise, 1, 0});
  CHECK(y.shape() == x.shape());
  check_values(y, x.to_vector());
}

TEST_CASE("pointwise sums constant planes") {
  std::vector<double> v(2 * 3 * 3);
  std::fill(v.begin(), v.begin() + 9, 1.0);
  std::fill(v.begin() + 9, v.end(), 2.0);
  const Tensor x({2, 3, 3}, v);
  const Tensor k({1, 2, 1, 1}, {1.0, 1.0});
  const Tensor y = conv2d(x, k, std::nullopt, {ConvMode::pointwise, 1, 0});
  CHECK(y.shape() == Shape{1, 3, 3});
  check_values(y, std::vector<double>(9, 3.0));
}

TEST_CASE("3x3 ones depthwise with zero padding counts neighbours") {
  const Tensor x = Tensor::ones({1, 3, 3});
  const Tensor k = Tensor::ones({1, 1, 3, 3});
  const Tensor y = conv2d(x, k, std::nullopt, {ConvMode::depthwise, 1, 1});
  check_values(y, {4, 6, 4, 6, 9, 6, 4, 6, 4});
}

TEST_CASE("kernel larger than padded input is rejected") {
  const Tensor x = Tensor::ones({1, 2, 2});
  const Tensor k = Tensor::ones({1, 1, 5, 5});
  CHECK_THROWS_AS(conv2d(x, k, std::nullopt, {ConvMode::depthwise, 1, 1}), DimensionError);
}

TEST_CASE("standard convolution matches a direct loop oracle") {
  std::mt19937_64 rng(4);
  const Tensor x = random_tensor({2, 3, 6, 5}, rng, -1, 1, false);
  const Tensor k = random_tensor({4, 3, 3, 3}, rng, -1, 1, false);
  const Tensor b = random_tensor({4}, rng, -1, 1, false);
  const std::size_t stride = 2, pad = 1;
  const Tensor y = conv2d(x, k, b, {ConvMode::standard, stride, pad});
  const std::size_t ho = (6 + 2 * pad - 3) / stride + 1, wo = (5 + 2 * pad - 3) / stride + 1;
  REQUIRE(y.shape() == Shape{2, 4, ho, wo});
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t o = 0; o < 4; ++o)
      for (std::size_t i = 0; i < ho; ++i)
        for (std::size_t j = 0; j < wo; ++j) {
          double s = b[o];
          for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t u = 0; u < 3; ++u)
              for (std::size_t v = 0; v < 3; ++v) {
                const long r = static_cast<long>(i * stride + u) - static_cast<long>(pad);
                const long q = static_cast<long>(j * stride + v) - static_cast<long>(pad);
                if (r < 0 || q < 0 || r >= 6 || q >= 5) continue;
                s += x[((n * 3 + c) * 6 + r) * 5 + q] * k[((o * 3 + c) * 3 + u) * 3 + v];
              }
          CHECK(y[((n * 4 + o) * ho + i) * wo + j] == doctest::Approx(s).epsilon(1e-12));
        }
}

TEST_CASE("convolution gradients match central differences") {
  std::mt19937_64 rng(5);
  for (auto mode : {ConvMode::standard, ConvMode::depthwise, ConvMode::pointwise}) {
    const std::size_t c_out = mode == ConvMode::depthwise ? 3 : 2;
    const std::size_t kin = mode == ConvMode::depthwise ? 1 : 3;
    const std::size_t ks = mode == ConvMode::pointwise ? 1 : 3;
    Tensor x = random_tensor({2, 3, 5, 4}, rng);
    Tensor k = random_tensor({c_out, kin, ks, ks}, rng);
    Tensor b = random_tensor({c_out}, rng);
    const ConvParams p{mode, mode == ConvMode::pointwise ? 1u : 2u, mode == ConvMode::pointwise ? 0u : 1u};
    const auto r = gradcheck([&] { return sum(square(conv2d(x, k, b, p))); }, {x, k, b});
    CHECK(r.max_rel_err < kGradTol);
  }
}

TEST_CASE("batch norm hand cases") {
  Tensor rm = Tensor::zeros({1}), rv = Tensor::ones({1});
  const Tensor g1 = Tensor::ones({1}), b0 = Tensor::zeros({1});
  check_values(batch_norm(Tensor::full({4, 1}, 3.0), g1, b0, rm, rv, true), {0, 0, 0, 0});

  Tensor rm2 = Tensor::zeros({1}), rv2 = Tensor::ones({1});
  const Tensor y = batch_norm(Tensor({2, 1}, {-1.0, 1.0}), g1, b0, rm2, rv2, true, 1e-12);
  CHECK(y[0] == doctest::Approx(-1.0).epsilon(1e-9));
  CHECK(y[1] == doctest::Approx(1.0).epsilon(1e-9));

  Tensor rm3 = Tensor::zeros({1}), rv3 = Tensor::ones({1});
  check_values(batch_norm(Tensor({3, 1, 2}, {1, 2, 3, 4, 5, 6}), Tensor::zeros({1}), Tensor::full({1}, 5.0), rm3,
                          rv3, true),
               std::vector<double>(6, 5.0));
}

TEST_CASE("batch norm running statistics and eval mode") {
  Tensor rm = Tensor::zeros({1}), rv = Tensor::ones({1});
  batch_norm(Tensor({2, 1}, {1.0, 3.0}), Tensor::ones({1}), Tensor::zeros({1}), rm, rv, true);
  CHECK(rm[0] == doctest::Approx(0.2));
  CHECK(rv[0] == doctest::Approx(0.9 + 0.1 * 2.0));
  const Tensor y = batch_norm(Tensor({1, 1}, {0.2}), Tensor::ones({1}), Tensor::zeros({1}), rm, rv, false);
  CHECK(y[0] == doctest::Approx(0.0));
  CHECK_THROWS_AS(batch_norm(Tensor({1, 1}, {0.2}), Tensor::ones({1}), Tensor::zeros({1}), rm, rv, true),
                  UsageError);
}

TEST_CASE("batch norm gradients match central differences") {
  std::mt19937_64 rng(6);
  Tensor x = random_tensor({3, 2, 2, 2}, rng);
  Tensor g = random_tensor({2}, rng, 0.5, 1.5);
  Tensor b = random_tensor({2}, rng);
  Tensor w = random_tensor({3, 2, 2, 2}, rng, -1, 1, false);
  Tensor rm = Tensor::zeros({2}), rv = Tensor::ones({2});
  const auto r = gradcheck([&] { return sum(mul(batch_norm(x, g, b, rm, rv, true), w)); }, {x, g, b});
  CHECK(r.max_rel_err < kGradTol);
}

TEST_CASE("layer norm hand cases and mean property") {
  check_values(layer_norm(Tensor::full({1, 4}, 2.0), Tensor::ones({4}), Tensor::zeros({4})), {0, 0, 0, 0});
  const Tensor y = layer_norm(Tensor({1, 2}, {-1.0, 1.0}), Tensor::ones({2}), Tensor::zeros({2}), 1e-12);
  CHECK(y[0] == doctest::Approx(-1.0).epsilon(1e-9));
  CHECK(y[1] == doctest::Approx(1.0).epsilon(1e-9));
  CHECK_THROWS_AS(layer_norm(Tensor::zeros({2, 0}), Tensor::zeros({0}), Tensor::zeros({0})), DimensionError);

  std::mt19937_64 rng(7);
  const Tensor x = random_tensor({5, 8}, rng, -3, 3, false);
  const Tensor beta = random_tensor({8}, rng, -1, 1, false);
  const double beta_mean = std::accumulate(beta.data().begin(), beta.data().end(), 0.0) / 8.0;
  const Tensor z = layer_norm(x, Tensor::ones({8}), beta);
  for (std::size_t r = 0; r < 5; ++r) {
    double m = 0.0;
    for (std::size_t c = 0; c < 8; ++c) m += z[r * 8 + c];
    CHECK(std::abs(m / 8.0 - beta_mean) < 1e-6);
  }
}

TEST_CASE("layer norm gradients match central differences") {
  std::mt19937_64 rng(8);
  Tensor x = random_tensor({2, 3, 6}, rng);
  Tensor g = random_tensor({6}, rng);
  Tensor b = random_tensor({6}, rng);
  Tensor w = random_tensor({2, 3, 6}, rng, -1, 1, false);
  const auto r = gradcheck([&] { return sum(mul(layer_norm(x, g, b), w)); }, {x, g, b});
  CHECK(r.max_rel_err < kGradTol);
}

TEST_CASE("softmax values and shift invariance") {
  check_values(softmax(Tensor::zeros({4})), {0.25, 0.25, 0.25, 0.25});
  check_values(softmax(Tensor({2}, {0.0, std::log(3.0)})), {0.25, 0.75});
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> c_dist(-50, 50);
  for (int i = 0; i < 20; ++i) {
    const Tensor x = random_tensor({3, 7}, rng, -5, 5, false);
    const Tensor a = softmax(x);
    const Tensor b = softmax(add_scalar(x, c_dist(rng)));
    for (std::size_t k = 0; k < a.numel(); ++k) CHECK(std::abs(a[k] - b[k]) < 1e-9);
  }
}

TEST_CASE("softmax and log-softmax gradients") {
  std::mt19937_64 rng(10);
  Tensor x = random_tensor({3, 5}, rng, -2, 2);
  Tensor w = random_tensor({3, 5}, rng, -1, 1, false);
  CHECK(gradcheck([&] { return sum(mul(softmax(x), w)); }, {x}).max_rel_err < kGradTol);
  CHECK(gradcheck([&] { return sum(mul(log_softmax(x), w)); }, {x}).max_rel_err < kGradTol);
}

TEST_CASE("activation values") {
  const Tensor a = Tensor({1}, {0.25});
  CHECK(prelu(Tensor({1}, {2.0}), a).item() == 2.0);
  CHECK(prelu(Tensor({1}, {-1.0}), a).item() == -0.25);
  CHECK(gelu(Tensor({1}, {0.0})).item() == 0.0);
  check_values(relu(Tensor({3}, {-1.0, 0.0, 2.0})), {0.0, 0.0, 2.0});
  CHECK(softplus(Tensor({1}, {0.0})).item() == doctest::Approx(std::log(2.0)));
  CHECK(std::isfinite(softplus(Tensor({1}, {800.0})).item()));
}

TEST_CASE("activation gradients") {
  std::mt19937_64 rng(11);
  Tensor x = random_tensor({2, 3, 4}, rng, -2, 2);
  Tensor slope = random_tensor({3}, rng, 0.1, 0.4);
  CHECK(gradcheck([&] { return sum(square(prelu(x, slope))); }, {x, slope}).max_rel_err < kGradTol);
  CHECK(gradcheck([&] { return sum(square(gelu(x))); }, {x}).max_rel_err < kGradTol);
  CHECK(gradcheck([&] { return sum(softplus(x)); }, {x}).max_rel_err < kGradTol);
}

TEST_CASE("gem pooling values") {
  const Tensor x({1, 1, 2}, {1.0, 3.0});
  CHECK(gem_pool(x, Tensor::scalar(1.0)).item() == doctest::Approx(2.0));
  CHECK(gem_pool(x, Tensor::scalar(2.0)).item() == doctest::Approx(std::sqrt(5.0)).epsilon(1e-12));
  CHECK(std::abs(gem_pool(x, Tensor::scalar(64.0)).item() - 3.0) < 0.05);
  CHECK_THROWS_AS(gem_pool(x, Tensor::scalar(0.0)), NumericalError);
  CHECK_THROWS_AS(gem_pool(x, Tensor::scalar(-1.0)), NumericalError);
}

TEST_CASE("gem pooling gradients including p") {
  std::mt19937_64 rng(12);
  Tensor x = random_tensor({2, 3, 2, 2}, rng, 0.1, 2.0);
  Tensor p({1}, {3.0}, true);
  Tensor w = random_tensor({2, 3}, rng, -1, 1, false);
  CHECK(gradcheck([&] { return sum(mul(gem_pool(x, p), w)); }, {x, p}).max_rel_err < kGradTol);
}

TEST_CASE("shape operations round-trip") {
  std::mt19937_64 rng(13);
  const Tensor x = random_tensor({4, 6}, rng, -1, 1, false);
  check_values(reshape(reshape(x, {4, 2, 3}), {4, 6}), x.to_vector(), 0);
  CHECK_THROWS_AS(reshape(x, {5, 5}), DimensionError);

  const Tensor a = random_tensor({2, 3}, rng, -1, 1, false);
  const Tensor b = random_tensor({2, 4}, rng, -1, 1, false);
  const auto parts = split(concat({a, b}, 1), 1, {3, 4});
  check_values(parts[0], a.to_vector(), 0);
  check_values(parts[1], b.to_vector(), 0);
  CHECK_THROWS_AS(concat({a, Tensor::zeros({3, 3})}, 1), DimensionError);

  const Tensor t = random_tensor({2, 3, 4, 5}, rng, -1, 1, false);
  const Tensor p = permute(t, {2, 0, 3, 1});
  CHECK(p.shape() == Shape{4, 2, 5, 3});
  check_values(permute(p, {1, 3, 0, 2}), t.to_vector(), 0);

  const Tensor f = flatten_spatial(t);
  CHECK(f.shape() == Shape{2, 20, 3});
  CHECK(f[(1 * 20 + 7) * 3 + 2] == t[((1 * 3 + 2) * 4 + 1) * 5 + 2]);
  check_values(unflatten_spatial(f, 4, 5), t.to_vector(), 0);
}

TEST_CASE("shape operation gradients") {
  std::mt19937_64 rng(14);
  Tensor a = random_tensor({2, 3, 2}, rng);
  Tensor b = random_tensor({2, 1, 2}, rng);
  Tensor w = random_tensor({2, 4, 2}, rng, -1, 1, false);
  CHECK(gradcheck([&] { return sum(mul(concat({a, b}, 1), w)); }, {a, b}).max_rel_err < kGradTol);
  CHECK(gradcheck([&] { return sum(square(permute(a, {2, 0, 1}))); }, {a}).max_rel_err < kGradTol);
  CHECK(gradcheck([&] { return sum(square(slice(a, 1, 1, 2))); }, {a}).max_rel_err < kGradTol);
  CHECK(gradcheck([&] { return sum(square(index_select(a, {1, 0, 1}))); }, {a}).max_rel_err < kGradTol);
  CHECK(gradcheck([&] { return sum(mul(broadcast_to(b, {2, 4, 2}), w)); }, {b}).max_rel_err < kGradTol);
  CHECK(gradcheck([&] { return sum(square(sum(a, 1))); }, {a}).max_rel_err < kGradTol);
}

TEST_CASE("broadcasting elementwise gradients") {
  std::mt19937_64 rng(15);
  Tensor a = random_tensor({3, 1, 4}, rng);
  Tensor b = random_tensor({2, 4}, rng);
  CHECK(gradcheck([&] { return sum(square(mul(add(a, b), sub(a, b)))); }, {a, b}).max_rel_err < kGradTol);
  CHECK_THROWS_AS(add(Tensor::zeros({2, 3}), Tensor::zeros({3, 2})), DimensionError);
}

TEST_CASE("backward basics") {
  Tensor x({3}, {1.0, -2.0, 0.5}, true);
  backward(sum(x));
  check_values(Tensor({3}, std::vector<double>(x.grad().begin(), x.grad().end())), {1, 1, 1});
  x.zero_grad();
  backward(sum(mul(x, x)));
  check_values(Tensor({3}, std::vector<double>(x.grad().begin(), x.grad().end())), {2.0, -4.0, 1.0});
  CHECK_THROWS_AS(backward(mul(x, x)), UsageError);
}

TEST_CASE("gradients accumulate through shared subexpressions") {
  Tensor x({1}, {3.0}, true);
  const Tensor y = mul(x, x);
  backward(add(y, y));
  CHECK(x.grad()[0] == doctest::Approx(12.0));
}

TEST_CASE("no-grad guard records nothing") {
  Tensor x({2}, {1.0, 2.0}, true);
  Tensor y;
  {
    NoGradGuard guard;
    y = sum(mul(x, x));
  }
  CHECK_FALSE(y.requires_grad());
  CHECK(grad_enabled());
}

TEST_CASE("param store ordering and uniqueness") {
  ParamStore store;
  store.add_param("b.weight", Tensor::zeros({2, 2}));
  store.add_param("a.bias", Tensor::zeros({3}));
  CHECK_THROWS_AS(store.add_param("a.bias", Tensor::zeros({3})), ConfigError);
  CHECK(store.params().begin()->first == "a.bias");
  CHECK(store.num_scalars() == 7);
  CHECK(store.num_scalars("b.") == 4);
  CHECK(store.param("a.bias").requires_grad());
}
