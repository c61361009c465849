#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "mamba_spike/gradcheck.hpp"
#include "mamba_spike/rng.hpp"
#include "mamba_spike/tensor.hpp"
#include "test_util.hpp"

using namespace mamba_spike;
using test_util::max_abs_diff;
using test_util::naive_matmul;
using test_util::random_param;
using test_util::random_tensor;

TEST_CASE("matmul identity and scalar cases", "[tensor]") {
  Rng rng(42);
  Tensor a = random_tensor(rng, {3, 3});
  Tensor eye = Tensor::from_data({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Tensor prod = matmul(eye, a);
  REQUIRE(max_abs_diff(prod, a) == 0.0);

  Tensor two = Tensor::from_data({1, 1}, {2.0});
  Tensor three = Tensor::from_data({1, 1}, {3.0});
  REQUIRE(matmul(two, three).item() == 6.0);
}

TEST_CASE("matmul matches the triple-loop oracle", "[tensor]") {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t M = 1 + rng.index(5), K = 1 + rng.index(5), N = 1 + rng.index(5);
    Tensor a = random_tensor(rng, {M, K});
    Tensor b = random_tensor(rng, {K, N});
    std::vector<double> expect = naive_matmul(a.data(), b.data(), M, K, N);
    REQUIRE(max_abs_diff(matmul(a, b).data(), expect) < 1e-12);
  }
}

TEST_CASE("matmul shape mismatch names both shapes", "[tensor]") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4, 2});
  try {
    matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    REQUIRE(msg.find("[2x3]") != std::string::npos);
    REQUIRE(msg.find("[4x2]") != std::string::npos);
  }
}

TEST_CASE("matmul associativity on well-conditioned triples", "[tensor]") {
  Rng rng(11);
  for (int trial = 0; trial < 25; ++trial) {
    Tensor a = random_tensor(rng, {4, 3});
    Tensor b = random_tensor(rng, {3, 5});
    Tensor c = random_tensor(rng, {5, 2});
    Tensor left = matmul(matmul(a, b), c);
    Tensor right = matmul(a, matmul(b, c));
    REQUIRE(max_abs_diff(left, right) < 1e-9);
  }
}

namespace {

/// Explicit zero-padding oracle for the causal depthwise convolution.
std::vector<double> padded_conv1d_oracle(const std::vector<double>& x, const std::vector<double>& k,
                                         std::size_t T, std::size_t D, std::size_t K) {
  std::vector<double> padded((T + K - 1) * D, 0.0);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t d = 0; d < D; ++d) padded[(t + K - 1) * D + d] = x[t * D + d];
  }
  std::vector<double> out(T * D, 0.0);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t d = 0; d < D; ++d) {
      double acc = 0.0;
      for (std::size_t kk = 0; kk < K; ++kk) acc += k[kk * D + d] * padded[(t + kk) * D + d];
      out[t * D + d] = acc;
    }
  }
  return out;
}

}  // namespace

TEST_CASE("causal depthwise conv1d basics", "[tensor]") {
  Rng rng(3);
  const std::size_t T = 6, D = 2, K = 3;
  Tensor x = random_tensor(rng, {T, D});

  // kernel with only the last (current-step) tap set reproduces the input
  std::vector<double> ident(K * D, 0.0);
  for (std::size_t d = 0; d < D; ++d) ident[(K - 1) * D + d] = 1.0;
  Tensor y = causal_depthwise_conv1d(x, Tensor::from_data({K, D}, ident));
  REQUIRE(max_abs_diff(y, x) == 0.0);

  Tensor zeros = Tensor::zeros({T, D});
  Tensor yz = causal_depthwise_conv1d(zeros, random_tensor(rng, {K, D}));
  for (std::size_t i = 0; i < yz.size(); ++i) REQUIRE(yz[i] == 0.0);
}

TEST_CASE("causal depthwise conv1d matches the padded oracle", "[tensor]") {
  Rng rng(5);
  const std::size_t T = 8, D = 3, K = 4;
  Tensor x = random_tensor(rng, {T, D});
  Tensor k = random_tensor(rng, {K, D});
  std::vector<double> expect = padded_conv1d_oracle(x.data(), k.data(), T, D, K);
  REQUIRE(max_abs_diff(causal_depthwise_conv1d(x, k).data(), expect) < 1e-12);
}

TEST_CASE("causal depthwise conv1d never looks ahead", "[tensor]") {
  Rng rng(15);
  const std::size_t T = 10, D = 2, K = 4;
  Tensor k = random_tensor(rng, {K, D});
  Tensor x = random_tensor(rng, {T, D});
  Tensor y = causal_depthwise_conv1d(x, k);
  // perturb the suffix after t_cut; outputs up to t_cut must be unchanged
  const std::size_t t_cut = 5;
  std::vector<double> xv = x.data();
  for (std::size_t t = t_cut + 1; t < T; ++t) {
    for (std::size_t d = 0; d < D; ++d) xv[t * D + d] = rng.uniform(-9, 9);
  }
  Tensor y2 = causal_depthwise_conv1d(Tensor::from_data({T, D}, xv), k);
  for (std::size_t t = 0; t <= t_cut; ++t) {
    for (std::size_t d = 0; d < D; ++d) REQUIRE(y[t * D + d] == y2[t * D + d]);
  }
}

TEST_CASE("backward on simple closed forms", "[tensor]") {
  // f(x) = x^2 at x = 3 -> df/dx = 6
  Tensor x = Tensor::param({1}, {3.0});
  Tensor fx = mul(x, x);
  GradientMap g = backward(fx);
  REQUIRE(g.at(x).item() == Catch::Approx(6.0).margin(1e-12));

  // f = sum(a * b) -> df/da = b, df/db = a
  Rng rng(9);
  Tensor a = random_param(rng, {2, 3});
  Tensor b = random_param(rng, {2, 3});
  GradientMap g2 = backward(sum(mul(a, b)));
  REQUIRE(max_abs_diff(g2.at(a), b) < 1e-14);
  REQUIRE(max_abs_diff(g2.at(b), a) < 1e-14);
}

TEST_CASE("backward rejects non-scalar losses", "[tensor]") {
  Tensor a = Tensor::param({2, 2}, {1, 2, 3, 4});
  REQUIRE_THROWS_AS(backward(mul(a, a)), ContractError);
}

TEST_CASE("backward zero-fills unreachable parameters", "[tensor]") {
  Tensor used = Tensor::param({2}, {1.0, 2.0});
  Tensor unused = Tensor::param({3}, {5.0, 5.0, 5.0});
  Tensor loss = sum(mul(used, used));
  const Tensor params[] = {used, unused};
  GradientMap g = backward(loss, params);
  REQUIRE(g.contains(unused));
  for (std::size_t i = 0; i < 3; ++i) REQUIRE(g.at(unused)[i] == 0.0);
  REQUIRE(g.at(used)[0] == Catch::Approx(2.0));
}

TEST_CASE("backward twice on one graph is deterministic", "[tensor]") {
  Rng rng(21);
  Tensor w = random_param(rng, {3, 3});
  Tensor x = random_tensor(rng, {2, 3});
  Tensor loss = sum(tanh(matmul(x, w)));
  GradientMap g1 = backward(loss);
  GradientMap g2 = backward(loss);
  REQUIRE(g1.at(w).data() == g2.at(w).data());
}

TEST_CASE("two-layer perceptron gradient matches finite differences", "[tensor]") {
  Rng rng(33);
  Tensor x = random_tensor(rng, {4, 3});
  Tensor w2_fixed = random_tensor(rng, {5, 2});
  Tensor w1_seed = random_tensor(rng, {3, 5});
  auto loss_of_w1 = [&](const Tensor& w1) {
    Tensor h = tanh(matmul(x, w1));
    Tensor y = sigmoid(matmul(h, w2_fixed));
    return mean(mul(y, y));
  };
  REQUIRE(finite_difference_check(loss_of_w1, w1_seed, 1e-5) < 1e-6);
}

TEST_CASE("finite difference check on linear and cubic functions", "[tensor]") {
  Rng rng(55);
  Tensor c = random_tensor(rng, {6});
  auto linear = [&](const Tensor& x) { return sum(mul(c, x)); };
  REQUIRE(finite_difference_check(linear, random_tensor(rng, {6}), 1e-5) < 1e-9);

  // f(x) = sum(x^3); also compare AD directly to the analytic 3x^2 oracle
  Tensor x0 = random_param(rng, {5});
  Tensor cube = sum(mul(mul(x0, x0), x0));
  GradientMap g = backward(cube);
  for (std::size_t i = 0; i < 5; ++i) {
    REQUIRE(g.at(x0)[i] == Catch::Approx(3.0 * x0[i] * x0[i]).margin(1e-12));
  }
  auto fcube = [](const Tensor& x) { return sum(mul(mul(x, x), x)); };
  REQUIRE(finite_difference_check(fcube, x0.detach(), 1e-5) < 1e-6);
}

TEST_CASE("finite difference check flags non-finite functions", "[tensor]") {
  auto blows_up = [](const Tensor& x) { return log(sub(x, x)); };  // log(0)
  REQUIRE_THROWS_AS(finite_difference_check(blows_up, Tensor::ones({1}), 1e-5), NumericError);
}

TEST_CASE("no-grad mode records no graph", "[tensor]") {
  Tensor a = Tensor::param({2}, {1.0, 2.0});
  NoGradGuard guard;
  Tensor y = mul(a, a);
  REQUIRE_FALSE(y.requires_grad());
  REQUIRE(y.is_leaf());
}

TEST_CASE("broadcasting follows scalar and trailing-suffix rules only", "[tensor]") {
  Tensor m = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor bias = Tensor::from_data({3}, {10, 20, 30});
  Tensor out = add(m, bias);
  REQUIRE(out.at({1, 2}) == 36.0);

  Tensor s = Tensor::scalar(2.0);
  REQUIRE(mul(m, s).at({1, 1}) == 10.0);

  Tensor bad = Tensor::from_data({2}, {1, 1});
  REQUIRE_THROWS_AS(add(m, bad), ShapeError);  // [2] is not a suffix of [2x3]
}

TEST_CASE("broadcast backward reduces over expanded dims", "[tensor]") {
  Rng rng(77);
  Tensor m = random_tensor(rng, {4, 3});
  Tensor bias = random_param(rng, {3});
  GradientMap g = backward(sum(mul(m, add(bias, bias))));
  // d/dbias sum(m * 2*bias) = 2 * column sums of m
  for (std::size_t j = 0; j < 3; ++j) {
    double colsum = 0.0;
    for (std::size_t i = 0; i < 4; ++i) colsum += m.at({i, j});
    REQUIRE(g.at(bias)[j] == Catch::Approx(2.0 * colsum).margin(1e-12));
  }
}

TEST_CASE("every differentiable op passes randomized gradient checks", "[tensor]") {
  Rng rng(101);
  int cases = 0;
  const double tol = 1e-4;

  for (int round = 0; round < 10; ++round) {
    // elementwise binaries, same shape and broadcast variants
    {
      Tensor b = random_tensor(rng, {2, 3}, 0.5, 1.5);
      auto f = [&](const Tensor& x) { return sum(divide(mul(add(x, b), sub(x, b)), b)); };
      REQUIRE(finite_difference_check(f, random_tensor(rng, {2, 3}), 1e-5) < tol);
      ++cases;
    }
    {
      Tensor bias = random_tensor(rng, {4});
      auto f = [&](const Tensor& x) { return sum(mul(add(x, bias), x)); };
      REQUIRE(finite_difference_check(f, random_tensor(rng, {3, 4}), 1e-5) < tol);
      ++cases;
    }
    {
      Tensor big = random_tensor(rng, {3, 2});
      auto f = [&](const Tensor& x) { return sum(mul(big, x)); };  // x broadcast onto big
      REQUIRE(finite_difference_check(f, random_tensor(rng, {2}), 1e-5) < tol);
      ++cases;
    }
    // unaries over each supported rank
    for (std::size_t rank = 1; rank <= 3; ++rank) {
      Shape shape(rank, 2);
      auto f = [](const Tensor& x) {
        return sum(silu(add_scalar(tanh(mul(sigmoid(x), x)), 0.5)));
      };
      REQUIRE(finite_difference_check(f, random_tensor(rng, shape), 1e-5) < tol);
      auto g = [](const Tensor& x) { return sum(log(sqrt(exp(scale(x, 0.5))))); };
      REQUIRE(finite_difference_check(g, random_tensor(rng, shape, 0.2, 2.0), 1e-5) < tol);
      auto h = [](const Tensor& x) { return mean(softplus(neg(x))); };
      REQUIRE(finite_difference_check(h, random_tensor(rng, shape), 1e-5) < tol);
      cases += 3;
    }
    // matmul, both operands
    {
      Tensor a = random_tensor(rng, {3, 4});
      Tensor b = random_tensor(rng, {4, 2});
      auto fa = [&](const Tensor& x) { return sum(matmul(x, b)); };
      auto fb = [&](const Tensor& x) { return sum(tanh(matmul(a, x))); };
      REQUIRE(finite_difference_check(fa, a, 1e-5) < tol);
      REQUIRE(finite_difference_check(fb, b, 1e-5) < tol);
      cases += 2;
    }
    // causal conv1d, both operands
    {
      Tensor x = random_tensor(rng, {6, 2});
      Tensor k = random_tensor(rng, {3, 2});
      auto fx = [&](const Tensor& t) { return sum(mul(causal_depthwise_conv1d(t, k), t)); };
      auto fk = [&](const Tensor& t) { return sum(causal_depthwise_conv1d(x, t)); };
      REQUIRE(finite_difference_check(fx, x, 1e-5) < tol);
      REQUIRE(finite_difference_check(fk, k, 1e-5) < tol);
      cases += 2;
    }
    // conv2d with stride and padding
    {
      Tensor x = random_tensor(rng, {2, 2, 5, 5});
      Tensor k = random_tensor(rng, {3, 2, 3, 3});
      Conv2dSpec spec{2, 1};
      auto fx = [&](const Tensor& t) { return sum(conv2d(t, k, spec)); };
      auto fk = [&](const Tensor& t) { return mean(conv2d(x, t, spec)); };
      REQUIRE(finite_difference_check(fx, x, 1e-5) < tol);
      REQUIRE(finite_difference_check(fk, k, 1e-5) < tol);
      cases += 2;
    }
    // structure ops
    {
      auto f = [](const Tensor& x) {
        Tensor r0 = row(x, 0);
        Tensor r2 = row(x, 2);
        const Tensor parts[] = {r0, r2, mul(r0, r2)};
        Tensor st = stack0(parts);
        const Tensor cat[] = {st, st};
        return sum(concat_last(cat));
      };
      REQUIRE(finite_difference_check(f, random_tensor(rng, {4, 3}), 1e-5) < tol);
      ++cases;
    }
    {
      auto f = [](const Tensor& x) { return sum(mul(swap_axes01(x), swap_axes01(x))); };
      REQUIRE(finite_difference_check(f, random_tensor(rng, {3, 2, 2}), 1e-5) < tol);
      auto g = [](const Tensor& x) { return mean(reshape(x, {6, 2})); };
      REQUIRE(finite_difference_check(g, random_tensor(rng, {2, 3, 2}), 1e-5) < tol);
      cases += 2;
    }
    // pooling (mean and max; continuous inputs keep max tie-free)
    {
      auto fmean = [](const Tensor& x) { return sum(mul(pool_time(x, 3, PoolMode::kMean), Tensor::scalar(2.0))); };
      auto fmax = [](const Tensor& x) { return sum(pool_time(x, 2, PoolMode::kMax)); };
      REQUIRE(finite_difference_check(fmean, random_tensor(rng, {7, 3}), 1e-5) < tol);
      REQUIRE(finite_difference_check(fmax, random_tensor(rng, {6, 2}), 1e-5) < tol);
      cases += 2;
    }
    // rmsnorm, both operands
    {
      Tensor gain = random_tensor(rng, {4}, 0.5, 1.5);
      Tensor x = random_tensor(rng, {3, 4});
      auto fx = [&](const Tensor& t) { return sum(rmsnorm(t, gain)); };
      auto fg = [&](const Tensor& t) { return sum(mul(rmsnorm(x, t), x)); };
      REQUIRE(finite_difference_check(fx, x, 1e-5) < tol);
      REQUIRE(finite_difference_check(fg, gain, 1e-5) < tol);
      cases += 2;
    }
    // loss, relaxed spike, surrogate value op
    {
      std::vector<int> labels = {1, 0};
      auto f = [&](const Tensor& z) { return cross_entropy_mean(z, labels); };
      REQUIRE(finite_difference_check(f, random_tensor(rng, {2, 3}), 1e-5) < tol);
      auto fr = [](const Tensor& u) { return sum(spike_relaxed(u, 4.0)); };
      REQUIRE(finite_difference_check(fr, random_tensor(rng, {5}), 1e-6) < tol);
      auto fs = [](const Tensor& u) { return sum(surrogate_grad(u, 5.0)); };
      REQUIRE(finite_difference_check(fs, random_tensor(rng, {5}, 0.1, 1.0), 1e-6) < tol);
      cases += 3;
    }
  }
  REQUIRE(cases >= 100);
}

TEST_CASE("surrogate gradient value op", "[tensor]") {
  REQUIRE(surrogate_grad(Tensor::zeros({1}), 25.0).item() == 1.0);
  // k = 25, u = 0.04 -> 1/(1+1)^2
  REQUIRE(surrogate_grad(Tensor::scalar(0.04), 25.0).item() == Catch::Approx(0.25).margin(1e-12));
  Rng rng(13);
  for (int i = 0; i < 50; ++i) {
    const double u = rng.uniform(-2.0, 2.0);
    REQUIRE(surrogate_grad(Tensor::scalar(u), 25.0).item() ==
            Catch::Approx(surrogate_grad(Tensor::scalar(-u), 25.0).item()).margin(1e-15));
  }
}
