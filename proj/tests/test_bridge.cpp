#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <vector>

#include "mamba_spike/bridge.hpp"
#include "mamba_spike/rng.hpp"
#include "mamba_spike/spiking.hpp"
#include "test_util.hpp"

using namespace mamba_spike;
using test_util::max_abs_diff;

namespace {

Tensor random_spikes(Rng& rng, Shape shape, double p = 0.4) {
  std::vector<double> v(shape_size(shape));
  for (double& x : v) x = rng.uniform() < p ? 1.0 : 0.0;
  return Tensor::from_data(std::move(shape), std::move(v));
}

}  // namespace

TEST_CASE("rate-mode activations are window spike rates", "[bridge]") {
  BridgeConfig cfg;
  cfg.window = 10;

  ActivationSeq full = spikes_to_activations(Tensor::ones({10, 1}), cfg);
  REQUIRE(full.values.item() == 1.0);

  ActivationSeq none = spikes_to_activations(Tensor::zeros({10, 1}), cfg);
  REQUIRE(none.values.item() == 0.0);

  std::vector<double> three(10, 0.0);
  three[1] = three[4] = three[9] = 1.0;
  ActivationSeq part = spikes_to_activations(Tensor::from_data({10, 1}, three), cfg);
  REQUIRE(part.values.item() == Catch::Approx(0.3).margin(1e-15));
  REQUIRE(part.window_index == std::vector<std::size_t>{0});
}

TEST_CASE("rate-mode activations stay in [0,1] on random binary input", "[bridge]") {
  Rng rng(207);
  for (int trial = 0; trial < 20; ++trial) {
    BridgeConfig cfg;
    cfg.window = 1 + rng.index(9);
    Tensor s = random_spikes(rng, {3 + rng.index(30), 4}, rng.uniform(0.0, 1.0));
    ActivationSeq act = spikes_to_activations(s, cfg);
    for (std::size_t i = 0; i < act.values.size(); ++i) {
      REQUIRE(act.values[i] >= 0.0);
      REQUIRE(act.values[i] <= 1.0);
    }
    const std::size_t L = act.values.shape()[0];
    REQUIRE(L * cfg.window >= s.shape()[0]);
  }
}

TEST_CASE("permuting spikes inside one window moves only the latency feature", "[bridge]") {
  Rng rng(211);
  BridgeConfig cfg;
  cfg.window = 6;
  cfg.temporal_features = TemporalFeatureSet::kFirstSpikeLatency;
  Tensor s = random_spikes(rng, {12, 3}, 0.5);

  // rotate the first window's steps
  std::vector<double> shuffled = s.data();
  for (std::size_t t = 0; t < 6; ++t) {
    for (std::size_t i = 0; i < 3; ++i) shuffled[t * 3 + i] = s.at({(t + 2) % 6, i});
  }
  Tensor s2 = Tensor::from_data({12, 3}, shuffled);

  ActivationSeq a1 = spikes_to_activations(s, cfg);
  ActivationSeq a2 = spikes_to_activations(s2, cfg);
  REQUIRE(max_abs_diff(a1.values, a2.values) == 0.0);  // counts unchanged

  Tensor f1 = temporal_features(s, cfg);
  Tensor f2 = temporal_features(s2, cfg);
  // the second window is untouched either way
  for (std::size_t i = 0; i < 3; ++i) REQUIRE(f1.at({1, i}) == f2.at({1, i}));
}

TEST_CASE("doubling the window merges adjacent activations by averaging", "[bridge]") {
  Rng rng(213);
  Tensor s = random_spikes(rng, {24, 4}, 0.5);
  BridgeConfig small;
  small.window = 3;
  BridgeConfig big;
  big.window = 6;
  ActivationSeq fine = spikes_to_activations(s, small);
  ActivationSeq coarse = spikes_to_activations(s, big);
  REQUIRE(fine.values.shape()[0] == 8);
  REQUIRE(coarse.values.shape()[0] == 4);
  for (std::size_t l = 0; l < 4; ++l) {
    for (std::size_t i = 0; i < 4; ++i) {
      const double merged = 0.5 * (fine.values.at({2 * l, i}) + fine.values.at({2 * l + 1, i}));
      REQUIRE(coarse.values.at({l, i}) == Catch::Approx(merged).margin(1e-15));
    }
  }
}

TEST_CASE("running-rate mode matches a manual EMA oracle", "[bridge]") {
  Rng rng(217);
  BridgeConfig cfg;
  cfg.window = 4;
  cfg.norm_mode = NormMode::kRunningRate;
  cfg.ema_decay = 0.25;
  cfg.eps = 1e-3;
  Tensor s = random_spikes(rng, {16, 2}, 0.5);
  ActivationSeq act = spikes_to_activations(s, cfg);

  for (std::size_t i = 0; i < 2; ++i) {
    double rbar = 1.0;
    for (std::size_t l = 0; l < 4; ++l) {
      double count = 0.0;
      for (std::size_t t = 4 * l; t < 4 * (l + 1); ++t) count += s.at({t, i});
      const double rate = count / 4.0;
      const double expect = rate / std::max(rbar, cfg.eps);
      REQUIRE(act.values.at({l, i}) == Catch::Approx(expect).margin(1e-12));
      rbar = (1.0 - cfg.ema_decay) * rbar + cfg.ema_decay * rate;
    }
  }
}

TEST_CASE("temporal feature conventions", "[bridge]") {
  BridgeConfig cfg;
  cfg.window = 5;
  cfg.temporal_features = TemporalFeatureSet::kFirstSpikeLatency;

  // spikes at the first step of every window -> latency 0
  std::vector<double> first(15, 0.0);
  first[0] = first[5 * 1] = first[5 * 2] = 1.0;
  Tensor lat = temporal_features(Tensor::from_data({15, 1}, first), cfg);
  for (std::size_t l = 0; l < 3; ++l) REQUIRE(lat.at({l, 0}) == 0.0);

  // silent channel -> latency 1
  Tensor silent = temporal_features(Tensor::zeros({15, 1}), cfg);
  for (std::size_t l = 0; l < 3; ++l) REQUIRE(silent.at({l, 0}) == 1.0);

  // positional code at window 0: sine dims 0, cosine dims 1
  cfg.temporal_features = TemporalFeatureSet::kPositional;
  cfg.positional_dims = 6;
  Tensor pos = temporal_features(Tensor::zeros({15, 1}), cfg);
  REQUIRE(pos.shape() == Shape{3, 6});
  for (std::size_t j = 0; j < 6; j += 2) {
    REQUIRE(pos.at({0, j}) == 0.0);
    REQUIRE(pos.at({0, j + 1}) == 1.0);
  }

  // both: latency block then positional block along the feature axis
  cfg.temporal_features = TemporalFeatureSet::kBoth;
  Tensor both = temporal_features(Tensor::zeros({15, 2}), cfg);
  REQUIRE(both.shape() == Shape{3, 8});
}

TEST_CASE("gradients flow from activations back into the spiking path", "[bridge]") {
  Rng rng(219);
  LIFParams p;
  p.tau_m = 10.0;
  p.theta0 = 0.5;
  p.mode = SurrogateMode::kHard;  // production path: surrogate backward
  Tensor w = test_util::random_param(rng, {3, 4}, -0.5, 1.0);
  Tensor s_in = random_spikes(rng, {12, 3}, 0.5);

  LifCell cell(p);
  NeuronState st;
  Tensor beta = cell.beta();
  std::vector<Tensor> outs;
  for (std::size_t t = 0; t < 12; ++t) {
    outs.push_back(cell.step(matmul(reshape(row(s_in, t), {1, 3}), w), st, beta));
  }
  BridgeConfig cfg;
  cfg.window = 4;
  ActivationSeq act = spikes_to_activations(stack0(outs), cfg);
  GradientMap g = backward(mean(act.values));
  const Tensor gw = g.at_or_zero(w);
  double norm = 0.0;
  for (std::size_t i = 0; i < gw.size(); ++i) {
    REQUIRE(std::isfinite(gw[i]));
    norm += std::abs(gw[i]);
  }
  REQUIRE(norm > 0.0);
}
