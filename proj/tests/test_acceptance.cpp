// Acceptance suite: one test case per release criterion, each printing a
// PASS line when it holds. Run via `ctest -R acceptance` or directly:
//   ./build/tests/acceptance_tests

#include <catch2/catch_amalgamated.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <vector>

#include "mamba_spike/cli.hpp"
#include "mamba_spike/harness.hpp"
#include "test_util.hpp"

using namespace mamba_spike;
using test_util::max_abs_diff;
using test_util::random_tensor;

namespace {

namespace fs = std::filesystem;

void report_pass(const std::string& name) {
  std::cout << "[PASS] " << name << "\n";
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() -
                                                               t0)
             .count() /
         1000.0;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string str(const std::string& child = "") const {
    return child.empty() ? path.string() : (path / child).string();
  }
};

/// Desk-scale configuration for the ablation criteria: small enough to train
/// ten variants in well under a minute, separable enough that both the
/// spiking and raw-frame paths learn.
RunConfig ablation_scale_config() {
  return parse_run_config(Config::parse_string(
      "dataset = synth-gesture\n"
      "data.classes = 4\n"
      "data.train_samples = 160\n"
      "data.test_samples = 80\n"
      "data.width = 16\n"
      "data.height = 16\n"
      "data.duration_us = 30000\n"
      "data.event_rate = 20000\n"
      "data.bin_width_us = 2000\n"
      "data.t_max = 12\n"
      "model.conv.channels = 4\n"
      "model.conv.kernel = 3\n"
      "model.conv.stride = 2\n"
      "model.hidden = 96\n"
      "bridge.window = 3\n"
      "backbone.dim = 24\n"
      "backbone.depth = 1\n"
      "backbone.state = 4\n"
      "backbone.conv_width = 2\n"
      "train.epochs = 8\n"
      "train.batch = 16\n"
      "seed = 100\n"));
}

}  // namespace

TEST_CASE("oracle equivalence: fast scan vs reference on 1000 random instances", "[acceptance]") {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(424242);
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t L = 1 + rng.index(64), D = 1 + rng.index(8), N = 1 + rng.index(8);
    Tensor x = random_tensor(rng, {L, D});
    Tensor delta = random_tensor(rng, {L, D}, 0.05, 1.0);
    Tensor A = random_tensor(rng, {D, N}, -2.0, -0.1);
    Tensor B = random_tensor(rng, {L, N});
    Tensor C = random_tensor(rng, {L, N});
    Tensor D_skip = random_tensor(rng, {D}, -0.5, 0.5);
    Tensor ref = selective_scan_ref(x, delta, A, B, C, D_skip);
    Tensor fast = selective_scan_fast(x, delta, A, B, C, D_skip, 1 + rng.index(80));
    worst = std::max(worst, max_abs_diff(ref, fast));
  }
  const double secs = seconds_since(t0);
  INFO("worst |fast - ref| = " << worst << ", " << secs << " s");
  REQUIRE(worst <= 1e-6);
  REQUIRE(secs < 30.0);
  report_pass("oracle equivalence (1000 instances, max err " + std::to_string(worst) + ")");
}

TEST_CASE("gradient suite: finite differences under 1e-4 per component", "[acceptance]") {
  const auto t0 = std::chrono::steady_clock::now();
  const auto suite = gradient_check_suite();
  REQUIRE(suite.size() == 7);
  for (const auto& [name, err] : suite) {
    INFO(name << " max rel error " << err);
    REQUIRE(err < 1e-4);
  }
  const double secs = seconds_since(t0);
  REQUIRE(secs < 300.0);
  report_pass("gradient suite (7 components, " + std::to_string(secs) + " s)");
}

TEST_CASE("encoder properties hold exactly", "[acceptance]") {
  Rng rng(515151);
  // deterministic rate count = round(x*T), elementwise, exactly
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t T = 1 + rng.index(50);
    Tensor x = random_tensor(rng, {8}, 0.0, 1.0);
    Tensor s = rate_encode(x, T, RateMode::kDeterministic);
    for (std::size_t i = 0; i < 8; ++i) {
      double count = 0.0;
      for (std::size_t t = 0; t < T; ++t) count += s[t * 8 + i];
      REQUIRE(count == std::floor(x[i] * static_cast<double>(T) + 0.5));
    }
  }
  // latency formula exact per definition
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t T = 2 + rng.index(40);
    const double x = rng.uniform(0.05, 1.0);
    Tensor s = latency_encode(Tensor::scalar(x), T, 0.05);
    const auto expect =
        static_cast<std::size_t>(std::floor((1.0 - x) * static_cast<double>(T - 1) + 0.5));
    REQUIRE(s[expect] == 1.0);
    double count = 0.0;
    for (std::size_t t = 0; t < T; ++t) count += s[t];
    REQUIRE(count == 1.0);
  }
  // seeded poisson count inside the 99.99% binomial interval at T = 10^4
  double poisson_count = 0.0;
  Tensor p = rate_encode(Tensor::scalar(0.3), 10000, RateMode::kPoisson, 7);
  for (std::size_t t = 0; t < 10000; ++t) poisson_count += p[t];
  REQUIRE(poisson_count >= 2850.0);
  REQUIRE(poisson_count <= 3150.0);
  // delta ramp: 0 -> 1 over 100 steps at theta 0.25 gives exactly 4 ON events
  std::vector<double> ramp(100);
  for (std::size_t t = 0; t < 100; ++t) ramp[t] = static_cast<double>(t) / 99.0;
  Tensor d = delta_encode(Tensor::from_data({100, 1}, ramp), 0.25);
  double on = 0.0, off = 0.0;
  for (std::size_t t = 0; t < 100; ++t) {
    off += d.at({t, 0, 0});
    on += d.at({t, 1, 0});
  }
  REQUIRE(on == 4.0);
  REQUIRE(off == 0.0);
  report_pass("encoder properties (rate exact, latency exact, poisson interval, delta ramp)");
}

TEST_CASE("lif brute-force checks", "[acceptance]") {
  LIFParams p;
  p.dt = 1.0;
  p.tau_m = -1.0 / std::log(0.9);  // beta = 0.9
  p.theta0 = 1.0;

  // step-simulation oracle for the first spike
  double v = 0.0;
  std::size_t oracle_first = 0;
  for (std::size_t t = 0; t < 12; ++t) {
    v = v * 0.9 + 0.2;
    if (v >= 1.0) {
      oracle_first = t + 1;  // 1-indexed
      break;
    }
  }
  REQUIRE(oracle_first == 7);

  LifResult r = lif_forward(Tensor::full({12, 1}, 0.2), p);
  std::size_t impl_first = 0;
  for (std::size_t t = 0; t < 12; ++t) {
    if (r.spikes.at({t, 0}) == 1.0) {
      impl_first = t + 1;
      break;
    }
  }
  REQUIRE(impl_first == 7);

  LifResult sub = lif_forward(Tensor::full({200, 1}, 0.05), p);
  REQUIRE(std::abs(sub.v_trace.at({199, 0}) - 0.5) < 1e-6);
  REQUIRE(sub.spikes.data() == std::vector<double>(200, 0.0));
  report_pass("lif brute-force (first spike at step 7, sub-threshold limit 0.5)");
}

TEST_CASE("causality and stability of the selective scan", "[acceptance]") {
  Rng rng(616161);
  // suffix perturbation on 100 random instances
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t L = 4 + rng.index(32), D = 1 + rng.index(6), N = 1 + rng.index(6);
    Tensor x = random_tensor(rng, {L, D});
    Tensor delta = random_tensor(rng, {L, D}, 0.05, 1.0);
    Tensor A = random_tensor(rng, {D, N}, -2.0, -0.1);
    Tensor B = random_tensor(rng, {L, N});
    Tensor C = random_tensor(rng, {L, N});
    Tensor D_skip = random_tensor(rng, {D}, -0.5, 0.5);
    const std::size_t cut = 1 + rng.index(L - 1);
    const std::size_t chunk = 1 + rng.index(8);
    Tensor y = selective_scan_fast(x, delta, A, B, C, D_skip, chunk);
    auto perturb = [&](const Tensor& t) {
      std::vector<double> v = t.data();
      const std::size_t cols = t.shape()[1];
      for (std::size_t r = cut; r < t.shape()[0]; ++r) {
        for (std::size_t c = 0; c < cols; ++c) v[r * cols + c] = rng.uniform(0.1, 2.0);
      }
      return Tensor::from_data(t.shape(), v);
    };
    Tensor y2 = selective_scan_fast(perturb(x), perturb(delta), A, perturb(B), perturb(C), D_skip,
                                    chunk);
    for (std::size_t t = 0; t < cut; ++t) {
      for (std::size_t d = 0; d < D; ++d) REQUIRE(y.at({t, d}) == y2.at({t, d}));
    }
  }

  // bounded state over 10^4 steps with unit-bounded inputs
  {
    const std::size_t L = 10000, D = 2, N = 4;
    Tensor x = random_tensor(rng, {L, D}, -1.0, 1.0);
    Tensor delta = random_tensor(rng, {L, D}, 0.01, 0.1);
    std::vector<double> alog(D * N);
    for (std::size_t d = 0; d < D; ++d) {
      for (std::size_t n = 0; n < N; ++n) alog[d * N + n] = std::log(static_cast<double>(n + 1));
    }
    Tensor A = neg(exp(Tensor::from_data({D, N}, alog)));
    Tensor B = random_tensor(rng, {L, N}, -1.0, 1.0);
    const double bound = 0.1 / (1.0 - std::exp(-0.01));
    for (std::size_t n = 0; n < N; ++n) {
      std::vector<double> cv(L * N, 0.0);
      for (std::size_t t = 0; t < L; ++t) cv[t * N + n] = 1.0;  // C = e_n reads h[.,.,n]
      Tensor h = selective_scan_fast(x, delta, A, B, Tensor::from_data({L, N}, cv),
                                     Tensor::zeros({D}), 64);
      for (std::size_t i = 0; i < h.size(); ++i) {
        REQUIRE(std::isfinite(h[i]));
        REQUIRE(std::abs(h[i]) <= bound);
      }
    }
  }
  report_pass("causality (100 suffix perturbations) and stability (1e4 steps bounded)");
}

TEST_CASE("desk-scale learning smoke test", "[acceptance]") {
  const auto t0 = std::chrono::steady_clock::now();
  RunConfig rc = parse_run_config(Config::parse_string(
      "dataset = synth-gesture\n"
      "train.epochs = 10\n"));  // defaults: 4 classes, 32x32, 800 train / 200 test
  REQUIRE(rc.data.classes == 4);
  REQUIRE(rc.data.train_samples == 800);
  REQUIRE(rc.data.test_samples == 200);
  REQUIRE(rc.data.width == 32);
  REQUIRE(rc.data.height == 32);
  RunReport rep = train(rc);
  const double secs = seconds_since(t0);
  INFO("final accuracy " << rep.final_accuracy << " in " << secs << " s");
  REQUIRE(rep.final_accuracy >= 0.90);
  REQUIRE(secs < 900.0);
  report_pass("desk-scale smoke test (accuracy " + std::to_string(rep.final_accuracy) + ", " +
              std::to_string(secs) + " s)");
}

TEST_CASE("ablation trend: spiking front-end does not hurt", "[acceptance]") {
  TempDir dir("mamba_spike_accept_ablation");
  RunConfig rc = ablation_scale_config();
  rc.out_dir = dir.str();
  AblationPlan plan;
  plan.frontend_on_off = true;
  plan.tau_sweep = false;
  plan.seeds = 5;
  AblationTable table = ablate(rc, plan);

  REQUIRE(table.rows.size() == 10);  // 2 variants x 5 seeds
  REQUIRE(table.variants() == std::vector<std::string>{"frontend-on", "frontend-off"});
  for (const auto& row : table.rows) {
    REQUIRE_FALSE(row.failed);
    if (row.variant == "frontend-on") {
      REQUIRE(row.spikes_per_sample.has_value());
    } else {
      REQUIRE_FALSE(row.spikes_per_sample.has_value());
    }
  }
  const double on = table.mean_accuracy("frontend-on");
  const double off = table.mean_accuracy("frontend-off");
  INFO("mean accuracy on " << on << " vs off " << off);
  REQUIRE(on >= off - 0.01);
  REQUIRE(fs::exists(dir.path / "ablation.csv"));

  // two-row summary shape: one mean per variant
  std::size_t summary_rows = 0;
  for (const auto& v : table.variants()) {
    (void)table.mean_accuracy(v);
    ++summary_rows;
  }
  REQUIRE(summary_rows == 2);
  report_pass("ablation trend (frontend-on " + std::to_string(on) + " vs frontend-off " +
              std::to_string(off) + ")");
}

TEST_CASE("tau sweep completes and emits the accuracy-vs-tau csv", "[acceptance]") {
  TempDir dir("mamba_spike_accept_tau");
  RunConfig rc = ablation_scale_config();
  rc.epochs = 2;
  rc.out_dir = dir.str();
  AblationPlan plan;
  plan.frontend_on_off = false;
  plan.tau_sweep = true;
  plan.taus = {10, 20, 30, 40, 50};
  plan.neurons = {NeuronModel::kLif, NeuronModel::kSrm};
  plan.seeds = 1;
  AblationTable table = ablate(rc, plan);
  REQUIRE(table.rows.size() == 10);  // 2 neuron models x 5 time constants
  for (const auto& row : table.rows) {
    INFO(row.variant << ": " << row.error);
    REQUIRE_FALSE(row.failed);
  }
  REQUIRE(fs::exists(dir.path / "tau_summary.csv"));
  std::ifstream csv(dir.str("tau_summary.csv"));
  std::string line;
  std::getline(csv, line);
  REQUIRE(line == "model,tau_ms,mean_accuracy");
  std::size_t rows = 0;
  while (std::getline(csv, line)) {
    if (!line.empty()) ++rows;
  }
  REQUIRE(rows == 10);
  report_pass("tau sweep (lif/srm x {10,20,30,40,50} ms, csv emitted)");
}

TEST_CASE("determinism: identical config and seed give identical report bytes", "[acceptance]") {
  TempDir dir("mamba_spike_accept_det");
  RunConfig rc = ablation_scale_config();
  rc.epochs = 2;
  rc.out_dir = dir.str("a");
  RunReport r1 = train(rc);
  rc.out_dir = dir.str("b");
  RunReport r2 = train(rc);
  REQUIRE(r1.to_json() == r2.to_json());
  std::ifstream fa(dir.str("a/report.json")), fb(dir.str("b/report.json"));
  std::string sa((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
  std::string sb((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
  REQUIRE_FALSE(sa.empty());
  REQUIRE(sa == sb);
  report_pass("determinism (byte-identical reports across reruns)");
}

TEST_CASE("round-trips: AER on 1000 random streams and the IDX golden file", "[acceptance]") {
  Rng rng(717171);
  for (int trial = 0; trial < 1000; ++trial) {
    EventStream s;
    s.width = static_cast<std::uint16_t>(1 + rng.index(64));
    s.height = static_cast<std::uint16_t>(1 + rng.index(64));
    std::uint32_t t = 0;
    const std::size_t n = rng.index(120);
    for (std::size_t i = 0; i < n; ++i) {
      t += static_cast<std::uint32_t>(rng.index(100));
      s.records.push_back({t, static_cast<std::uint16_t>(rng.index(s.width)),
                           static_cast<std::uint16_t>(rng.index(s.height)),
                           static_cast<std::uint8_t>(rng.index(2))});
    }
    const std::string bytes = serialize_aer(s);
    EventStream back = parse_aer(bytes);
    REQUIRE(back.records == s.records);
    REQUIRE(back.width == s.width);
    REQUIRE(back.height == s.height);
    REQUIRE(serialize_aer(back) == bytes);
  }

  // golden IDX bytes: two 2x2 images
  std::string idx;
  const unsigned char header[] = {0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2};
  idx.assign(reinterpret_cast<const char*>(header), sizeof(header));
  const unsigned char px[] = {0, 255, 128, 64, 10, 20, 30, 40};
  idx.append(reinterpret_cast<const char*>(px), sizeof(px));
  const std::string path = (fs::temp_directory_path() / "mamba_spike_accept_golden.idx").string();
  {
    std::ofstream out(path, std::ios::binary);
    out << idx;
  }
  ImageSet set = read_idx(path);
  REQUIRE(set.images.shape() == Shape{2, 2, 2});
  REQUIRE(set.images.at({0, 0, 0}) == 0.0);
  REQUIRE(set.images.at({0, 0, 1}) == 1.0);
  REQUIRE(set.images.at({0, 1, 0}) == 128.0 / 255.0);
  REQUIRE(set.images.at({0, 1, 1}) == 64.0 / 255.0);
  REQUIRE(set.images.at({1, 1, 1}) == 40.0 / 255.0);
  std::remove(path.c_str());
  report_pass("round-trips (AER x1000 byte-identical, IDX golden exact)");
}
