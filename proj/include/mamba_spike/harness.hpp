#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <functional>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mamba_spike/bridge.hpp"
#include "mamba_spike/checkpoint.hpp"
#include "mamba_spike/config.hpp"
#include "mamba_spike/encoders.hpp"
#include "mamba_spike/error.hpp"
#include "mamba_spike/event_io.hpp"
#include "mamba_spike/gradcheck.hpp"
#include "mamba_spike/metrics.hpp"
#include "mamba_spike/model.hpp"
#include "mamba_spike/optimizer.hpp"
#include "mamba_spike/rng.hpp"

namespace mamba_spike {

enum class DatasetKind { kSynthGesture, kSeqMnist };

struct DataConfig {
  std::size_t classes = 4;
  std::size_t train_samples = 800;  // total over classes
  std::size_t test_samples = 200;
  std::uint16_t width = 32;
  std::uint16_t height = 32;
  std::uint32_t duration_us = 40000;
  double event_rate = 30000.0;
  std::uint32_t bin_width_us = 2000;
  std::size_t t_max = 20;
  std::uint64_t seed = 1;      // dataset stream, separate from the training seed
  std::string dir;             // seq-mnist IDX directory
  std::size_t limit_train = 512;
  std::size_t limit_test = 256;
};

struct RunConfig {
  DatasetKind dataset = DatasetKind::kSynthGesture;
  DataConfig data;
  EncoderConfig encoder;
  ModelConfig model;  // input geometry is filled in when the dataset is built
  AdamConfig optim;
  std::size_t epochs = 5;
  std::size_t batch = 32;
  std::uint64_t seed = 42;
  std::string out_dir;
  std::size_t eval_threads = 1;
  std::map<std::string, std::string> echo;  // resolved key/value pairs
};

// ---------------------------------------------------------------------------
// config surface
// ---------------------------------------------------------------------------

inline RunConfig parse_run_config(const Config& cfg) {
  RunConfig rc;

  const std::string ds = cfg.get_string("dataset", "synth-gesture");
  if (ds == "synth-gesture") {
    rc.dataset = DatasetKind::kSynthGesture;
  } else if (ds == "seq-mnist") {
    rc.dataset = DatasetKind::kSeqMnist;
  } else {
    throw ContractError("unknown dataset \"" + ds + "\" (expected synth-gesture or seq-mnist)");
  }

  rc.data.classes = cfg.get_size("data.classes", rc.dataset == DatasetKind::kSeqMnist ? 10 : 4);
  rc.data.train_samples = cfg.get_size("data.train_samples", 800);
  rc.data.test_samples = cfg.get_size("data.test_samples", 200);
  rc.data.width = static_cast<std::uint16_t>(cfg.get_size("data.width", 32));
  rc.data.height = static_cast<std::uint16_t>(cfg.get_size("data.height", 32));
  rc.data.duration_us = static_cast<std::uint32_t>(cfg.get_size("data.duration_us", 40000));
  rc.data.event_rate = cfg.get_double("data.event_rate", 30000.0);
  rc.data.bin_width_us = static_cast<std::uint32_t>(cfg.get_size("data.bin_width_us", 2000));
  rc.data.t_max = cfg.get_size("data.t_max", 20);
  rc.data.seed = cfg.get_u64("data.seed", 1);
  rc.data.dir = cfg.get_string("data.dir", "");
  rc.data.limit_train = cfg.get_size("data.limit_train", 512);
  rc.data.limit_test = cfg.get_size("data.limit_test", 256);

  rc.encoder.scheme = encoder_scheme_from_string(cfg.get_string("encoder.scheme", "rate-deterministic"));
  rc.encoder.steps = cfg.get_size("encoder.steps", 4);
  rc.encoder.seed = cfg.get_u64("encoder.seed", 0);
  rc.encoder.theta_delta = cfg.get_double("encoder.theta_delta", 0.1);
  rc.encoder.x_min_latency = cfg.get_double("encoder.x_min_latency", 0.01);
  rc.encoder.validate();

  auto& fe = rc.model.frontend;
  fe.enabled = cfg.get_bool("model.frontend", true);
  const std::string neuron = cfg.get_string("model.neuron", "lif");
  if (neuron == "lif") {
    fe.neuron = NeuronModel::kLif;
  } else if (neuron == "srm") {
    fe.neuron = NeuronModel::kSrm;
  } else {
    throw ContractError("unknown neuron model \"" + neuron + "\" (expected lif or srm)");
  }
  fe.conv_enabled = cfg.get_bool("model.conv.enabled", true);
  fe.conv_channels = cfg.get_size("model.conv.channels", 8);
  fe.conv_kernel = cfg.get_size("model.conv.kernel", 5);
  fe.conv_stride = cfg.get_size("model.conv.stride", 4);
  fe.hidden = cfg.get_size("model.hidden", 128);
  fe.recurrent = cfg.get_bool("model.recurrent", true);
  fe.recurrent_zero_diag = cfg.get_bool("model.recurrent_zero_diag", true);
  fe.lif.tau_m = cfg.get_double("model.lif.tau_m", 30.0);
  fe.lif.dt = cfg.get_double("model.lif.dt", 1.0);
  fe.lif.theta0 = cfg.get_double("model.lif.theta0", 1.0);
  fe.lif.adaptive = cfg.get_bool("model.lif.adaptive", false);
  fe.lif.tau_a = cfg.get_double("model.lif.tau_a", 100.0);
  fe.lif.delta_a = cfg.get_double("model.lif.delta_a", 0.1);
  fe.lif.surrogate_slope = cfg.get_double("model.lif.surrogate_slope", 25.0);
  fe.lif.learn_tau = cfg.get_bool("model.lif.learn_tau", false);
  fe.lif.learn_theta = cfg.get_bool("model.lif.learn_theta", false);
  fe.lif.validate();
  fe.srm.tau_m = cfg.get_double("model.srm.tau_m", 30.0);
  fe.srm.tau_s = cfg.get_double("model.srm.tau_s", 5.0);
  fe.srm.tau_r = cfg.get_double("model.srm.tau_r", 20.0);
  fe.srm.eta0 = cfg.get_double("model.srm.eta0", 1.0);
  fe.srm.theta0 = cfg.get_double("model.srm.theta0", 1.0);
  fe.srm.dt = cfg.get_double("model.srm.dt", 1.0);
  fe.srm.surrogate_slope = cfg.get_double("model.srm.surrogate_slope", 25.0);
  fe.srm.validate();

  auto& br = rc.model.bridge;
  br.window = cfg.get_size("bridge.window", 5);
  const std::string norm = cfg.get_string("bridge.norm", "rate");
  if (norm == "rate") {
    br.norm_mode = NormMode::kRate;
  } else if (norm == "running-rate") {
    br.norm_mode = NormMode::kRunningRate;
  } else {
    throw ContractError("unknown bridge.norm \"" + norm + "\"");
  }
  br.ema_decay = cfg.get_double("bridge.ema_decay", 0.1);
  br.eps = cfg.get_double("bridge.eps", 1e-3);
  const std::string feats = cfg.get_string("bridge.features", "none");
  if (feats == "none") {
    br.temporal_features = TemporalFeatureSet::kNone;
  } else if (feats == "latency") {
    br.temporal_features = TemporalFeatureSet::kFirstSpikeLatency;
  } else if (feats == "positional") {
    br.temporal_features = TemporalFeatureSet::kPositional;
  } else if (feats == "both") {
    br.temporal_features = TemporalFeatureSet::kBoth;
  } else {
    throw ContractError("unknown bridge.features \"" + feats + "\"");
  }
  br.positional_dims = cfg.get_size("bridge.positional_dims", 8);
  br.validate();

  auto& bb = rc.model.backbone;
  bb.depth = cfg.get_size("backbone.depth", 2);
  bb.classes = rc.data.classes;
  bb.block.dim = cfg.get_size("backbone.dim", 64);
  bb.block.expansion = cfg.get_size("backbone.expansion", 2);
  bb.block.state = cfg.get_size("backbone.state", 8);
  bb.block.conv_width = cfg.get_size("backbone.conv_width", 4);
  bb.block.dt_rank = cfg.get_size("backbone.dt_rank", 0);
  bb.block.chunk = cfg.get_size("backbone.chunk", 16);
  const std::string head = cfg.get_string("backbone.head", "mean");
  if (head == "mean") {
    bb.head = HeadMode::kMeanPool;
  } else if (head == "last") {
    bb.head = HeadMode::kLastStep;
  } else {
    throw ContractError("unknown backbone.head \"" + head + "\" (expected mean or last)");
  }
  bb.validate();

  rc.optim.lr = cfg.get_double("optim.lr", 1e-3);
  rc.optim.beta1 = cfg.get_double("optim.beta1", 0.9);
  rc.optim.beta2 = cfg.get_double("optim.beta2", 0.999);
  rc.optim.eps = cfg.get_double("optim.eps", 1e-8);
  rc.optim.weight_decay = cfg.get_double("optim.weight_decay", 0.0);
  rc.optim.validate();

  rc.epochs = cfg.get_size("train.epochs", 5);
  rc.batch = cfg.get_size("train.batch", 32);
  if (rc.batch < 1) throw ContractError("train.batch must be >= 1");
  rc.seed = cfg.get_u64("seed", 42);
  rc.out_dir = cfg.get_string("out", "");
  rc.eval_threads = std::max<std::size_t>(1, cfg.get_size("eval.threads", 1));

  cfg.finish();
  rc.echo = cfg.entries();
  return rc;
}

inline RunConfig load_run_config(const std::string& path) {
  return parse_run_config(Config::parse_file(path));
}

// ---------------------------------------------------------------------------
// datasets
// ---------------------------------------------------------------------------

struct Dataset {
  std::vector<Tensor> inputs;  // per sample, [T x C x H x W] or [T x F]
  std::vector<int> labels;
  InputGeometry geometry;
};

namespace detail {

inline Tensor pad_frames_to(const Tensor& frames, std::size_t steps) {
  if (frames.shape()[0] == steps) return frames;
  Shape shape = frames.shape();
  const std::size_t have = shape[0];
  shape[0] = steps;
  std::vector<double> out(shape_size(shape), 0.0);
  const std::size_t stride = frames.size() / have;
  std::copy(frames.data().begin(), frames.data().begin() + std::min(have, steps) * stride,
            out.begin());
  return Tensor::from_data(std::move(shape), std::move(out));
}

/// Row-sequential presentation of one image encoded into spikes [T x F].
inline Tensor encode_image_rows(const Tensor& image, const EncoderConfig& enc,
                                std::uint64_t sample_seed) {
  const std::size_t rows = image.shape()[0], cols = image.shape()[1];
  Tensor seq = reshape(image, {rows, cols});
  switch (enc.scheme) {
    case EncoderScheme::kDelta: {
      // threshold-code along the row axis; ON/OFF fold into the feature dim
      Tensor spikes = delta_encode(seq, enc.theta_delta);
      return reshape(spikes, {rows, 2 * cols});
    }
    case EncoderScheme::kLatency: {
      std::vector<Tensor> steps;
      for (std::size_t r = 0; r < rows; ++r) {
        steps.push_back(latency_encode(row(seq, r), enc.steps, enc.x_min_latency));
      }
      Tensor spikes = stack0(steps);  // [rows x steps x cols]
      return reshape(spikes, {rows * enc.steps, cols});
    }
    case EncoderScheme::kRateDeterministic:
    case EncoderScheme::kRatePoisson: {
      const RateMode mode = enc.scheme == EncoderScheme::kRateDeterministic
                                ? RateMode::kDeterministic
                                : RateMode::kPoisson;
      std::vector<Tensor> steps;
      for (std::size_t r = 0; r < rows; ++r) {
        steps.push_back(rate_encode(row(seq, r), enc.steps, mode, mix_seed(sample_seed, r)));
      }
      Tensor spikes = stack0(steps);
      return reshape(spikes, {rows * enc.steps, cols});
    }
  }
  throw ContractError("encode_image_rows: unhandled scheme");
}

}  // namespace detail

inline Dataset build_synth_gesture_split(const DataConfig& data, bool train_split) {
  Dataset ds;
  ds.geometry.frames = true;
  ds.geometry.steps = data.t_max;
  ds.geometry.channels = 2;
  ds.geometry.height = data.height;
  ds.geometry.width = data.width;
  const std::size_t count = train_split ? data.train_samples : data.test_samples;
  const std::uint64_t split_tag = train_split ? 0x747261696eull : 0x74657374ull;
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t cls = i % data.classes;
    EventStream stream = synth_gesture(cls, mix_seed(data.seed, split_tag, i), data.duration_us,
                                       data.width, data.height, data.event_rate);
    Tensor frames = events_to_frames(stream, data.bin_width_us, data.t_max);
    ds.inputs.push_back(detail::pad_frames_to(frames, data.t_max));
    ds.labels.push_back(static_cast<int>(cls));
  }
  return ds;
}

inline Dataset build_seq_mnist_split(const DataConfig& data, const EncoderConfig& enc,
                                     bool train_split) {
  if (data.dir.empty()) {
    throw ContractError("seq-mnist requires data.dir pointing at the IDX files");
  }
  namespace fs = std::filesystem;
  const std::string img_name = train_split ? "train-images-idx3-ubyte" : "t10k-images-idx3-ubyte";
  const std::string lab_name = train_split ? "train-labels-idx1-ubyte" : "t10k-labels-idx1-ubyte";
  ImageSet set = read_idx((fs::path(data.dir) / img_name).string(),
                          (fs::path(data.dir) / lab_name).string());
  const std::size_t limit = train_split ? data.limit_train : data.limit_test;
  const std::size_t n = limit > 0 ? std::min(limit, set.labels.size()) : set.labels.size();

  Dataset ds;
  for (std::size_t i = 0; i < n; ++i) {
    Tensor img = row(set.images, i);
    ds.inputs.push_back(detail::encode_image_rows(img, enc, mix_seed(enc.seed, i, train_split)));
    ds.labels.push_back(set.labels[i]);
  }
  ds.geometry.frames = false;
  ds.geometry.steps = ds.inputs.front().shape()[0];
  ds.geometry.channels = ds.inputs.front().shape()[1];
  return ds;
}

inline Dataset build_dataset(const RunConfig& rc, bool train_split) {
  if (rc.dataset == DatasetKind::kSynthGesture) {
    return build_synth_gesture_split(rc.data, train_split);
  }
  return build_seq_mnist_split(rc.data, rc.encoder, train_split);
}

/// Stacks per-sample tensors [T x inner] into a time-major batch [T x B x inner].
inline Tensor stack_batch(const std::vector<Tensor>& inputs, std::span<const std::size_t> idx) {
  const Shape& s0 = inputs[idx[0]].shape();
  const std::size_t T = s0[0];
  const std::size_t inner = inputs[idx[0]].size() / T;
  Shape shape;
  shape.push_back(T);
  shape.push_back(idx.size());
  shape.insert(shape.end(), s0.begin() + 1, s0.end());
  std::vector<double> out(T * idx.size() * inner);
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const auto& src = inputs[idx[b]].data();
    for (std::size_t t = 0; t < T; ++t) {
      std::copy(src.begin() + t * inner, src.begin() + (t + 1) * inner,
                out.begin() + (t * idx.size() + b) * inner);
    }
  }
  return Tensor::from_data(std::move(shape), std::move(out));
}

// ---------------------------------------------------------------------------
// reports
// ---------------------------------------------------------------------------

struct EpochStats {
  std::size_t epoch = 0;
  double train_loss = 0, train_accuracy = 0;
  double test_loss = 0, test_accuracy = 0;
};

struct RunReport {
  std::string kind = "train";
  std::uint64_t seed = 0;
  std::vector<EpochStats> epochs;
  double final_accuracy = 0.0;
  double final_macro_f1 = 0.0;
  std::optional<double> spikes_per_sample;  // empty = not applicable (no front-end)
  std::size_t decision_steps = 0;
  double wall_us_per_sample = 0.0;  // measured; excluded from the deterministic report
  double train_wall_s = 0.0;
  std::map<std::string, std::string> config_echo;

  /// Deterministic report body: identical (config, seed, platform) runs
  /// produce identical bytes. Wall-clock timings live in timing_json().
  std::string to_json() const {
    nlohmann::ordered_json j;
    j["schema_version"] = 1;
    j["kind"] = kind;
    j["seed"] = seed;
    j["config"] = config_echo;
    j["epochs"] = nlohmann::ordered_json::array();
    for (const auto& e : epochs) {
      j["epochs"].push_back({{"epoch", e.epoch},
                             {"train_loss", e.train_loss},
                             {"train_accuracy", e.train_accuracy},
                             {"test_loss", e.test_loss},
                             {"test_accuracy", e.test_accuracy}});
    }
    j["final_accuracy"] = final_accuracy;
    j["final_macro_f1"] = final_macro_f1;
    if (spikes_per_sample.has_value()) {
      j["spikes_per_sample"] = *spikes_per_sample;
    } else {
      j["spikes_per_sample"] = nullptr;  // "-" convention: not a spiking model
    }
    j["latency_proxy"]["decision_steps"] = decision_steps;
    return j.dump(2) + "\n";
  }

  std::string timing_json() const {
    nlohmann::ordered_json j;
    j["wall_us_per_sample"] = wall_us_per_sample;
    j["train_wall_s"] = train_wall_s;
    return j.dump(2) + "\n";
  }
};

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

namespace detail {

struct BatchEval {
  double loss_sum = 0.0;
  double spikes = 0.0;  // encoder + front-end spikes over the batch
  std::vector<int> predictions;
  std::size_t decision_steps = 0;
};

inline BatchEval eval_batch(const Model& model, const Dataset& ds,
                            std::span<const std::size_t> idx) {
  NoGradGuard guard;
  Tensor batch = stack_batch(ds.inputs, idx);
  double encoder_spikes = 0.0;
  for (double v : batch.data()) encoder_spikes += v;
  Model::Output out = model.forward(batch);
  std::vector<int> labels;
  for (std::size_t i : idx) labels.push_back(ds.labels[i]);
  BatchEval r;
  r.loss_sum = cross_entropy_mean(out.logits, labels).item() * static_cast<double>(idx.size());
  r.decision_steps = out.decision_steps;
  if (out.frontend_spikes.has_value()) r.spikes = encoder_spikes + *out.frontend_spikes;
  const std::size_t C = out.logits.shape()[1];
  for (std::size_t b = 0; b < idx.size(); ++b) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < C; ++c) {
      if (out.logits.at({b, c}) > out.logits.at({b, best})) best = c;
    }
    r.predictions.push_back(static_cast<int>(best));
  }
  return r;
}

}  // namespace detail

struct EvalResult {
  double loss = 0.0;
  Confusion confusion{2};
  std::optional<double> spikes_per_sample;
  std::size_t decision_steps = 0;
  double wall_us_per_sample = 0.0;
};

/// Deterministic evaluation over a dataset. Batches are fixed by index order;
/// when threads > 1 the batches are distributed across workers and merged
/// back in batch order, so results do not depend on scheduling.
inline EvalResult evaluate_dataset(const Model& model, const Dataset& ds, std::size_t batch_size,
                                   std::size_t threads = 1) {
  const std::size_t n = ds.inputs.size();
  if (n == 0) throw ContractError("evaluate_dataset: empty dataset");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::vector<std::span<const std::size_t>> batches;
  for (std::size_t at = 0; at < n; at += batch_size) {
    batches.emplace_back(order.data() + at, std::min(batch_size, n - at));
  }
  std::vector<detail::BatchEval> results(batches.size());
  const auto t0 = std::chrono::steady_clock::now();
  if (threads <= 1 || batches.size() <= 1) {
    for (std::size_t i = 0; i < batches.size(); ++i) {
      results[i] = detail::eval_batch(model, ds, batches[i]);
    }
  } else {
    const std::size_t workers = std::min(threads, batches.size());
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t i = w; i < batches.size(); i += workers) {
          results[i] = detail::eval_batch(model, ds, batches[i]);
        }
      });
    }
    for (auto& th : pool) th.join();
  }
  const auto t1 = std::chrono::steady_clock::now();

  EvalResult out;
  out.confusion = Confusion(model.config().backbone.classes);
  double spike_total = 0.0;
  std::size_t at = 0;
  for (std::size_t i = 0; i < batches.size(); ++i) {
    out.loss += results[i].loss_sum;
    spike_total += results[i].spikes;
    out.decision_steps = results[i].decision_steps;
    for (std::size_t b = 0; b < batches[i].size(); ++b, ++at) {
      out.confusion.add(static_cast<std::size_t>(ds.labels[order[at]]),
                        static_cast<std::size_t>(results[i].predictions[b]));
    }
  }
  out.loss /= static_cast<double>(n);
  if (model.config().frontend.enabled) {
    out.spikes_per_sample = spike_total / static_cast<double>(n);
  }
  out.wall_us_per_sample =
      std::chrono::duration_cast<std::chrono::microseconds>(t1 - t0).count() /
      static_cast<double>(n);
  return out;
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

namespace detail {

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << text;
}

inline void ensure_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory " + dir + ": " + ec.message());
}

}  // namespace detail

/// Builds the model for a run config against the dataset geometry. When
/// calibrate is set, spiking-layer weights are activity-scaled on a fixed
/// probe of the leading samples (unnecessary when a checkpoint will be
/// loaded over the weights anyway).
inline Model build_model(RunConfig& rc, const Dataset& train_set, Rng& init_rng,
                         bool calibrate = true) {
  rc.model.input = train_set.geometry;
  if (!train_set.geometry.frames) rc.model.frontend.conv_enabled = false;
  Model model(rc.model, init_rng);
  if (calibrate && rc.model.frontend.enabled) {
    const std::size_t probe = std::min<std::size_t>(train_set.inputs.size(), 16);
    std::vector<std::size_t> idx(probe);
    std::iota(idx.begin(), idx.end(), 0);
    model.calibrate_activity(stack_batch(train_set.inputs, idx));
  }
  return model;
}

/// Trains per the run config: cross-entropy on logits, adaptive-moment
/// updates, per-epoch checkpoints and metrics. Deterministic for a fixed
/// (config, seed, platform).
inline RunReport train(const RunConfig& run_cfg) {
  RunConfig rc = run_cfg;
  const auto wall0 = std::chrono::steady_clock::now();
  Dataset train_set = build_dataset(rc, true);
  Dataset test_set = build_dataset(rc, false);
  Rng init_rng(mix_seed(rc.seed, 0x696e6974ull));
  Rng shuffle_rng(mix_seed(rc.seed, 0x73687566ull));
  Model model = build_model(rc, train_set, init_rng);
  std::vector<Tensor> params = model.params();
  Adam adam(params, rc.optim);

  if (!rc.out_dir.empty()) detail::ensure_dir(rc.out_dir);

  RunReport report;
  report.kind = "train";
  report.seed = rc.seed;
  report.config_echo = rc.echo;

  const std::size_t n = train_set.inputs.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 1; epoch <= rc.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t at = 0; at < n; at += rc.batch) {
      const std::size_t bsz = std::min(rc.batch, n - at);
      std::span<const std::size_t> idx(order.data() + at, bsz);
      Tensor batch = stack_batch(train_set.inputs, idx);
      Model::Output out = model.forward(batch);
      std::vector<int> labels;
      for (std::size_t i : idx) labels.push_back(train_set.labels[i]);
      Tensor loss = cross_entropy_mean(out.logits, labels);
      if (!std::isfinite(loss.item())) {
        throw NumericError("training diverged (non-finite loss) at epoch " + std::to_string(epoch) +
                           ", step " + std::to_string(at / rc.batch));
      }
      loss_sum += loss.item() * static_cast<double>(bsz);
      for (std::size_t b = 0; b < bsz; ++b) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < out.logits.shape()[1]; ++c) {
          if (out.logits.at({b, c}) > out.logits.at({b, best})) best = c;
        }
        if (static_cast<int>(best) == labels[b]) ++correct;
      }
      adam.step(backward(loss, params));
    }
    EvalResult test_eval = evaluate_dataset(model, test_set, rc.batch, rc.eval_threads);
    EpochStats es;
    es.epoch = epoch;
    es.train_loss = loss_sum / static_cast<double>(n);
    es.train_accuracy = static_cast<double>(correct) / static_cast<double>(n);
    es.test_loss = test_eval.loss;
    es.test_accuracy = test_eval.confusion.accuracy();
    report.epochs.push_back(es);
    if (!rc.out_dir.empty()) {
      save_checkpoint((std::filesystem::path(rc.out_dir) /
                       ("ckpt_epoch" + std::to_string(epoch) + ".bin"))
                          .string(),
                      model.named_params());
    }
  }

  EvalResult final_eval = evaluate_dataset(model, test_set, rc.batch, rc.eval_threads);
  report.final_accuracy = final_eval.confusion.accuracy();
  report.final_macro_f1 = final_eval.confusion.macro_f1();
  report.spikes_per_sample = final_eval.spikes_per_sample;
  report.decision_steps = final_eval.decision_steps;
  report.wall_us_per_sample = final_eval.wall_us_per_sample;
  report.train_wall_s =
      std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() -
                                                            wall0)
          .count() /
      1000.0;

  if (!rc.out_dir.empty()) {
    namespace fs = std::filesystem;
    save_checkpoint((fs::path(rc.out_dir) / "model.bin").string(), model.named_params());
    detail::write_text_file((fs::path(rc.out_dir) / "report.json").string(), report.to_json());
    detail::write_text_file((fs::path(rc.out_dir) / "timing.json").string(), report.timing_json());
    std::ostringstream csv;
    csv << "epoch,train_loss,train_accuracy,test_loss,test_accuracy\n";
    for (const auto& e : report.epochs) {
      csv << e.epoch << ',' << e.train_loss << ',' << e.train_accuracy << ',' << e.test_loss << ','
          << e.test_accuracy << '\n';
    }
    detail::write_text_file((fs::path(rc.out_dir) / "metrics.csv").string(), csv.str());
  }
  return report;
}

/// Evaluates a checkpoint on the configured test split.
inline RunReport evaluate(const RunConfig& run_cfg, const std::string& checkpoint_path) {
  RunConfig rc = run_cfg;
  Dataset test_set = build_dataset(rc, false);
  Rng init_rng(mix_seed(rc.seed, 0x696e6974ull));
  Model model = build_model(rc, test_set, init_rng, /*calibrate=*/false);
  NamedTensors params = model.named_params();
  apply_checkpoint(load_checkpoint(checkpoint_path), params, checkpoint_path);

  EvalResult ev = evaluate_dataset(model, test_set, rc.batch, rc.eval_threads);
  RunReport report;
  report.kind = "eval";
  report.seed = rc.seed;
  report.config_echo = rc.echo;
  report.final_accuracy = ev.confusion.accuracy();
  report.final_macro_f1 = ev.confusion.macro_f1();
  report.spikes_per_sample = ev.spikes_per_sample;
  report.decision_steps = ev.decision_steps;
  report.wall_us_per_sample = ev.wall_us_per_sample;
  if (!rc.out_dir.empty()) {
    detail::ensure_dir(rc.out_dir);
    detail::write_text_file(
        (std::filesystem::path(rc.out_dir) / "eval_report.json").string(), report.to_json());
  }
  return report;
}

// ---------------------------------------------------------------------------
// ablations
// ---------------------------------------------------------------------------

struct AblationPlan {
  bool frontend_on_off = false;
  bool tau_sweep = false;
  std::vector<double> taus = {10, 20, 30, 40, 50};
  std::vector<NeuronModel> neurons = {NeuronModel::kLif, NeuronModel::kSrm};
  std::size_t seeds = 5;
};

struct AblationRow {
  std::string variant;
  std::uint64_t seed = 0;
  bool failed = false;
  std::string error;
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  std::optional<double> spikes_per_sample;
  std::size_t decision_steps = 0;
  double wall_us = 0.0;
};

struct AblationTable {
  std::vector<AblationRow> rows;

  std::vector<std::string> variants() const {
    std::vector<std::string> out;
    for (const auto& r : rows) {
      if (std::find(out.begin(), out.end(), r.variant) == out.end()) out.push_back(r.variant);
    }
    return out;
  }

  double mean_accuracy(const std::string& variant) const {
    double acc = 0.0;
    std::size_t n = 0;
    for (const auto& r : rows) {
      if (r.variant == variant && !r.failed) {
        acc += r.accuracy;
        ++n;
      }
    }
    return n > 0 ? acc / static_cast<double>(n) : 0.0;
  }

  std::string to_csv() const {
    std::ostringstream csv;
    csv << "variant,seed,accuracy,macro_f1,spikes_per_sample,decision_steps,wall_us\n";
    for (const auto& r : rows) {
      csv << r.variant << ',' << r.seed << ',';
      if (r.failed) {
        csv << ",,,,\n";
        continue;
      }
      csv << r.accuracy << ',' << r.macro_f1 << ',';
      if (r.spikes_per_sample.has_value()) {
        csv << *r.spikes_per_sample;
      } else {
        csv << '-';  // not applicable for non-spiking variants
      }
      csv << ',' << r.decision_steps << ',' << r.wall_us << '\n';
    }
    return csv.str();
  }
};

/// Trains and evaluates every planned variant over a shared seed set; one row
/// per (variant, seed). A variant failure is recorded in its row and the
/// remaining runs continue.
inline AblationTable ablate(const RunConfig& base, const AblationPlan& plan) {
  struct Variant {
    std::string id;
    std::function<void(RunConfig&)> apply;
  };
  std::vector<Variant> variants;
  if (plan.frontend_on_off) {
    variants.push_back({"frontend-on", [](RunConfig& rc) { rc.model.frontend.enabled = true; }});
    variants.push_back({"frontend-off", [](RunConfig& rc) { rc.model.frontend.enabled = false; }});
  }
  if (plan.tau_sweep) {
    for (NeuronModel m : plan.neurons) {
      for (double tau : plan.taus) {
        const std::string id = (m == NeuronModel::kLif ? "lif-tau" : "srm-tau") +
                               std::to_string(static_cast<int>(tau));
        variants.push_back({id, [m, tau](RunConfig& rc) {
                              rc.model.frontend.enabled = true;
                              rc.model.frontend.neuron = m;
                              if (m == NeuronModel::kLif) {
                                rc.model.frontend.lif.tau_m = tau;
                              } else {
                                rc.model.frontend.srm.tau_m = tau;
                              }
                            }});
      }
    }
  }
  if (variants.empty()) throw ContractError("ablate: empty plan");

  AblationTable table;
  for (const auto& variant : variants) {
    for (std::size_t s = 0; s < plan.seeds; ++s) {
      RunConfig rc = base;
      rc.seed = base.seed + s;
      variant.apply(rc);
      if (!base.out_dir.empty()) {
        rc.out_dir = (std::filesystem::path(base.out_dir) / variant.id /
                      ("seed" + std::to_string(rc.seed)))
                         .string();
      }
      AblationRow row;
      row.variant = variant.id;
      row.seed = rc.seed;
      try {
        RunReport rep = train(rc);
        row.accuracy = rep.final_accuracy;
        row.macro_f1 = rep.final_macro_f1;
        row.spikes_per_sample = rep.spikes_per_sample;
        row.decision_steps = rep.decision_steps;
        row.wall_us = rep.wall_us_per_sample;
      } catch (const std::exception& e) {
        row.failed = true;
        row.error = e.what();
      }
      table.rows.push_back(std::move(row));
    }
  }

  if (!base.out_dir.empty()) {
    namespace fs = std::filesystem;
    detail::ensure_dir(base.out_dir);
    detail::write_text_file((fs::path(base.out_dir) / "ablation.csv").string(), table.to_csv());
    nlohmann::ordered_json j;
    j["schema_version"] = 1;
    j["rows"] = nlohmann::ordered_json::array();
    for (const auto& r : table.rows) {
      nlohmann::ordered_json row{{"variant", r.variant}, {"seed", r.seed}, {"failed", r.failed}};
      if (r.failed) {
        row["error"] = r.error;
      } else {
        row["accuracy"] = r.accuracy;
        row["macro_f1"] = r.macro_f1;
        row["spikes_per_sample"] =
            r.spikes_per_sample.has_value() ? nlohmann::ordered_json(*r.spikes_per_sample)
                                            : nlohmann::ordered_json(nullptr);
        row["decision_steps"] = r.decision_steps;
      }
      j["rows"].push_back(row);
    }
    for (const auto& v : table.variants()) {
      j["mean_accuracy"][v] = table.mean_accuracy(v);
    }
    detail::write_text_file((fs::path(base.out_dir) / "ablation.json").string(), j.dump(2) + "\n");
    if (plan.tau_sweep) {
      std::ostringstream csv;
      csv << "model,tau_ms,mean_accuracy\n";
      for (NeuronModel m : plan.neurons) {
        for (double tau : plan.taus) {
          const std::string id = (m == NeuronModel::kLif ? "lif-tau" : "srm-tau") +
                                 std::to_string(static_cast<int>(tau));
          csv << (m == NeuronModel::kLif ? "lif" : "srm") << ',' << static_cast<int>(tau) << ','
              << table.mean_accuracy(id) << '\n';
        }
      }
      detail::write_text_file((fs::path(base.out_dir) / "tau_summary.csv").string(), csv.str());
    }
  }
  return table;
}

// ---------------------------------------------------------------------------
// gradient-check suite
// ---------------------------------------------------------------------------

/// Named finite-difference checks over every differentiable component; used
/// by the `gradcheck` CLI subcommand and the acceptance suite.
inline std::vector<std::pair<std::string, double>> gradient_check_suite(std::uint64_t seed = 7) {
  Rng rng(seed);
  auto rand_tensor = [&rng](Shape shape, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(shape_size(shape));
    for (double& x : v) x = rng.uniform(lo, hi);
    return Tensor::from_data(std::move(shape), std::move(v));
  };
  std::vector<std::pair<std::string, double>> out;

  {
    Tensor a = rand_tensor({4, 3});
    Tensor b = rand_tensor({3, 5});
    auto f = [&](std::span<const Tensor> t) { return mean(tanh(matmul(t[0], t[1]))); };
    const Tensor args[] = {a, b};
    out.emplace_back("matmul", finite_difference_check_multi(f, args, 1e-5));
  }
  {
    Tensor x = rand_tensor({8, 3});
    Tensor k = rand_tensor({4, 3});
    auto f = [&](std::span<const Tensor> t) {
      return mean(mul(causal_depthwise_conv1d(t[0], t[1]), t[0]));
    };
    const Tensor args[] = {x, k};
    out.emplace_back("causal_conv", finite_difference_check_multi(f, args, 1e-5));
  }
  {
    Tensor x = rand_tensor({9, 4});
    Tensor weigh = rand_tensor({3, 4});
    auto f = [&](const Tensor& t) { return mean(mul(pool_time(t, 3, PoolMode::kMean), weigh)); };
    out.emplace_back("temporal_pool_mean", finite_difference_check(f, x, 1e-5));
  }
  {
    BridgeConfig bcfg;
    bcfg.window = 4;
    Tensor x = rand_tensor({12, 3}, 0.0, 1.0);
    auto f = [&](const Tensor& t) { return mean(spikes_to_activations(sigmoid(t), bcfg).values); };
    out.emplace_back("bridge", finite_difference_check(f, x, 1e-5));
  }
  {
    MambaBlockConfig cfg;
    cfg.dim = 8;
    cfg.expansion = 2;
    cfg.state = 4;
    cfg.conv_width = 3;
    cfg.chunk = 2;
    MambaBlockParams p = MambaBlockParams::init(cfg, rng);
    Tensor x = rand_tensor({4, 8});
    Tensor weigh = rand_tensor({4, 8}, -0.5, 0.5);
    std::vector<Tensor> args = p.all();
    args.push_back(x);
    auto f = [&](std::span<const Tensor> a) {
      MambaBlockParams q;
      q.cfg = cfg;
      q.gain = a[0];
      q.w_v = a[1];
      q.w_g = a[2];
      q.conv_k = a[3];
      q.a_log = a[4];
      q.w_b = a[5];
      q.w_c = a[6];
      q.w_dt_down = a[7];
      q.w_dt_up = a[8];
      q.b_dt = a[9];
      q.d_skip = a[10];
      q.w_out = a[11];
      return mean(mul(mamba_block(a[12], q), weigh));
    };
    out.emplace_back("mamba_block", finite_difference_check_multi(f, args, 1e-4));
  }
  {
    BackboneConfig cfg;
    cfg.depth = 2;
    cfg.classes = 3;
    cfg.block.dim = 4;
    cfg.block.expansion = 2;
    cfg.block.state = 3;
    cfg.block.conv_width = 2;
    cfg.block.chunk = 2;
    BackboneParams p = BackboneParams::init(cfg, rng);
    Tensor x = rand_tensor({3, 4});
    const std::vector<int> label = {1};
    std::vector<Tensor> args;
    for (const auto& blk : p.blocks) {
      for (const auto& t : blk.all()) args.push_back(t);
    }
    args.push_back(p.head_w);
    args.push_back(p.head_b);
    args.push_back(x);
    auto f = [&](std::span<const Tensor> a) {
      BackboneParams q;
      q.cfg = cfg;
      std::size_t i = 0;
      for (std::size_t b = 0; b < cfg.depth; ++b) {
        MambaBlockParams blk;
        blk.cfg = cfg.block;
        blk.gain = a[i++];
        blk.w_v = a[i++];
        blk.w_g = a[i++];
        blk.conv_k = a[i++];
        blk.a_log = a[i++];
        blk.w_b = a[i++];
        blk.w_c = a[i++];
        blk.w_dt_down = a[i++];
        blk.w_dt_up = a[i++];
        blk.b_dt = a[i++];
        blk.d_skip = a[i++];
        blk.w_out = a[i++];
        q.blocks.push_back(std::move(blk));
      }
      q.head_w = a[i++];
      q.head_b = a[i++];
      return scale(cross_entropy_mean(reshape(classify(a[i], q), {1, cfg.classes}), label), 0.1);
    };
    out.emplace_back("backbone_2block", finite_difference_check_multi(f, args, 1e-4));
  }
  {
    LIFParams lif;
    lif.tau_m = 10.0;
    lif.theta0 = 0.5;
    lif.mode = SurrogateMode::kRelaxed;
    const std::size_t T = 6, n0 = 4, n1 = 5, n2 = 3;
    std::vector<double> sv(T * n0);
    for (double& v : sv) v = rng.uniform() < 0.5 ? 1.0 : 0.0;
    Tensor s_in = Tensor::from_data({T, n0}, sv);
    Tensor readout = rand_tensor({T, 1, n2});
    Tensor w1 = rand_tensor({n0, n1}, -0.6, 0.8);
    Tensor w2 = rand_tensor({n1, n2}, -0.6, 0.8);
    auto f = [&](std::span<const Tensor> a) {
      LifCell c1(lif), c2(lif);
      NeuronState st1, st2;
      Tensor beta1 = c1.beta(), beta2 = c2.beta();
      std::vector<Tensor> outs;
      for (std::size_t t = 0; t < T; ++t) {
        Tensor in_t = reshape(row(s_in, t), {1, n0});
        Tensor s1 = c1.step(matmul(in_t, a[0]), st1, beta1);
        outs.push_back(c2.step(matmul(s1, a[1]), st2, beta2));
      }
      return mean(mul(stack0(outs), readout));
    };
    const Tensor args[] = {w1, w2};
    out.emplace_back("relaxed_spiking_net", finite_difference_check_multi(f, args, 1e-5));
  }
  return out;
}

}  // namespace mamba_spike
