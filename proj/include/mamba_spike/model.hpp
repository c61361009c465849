#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mamba_spike/bridge.hpp"
#include "mamba_spike/checkpoint.hpp"
#include "mamba_spike/error.hpp"
#include "mamba_spike/mamba.hpp"
#include "mamba_spike/rng.hpp"
#include "mamba_spike/spiking.hpp"
#include "mamba_spike/tensor.hpp"

namespace mamba_spike {

enum class NeuronModel { kLif, kSrm };

struct FrontendConfig {
  bool enabled = true;
  NeuronModel neuron = NeuronModel::kLif;
  bool conv_enabled = true;       // frame inputs only
  std::size_t conv_channels = 8;
  std::size_t conv_kernel = 5;
  std::size_t conv_stride = 4;
  std::size_t hidden = 128;       // dense spiking layer width
  bool recurrent = true;          // LIF dense stage only
  bool recurrent_zero_diag = true;
  LIFParams lif;
  SRMParams srm;
};

/// Shape of one input sample as the model sees it.
struct InputGeometry {
  bool frames = true;      // [T x C x H x W] event frames vs [T x F] features
  std::size_t steps = 0;   // T
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t flat() const { return frames ? channels * height * width : channels; }
};

struct ModelConfig {
  FrontendConfig frontend;
  BridgeConfig bridge;
  BackboneConfig backbone;
  InputGeometry input;
};

/// The assembled pipeline: spiking front-end (conv + dense), spike-to-
/// activation bridge, linear embedding, selective-SSM backbone with a
/// classification head. Forward is stateless; all state lives in locals, so
/// independent threads may evaluate concurrently with shared parameters.
class Model {
 public:
  Model(const ModelConfig& cfg, Rng& rng)
      : cfg_(cfg),
        conv_cell_(cfg.frontend.lif),
        dense_cell_(cfg.frontend.lif) {
    const auto& fe = cfg_.frontend;
    fe.lif.validate();
    if (fe.neuron == NeuronModel::kSrm) fe.srm.validate();
    use_conv_ = fe.enabled && fe.conv_enabled && cfg_.input.frames;

    std::size_t dense_in = cfg_.input.flat();
    if (use_conv_) {
      const std::size_t k = fe.conv_kernel, s = fe.conv_stride, p = fe.conv_kernel / 2;
      conv_pad_ = p;
      if (cfg_.input.height + 2 * p < k || cfg_.input.width + 2 * p < k) {
        throw ContractError("model: conv kernel larger than padded input");
      }
      conv_oh_ = (cfg_.input.height + 2 * p - k) / s + 1;
      conv_ow_ = (cfg_.input.width + 2 * p - k) / s + 1;
      // conv stage is always LIF
      const double factor = lif_response_factor();
      const double bound =
          4.0 * fe.lif.theta0 /
          (factor * std::sqrt(static_cast<double>(cfg_.input.channels) * k * k));
      conv_kernels_ = uniform_param(rng, {fe.conv_channels, cfg_.input.channels, k, k}, bound);
      dense_in = fe.conv_channels * conv_oh_ * conv_ow_;
    }
    dense_in_ = dense_in;

    if (fe.enabled) {
      const double factor = membrane_response_factor();
      const double theta = fe.neuron == NeuronModel::kLif ? fe.lif.theta0 : fe.srm.theta0;
      const double bound = 4.0 * theta / (factor * std::sqrt(static_cast<double>(dense_in)));
      dense_w_in_ = uniform_param(rng, {dense_in, fe.hidden}, bound);
      if (fe.neuron == NeuronModel::kLif && fe.recurrent) {
        const double rb = theta / (factor * std::sqrt(static_cast<double>(fe.hidden)));
        dense_w_rec_ = uniform_param(rng, {fe.hidden, fe.hidden}, rb);
        if (fe.recurrent_zero_diag) {
          auto& w = dense_w_rec_.mutable_data();
          for (std::size_t i = 0; i < fe.hidden; ++i) w[i * fe.hidden + i] = 0.0;
        }
      }
      embed_in_ = bridge_feature_width();
    } else {
      embed_in_ = cfg_.input.flat();
    }

    const std::size_t dim = cfg_.backbone.block.dim;
    embed_w_ = uniform_param(rng, {embed_in_, dim}, std::sqrt(1.0 / static_cast<double>(embed_in_)));
    embed_b_ = Tensor::param_full({dim}, 0.0);
    backbone_ = BackboneParams::init(cfg_.backbone, rng);
  }

  struct Output {
    Tensor logits;                         // [B x classes]
    std::optional<double> frontend_spikes; // encoder spikes excluded; empty when frontend off
    std::size_t decision_steps = 0;        // windows consumed before readout
  };

  /// Input is time-major: [T x B x C x H x W] for frames, [T x B x F] for
  /// feature sequences.
  Output forward(const Tensor& batch) const {
    const auto& fe = cfg_.frontend;
    if (batch.rank() < 3) {
      throw ShapeError("model: [T x B x ...] batch required, got " + shape_str(batch.shape()));
    }
    const std::size_t T = batch.shape()[0];
    const std::size_t B = batch.shape()[1];
    Output out;

    Tensor windows;  // [L x B x embed_in]
    if (!fe.enabled) {
      Tensor flat = reshape(batch, {T, B, cfg_.input.flat()});
      windows = pool_time(flat, cfg_.bridge.window, PoolMode::kMean);
      out.frontend_spikes = std::nullopt;
    } else {
      double spike_total = 0.0;
      std::vector<Tensor> dense_steps;
      dense_steps.reserve(T);
      if (use_conv_) {
        Tensor beta = conv_cell_.beta();
        NeuronState cst;
        for (std::size_t t = 0; t < T; ++t) {
          Tensor drive = conv2d(row(batch, t), conv_kernels_, {fe.conv_stride, conv_pad_});
          Tensor s = conv_cell_.step(drive, cst, beta);
          for (double v : s.data()) spike_total += v;
          dense_steps.push_back(reshape(s, {B, dense_in_}));
        }
      } else {
        Tensor flat = reshape(batch, {T, B, cfg_.input.flat()});
        for (std::size_t t = 0; t < T; ++t) dense_steps.push_back(row(flat, t));
      }

      std::vector<Tensor> hidden_steps;
      hidden_steps.reserve(T);
      if (fe.neuron == NeuronModel::kLif) {
        Tensor beta = dense_cell_.beta();
        NeuronState st;
        Tensor prev;
        bool have_prev = false;
        for (std::size_t t = 0; t < T; ++t) {
          Tensor drive = matmul(dense_steps[t], dense_w_in_);
          if (fe.recurrent && have_prev) drive = add(drive, matmul(prev, dense_w_rec_));
          Tensor s = dense_cell_.step(drive, st, beta);
          prev = s;
          have_prev = true;
          for (double v : s.data()) spike_total += v;
          hidden_steps.push_back(s);
        }
      } else {
        SrmResult r = srm_forward(stack0(dense_steps), dense_w_in_, fe.srm);
        for (std::size_t t = 0; t < T; ++t) {
          Tensor s = row(r.spikes, t);
          for (double v : s.data()) spike_total += v;
          hidden_steps.push_back(s);
        }
      }
      out.frontend_spikes = spike_total;

      Tensor spikes = stack0(hidden_steps);  // [T x B x hidden]
      ActivationSeq act = spikes_to_activations(spikes, cfg_.bridge);
      if (cfg_.bridge.temporal_features != TemporalFeatureSet::kNone) {
        const Tensor parts[] = {act.values, temporal_features(spikes, cfg_.bridge)};
        windows = concat_last(parts);
      } else {
        windows = act.values;
      }
    }

    const std::size_t L = windows.shape()[0];
    out.decision_steps = L;
    Tensor embedded = add(reshape(matmul(reshape(windows, {L * B, embed_in_}), embed_w_),
                                  {L, B, cfg_.backbone.block.dim}),
                          embed_b_);
    Tensor by_sample = swap_axes01(embedded);  // [B x L x dim]
    std::vector<Tensor> logits;
    logits.reserve(B);
    for (std::size_t b = 0; b < B; ++b) {
      logits.push_back(classify(row(by_sample, b), backbone_));
    }
    out.logits = stack0(logits);
    return out;
  }

  /// One-shot data-dependent rescaling of the spiking layers: runs the linear
  /// (threshold-free) membrane response on a probe batch and scales each
  /// stage's weights so the membrane fluctuations straddle the firing
  /// threshold. Without this, very sparse inputs leave layers silent and no
  /// surrogate gradient flows. Deterministic for a fixed probe.
  void calibrate_activity(const Tensor& probe_batch) {
    const auto& fe = cfg_.frontend;
    if (!fe.enabled) return;
    NoGradGuard guard;
    const std::size_t T = probe_batch.shape()[0];
    const std::size_t B = probe_batch.shape()[1];

    std::vector<Tensor> dense_steps;
    dense_steps.reserve(T);
    if (use_conv_) {
      // rescale conv kernels from the linear membrane trace
      {
        const double beta = fe.lif.beta();
        Tensor v = Tensor::zeros({B, dense_in_});
        double sq = 0.0;
        std::size_t count = 0;
        for (std::size_t t = 0; t < T; ++t) {
          Tensor drive =
              reshape(conv2d(row(probe_batch, t), conv_kernels_, {fe.conv_stride, conv_pad_}),
                      {B, dense_in_});
          v = add(scale(v, beta), drive);
          for (double x : v.data()) sq += x * x;
          count += v.size();
        }
        rescale_param(conv_kernels_, fe.lif.theta0 / std::sqrt(sq / count + 1e-12));
      }
      // actual (post-threshold) conv spikes feed the dense calibration
      Tensor beta = conv_cell_.beta();
      NeuronState st;
      for (std::size_t t = 0; t < T; ++t) {
        Tensor drive = conv2d(row(probe_batch, t), conv_kernels_, {fe.conv_stride, conv_pad_});
        dense_steps.push_back(reshape(conv_cell_.step(drive, st, beta), {B, dense_in_}));
      }
    } else {
      Tensor flat = reshape(probe_batch, {T, B, cfg_.input.flat()});
      for (std::size_t t = 0; t < T; ++t) dense_steps.push_back(row(flat, t));
    }

    double sq = 0.0;
    std::size_t count = 0;
    if (fe.neuron == NeuronModel::kLif) {
      const double beta = fe.lif.beta();
      Tensor v = Tensor::zeros({B, fe.hidden});
      for (std::size_t t = 0; t < T; ++t) {
        v = add(scale(v, beta), matmul(dense_steps[t], dense_w_in_));
        for (double x : v.data()) sq += x * x;
        count += v.size();
      }
      const double factor = rescale_param(dense_w_in_, fe.lif.theta0 / std::sqrt(sq / count + 1e-12));
      if (fe.recurrent) rescale_param(dense_w_rec_, factor);
    } else {
      const double es = std::exp(-fe.srm.dt / fe.srm.tau_s);
      const double em = std::exp(-fe.srm.dt / fe.srm.tau_m);
      Tensor syn = Tensor::zeros({B, fe.hidden});
      Tensor v = Tensor::zeros({B, fe.hidden});
      for (std::size_t t = 0; t < T; ++t) {
        syn = add(scale(syn, es), matmul(dense_steps[t], dense_w_in_));
        v = add(scale(v, em), scale(syn, 1.0 - em));
        for (double x : v.data()) sq += x * x;
        count += v.size();
      }
      rescale_param(dense_w_in_, fe.srm.theta0 / std::sqrt(sq / count + 1e-12));
    }
  }

  NamedTensors named_params() const {
    NamedTensors out;
    const auto& fe = cfg_.frontend;
    if (use_conv_) {
      out.emplace_back("frontend.conv.kernels", conv_kernels_);
      if (fe.lif.learn_tau) out.emplace_back("frontend.conv.beta_raw", conv_cell_.beta_param());
      if (fe.lif.learn_theta) out.emplace_back("frontend.conv.theta0", conv_cell_.theta_param());
    }
    if (fe.enabled) {
      out.emplace_back("frontend.dense.w_in", dense_w_in_);
      if (fe.neuron == NeuronModel::kLif) {
        if (fe.recurrent) out.emplace_back("frontend.dense.w_rec", dense_w_rec_);
        if (fe.lif.learn_tau) out.emplace_back("frontend.dense.beta_raw", dense_cell_.beta_param());
        if (fe.lif.learn_theta) out.emplace_back("frontend.dense.theta0", dense_cell_.theta_param());
      }
    }
    out.emplace_back("embed.weight", embed_w_);
    out.emplace_back("embed.bias", embed_b_);
    for (auto& nt : backbone_.named("backbone")) out.push_back(std::move(nt));
    return out;
  }

  std::vector<Tensor> params() const {
    std::vector<Tensor> out;
    for (auto& [name, t] : named_params()) out.push_back(t);
    return out;
  }

  const ModelConfig& config() const { return cfg_; }
  std::size_t embed_input_width() const { return embed_in_; }

 private:
  static Tensor uniform_param(Rng& rng, Shape shape, double bound) {
    std::vector<double> v(shape_size(shape));
    for (double& x : v) x = rng.uniform(-bound, bound);
    return Tensor::param(std::move(shape), std::move(v));
  }

  /// Scales a weight tensor in place; the factor is clamped to [0.1, 100] so
  /// degenerate probes (for example all-silent inputs) cannot blow weights up.
  static double rescale_param(Tensor& w, double factor) {
    factor = std::min(100.0, std::max(0.1, factor));
    for (double& x : w.mutable_data()) x *= factor;
    return factor;
  }

  /// Stationary amplification of zero-mean drive fluctuations by the LIF
  /// membrane (AR(1) with coefficient beta). Weight bounds divide by this so
  /// initial membrane swings straddle the threshold across time constants.
  double lif_response_factor() const {
    const double beta = cfg_.frontend.lif.beta();
    return std::sqrt(1.0 / (1.0 - beta * beta));
  }

  double membrane_response_factor() const {
    const auto& fe = cfg_.frontend;
    if (fe.neuron == NeuronModel::kLif) return lif_response_factor();
    // SRM: drive passes through the synaptic AR(1) filter, then the membrane
    // AR(1) with a (1 - em) input scale
    const double es = std::exp(-fe.srm.dt / fe.srm.tau_s);
    const double em = std::exp(-fe.srm.dt / fe.srm.tau_m);
    return (1.0 - em) * std::sqrt(1.0 / ((1.0 - em * em) * (1.0 - es * es)));
  }

  std::size_t bridge_feature_width() const {
    std::size_t w = cfg_.frontend.hidden;
    switch (cfg_.bridge.temporal_features) {
      case TemporalFeatureSet::kNone:
        break;
      case TemporalFeatureSet::kFirstSpikeLatency:
        w += cfg_.frontend.hidden;
        break;
      case TemporalFeatureSet::kPositional:
        w += cfg_.bridge.positional_dims;
        break;
      case TemporalFeatureSet::kBoth:
        w += cfg_.frontend.hidden + cfg_.bridge.positional_dims;
        break;
    }
    return w;
  }

  ModelConfig cfg_;
  bool use_conv_ = false;
  std::size_t conv_pad_ = 0, conv_oh_ = 0, conv_ow_ = 0;
  std::size_t dense_in_ = 0, embed_in_ = 0;
  LifCell conv_cell_;
  LifCell dense_cell_;
  Tensor conv_kernels_;
  Tensor dense_w_in_;
  Tensor dense_w_rec_;
  Tensor embed_w_;
  Tensor embed_b_;
  BackboneParams backbone_;
};

/// Total 1-entries emitted while processing one sample: the encoder output
/// (the input spike tensor itself) plus every spiking layer; bridge output
/// excluded. Only defined for spiking (frontend-on) models.
inline std::uint64_t count_spikes(const Model& model, const Tensor& sample) {
  if (!model.config().frontend.enabled) {
    throw ContractError("count_spikes: model has no spiking front-end");
  }
  NoGradGuard guard;
  Shape batched;
  batched.push_back(sample.shape()[0]);
  batched.push_back(1);
  batched.insert(batched.end(), sample.shape().begin() + 1, sample.shape().end());
  Model::Output out = model.forward(reshape(sample, batched));
  double total = out.frontend_spikes.value_or(0.0);
  for (double v : sample.data()) total += v;
  return static_cast<std::uint64_t>(std::llround(total));
}

}  // namespace mamba_spike
