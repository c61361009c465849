#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "mamba_spike/error.hpp"
#include "mamba_spike/tensor.hpp"

namespace mamba_spike {

enum class NormMode { kRate, kRunningRate };

enum class TemporalFeatureSet { kNone, kFirstSpikeLatency, kPositional, kBoth };

struct BridgeConfig {
  std::size_t window = 10;        // accumulation window, steps
  NormMode norm_mode = NormMode::kRate;
  double ema_decay = 0.1;         // weight of the newest window in the running rate
  TemporalFeatureSet temporal_features = TemporalFeatureSet::kNone;
  double eps = 1e-3;              // normalization floor
  std::size_t positional_dims = 8;

  void validate() const {
    if (window < 1) throw ContractError("bridge: window must be >= 1");
    if (ema_decay <= 0.0 || ema_decay >= 1.0) {
      throw ContractError("bridge: ema_decay must lie in (0, 1)");
    }
    if (eps <= 0.0) throw ContractError("bridge: eps must be positive");
    if (positional_dims < 2 || positional_dims % 2 != 0) {
      throw ContractError("bridge: positional_dims must be an even number >= 2");
    }
  }
};

/// Continuous activations produced from a spike train, one row per
/// accumulation window.
struct ActivationSeq {
  Tensor values;                          // [L x ... x D]
  std::vector<std::size_t> window_index;  // source window per row
};

/// Converts binary spikes [T x ...] into window activations [L x ...],
/// L = ceil(T / window).
///
/// rate mode:          a[w] = count / window length           (in [0,1])
/// running-rate mode:  a[w] = rate[w] / max(rbar[w], eps), where rbar is a
///   per-neuron exponential moving average of previous windows' rates
///   (initialized to 1 and updated after each window). The normalizer is a
///   running statistic, so gradients flow through the counts only.
inline ActivationSeq spikes_to_activations(const Tensor& spikes, const BridgeConfig& cfg) {
  cfg.validate();
  if (spikes.rank() < 2) {
    throw ShapeError("spikes_to_activations: [T x features] input required, got " +
                     shape_str(spikes.shape()));
  }
  Tensor rates = pool_time(spikes, cfg.window, PoolMode::kMean);
  const std::size_t L = rates.shape()[0];
  const std::size_t stride = rates.size() / L;
  ActivationSeq out;
  out.window_index.resize(L);
  for (std::size_t l = 0; l < L; ++l) out.window_index[l] = l;
  if (cfg.norm_mode == NormMode::kRate) {
    out.values = rates;
    return out;
  }
  std::vector<double> denom(rates.size());
  std::vector<double> rbar(stride, 1.0);
  for (std::size_t l = 0; l < L; ++l) {
    for (std::size_t i = 0; i < stride; ++i) {
      denom[l * stride + i] = std::max(rbar[i], cfg.eps);
      rbar[i] = (1.0 - cfg.ema_decay) * rbar[i] + cfg.ema_decay * rates[l * stride + i];
    }
  }
  out.values = divide(rates, Tensor::from_data(rates.shape(), std::move(denom)));
  return out;
}

/// Per-window timing features, laid out [L x ... x D_f]:
///  - first-spike latency per channel, normalized to [0,1] by the window
///    length; 1.0 marks a silent channel (latest possible, by convention)
///  - optionally a fixed sinusoidal code of the window index appended along
///    the feature axis (even dims sine, odd dims cosine, geometric
///    wavelengths)
/// Both are functions of spike timing only and carry no gradients.
inline Tensor temporal_features(const Tensor& spikes, const BridgeConfig& cfg) {
  cfg.validate();
  if (cfg.temporal_features == TemporalFeatureSet::kNone) {
    throw ContractError("temporal_features: feature set is configured to none");
  }
  if (spikes.rank() < 2) {
    throw ShapeError("temporal_features: [T x features] input required, got " +
                     shape_str(spikes.shape()));
  }
  const std::size_t T = spikes.shape()[0];
  const std::size_t stride = spikes.size() / T;
  const std::size_t L = (T + cfg.window - 1) / cfg.window;
  const auto& sv = spikes.data();

  const bool want_latency = cfg.temporal_features == TemporalFeatureSet::kFirstSpikeLatency ||
                            cfg.temporal_features == TemporalFeatureSet::kBoth;
  const bool want_positional = cfg.temporal_features == TemporalFeatureSet::kPositional ||
                               cfg.temporal_features == TemporalFeatureSet::kBoth;

  std::vector<Tensor> parts;
  if (want_latency) {
    std::vector<double> lat(L * stride, 1.0);
    for (std::size_t l = 0; l < L; ++l) {
      const std::size_t t0 = l * cfg.window;
      const std::size_t t1 = std::min(T, t0 + cfg.window);
      const double len = static_cast<double>(t1 - t0);
      for (std::size_t i = 0; i < stride; ++i) {
        for (std::size_t t = t0; t < t1; ++t) {
          if (sv[t * stride + i] != 0.0) {
            lat[l * stride + i] = static_cast<double>(t - t0) / len;
            break;
          }
        }
      }
    }
    Shape shape = spikes.shape();
    shape[0] = L;
    parts.push_back(Tensor::from_data(std::move(shape), std::move(lat)));
  }
  if (want_positional) {
    const std::size_t P = cfg.positional_dims;
    const std::size_t channels = stride / spikes.shape().back();
    std::vector<double> pos(L * channels * P);
    for (std::size_t l = 0; l < L; ++l) {
      for (std::size_t c = 0; c < channels; ++c) {
        for (std::size_t j = 0; j < P; j += 2) {
          const double wavelength = std::pow(10000.0, static_cast<double>(j) / static_cast<double>(P));
          const double arg = static_cast<double>(l) / wavelength;
          pos[(l * channels + c) * P + j] = std::sin(arg);
          pos[(l * channels + c) * P + j + 1] = std::cos(arg);
        }
      }
    }
    Shape shape = spikes.shape();
    shape[0] = L;
    shape.back() = P;
    parts.push_back(Tensor::from_data(std::move(shape), std::move(pos)));
  }
  if (parts.size() == 1) return parts.front();
  return concat_last(parts);
}

}  // namespace mamba_spike
