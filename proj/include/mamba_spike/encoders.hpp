#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "mamba_spike/error.hpp"
#include "mamba_spike/rng.hpp"
#include "mamba_spike/tensor.hpp"

namespace mamba_spike {

enum class RateMode { kDeterministic, kPoisson };

enum class EncoderScheme { kRateDeterministic, kRatePoisson, kLatency, kDelta };

struct EncoderConfig {
  EncoderScheme scheme = EncoderScheme::kRateDeterministic;
  std::size_t steps = 8;          // T: spike steps per input value
  std::uint64_t seed = 0;         // poisson mode only
  double theta_delta = 0.1;       // delta coding contrast threshold
  double x_min_latency = 0.01;    // smallest intensity that still spikes

  void validate() const {
    if (steps < 1) throw ContractError("encoder: steps must be >= 1");
    if (theta_delta <= 0.0) throw ContractError("encoder: theta_delta must be positive");
    if (x_min_latency <= 0.0 || x_min_latency > 1.0) {
      throw ContractError("encoder: x_min_latency must lie in (0, 1]");
    }
  }
};

inline EncoderScheme encoder_scheme_from_string(const std::string& s) {
  if (s == "rate-deterministic") return EncoderScheme::kRateDeterministic;
  if (s == "rate-poisson") return EncoderScheme::kRatePoisson;
  if (s == "latency") return EncoderScheme::kLatency;
  if (s == "delta") return EncoderScheme::kDelta;
  throw ContractError("unknown encoder scheme \"" + s + "\"");
}

inline Tensor clip01(const Tensor& x) {
  std::vector<double> v = x.data();
  for (double& e : v) e = std::min(1.0, std::max(0.0, e));
  return Tensor::from_data(x.shape(), std::move(v));
}

namespace detail {

inline void check_unit_range(const Tensor& x, const char* op) {
  for (double v : x.data()) {
    if (!(v >= 0.0 && v <= 1.0)) {
      throw ContractError(std::string(op) + ": input value " + std::to_string(v) +
                          " outside [0,1]; clip first");
    }
  }
}

inline double round_half_up(double v) { return std::floor(v + 0.5); }

}  // namespace detail

/// Rate coding. Deterministic mode emits exactly round(x*T) spikes at evenly
/// spaced steps t_k = floor(k*T/count); poisson mode draws an independent
/// Bernoulli(x) per step from the given seed.
inline Tensor rate_encode(const Tensor& x, std::size_t T, RateMode mode, std::uint64_t seed = 0) {
  if (T < 1) throw ContractError("rate_encode: T must be >= 1");
  detail::check_unit_range(x, "rate_encode");
  Shape out_shape;
  out_shape.push_back(T);
  out_shape.insert(out_shape.end(), x.shape().begin(), x.shape().end());
  const std::size_t n = x.size();
  std::vector<double> out(T * n, 0.0);
  if (mode == RateMode::kDeterministic) {
    for (std::size_t i = 0; i < n; ++i) {
      const auto count = static_cast<std::size_t>(detail::round_half_up(x[i] * static_cast<double>(T)));
      for (std::size_t k = 0; k < count; ++k) {
        const std::size_t t = k * T / count;
        out[t * n + i] = 1.0;
      }
    }
  } else {
    Rng rng(mix_seed(seed, 0x7261746525ull));
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t t = 0; t < T; ++t) {
        if (rng.uniform() < x[i]) out[t * n + i] = 1.0;
      }
    }
  }
  return Tensor::from_data(std::move(out_shape), std::move(out));
}

/// Temporal (latency) coding: at most one spike per element, earlier for
/// stronger inputs, at t* = round_half_up((1-x)*(T-1)). Inputs below x_min
/// stay silent.
inline Tensor latency_encode(const Tensor& x, std::size_t T, double x_min) {
  if (T < 1) throw ContractError("latency_encode: T must be >= 1");
  if (x_min <= 0.0 || x_min > 1.0) throw ContractError("latency_encode: x_min must lie in (0, 1]");
  detail::check_unit_range(x, "latency_encode");
  Shape out_shape;
  out_shape.push_back(T);
  out_shape.insert(out_shape.end(), x.shape().begin(), x.shape().end());
  const std::size_t n = x.size();
  std::vector<double> out(T * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (x[i] < x_min) continue;
    const auto t = static_cast<std::size_t>(
        detail::round_half_up((1.0 - x[i]) * static_cast<double>(T - 1)));
    out[t * n + i] = 1.0;
  }
  return Tensor::from_data(std::move(out_shape), std::move(out));
}

/// Threshold (delta) coding of a signal over time. Each element keeps a
/// reference level initialized to its first sample; every crossing of theta
/// above the reference emits ON and advances the reference by theta, every
/// crossing below emits OFF and retreats it. Several crossings inside one step
/// saturate to a single binary spike while the reference still advances by the
/// full multiple. Output layout [T x 2 x shape]: channel 0 OFF, channel 1 ON.
inline Tensor delta_encode(const Tensor& signal, double theta) {
  if (theta <= 0.0) throw ContractError("delta_encode: theta must be positive");
  if (signal.rank() < 2) {
    throw ShapeError("delta_encode: [T x shape] input required, got " + shape_str(signal.shape()));
  }
  const std::size_t T = signal.shape()[0];
  const std::size_t n = signal.size() / T;
  Shape out_shape;
  out_shape.push_back(T);
  out_shape.push_back(2);
  out_shape.insert(out_shape.end(), signal.shape().begin() + 1, signal.shape().end());
  std::vector<double> out(T * 2 * n, 0.0);
  const auto& sv = signal.data();
  std::vector<double> ref(sv.begin(), sv.begin() + n);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t i = 0; i < n; ++i) {
      const double cur = sv[t * n + i];
      while (cur - ref[i] >= theta) {
        out[(t * 2 + 1) * n + i] = 1.0;
        ref[i] += theta;
      }
      while (ref[i] - cur >= theta) {
        out[(t * 2 + 0) * n + i] = 1.0;
        ref[i] -= theta;
      }
    }
  }
  return Tensor::from_data(std::move(out_shape), std::move(out));
}

}  // namespace mamba_spike
