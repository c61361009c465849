#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "mamba_spike/error.hpp"
#include "mamba_spike/tensor.hpp"

namespace mamba_spike {

/// How the non-differentiable threshold is treated.
///  kHard:    heaviside forward, fast-sigmoid surrogate backward (production).
///  kRelaxed: sigmoid(k*u) forward with its exact derivative; used by
///            gradient checks of the spiking path.
enum class SurrogateMode { kHard, kRelaxed };

struct LIFParams {
  double tau_m = 30.0;    // membrane time constant, ms
  double dt = 1.0;        // step duration, ms
  double theta0 = 1.0;    // base threshold
  bool adaptive = false;
  double tau_a = 100.0;   // adaptation time constant, ms
  double delta_a = 0.0;   // per-spike threshold increment
  double surrogate_slope = 25.0;
  bool learn_tau = false;
  bool learn_theta = false;
  SurrogateMode mode = SurrogateMode::kHard;

  double beta() const { return std::exp(-dt / tau_m); }
  double rho() const { return std::exp(-dt / tau_a); }

  void validate() const {
    if (tau_m <= 0 || dt <= 0 || theta0 <= 0 || tau_a <= 0 || delta_a < 0 || surrogate_slope <= 0) {
      throw ContractError("LIFParams: tau_m, dt, theta0, tau_a, surrogate_slope must be positive "
                          "and delta_a non-negative");
    }
  }
};

struct SRMParams {
  double tau_m = 30.0;  // membrane kernel, ms
  double tau_s = 5.0;   // synaptic kernel, ms
  double tau_r = 20.0;  // refractory kernel, ms
  double eta0 = 1.0;    // refractory magnitude
  double theta0 = 1.0;
  double dt = 1.0;
  double surrogate_slope = 25.0;
  SurrogateMode mode = SurrogateMode::kHard;

  void validate() const {
    if (tau_m <= 0 || tau_s <= 0 || tau_r <= 0 || dt <= 0 || theta0 <= 0 || surrogate_slope <= 0) {
      throw ContractError("SRMParams: all time constants, dt, theta0 and slope must be positive");
    }
    if (tau_m == tau_s) {
      throw ContractError("SRMParams: tau_m must differ from tau_s (kernel degeneracy)");
    }
  }
};

/// Per-neuron state carried across steps; shapes follow the layer's step
/// shape. Empty tensors mean "start from rest" and are zero-initialized on
/// first use.
struct NeuronState {
  Tensor V;    // membrane potential
  Tensor a;    // adaptive threshold offset (LIF)
  Tensor syn;  // synaptic trace (SRM)
  Tensor ref;  // refractory trace (SRM)
  bool initialized = false;
};

namespace detail {

inline Tensor spike_from_margin(const Tensor& u, double slope, SurrogateMode mode) {
  return mode == SurrogateMode::kHard ? spike_hard(u, slope) : spike_relaxed(u, slope);
}

inline void check_finite(const Tensor& t, const char* op, std::size_t step) {
  for (double v : t.data()) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(op) + ": non-finite membrane state at step " +
                         std::to_string(step));
    }
  }
}

}  // namespace detail

/// One leaky integrate-and-fire population stepped over time. Owns the
/// (optionally learnable) membrane decay and base threshold. Decay is kept in
/// (0,1) by parameterizing a raw value through a sigmoid when learnable.
class LifCell {
 public:
  explicit LifCell(const LIFParams& p) : cfg_(p) {
    cfg_.validate();
    const double b = cfg_.beta();
    if (cfg_.learn_tau) {
      // sigmoid(raw) == beta at init
      beta_ = Tensor::param({1}, {std::log(b / (1.0 - b))});
    } else {
      beta_ = Tensor::from_data({1}, {b});
    }
    theta_ = cfg_.learn_theta ? Tensor::param({1}, {cfg_.theta0})
                              : Tensor::from_data({1}, {cfg_.theta0});
  }

  const LIFParams& config() const { return cfg_; }

  Tensor beta() const { return cfg_.learn_tau ? sigmoid(beta_) : beta_; }
  Tensor theta0() const { return theta_; }

  Tensor beta_param() const { return beta_; }
  Tensor theta_param() const { return theta_; }

  /// Advances one step: V <- beta*V + I, spike where V >= theta0 + a,
  /// soft reset by theta, adaptation a <- rho*a + delta_a*spike.
  Tensor step(const Tensor& input, NeuronState& state, const Tensor& beta_t,
              Tensor* v_pre_out = nullptr) const {
    if (!state.initialized) {
      state.V = Tensor::zeros(input.shape());
      state.a = Tensor::zeros(input.shape());
      state.initialized = true;
    }
    Tensor v_pre = add(mul(state.V, beta_t), input);
    Tensor theta_t = cfg_.adaptive ? add(state.a, theta_) : theta_;
    Tensor s = detail::spike_from_margin(sub(v_pre, theta_t), cfg_.surrogate_slope, cfg_.mode);
    state.V = sub(v_pre, mul(s, theta_t));
    if (cfg_.adaptive) {
      state.a = add(scale(state.a, cfg_.rho()), scale(s, cfg_.delta_a));
    }
    if (v_pre_out != nullptr) *v_pre_out = v_pre;
    return s;
  }

 private:
  LIFParams cfg_;
  Tensor beta_;
  Tensor theta_;
};

struct LifResult {
  Tensor spikes;   // [T x ...], binary in hard mode
  NeuronState state;
  Tensor v_trace;  // pre-reset membrane per step
};

/// Runs LIF dynamics over input currents I laid out [T x neuron shape].
inline LifResult lif_forward(const Tensor& currents, const LIFParams& params,
                             NeuronState state = {}) {
  if (currents.rank() < 2) {
    throw ShapeError("lif_forward: [T x neurons] input required, got " + shape_str(currents.shape()));
  }
  LifCell cell(params);
  const std::size_t T = currents.shape()[0];
  Tensor beta_t = cell.beta();
  std::vector<Tensor> spikes, vs;
  spikes.reserve(T);
  vs.reserve(T);
  for (std::size_t t = 0; t < T; ++t) {
    Tensor v_pre;
    spikes.push_back(cell.step(row(currents, t), state, beta_t, &v_pre));
    detail::check_finite(v_pre, "lif_forward", t);
    vs.push_back(v_pre);
  }
  return {stack0(spikes), std::move(state), stack0(vs)};
}

struct SrmResult {
  Tensor spikes;
  NeuronState state;
  Tensor v_trace;
};

/// Spike response model with double-exponential PSPs realized as two cascaded
/// linear filters and an explicit refractory trace:
///   syn <- exp(-dt/tau_s)*syn + W^T s_in
///   V   <- exp(-dt/tau_m)*V + (1-exp(-dt/tau_m))*syn - eta0*ref
///   spike where V >= theta0;  ref <- exp(-dt/tau_r)*ref + spike
inline SrmResult srm_forward(const Tensor& s_in, const Tensor& weights, const SRMParams& params,
                             NeuronState state = {}) {
  params.validate();
  if (s_in.rank() < 2) {
    throw ShapeError("srm_forward: [T x inputs] spikes required, got " + shape_str(s_in.shape()));
  }
  if (weights.rank() != 2 || weights.shape()[0] != s_in.shape().back()) {
    throw ShapeError("srm_forward: weights " + shape_str(weights.shape()) +
                     " do not match input feature dim of " + shape_str(s_in.shape()));
  }
  const std::size_t T = s_in.shape()[0];
  const bool unbatched = s_in.rank() == 2;
  const double es = std::exp(-params.dt / params.tau_s);
  const double em = std::exp(-params.dt / params.tau_m);
  const double er = std::exp(-params.dt / params.tau_r);
  Tensor theta = Tensor::from_data({1}, {params.theta0});
  std::vector<Tensor> spikes, vs;
  spikes.reserve(T);
  vs.reserve(T);
  for (std::size_t t = 0; t < T; ++t) {
    Tensor in_t = row(s_in, t);
    if (unbatched) in_t = reshape(in_t, {1, in_t.size()});
    Tensor drive = matmul(in_t, weights);
    if (!state.initialized) {
      state.V = Tensor::zeros(drive.shape());
      state.syn = Tensor::zeros(drive.shape());
      state.ref = Tensor::zeros(drive.shape());
      state.initialized = true;
    }
    state.syn = add(scale(state.syn, es), drive);
    Tensor v = sub(add(scale(state.V, em), scale(state.syn, 1.0 - em)), scale(state.ref, params.eta0));
    detail::check_finite(v, "srm_forward", t);
    Tensor s = detail::spike_from_margin(sub(v, theta), params.surrogate_slope, params.mode);
    state.ref = add(scale(state.ref, er), s);
    state.V = v;
    if (unbatched) {
      s = reshape(s, {s.size()});
      v = reshape(v, {v.size()});
    }
    spikes.push_back(s);
    vs.push_back(v);
  }
  return {stack0(spikes), std::move(state), stack0(vs)};
}

/// Spiking convolution: per step, drive = conv2d(s_in[t], kernels), then LIF
/// dynamics with state persisting across steps.
inline Tensor spiking_conv2d(const Tensor& s_in, const Tensor& kernels, const LIFParams& lif,
                             Conv2dSpec spec = {}) {
  if (s_in.rank() != 4 && s_in.rank() != 5) {
    throw ShapeError("spiking_conv2d: [T x (batch) x C x H x W] input required, got " +
                     shape_str(s_in.shape()));
  }
  const bool unbatched = s_in.rank() == 4;
  const std::size_t T = s_in.shape()[0];
  LifCell cell(lif);
  Tensor beta_t = cell.beta();
  NeuronState state;
  std::vector<Tensor> spikes;
  spikes.reserve(T);
  for (std::size_t t = 0; t < T; ++t) {
    Tensor x = row(s_in, t);
    if (unbatched) {
      Shape s = x.shape();
      s.insert(s.begin(), 1);
      x = reshape(x, s);
    }
    Tensor drive = conv2d(x, kernels, spec);
    Tensor s = cell.step(drive, state, beta_t);
    if (unbatched) {
      Shape inner(s.shape().begin() + 1, s.shape().end());
      s = reshape(s, inner);
    }
    spikes.push_back(s);
  }
  return stack0(spikes);
}

/// Spiking recurrent layer: drive[t] = s_in[t] W_in + s_out[t-1] W_rec, then
/// LIF dynamics. Gradients flow through the full unroll.
inline Tensor spiking_recurrent(const Tensor& s_in, const Tensor& w_in, const Tensor& w_rec,
                                const LIFParams& lif) {
  if (s_in.rank() < 2) {
    throw ShapeError("spiking_recurrent: [T x inputs] required, got " + shape_str(s_in.shape()));
  }
  if (w_in.rank() != 2 || w_in.shape()[0] != s_in.shape().back()) {
    throw ShapeError("spiking_recurrent: W_in " + shape_str(w_in.shape()) +
                     " does not match input dim of " + shape_str(s_in.shape()));
  }
  const std::size_t n_hidden = w_in.shape()[1];
  if (w_rec.rank() != 2 || w_rec.shape()[0] != n_hidden || w_rec.shape()[1] != n_hidden) {
    throw ShapeError("spiking_recurrent: W_rec " + shape_str(w_rec.shape()) + " must be [" +
                     std::to_string(n_hidden) + "x" + std::to_string(n_hidden) + "]");
  }
  const bool unbatched = s_in.rank() == 2;
  const std::size_t T = s_in.shape()[0];
  LifCell cell(lif);
  Tensor beta_t = cell.beta();
  NeuronState state;
  Tensor prev_out;
  bool have_prev = false;
  std::vector<Tensor> spikes;
  spikes.reserve(T);
  for (std::size_t t = 0; t < T; ++t) {
    Tensor in_t = row(s_in, t);
    if (unbatched) in_t = reshape(in_t, {1, in_t.size()});
    Tensor drive = matmul(in_t, w_in);
    if (have_prev) drive = add(drive, matmul(prev_out, w_rec));
    Tensor s = cell.step(drive, state, beta_t);
    prev_out = s;
    have_prev = true;
    spikes.push_back(unbatched ? reshape(s, {n_hidden}) : s);
  }
  return stack0(spikes);
}

/// Temporal pooling over non-overlapping windows along the time axis.
/// Max mode keeps spikes binary; mean mode yields rates in [0,1].
inline Tensor temporal_pool(const Tensor& spikes, std::size_t window, PoolMode mode) {
  return pool_time(spikes, window, mode);
}

}  // namespace mamba_spike
