#pragma once

#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "mamba_spike/error.hpp"
#include "mamba_spike/tensor.hpp"

namespace mamba_spike {

/// Compares reverse-mode gradients of a scalar-valued f against central finite
/// differences at x. Returns max over elements of
///   |g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8).
///
/// f must be deterministic and smooth at x. Functions with hard spike
/// thresholds (and no smooth relaxation) are unsupported inputs: the forward
/// is piecewise constant there, so finite differences carry no information
/// about the surrogate path.
inline double finite_difference_check(const std::function<Tensor(const Tensor&)>& f,
                                      const Tensor& x, double eps = 1e-5) {
  if (eps <= 0.0) throw ContractError("finite_difference_check: eps must be positive");

  Tensor x0 = Tensor::param(x.shape(), x.data());
  Tensor fx = f(x0);
  if (fx.size() != 1) {
    throw ContractError("finite_difference_check: f must return a scalar, got shape " +
                        shape_str(fx.shape()));
  }
  if (!std::isfinite(fx.item())) {
    throw NumericError("finite_difference_check: f(x) is not finite");
  }
  GradientMap grads = backward(fx);
  const Tensor g_ad = grads.at_or_zero(x0);
  for (double g : g_ad.data()) {
    if (!std::isfinite(g)) throw NumericError("finite_difference_check: gradient is not finite");
  }

  double worst = 0.0;
  std::vector<double> probe = x.data();
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + eps;
    const double up = f(Tensor::from_data(x.shape(), probe)).item();
    probe[i] = orig - eps;
    const double dn = f(Tensor::from_data(x.shape(), probe)).item();
    probe[i] = orig;
    if (!std::isfinite(up) || !std::isfinite(dn)) {
      throw NumericError("finite_difference_check: perturbed f(x) is not finite");
    }
    const double g_fd = (up - dn) / (2.0 * eps);
    const double g = g_ad[i];
    const double denom = std::max({std::abs(g), std::abs(g_fd), 1e-8});
    worst = std::max(worst, std::abs(g - g_fd) / denom);
  }
  return worst;
}

/// Runs finite_difference_check against each input of a multi-argument scalar
/// function (the others held fixed) and returns the worst error.
inline double finite_difference_check_multi(
    const std::function<Tensor(std::span<const Tensor>)>& f, std::span<const Tensor> inputs,
    double eps = 1e-5) {
  double worst = 0.0;
  std::vector<Tensor> args(inputs.begin(), inputs.end());
  for (std::size_t k = 0; k < args.size(); ++k) {
    auto fk = [&](const Tensor& xk) {
      std::vector<Tensor> local = args;
      local[k] = xk;
      return f(local);
    };
    worst = std::max(worst, finite_difference_check(fk, args[k], eps));
  }
  return worst;
}

}  // namespace mamba_spike
