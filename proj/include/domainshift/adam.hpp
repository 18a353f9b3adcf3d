#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "domainshift/error.hpp"

namespace domainshift {

struct AdamConfig {
  double lr = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First/second moment estimates; sized lazily on the first step.
struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t step = 0;

  friend bool operator==(const AdamState&, const AdamState&) = default;
};

/// One bias-corrected Adam update, in place.
inline void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state,
                      const AdamConfig& config) {
  require(params.size() == grads.size(), ErrorKind::ShapeMismatch,
          "parameter and gradient sizes differ");
  require(config.lr > 0.0, ErrorKind::PreconditionFailed, "learning rate must be > 0");
  if (state.step == 0 && state.m.empty()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
  }
  require(state.m.size() == params.size() && state.v.size() == params.size(),
          ErrorKind::ShapeMismatch, "optimizer state does not match parameters");

  ++state.step;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(config.beta1, t);
  const double correction2 = 1.0 - std::pow(config.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.m[i] = config.beta1 * state.m[i] + (1.0 - config.beta1) * grads[i];
    state.v[i] = config.beta2 * state.v[i] + (1.0 - config.beta2) * grads[i] * grads[i];
    const double m_hat = state.m[i] / correction1;
    const double v_hat = state.v[i] / correction2;
    params[i] -= config.lr * m_hat / (std::sqrt(v_hat) + config.eps);
  }
}

}  // namespace domainshift
