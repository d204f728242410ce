#pragma once

#include <cmath>
#include <numbers>

#include "fmfa/loss_report.hpp"

namespace fmfa {

/// p <- p - lr * g for every parameter. Every parameter needs a gradient of
/// the same shape.
inline void sgd_step(ParamMap& params, const ParamMap& grads, double lr) {
  if (!(lr > 0.0)) throw Error(detail::concat("sgd_step: learning rate must be positive, got ", lr));
  for (auto& [name, p] : params) {
    auto it = grads.find(name);
    if (it == grads.end()) throw Error("sgd_step: missing gradient for '" + name + "'");
    p.require_same_shape(it->second, "sgd_step");
    auto pd = p.data();
    const auto gd = it->second.data();
    for (std::size_t k = 0; k < pd.size(); ++k) pd[k] -= lr * gd[k];
  }
}

/// Cosine decay from `base` at step 0 towards 0 at `total_steps`.
inline double cosine_decay(double base, std::size_t step, std::size_t total_steps) {
  if (total_steps == 0) return base;
  const double t = static_cast<double>(step) / static_cast<double>(total_steps);
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

}  // namespace fmfa
