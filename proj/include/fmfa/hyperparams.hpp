#pragma once

#include <cmath>
#include <cstdint>
#include <optional>

#include "fmfa/matrix.hpp"

namespace fmfa {

using IdentityId = std::uint32_t;

/// Scalar knobs of the global and local alignment losses. Defaults follow
/// the CUHK-PEDES configuration.
struct HyperParams {
  double tau1 = 0.02;   // softmax temperature of the matching distribution
  double tau2 = 1.0;    // temperature of the EFA triplet loss
  double alpha = 10.0;  // adaptive weight factor, 0 disables adaptation
  double lambda = 1.0;  // LSE pooling factor
  std::optional<double> sigma;  // sparsity threshold, unset means 1/N
  double epsilon = 1e-8;
  double margin_text_joint = 0.1;
  double margin_image_joint = 0.1;

  double sigma_for(std::size_t num_patches) const {
    return sigma ? *sigma : 1.0 / static_cast<double>(num_patches);
  }

  void validate() const {
    auto positive = [](double v, const char* name) {
      if (!(v > 0.0) || !std::isfinite(v))
        throw Error(detail::concat("HyperParams: ", name, " must be positive and finite, got ", v));
    };
    positive(tau1, "tau1");
    positive(tau2, "tau2");
    positive(lambda, "lambda");
    positive(epsilon, "epsilon");
    if (sigma) positive(*sigma, "sigma");
    if (!(alpha >= 0.0) || !std::isfinite(alpha))
      throw Error(detail::concat("HyperParams: alpha must be non-negative, got ", alpha));
    if (!std::isfinite(margin_text_joint) || !std::isfinite(margin_image_joint))
      throw Error("HyperParams: margins must be finite");
  }
};

}  // namespace fmfa
