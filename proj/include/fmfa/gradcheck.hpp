#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "fmfa/loss_report.hpp"

namespace fmfa {

using LossFunction = std::function<LossReport(const ParamMap&)>;

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coordinates_checked = 0;
};

/// Compares analytic gradients against central differences on a seeded
/// random subsample of coordinates (all of them if there are fewer than
/// `samples`). Relative error uses max(|analytic|, |numeric|, 1e-8).
inline GradCheckResult finite_diff_check(const LossFunction& loss_fn, const ParamMap& params, double h,
                                         std::uint64_t seed = 0, std::size_t samples = 200) {
  if (!(h > 0.0)) throw Error("finite_diff_check: step must be positive");
  const LossReport base = loss_fn(params);
  if (!std::isfinite(base.value)) throw Error("finite_diff_check: non-finite loss at the base point");

  std::vector<std::pair<std::string, std::size_t>> coords;
  for (const auto& [name, m] : params) {
    const Matrix& g = base.gradient(name);
    if (!g.same_shape(m)) throw Error("finite_diff_check: gradient shape mismatch for '" + name + "'");
    for (std::size_t k = 0; k < m.size(); ++k) coords.emplace_back(name, k);
  }
  if (coords.size() > samples) {
    std::mt19937_64 rng(seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(samples);
  }

  GradCheckResult result;
  ParamMap probe = params;
  for (const auto& [name, k] : coords) {
    double& x = probe.at(name).data()[k];
    const double original = x;
    x = original + h;
    const double up = loss_fn(probe).value;
    x = original - h;
    const double down = loss_fn(probe).value;
    x = original;
    if (!std::isfinite(up) || !std::isfinite(down))
      throw Error("finite_diff_check: non-finite loss probing '" + name + "'");
    const double numeric = (up - down) / (2.0 * h);
    const double analytic = base.gradient(name).data()[k];
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    const double rel = std::abs(analytic - numeric) / denom;
    ++result.coordinates_checked;
    if (rel > result.max_relative_error || result.coordinates_checked == 1) {
      result.max_relative_error = rel;
      result.worst_param = name;
      result.worst_index = k;
      result.worst_analytic = analytic;
      result.worst_numeric = numeric;
    }
  }
  return result;
}

}  // namespace fmfa
