#pragma once

#include <map>
#include <string>

#include "fmfa/matrix.hpp"

namespace fmfa {

/// Named parameter tensors; the key set doubles as the gradient contract.
using ParamMap = std::map<std::string, Matrix>;

/// A scalar loss together with its gradients with respect to named inputs.
struct LossReport {
  double value = 0.0;
  ParamMap gradients;
  /// Per-component values when the report is a sum (e.g. "asdm", "efa", "id").
  std::map<std::string, double> components;

  const Matrix& gradient(const std::string& name) const {
    auto it = gradients.find(name);
    if (it == gradients.end()) throw Error("LossReport: no gradient named '" + name + "'");
    return it->second;
  }

  /// Adds `scale * other` into this report, gradient by gradient.
  void accumulate(const LossReport& other, double scale = 1.0) {
    value += scale * other.value;
    for (const auto& [name, g] : other.gradients) {
      Matrix scaled = g;
      if (scale != 1.0) scaled *= scale;
      auto it = gradients.find(name);
      if (it == gradients.end()) {
        gradients.emplace(name, std::move(scaled));
      } else {
        it->second += scaled;
      }
    }
  }
};

}  // namespace fmfa
