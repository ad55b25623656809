#pragma once

#include <string>

#include "stydesty/tensor.hpp"

namespace stydesty {

/// Learnable target statistics of one destylization layer.
struct AdaINParams {
  Parameter mu;     // C
  Parameter sigma;  // C

  /// μ = 0, σ = 1: starts out as plain instance normalization.
  static AdaINParams identity(int channels, const std::string& prefix);
  int channels() const { return static_cast<int>(mu.value.numel()); }
  AdaINParams clone() const;
};

/// σ ⊙ (f − μᶠ)/σᶠ + μ with μᶠ, σᶠ the per-(sample, channel) statistics of f.
template <typename T>
BasicTensor<T> adain(const BasicTensor<T>& f, const BasicTensor<T>& mu, const BasicTensor<T>& sigma);
Tensor adain(const Binding& bind, const Tensor& f, const AdaINParams& params);

}  // namespace stydesty
