#pragma once

#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "stydesty/tensor.hpp"

namespace stydesty {

struct SgdOptions {
  double lr = 0.001;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  bool nesterov = true;
};

/// A gradient with a NaN or infinite entry reached the optimizer.
class NonFiniteGradient : public std::runtime_error {
 public:
  NonFiniteGradient(const std::string& param, std::size_t index);
  const std::string& parameter() const { return param_; }

 private:
  std::string param_;
};

/// SGD with (Nesterov) momentum. Weight decay enters the velocity:
///   v ← m·v + (g + wd·p)
///   p ← p − lr·(g + wd·p + m·v)   (nesterov)
///   p ← p − lr·v                  (otherwise)
/// and is applied only to parameters flagged `decay`.
class Sgd {
 public:
  explicit Sgd(SgdOptions options = {}) : options_(options) {}

  const SgdOptions& options() const { return options_; }

  /// Updates every listed parameter that has a gradient. The whole step is
  /// rejected, with no parameter touched, if any gradient is non-finite.
  void step(std::span<Parameter* const> params, const Gradients& grads);
  /// Same, with gradients given positionally.
  void step(std::span<Parameter* const> params, std::span<const std::vector<float>* const> grads);

  /// Velocity buffer of a parameter, keyed by name; empty before its first
  /// update.
  const std::vector<double>& velocity(const std::string& name) const;
  std::size_t num_buffers() const { return velocity_.size(); }
  void reset() { velocity_.clear(); }

 private:
  SgdOptions options_;
  std::map<std::string, std::vector<double>> velocity_;
};

}  // namespace stydesty
