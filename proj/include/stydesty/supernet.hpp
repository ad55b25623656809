#pragma once

#include <cstdint>
#include <vector>

#include "json.hpp"
#include "stydesty/adain.hpp"
#include "stydesty/backbone.hpp"
#include "stydesty/tensor.hpp"

namespace stydesty {

struct GumbelSample {
  Tensor hard;  // one-hot forward value, straight-through into `soft`
  Tensor soft;  // softmax((π + g)/τ)
  int index = 0;
};

/// Draws g ~ Gumbel(0, 1) per position from `seed`. `pi` may be on a tape.
GumbelSample gumbel_softmax_hard(const Tensor& pi, double tau, std::uint64_t seed);

/// Backbone P with one candidate AdaIN per declared position and the
/// selection logits π (zero-initialized).
class Supernet {
 public:
  explicit Supernet(Backbone net, double tau = 1.0);

  struct Trace {
    Tensor logits;
    Tensor hidden;                 // input of the final linear layer
    std::vector<Tensor> pre;       // x̂_l
    std::vector<Tensor> adained;   // AdaIN_l(x̂_l)
  };

  int num_positions() const { return static_cast<int>(adain_.size()); }
  double tau() const { return tau_; }
  const Backbone& backbone() const { return net_; }
  Backbone& backbone() { return net_; }
  const AdaINParams& adain(int l) const { return adain_[static_cast<std::size_t>(l)]; }
  AdaINParams& adain(int l) { return adain_[static_cast<std::size_t>(l)]; }
  const Parameter& pi() const { return pi_; }
  Parameter& pi() { return pi_; }

  /// Backbone weights and every AdaIN layer (π excluded).
  std::vector<Parameter*> network_parameters();
  /// network_parameters() plus π.
  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;

  /// x_l = π̂_l·AdaIN_l(x̂_l) + (1 − π̂_l)·x̂_l at every position. A π̂ of all
  /// zeros runs the vanilla backbone.
  Trace forward(const Binding& bind, const Tensor& x, const Tensor& pi_hat) const;

  /// First index of the largest π entry.
  int argmax() const;

 private:
  Backbone net_;
  std::vector<AdaINParams> adain_;
  Parameter pi_;
  double tau_;
};

struct NASCheckpoint {
  int iteration = 0;
  int argmax = 0;
  std::vector<float> pi;
};

struct NASHistory {
  std::vector<NASCheckpoint> checkpoints;

  /// Rejects non-increasing iterations.
  void add(NASCheckpoint c);
  nlohmann::json to_json() const;
};

/// True iff at least `patience` checkpoints exist and the last `patience`
/// share one argmax.
bool nas_converged(const NASHistory& history, int patience);

}  // namespace stydesty
