#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "stydesty/tensor.hpp"

namespace stydesty {

struct GradCheckOptions {
  double eps = 1e-3;
  double tolerance = 1e-3;
  /// Coordinates probed per tensor; 0 probes every coordinate.
  int max_probes = 0;
  std::uint64_t seed = 0;
};

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0;
  double max_abs_error = 0;
  double max_magnitude = 0;
  int probes = 0;
  /// Coordinates skipped because a perturbation crossed a kink.
  int excluded = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0;
  /// Largest absolute error over all tensors divided by the largest gradient
  /// magnitude over all tensors. Used for whole-model checks, where a tensor
  /// with a near-zero gradient would otherwise be judged on rounding noise.
  double group_rel_error = 0;
  int probes = 0;
  bool pass = false;
};

/// f evaluated twice at the same point disagreed.
class NondeterminismError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Central-difference check of d f / d x (steps eps and eps/2, Richardson
/// extrapolated). The error per tensor is
/// max|a − n| / max(max|a|, max|n|, 1e-8) over the probed coordinates, with a
/// the analytic and n the numeric gradient. A coordinate is excluded when
/// either perturbed evaluation takes a different branch at a relu, max-pool
/// or argmax than the unperturbed one.
template <typename T>
GradCheckReport grad_check(const std::function<BasicTensor<T>(const BasicTensor<T>&)>& f, const BasicTensor<T>& x,
                           const GradCheckOptions& options);

/// Same check over every listed parameter of a graph built by `loss`. The
/// binding passed to `loss` marks exactly these parameters as trainable.
template <typename T>
GradCheckReport grad_check_parameters(const std::function<BasicTensor<T>(const BasicBinding<T>&)>& loss,
                                      std::span<BasicParameter<T>* const> params, const GradCheckOptions& options);

}  // namespace stydesty
