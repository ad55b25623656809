#pragma once

#include <cstdint>
#include <span>
#include <utility>

#include "stydesty/tensor.hpp"

namespace stydesty {

/// Stabilizer added to the variance inside every standard deviation.
inline constexpr double kStdEpsilon = 1e-5;

// ---------------------------------------------------------------------------
// Primitives. Each validates operand geometry (ShapeError), computes its
// forward value, and records its backward rule on the operands' tape when any
// operand is on one.
// ---------------------------------------------------------------------------

/// Cross-correlation. x: N×C×H×W, kernel: O×C×kh×kw.
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& kernel, int stride = 1, int padding = 0);

/// Adjoint of conv2d with respect to its input. x: N×O×H×W, kernel: O×I×kh×kw
/// (the same layout conv2d uses for an I→O map). Output spatial size is
/// (H−1)·stride − 2·padding + k.
template <typename T>
BasicTensor<T> conv_transpose2d(const BasicTensor<T>& x, const BasicTensor<T>& kernel, int stride = 1,
                                int padding = 0);

template <typename T>
struct InstanceStats {
  BasicTensor<T> mean;  // N×C
  BasicTensor<T> std;   // N×C, sqrt(population variance + kStdEpsilon)
};

template <typename T>
InstanceStats<T> instance_stats(const BasicTensor<T>& f);

/// scale ⊙ (f − mean)/std + shift, with mean/std of shape N×C and scale/shift
/// holding either C (per channel) or C·H·W (per position) elements.
template <typename T>
BasicTensor<T> normalize_affine(const BasicTensor<T>& f, const BasicTensor<T>& mean, const BasicTensor<T>& std,
                                const BasicTensor<T>& scale, const BasicTensor<T>& shift);

enum class Pointwise { relu, sigmoid, cos };

/// Elementwise map. Sigmoid output is kept strictly inside (0, 1).
template <typename T>
BasicTensor<T> pointwise(const BasicTensor<T>& x, Pointwise kind);

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
  return pointwise(x, Pointwise::relu);
}
template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x) {
  return pointwise(x, Pointwise::sigmoid);
}

/// x·weight + bias. x: N×D, weight: D×K, bias: K.
template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& bias);

enum class PoolKind { max, avg };

/// Max-pool backward routes to the first maximal element in row-major order.
template <typename T>
BasicTensor<T> pool(const BasicTensor<T>& x, PoolKind kind, int window, int stride);

/// Batch mean of −log softmax(logits)[label]. logits: N×K.
template <typename T>
BasicTensor<T> softmax_cross_entropy(const BasicTensor<T>& logits, std::span<const int> labels);

/// Batch mean of the per-sample sum of squared differences. Dim 0 is the
/// batch axis.
template <typename T>
BasicTensor<T> sq_l2(const BasicTensor<T>& a, const BasicTensor<T>& b);

// ---------------------------------------------------------------------------
// Glue needed to compose the primitives above into the model graphs.
// ---------------------------------------------------------------------------

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, double factor);
/// Per-channel bias for N×C or N×C×H×W inputs.
template <typename T>
BasicTensor<T> add_channel_bias(const BasicTensor<T>& x, const BasicTensor<T>& bias);
/// t·a + (1−t)·b for a scalar t; exact when t ∈ {0, 1}.
template <typename T>
BasicTensor<T> blend(const BasicTensor<T>& t, const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& a);
/// N×… → 1×… mean over the leading axis.
template <typename T>
BasicTensor<T> batch_mean(const BasicTensor<T>& a);
/// Scalar view of one element.
template <typename T>
BasicTensor<T> element(const BasicTensor<T>& a, std::int64_t index);
template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& a, Shape shape);
/// Softmax of a rank-1 tensor.
template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& a);
/// Forward: one-hot at the first argmax of `soft`. Backward: identity into
/// `soft` (straight-through estimator).
template <typename T>
BasicTensor<T> straight_through_one_hot(const BasicTensor<T>& soft);
/// Batch mean of the diagonal-Gaussian negative log-likelihood of `target`
/// under (mean, exp(logvar)). All operands N×D.
template <typename T>
BasicTensor<T> gaussian_nll(const BasicTensor<T>& target, const BasicTensor<T>& mean, const BasicTensor<T>& logvar);

/// While alive on the current thread, primitives with nondifferentiable
/// points (relu, max-pool, argmax) fold their branch decisions into a
/// signature. Two evaluations with equal signatures took the same smooth
/// branch everywhere.
class KinkProbe {
 public:
  KinkProbe();
  ~KinkProbe();
  KinkProbe(const KinkProbe&) = delete;
  KinkProbe& operator=(const KinkProbe&) = delete;

  std::uint64_t signature() const { return hash_; }

  static bool active();
  static void note(std::uint64_t value);

 private:
  std::uint64_t hash_ = 0xcbf29ce484222325ULL;
  KinkProbe* previous_ = nullptr;
};

}  // namespace stydesty
