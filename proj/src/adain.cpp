#include "stydesty/adain.hpp"

#include "stydesty/ops.hpp"

namespace stydesty {

AdaINParams AdaINParams::identity(int channels, const std::string& prefix) {
  return {Parameter{prefix + ".mu", Tensor::zeros({channels}), false},
          Parameter{prefix + ".sigma", Tensor::full({channels}, 1.0f), false}};
}

AdaINParams AdaINParams::clone() const {
  return {Parameter{mu.name, mu.value.clone(), mu.decay}, Parameter{sigma.name, sigma.value.clone(), sigma.decay}};
}

template <typename T>
BasicTensor<T> adain(const BasicTensor<T>& f, const BasicTensor<T>& mu, const BasicTensor<T>& sigma) {
  if (f.rank() != 4 || mu.numel() != f.dim(1) || sigma.numel() != f.dim(1)) {
    throw ShapeError("adain: parameters " + shape_str(mu.shape()) + "/" + shape_str(sigma.shape()) +
                     " do not match the channels of " + shape_str(f.shape()));
  }
  auto stats = instance_stats(f);
  return normalize_affine(f, stats.mean, stats.std, sigma, mu);
}

template Tensor adain<float>(const Tensor&, const Tensor&, const Tensor&);
template TensorD adain<double>(const TensorD&, const TensorD&, const TensorD&);

Tensor adain(const Binding& bind, const Tensor& f, const AdaINParams& params) {
  return adain(f, bind(params.mu), bind(params.sigma));
}

}  // namespace stydesty
