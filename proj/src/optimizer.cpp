#include "stydesty/optimizer.hpp"

#include <cmath>

namespace stydesty {

NonFiniteGradient::NonFiniteGradient(const std::string& param, std::size_t index)
    : std::runtime_error("non-finite gradient for parameter '" + param + "' at element " + std::to_string(index)),
      param_(param) {}

void Sgd::step(std::span<Parameter* const> params, const Gradients& grads) {
  std::vector<const std::vector<float>*> g;
  g.reserve(params.size());
  for (auto* p : params) g.push_back(grads.find(*p));
  step(params, g);
}

void Sgd::step(std::span<Parameter* const> params, std::span<const std::vector<float>* const> grads) {
  if (params.size() != grads.size()) throw std::invalid_argument("sgd: parameter and gradient counts differ");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto* g = grads[i];
    if (!g) continue;
    if (static_cast<std::int64_t>(g->size()) != params[i]->value.numel()) {
      throw ShapeError("sgd: gradient of '" + params[i]->name + "' has " + std::to_string(g->size()) +
                       " elements, parameter " + shape_str(params[i]->value.shape()));
    }
    for (std::size_t k = 0; k < g->size(); ++k) {
      if (!std::isfinite((*g)[k])) throw NonFiniteGradient(params[i]->name, k);
    }
  }

  const double lr = options_.lr, m = options_.momentum;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto* g = grads[i];
    if (!g) continue;
    Parameter& p = *params[i];
    const double wd = p.decay ? options_.weight_decay : 0.0;
    auto& v = velocity_[p.name];
    if (v.empty()) v.assign(g->size(), 0.0);
    auto data = p.value.mutable_data();
    for (std::size_t k = 0; k < g->size(); ++k) {
      const double d = static_cast<double>((*g)[k]) + wd * data[k];
      v[k] = m * v[k] + d;
      const double update = options_.nesterov ? d + m * v[k] : v[k];
      data[k] = static_cast<float>(data[k] - lr * update);
    }
  }
}

const std::vector<double>& Sgd::velocity(const std::string& name) const {
  static const std::vector<double> empty;
  auto it = velocity_.find(name);
  return it == velocity_.end() ? empty : it->second;
}

}  // namespace stydesty
