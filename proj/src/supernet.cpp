#include "stydesty/supernet.hpp"

#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>

#include "stydesty/ops.hpp"
#include "stydesty/rng.hpp"

namespace stydesty {

GumbelSample gumbel_softmax_hard(const Tensor& pi, double tau, std::uint64_t seed) {
  if (!(tau > 0)) throw std::invalid_argument("gumbel_softmax_hard: tau must be positive");
  if (pi.rank() != 1 || pi.numel() < 1) throw ShapeError("gumbel_softmax_hard: logits must be a non-empty vector, got " + shape_str(pi.shape()));
  Rng rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<float> g(static_cast<std::size_t>(pi.numel()));
  for (auto& v : g) {
    double u = unif(rng);
    if (u <= 0) u = std::numeric_limits<double>::min();
    v = static_cast<float>(-std::log(-std::log(u)));
  }
  GumbelSample s;
  s.soft = softmax(scale(add(pi, Tensor(pi.shape(), std::move(g))), 1.0 / tau));
  s.hard = straight_through_one_hot(s.soft);
  for (int i = 0; i < s.hard.numel(); ++i) {
    if (s.hard[i] == 1.0f) s.index = i;
  }
  return s;
}

Supernet::Supernet(Backbone net, double tau)
    : net_(std::move(net)), pi_{"nas.pi", Tensor::zeros({net_.spec().num_candidates()}), false}, tau_(tau) {
  if (!(tau > 0)) throw std::invalid_argument("supernet: tau must be positive");
  for (int l = 0; l < net_.spec().num_candidates(); ++l) {
    adain_.push_back(AdaINParams::identity(net_.spec().candidate_channels(l), "adain" + std::to_string(l)));
  }
}

std::vector<Parameter*> Supernet::network_parameters() {
  auto out = net_.parameters();
  for (auto& a : adain_) {
    out.push_back(&a.mu);
    out.push_back(&a.sigma);
  }
  return out;
}

std::vector<Parameter*> Supernet::parameters() {
  auto out = network_parameters();
  out.push_back(&pi_);
  return out;
}

std::vector<const Parameter*> Supernet::parameters() const {
  auto out = net_.parameters(0, -1);
  for (const auto& a : adain_) {
    out.push_back(&a.mu);
    out.push_back(&a.sigma);
  }
  out.push_back(&pi_);
  return out;
}

Supernet::Trace Supernet::forward(const Binding& bind, const Tensor& x, const Tensor& pi_hat) const {
  if (pi_hat.numel() != num_positions()) {
    throw ShapeError("supernet: selection has " + std::to_string(pi_hat.numel()) + " entries for " +
                     std::to_string(num_positions()) + " positions");
  }
  const auto& cands = net_.spec().candidates;
  Trace tr;
  Tensor h = x;
  std::size_t next = 0;
  const int last = net_.num_layers() - 1;
  for (int i = 0; i <= last; ++i) {
    if (next < cands.size() && cands[next] == i) {
      const int l = static_cast<int>(next);
      auto a = stydesty::adain(bind, h, adain_[next]);
      tr.pre.push_back(h);
      tr.adained.push_back(a);
      h = blend(element(pi_hat, l), a, h);
      ++next;
    }
    if (i == last) tr.hidden = h;
    h = net_.apply(bind, i, h);
  }
  tr.logits = h;
  return tr;
}

int Supernet::argmax() const {
  const auto d = pi_.value.data();
  int best = 0;
  for (int i = 1; i < static_cast<int>(d.size()); ++i) {
    if (d[static_cast<std::size_t>(i)] > d[static_cast<std::size_t>(best)]) best = i;
  }
  return best;
}

void NASHistory::add(NASCheckpoint c) {
  if (!checkpoints.empty() && c.iteration <= checkpoints.back().iteration) {
    throw std::invalid_argument("nas history: checkpoint iteration " + std::to_string(c.iteration) +
                                " does not follow " + std::to_string(checkpoints.back().iteration));
  }
  checkpoints.push_back(std::move(c));
}

nlohmann::json NASHistory::to_json() const {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& c : checkpoints) out.push_back({{"iteration", c.iteration}, {"argmax", c.argmax}, {"pi", c.pi}});
  return out;
}

bool nas_converged(const NASHistory& history, int patience) {
  if (patience < 1) throw std::invalid_argument("nas_converged: patience must be >= 1");
  const auto& c = history.checkpoints;
  if (static_cast<int>(c.size()) < patience) return false;
  const int target = c.back().argmax;
  for (std::size_t i = c.size() - static_cast<std::size_t>(patience); i < c.size(); ++i) {
    if (c[i].argmax != target) return false;
  }
  return true;
}

}  // namespace stydesty
