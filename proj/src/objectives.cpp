#include "stydesty/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>
#include <stdexcept>

#include "stydesty/adain.hpp"
#include "stydesty/ops.hpp"
#include "stydesty/rng.hpp"

namespace stydesty {
namespace {

Tensor normal_tensor(Shape shape, double stddev, Rng& rng) {
  std::normal_distribution<float> dist(0.0f, static_cast<float>(stddev));
  std::vector<float> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& e : v) e = dist(rng);
  return Tensor(std::move(shape), std::move(v));
}

Tensor flat(const Tensor& t) { return t.rank() == 2 ? t : reshape(t, {t.dim(0), static_cast<int>(t.numel() / t.dim(0))}); }

bool trains_any(const Binding& bind, const std::vector<const Parameter*>& params) {
  return std::any_of(params.begin(), params.end(), [&](const Parameter* p) { return bind.trains(*p); });
}

Tensor perceptual(const Binding& bind, const Tensor& hS, const Tensor& hT, const LossConfig& cfg, const Perceptor* q) {
  if (cfg.perceptual == PerceptualMetric::variational_nll) return variational_nll(bind, hS, hT, q);
  return sq_l2(hS, hT);
}

}  // namespace

std::string to_string(PerceptualMetric m) {
  return m == PerceptualMetric::squared_distance ? "squared_distance" : "variational_nll";
}

PerceptualMetric perceptual_metric_from_string(const std::string& name) {
  if (name == "squared_distance") return PerceptualMetric::squared_distance;
  if (name == "variational_nll") return PerceptualMetric::variational_nll;
  throw std::invalid_argument("unknown perceptual metric '" + name + "' (expected squared_distance or variational_nll)");
}

std::string to_string(KernelKind k) { return k == KernelKind::identity ? "identity" : "rbf_random_features"; }

KernelKind kernel_kind_from_string(const std::string& name) {
  if (name == "identity") return KernelKind::identity;
  if (name == "rbf_random_features") return KernelKind::rbf_random_features;
  throw std::invalid_argument("unknown kernel '" + name + "' (expected identity or rbf_random_features)");
}

void Ablations::enable(const std::string& name) {
  if (name == "no_align") no_align = true;
  else if (name == "no_percpt") no_percpt = true;
  else if (name == "no_destyle") no_destyle = true;
  else if (name == "no_style") no_style = true;
  else if (name == "no_adversarial") no_adversarial = true;
  else if (name == "end_to_end") end_to_end = true;
  else
    throw std::invalid_argument("unknown ablation '" + name +
                                "' (expected no_align, no_percpt, no_destyle, no_style, no_adversarial or end_to_end)");
}

std::vector<std::string> Ablations::names() const {
  std::vector<std::string> out;
  if (no_align) out.push_back("no_align");
  if (no_percpt) out.push_back("no_percpt");
  if (no_destyle) out.push_back("no_destyle");
  if (no_style) out.push_back("no_style");
  if (no_adversarial) out.push_back("no_adversarial");
  if (end_to_end) out.push_back("end_to_end");
  return out;
}

void LossConfig::validate() const {
  if (!(alpha >= 0) || !(beta >= 0) || !(lambda >= 0)) throw std::invalid_argument("loss: alpha, beta and lambda must be >= 0");
}

Tensor task_loss(const Tensor& pred, const Batch& batch, TaskKind kind) {
  if (kind == TaskKind::classification) {
    if (pred.rank() != 2 || pred.dim(0) != static_cast<int>(batch.labels.size())) {
      throw ShapeError("task_loss: classification needs N×K logits for " + std::to_string(batch.labels.size()) +
                       " labels, got " + shape_str(pred.shape()));
    }
    return softmax_cross_entropy(pred, std::span<const int>(batch.labels));
  }
  if (!batch.targets.defined() || pred.shape() != batch.targets.shape()) {
    throw ShapeError("task_loss: regression prediction " + shape_str(pred.shape()) + " does not match targets " +
                     (batch.targets.defined() ? shape_str(batch.targets.shape()) : std::string("(none)")));
  }
  return scale(sq_l2(pred, batch.targets), 1.0 / pred.dim(1));
}

Tensor align_loss(const Tensor& fS, const Tensor& fT, const Tensor& hS, const Tensor& hT, double lambda) {
  auto l = sq_l2(fS, fT);
  if (lambda == 0) return l;
  return add(l, scale(sq_l2(hS, hT), lambda));
}

SemanticKernel::SemanticKernel(KernelKind kind, int features, std::uint64_t seed)
    : kind_(kind), features_(features), seed_(seed) {
  if (features < 1) throw std::invalid_argument("semantic kernel: feature count must be >= 1");
}

void SemanticKernel::fit(const Tensor& features) {
  if (kind_ == KernelKind::identity) return;
  const Tensor f = flat(features.detach());
  const int n = f.dim(0), d = f.dim(1);
  if (n < 2) throw std::invalid_argument("semantic kernel: bandwidth needs at least two samples");
  std::vector<double> dist;
  const auto x = f.data();
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      double s = 0;
      for (int k = 0; k < d; ++k) {
        const double e = x[static_cast<std::size_t>(i * d + k)] - x[static_cast<std::size_t>(j * d + k)];
        s += e * e;
      }
      dist.push_back(std::sqrt(s));
    }
  }
  std::nth_element(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(dist.size() / 2), dist.end());
  bandwidth_ = std::max(dist[dist.size() / 2], 1e-6);
  Rng rng(seed_);
  weights_ = normal_tensor({d, features_}, 1.0 / bandwidth_, rng);
  std::uniform_real_distribution<float> phase(0.0f, static_cast<float>(2 * std::numbers::pi));
  std::vector<float> b(static_cast<std::size_t>(features_));
  for (auto& v : b) v = phase(rng);
  offsets_ = Tensor({features_}, std::move(b));
}

Tensor SemanticKernel::map(const Tensor& features) const {
  const Tensor f = flat(features);
  if (kind_ == KernelKind::identity) return f;
  if (!ready()) throw std::logic_error("semantic kernel: rbf features used before fit()");
  if (f.dim(1) != weights_.dim(0)) {
    throw ShapeError("semantic kernel: fitted for dimension " + std::to_string(weights_.dim(0)) + ", got " +
                     shape_str(f.shape()));
  }
  return scale(pointwise(linear(f, weights_, offsets_), Pointwise::cos), std::sqrt(2.0 / features_));
}

Tensor sem_mmd(const Tensor& featS, const Tensor& featT, const SemanticKernel& kernel) {
  if (!featS.defined() || !featT.defined() || featS.rank() < 1 || featS.dim(0) < 1 || featT.dim(0) < 1) {
    throw std::invalid_argument("sem_mmd: empty batch");
  }
  if (featS.dim(0) != featT.dim(0)) {
    throw ShapeError("sem_mmd: batch sizes differ: " + shape_str(featS.shape()) + " vs " + shape_str(featT.shape()));
  }
  return sq_l2(batch_mean(kernel.map(featS)), batch_mean(kernel.map(featT)));
}

Perceptor::Perceptor(int dim, std::uint64_t seed, int hidden) : dim_(dim) {
  if (dim < 1 || hidden < 1) throw std::invalid_argument("perceptor: dimensions must be >= 1");
  Rng rng(seed);
  w1_ = {"q.fc.weight", normal_tensor({dim, hidden}, std::sqrt(2.0 / dim), rng), true};
  b1_ = {"q.fc.bias", Tensor::zeros({hidden}), true};
  wm_ = {"q.mean.weight", normal_tensor({hidden, dim}, std::sqrt(1.0 / hidden), rng), true};
  bm_ = {"q.mean.bias", Tensor::zeros({dim}), true};
  wv_ = {"q.logvar.weight", Tensor::zeros({hidden, dim}), true};
  bv_ = {"q.logvar.bias", Tensor::zeros({dim}), true};
}

Perceptor::Prediction Perceptor::predict(const Binding& bind, const Tensor& hS) const {
  if (hS.rank() != 2 || hS.dim(1) != dim_) {
    throw ShapeError("perceptor: expected N×" + std::to_string(dim_) + " features, got " + shape_str(hS.shape()));
  }
  auto z = relu(linear(hS, bind(w1_), bind(b1_)));
  return {linear(z, bind(wm_), bind(bm_)), linear(z, bind(wv_), bind(bv_))};
}

std::vector<Parameter*> Perceptor::parameters() { return {&w1_, &b1_, &wm_, &bm_, &wv_, &bv_}; }
std::vector<const Parameter*> Perceptor::parameters() const { return {&w1_, &b1_, &wm_, &bm_, &wv_, &bv_}; }

Tensor variational_nll(const Binding& bind, const Tensor& hS, const Tensor& hT, const Perceptor* q) {
  if (q == nullptr) throw std::invalid_argument("variational_nll: the variational metric needs a perceptor q");
  auto p = q->predict(bind, hS);
  return gaussian_nll(hT, p.mean, p.logvar);
}

namespace {

struct FormalTerms {
  LossResult f;
  Tensor hS, hT;  // H₋₁ features, H frozen
};

FormalTerms formal_terms(const Binding& bind, const FormalModules& m, const Tensor& xS, const Tensor& xT,
                         const Batch& batch, const LossConfig& cfg, bool need_source_hidden) {
  FormalTerms out;
  auto& parts = out.f.parts;
  const auto& model = m.model;
  const auto h_params = model.h_parameters();
  const Binding frozen_h = trains_any(bind, h_params) ? bind.without(h_params) : bind;

  auto fT = model.destyle(bind, xT);
  auto hT = model.hidden(bind, fT);
  auto total = task_loss(model.head_from_hidden(bind, hT), batch, cfg.task);
  parts.task = total.item();
  out.hT = trains_any(bind, h_params) ? model.hidden(frozen_h, fT) : hT;

  const double alpha = cfg.effective_alpha(), lambda = cfg.effective_lambda();
  Tensor fS;
  if (alpha > 0 || need_source_hidden) fS = model.destyle(bind, xS);
  if ((alpha > 0 && lambda > 0) || need_source_hidden) out.hS = model.hidden(frozen_h, fS);
  if (alpha > 0) {
    auto l2 = sq_l2(fS, fT);
    parts.align_l2 = l2.item();
    Tensor align = l2;
    if (lambda > 0) {
      auto pd = perceptual(frozen_h, out.hS, out.hT, cfg, m.perceptor);
      parts.align_percpt = pd.item();
      align = add(align, scale(pd, lambda));
    }
    total = add(total, scale(align, alpha));
  }
  parts.total = total.item();
  out.f.total = total;
  return out;
}

}  // namespace

LossResult loss_F(const Binding& bind, const FormalModules& m, const Tensor& xS, const Tensor& xT, const Batch& batch,
                  const LossConfig& cfg) {
  return formal_terms(bind, m, xS, xT, batch, cfg, false).f;
}

LossResult loss_G(const Binding& bind, const FormalModules& m, const Tensor& xS, const Tensor& xT, const Batch& batch,
                  const LossConfig& cfg) {
  const bool sem = cfg.beta > 0;
  auto t = formal_terms(bind, m, xS, xT, batch, cfg, sem);
  LossResult r;
  r.parts = t.f.parts;
  r.total = scale(t.f.total, -1.0);
  if (sem) {
    auto s = sem_mmd(t.hS, t.hT, m.kernel);
    r.parts.sem = s.item();
    r.total = add(r.total, scale(s, cfg.beta));
  }
  r.parts.total = r.total.item();
  return r;
}

namespace {

struct NasTerms {
  LossResult p;
  Supernet::Trace source, target;
};

NasTerms nas_terms(const Binding& bind, const Supernet& net, const Tensor& pi_hat, const Tensor& xS, const Tensor& xT,
                   const Batch& batch, const LossConfig& cfg, bool need_source) {
  NasTerms out;
  const double alpha = cfg.effective_alpha();
  out.target = net.forward(bind, xT, pi_hat);
  auto total = task_loss(out.target.logits, batch, cfg.task);
  out.p.parts.task = total.item();
  if (alpha > 0 || need_source) out.source = net.forward(bind, xS, pi_hat);
  if (alpha > 0) {
    const auto zero = Tensor::scalar(0.0f);
    Tensor align;
    for (int l = 0; l < net.num_positions(); ++l) {
      const auto ul = static_cast<std::size_t>(l);
      auto term = blend(element(pi_hat, l), sq_l2(out.source.adained[ul], out.target.adained[ul]), zero);
      align = align.defined() ? add(align, term) : term;
    }
    out.p.parts.align_l2 = align.item();
    total = add(total, scale(align, alpha));
  }
  out.p.parts.total = total.item();
  out.p.total = total;
  return out;
}

}  // namespace

LossResult loss_P_nas(const Binding& bind, const Supernet& net, const Tensor& pi_hat, const Tensor& xS,
                      const Tensor& xT, const Batch& batch, const LossConfig& cfg) {
  return nas_terms(bind, net, pi_hat, xS, xT, batch, cfg, false).p;
}

LossResult loss_G_nas(const Binding& bind, const Supernet& net, const Tensor& pi_hat, const SemanticKernel& kernel,
                      const Tensor& xS, const Tensor& xT, const Batch& batch, const LossConfig& cfg) {
  const bool sem = cfg.beta > 0;
  auto t = nas_terms(bind, net, pi_hat, xS, xT, batch, cfg, sem);
  LossResult r;
  r.parts = t.p.parts;
  r.total = scale(t.p.total, -1.0);
  if (sem) {
    auto s = sem_mmd(t.source.hidden, t.target.hidden, kernel);
    r.parts.sem = s.item();
    r.total = add(r.total, scale(s, cfg.beta));
  }
  r.parts.total = r.total.item();
  return r;
}

LossLog::LossLog(const std::filesystem::path& path) : out_(path) {
  if (!out_) throw std::runtime_error("cannot write training log " + path.string());
  out_ << "iter,stage,task,align_l2,align_percpt,sem,total\n";
}

void LossLog::append(int iter, const std::string& stage, const LossBreakdown& b) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%d,%s,%.9g,%.9g,%.9g,%.9g,%.9g\n", iter, stage.c_str(), b.task, b.align_l2,
                b.align_percpt, b.sem, b.total);
  out_ << buf;
}

}  // namespace stydesty
