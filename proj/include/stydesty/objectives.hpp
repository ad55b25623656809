#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "stydesty/backbone.hpp"
#include "stydesty/data.hpp"
#include "stydesty/supernet.hpp"
#include "stydesty/tensor.hpp"

namespace stydesty {

enum class PerceptualMetric { squared_distance, variational_nll };
enum class KernelKind { identity, rbf_random_features };

std::string to_string(PerceptualMetric m);
PerceptualMetric perceptual_metric_from_string(const std::string& name);
std::string to_string(KernelKind k);
KernelKind kernel_kind_from_string(const std::string& name);

/// Table 3 ablation switches.
struct Ablations {
  bool no_align = false;
  bool no_percpt = false;
  bool no_destyle = false;
  bool no_style = false;
  bool no_adversarial = false;
  bool end_to_end = false;

  /// Accepts the six names above; throws std::invalid_argument otherwise.
  void enable(const std::string& name);
  std::vector<std::string> names() const;
  bool any() const { return !names().empty(); }
};

struct LossConfig {
  double alpha = 0.1;
  double beta = 1.0;
  double lambda = 1.0;
  TaskKind task = TaskKind::classification;
  PerceptualMetric perceptual = PerceptualMetric::squared_distance;
  KernelKind kernel = KernelKind::identity;
  Ablations ablations;

  void validate() const;
  /// α and λ after the no_align / no_percpt switches.
  double effective_alpha() const { return ablations.no_align ? 0.0 : alpha; }
  double effective_lambda() const { return ablations.no_percpt ? 0.0 : lambda; }
};

/// Unweighted components plus the weighted total.
struct LossBreakdown {
  double task = 0;
  double align_l2 = 0;
  double align_percpt = 0;
  double sem = 0;
  double total = 0;
};

struct LossResult {
  Tensor total;
  LossBreakdown parts;
};

/// Cross-entropy for classification (pred N×K vs labels), mean squared error
/// for regression (pred N×D vs batch.targets).
Tensor task_loss(const Tensor& pred, const Batch& batch, TaskKind kind);

/// ‖fS − fT‖² + λ‖hS − hT‖², batch-mean squared distances.
Tensor align_loss(const Tensor& fS, const Tensor& fT, const Tensor& hS, const Tensor& hT, double lambda);

/// The feature map k of the semantic term. Identity, or random Fourier
/// features of an RBF kernel whose bandwidth is the median pairwise distance
/// of the batch passed to fit().
class SemanticKernel {
 public:
  explicit SemanticKernel(KernelKind kind = KernelKind::identity, int features = 1024, std::uint64_t seed = 0);

  KernelKind kind() const { return kind_; }
  bool ready() const { return kind_ == KernelKind::identity || weights_.defined(); }
  void fit(const Tensor& features);
  double bandwidth() const { return bandwidth_; }
  Tensor map(const Tensor& features) const;

 private:
  KernelKind kind_;
  int features_;
  std::uint64_t seed_;
  double bandwidth_ = 0;
  Tensor weights_, offsets_;
};

/// ‖mean_i k(featS_i) − mean_i k(featT_i)‖².
Tensor sem_mmd(const Tensor& featS, const Tensor& featT, const SemanticKernel& kernel);

/// Diagonal-Gaussian conditional q_θ(h^T | h^S): linear(d→64) → relu → mean
/// and log-variance heads.
class Perceptor {
 public:
  Perceptor(int dim, std::uint64_t seed, int hidden = 64);
  Perceptor(Perceptor&&) = default;
  Perceptor(const Perceptor&) = delete;
  Perceptor& operator=(const Perceptor&) = delete;

  struct Prediction {
    Tensor mean;
    Tensor logvar;
  };
  Prediction predict(const Binding& bind, const Tensor& hS) const;
  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  int dim() const { return dim_; }

 private:
  int dim_;
  Parameter w1_, b1_, wm_, bm_, wv_, bv_;
};

/// −(1/n) Σ log q_θ(hT_i | hS_i). Throws std::invalid_argument without q.
Tensor variational_nll(const Binding& bind, const Tensor& hS, const Tensor& hT, const Perceptor* q);

/// Everything the formal-stage losses read.
struct FormalModules {
  const SplitModel& model;
  const SemanticKernel& kernel;
  const Perceptor* perceptor = nullptr;
};

/// task(H(F(xT))) + α·(‖F(xS) − F(xT)‖² + λ·D(H₋₁F(xS), H₋₁F(xT))). H's
/// parameters never receive gradient through the perceptual term.
LossResult loss_F(const Binding& bind, const FormalModules& m, const Tensor& xS, const Tensor& xT, const Batch& batch,
                  const LossConfig& cfg);

/// −L_F + β·‖mean k(M(xS)) − mean k(M(xT))‖² with M = H₋₁∘F.
LossResult loss_G(const Binding& bind, const FormalModules& m, const Tensor& xS, const Tensor& xT, const Batch& batch,
                  const LossConfig& cfg);

/// task(P(xT)) + α·Σ_l π̂_l‖AdaIN_l(x̂S_l) − AdaIN_l(x̂T_l)‖².
LossResult loss_P_nas(const Binding& bind, const Supernet& net, const Tensor& pi_hat, const Tensor& xS,
                      const Tensor& xT, const Batch& batch, const LossConfig& cfg);

/// −L_P + β·sem with M the supernet without its final linear layer.
LossResult loss_G_nas(const Binding& bind, const Supernet& net, const Tensor& pi_hat, const SemanticKernel& kernel,
                      const Tensor& xS, const Tensor& xT, const Batch& batch, const LossConfig& cfg);

/// CSV log with header `iter,stage,task,align_l2,align_percpt,sem,total`.
class LossLog {
 public:
  explicit LossLog(const std::filesystem::path& path);
  void append(int iter, const std::string& stage, const LossBreakdown& b);
  void flush() { out_.flush(); }

 private:
  std::ofstream out_;
};

}  // namespace stydesty
