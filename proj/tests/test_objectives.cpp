#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "stydesty/checkpoint.hpp"
#include "stydesty/gradcheck.hpp"
#include "stydesty/gradcheck_suite.hpp"
#include "stydesty/objectives.hpp"
#include "stydesty/ops.hpp"
#include "stydesty/optimizer.hpp"
#include "stydesty/rng.hpp"
#include "stydesty/stylizer.hpp"
#include "test_util.hpp"

using namespace stydesty;
using stydesty::testing::random_tensor;

namespace {

Batch labeled_batch(int n, std::uint64_t seed) {
  Batch b;
  b.images = random_tensor({n, 3, 32, 32}, seed, 0, 1);
  for (int i = 0; i < n; ++i) b.labels.push_back(static_cast<int>((seed + static_cast<std::uint64_t>(i) * 3) % 10));
  return b;
}

SplitModel model_at(int position, std::uint64_t seed = 3) {
  const auto spec = BackboneSpec::lenet(10);
  return split_at(Backbone(spec, seed), position, AdaINParams::identity(spec.candidate_channels(position), "adain"));
}

}  // namespace

TEST(TaskLoss, UniformLogitsGiveLnTen) {
  Batch b;
  b.labels = {0, 3, 9};
  EXPECT_NEAR(task_loss(Tensor::zeros({3, 10}), b, TaskKind::classification).item(), std::log(10.0), 1e-6);
}

TEST(TaskLoss, RegressionExactPredictionIsZero) {
  Batch b;
  b.labels = {0, 0};
  b.targets = Tensor({2, 1}, {0.3f, -0.7f});
  EXPECT_EQ(task_loss(b.targets, b, TaskKind::regression).item(), 0.0f);
}

TEST(TaskLoss, RegressionMatchesScalarOracle) {
  Batch b;
  b.labels = std::vector<int>(6, 0);
  b.targets = random_tensor({6, 1}, 1);
  const auto pred = random_tensor({6, 1}, 2);
  double acc = 0;
  for (int i = 0; i < 6; ++i) acc += std::pow(static_cast<double>(pred[i]) - b.targets[i], 2);
  EXPECT_NEAR(task_loss(pred, b, TaskKind::regression).item(), acc / 6, 1e-7);
}

TEST(TaskLoss, RejectsShapeMismatch) {
  Batch b;
  b.labels = {1, 2};
  EXPECT_THROW(task_loss(Tensor::zeros({3, 10}), b, TaskKind::classification), std::invalid_argument);
  EXPECT_THROW(task_loss(Tensor::zeros({2, 1}), b, TaskKind::regression), std::invalid_argument);
}

TEST(AlignLoss, HandCase) {
  const Tensor fS({1, 2}, {1, 0}), fT({1, 2}, {0, 0}), hS({1, 2}, {0, 2}), hT({1, 2}, {0, 0});
  EXPECT_NEAR(align_loss(fS, fT, hS, hT, 1.0).item(), 5.0, 1e-7);
  EXPECT_NEAR(align_loss(fS, fT, hS, hT, 0.0).item(), sq_l2(fS, fT).item(), 0);
  EXPECT_EQ(align_loss(fS, fS, hS, hS, 1.0).item(), 0.0f);
  EXPECT_THROW(align_loss(fS, Tensor::zeros({1, 3}), hS, hT, 1.0), ShapeError);
}

TEST(SemMmd, IdenticalBatchesAreZero) {
  const auto f = random_tensor({8, 5}, 1);
  EXPECT_EQ(sem_mmd(f, f, SemanticKernel()).item(), 0.0f);
}

TEST(SemMmd, MeanShift) {
  const auto f = random_tensor({8, 5}, 1);
  auto g = f.clone();
  for (auto& v : g.mutable_data()) v += 0.5f;
  EXPECT_NEAR(sem_mmd(f, g, SemanticKernel()).item(), 5 * 0.25, 1e-5);
}

TEST(SemMmd, MatchesLoopOracle) {
  const auto a = random_tensor({6, 7}, 3), b = random_tensor({6, 7}, 4);
  double acc = 0;
  for (int d = 0; d < 7; ++d) {
    double ma = 0, mb = 0;
    for (int i = 0; i < 6; ++i) {
      ma += a[i * 7 + d];
      mb += b[i * 7 + d];
    }
    acc += std::pow((ma - mb) / 6, 2);
  }
  EXPECT_NEAR(sem_mmd(a, b, SemanticKernel()).item(), acc, 1e-6);
  EXPECT_THROW(sem_mmd(a, random_tensor({5, 7}, 1), SemanticKernel()), ShapeError);
}

TEST(SemMmd, RbfKernelBandwidthIsMedianDistance) {
  const auto f = random_tensor({6, 3}, 8);
  SemanticKernel k(KernelKind::rbf_random_features, 256, 1);
  EXPECT_FALSE(k.ready());
  k.fit(f);
  std::vector<double> d;
  for (int i = 0; i < 6; ++i)
    for (int j = i + 1; j < 6; ++j) {
      double s = 0;
      for (int c = 0; c < 3; ++c) s += std::pow(static_cast<double>(f[i * 3 + c]) - f[j * 3 + c], 2);
      d.push_back(std::sqrt(s));
    }
  std::sort(d.begin(), d.end());
  const double median = d.size() % 2 ? d[d.size() / 2] : 0.5 * (d[d.size() / 2 - 1] + d[d.size() / 2]);
  EXPECT_NEAR(k.bandwidth(), median, 1e-5);
  EXPECT_EQ(k.map(f).shape(), (Shape{6, 256}));
  EXPECT_EQ(sem_mmd(f, f, k).item(), 0.0f);
}

TEST(VariationalNll, ModeWithUnitVariance) {
  Perceptor q(4, 1);
  const auto hS = random_tensor({3, 4}, 2);
  const auto mean = q.predict(Binding(), hS).mean;
  const double nll = variational_nll(Binding(), hS, mean, &q).item();
  EXPECT_NEAR(nll, 2 * std::log(2 * std::numbers::pi), 1e-5);
}

TEST(VariationalNll, DoublingVarianceAtModeAddsHalfDLnTwo) {
  Perceptor q(4, 1);
  const auto hS = random_tensor({3, 4}, 2);
  const auto mean = q.predict(Binding(), hS).mean;
  const double base = variational_nll(Binding(), hS, mean, &q).item();
  auto params = q.parameters();
  for (auto* p : params)
    if (p->name == "q.logvar.bias")
      for (auto& v : p->value.mutable_data()) v = static_cast<float>(std::log(2.0));
  const double wider = variational_nll(Binding(), hS, mean, &q).item();
  EXPECT_NEAR(wider - base, 2 * std::log(2.0), 1e-5);
}

TEST(VariationalNll, MatchesClosedForm) {
  Perceptor q(5, 3);
  auto params = q.parameters();
  for (auto* p : params)
    if (p->name == "q.logvar.weight") p->value = random_tensor({64, 5}, 4, -0.1, 0.1);
  const auto hS = random_tensor({4, 5}, 5), hT = random_tensor({4, 5}, 6);
  const auto pr = q.predict(Binding(), hS);
  double acc = 0;
  for (int i = 0; i < 20; ++i) {
    const double lv = pr.logvar[i], d = static_cast<double>(hT[i]) - pr.mean[i];
    acc += 0.5 * (std::log(2 * std::numbers::pi) + lv + d * d / std::exp(lv));
  }
  EXPECT_NEAR(variational_nll(Binding(), hS, hT, &q).item(), acc / 4, 1e-5);
  EXPECT_THROW(variational_nll(Binding(), hS, hT, nullptr), std::invalid_argument);
}

TEST(LossF, AlphaZeroIsTaskOnStylized) {
  auto m = model_at(2);
  SemanticKernel k;
  const FormalModules mods{m, k, nullptr};
  const auto b = labeled_batch(4, 1);
  const auto xT = random_tensor({4, 3, 32, 32}, 9, 0, 1);
  LossConfig cfg;
  cfg.alpha = 0;
  const auto r = loss_F(Binding(), mods, b.images, xT, b, cfg);
  EXPECT_EQ(r.total.item(), task_loss(m.forward(Binding(), xT), b, TaskKind::classification).item());
  cfg.alpha = 0.1;
  cfg.ablations.no_align = true;
  EXPECT_EQ(loss_F(Binding(), mods, b.images, xT, b, cfg).total.item(), r.total.item());
}

TEST(LossF, IdenticalDomainsHaveZeroAlignment) {
  auto m = model_at(3);
  SemanticKernel k;
  const FormalModules mods{m, k, nullptr};
  const auto b = labeled_batch(4, 1);
  const auto r = loss_F(Binding(), mods, b.images, b.images, b, LossConfig{});
  EXPECT_EQ(r.parts.align_l2, 0.0);
  EXPECT_EQ(r.parts.align_percpt, 0.0);
  EXPECT_EQ(r.parts.total, r.parts.task);
}

TEST(LossF, WeightsComponents) {
  auto m = model_at(1);
  SemanticKernel k;
  const FormalModules mods{m, k, nullptr};
  const auto b = labeled_batch(4, 2);
  const auto xT = random_tensor({4, 3, 32, 32}, 9, 0, 1);
  LossConfig cfg;
  cfg.alpha = 0.3;
  cfg.lambda = 2;
  const auto r = loss_F(Binding(), mods, b.images, xT, b, cfg);
  EXPECT_NEAR(r.parts.total, r.parts.task + 0.3 * (r.parts.align_l2 + 2 * r.parts.align_percpt), 1e-3);
  cfg.ablations.no_percpt = true;
  EXPECT_EQ(loss_F(Binding(), mods, b.images, xT, b, cfg).parts.align_percpt, 0.0);
}

TEST(LossF, OnlyFReceivesGradients) {
  auto m = model_at(2);
  SemanticKernel k;
  const FormalModules mods{m, k, nullptr};
  const auto b = labeled_batch(4, 2);
  const auto h_before = parameter_hash(m.h_parameters());
  Tape<float> tape;
  Binding bind(tape);
  bind.train_all(m.f_parameters());
  const auto r = loss_F(bind, mods, b.images, random_tensor({4, 3, 32, 32}, 9, 0, 1), b, LossConfig{});
  tape.backward(r.total);
  for (const auto* p : m.h_parameters()) EXPECT_EQ(tape.gradients().find(*p), nullptr) << p->name;
  for (auto* p : m.f_parameters()) EXPECT_NE(tape.gradients().find(*p), nullptr) << p->name;
  Sgd opt;
  opt.step(m.f_parameters(), tape.gradients());
  EXPECT_EQ(parameter_hash(m.h_parameters()), h_before);
}

TEST(LossF, PerceptualTermNeverReachesHEvenEndToEnd) {
  auto m = model_at(2);
  SemanticKernel k;
  const FormalModules mods{m, k, nullptr};
  const auto b = labeled_batch(4, 2);
  const auto xT = random_tensor({4, 3, 32, 32}, 9, 0, 1);
  auto grads_of_h = [&](const LossConfig& cfg) {
    Tape<float> tape;
    Binding bind(tape);
    bind.train_all(m.f_parameters()).train_all(m.h_parameters());
    tape.backward(loss_F(bind, mods, b.images, xT, b, cfg).total);
    std::vector<float> out;
    for (auto* p : m.h_parameters()) {
      const auto* g = tape.gradients().find(*p);
      if (g) out.insert(out.end(), g->begin(), g->end());
    }
    return out;
  };
  LossConfig with;
  LossConfig task_only;
  task_only.alpha = 0;
  EXPECT_EQ(grads_of_h(with), grads_of_h(task_only));
}

// Float32 analytic gradients against central differences of a float64
// replica; float32 differences through a whole relu network cross a kink on
// almost every probe.
TEST(LossGradients, EveryLossMatchesFiniteDifferencesOnFourSamples) {
  for (const std::string name : {"loss_F", "loss_G", "loss_P_nas", "loss_G_nas"}) {
    SuiteOptions opt;
    opt.scope = name;
    opt.composite_geometries = 1;
    const auto rep = run_gradcheck_suite(opt);
    ASSERT_EQ(rep.rows.size(), 1u);
    EXPECT_TRUE(rep.pass) << name << " rel " << rep.rows[0].max_rel_error;
    EXPECT_GE(rep.rows[0].probes, 18) << name;
  }
}

TEST(LossG, BetaZeroNegatesLossF) {
  auto m = model_at(2);
  SemanticKernel k;
  const FormalModules mods{m, k, nullptr};
  const auto b = labeled_batch(4, 1);
  const auto xT = random_tensor({4, 3, 32, 32}, 9, 0, 1);
  LossConfig cfg;
  cfg.beta = 0;
  EXPECT_EQ(loss_G(Binding(), mods, b.images, xT, b, cfg).total.item(),
            -loss_F(Binding(), mods, b.images, xT, b, cfg).total.item());
}

TEST(LossG, RecomposesAndUpdatesOnlyStylizer) {
  auto m = model_at(2);
  SemanticKernel k;
  const FormalModules mods{m, k, nullptr};
  Stylizer g(StylizerConfig{}, 4);
  const auto b = labeled_batch(4, 1);
  const LossConfig cfg;
  const std::vector<double> w{0.9, 0.4};
  const auto f_before = parameter_hash(m.f_parameters());
  const auto h_before = parameter_hash(m.h_parameters());
  Tape<float> tape;
  Binding bind(tape);
  bind.train_all(g.parameters());
  const auto xT = g.stylize(bind, b.images, w);
  const auto r = loss_G(bind, mods, b.images, xT, b, cfg);
  const auto lf = loss_F(Binding(), mods, b.images, xT.detach(), b, cfg).total.item();
  const auto hS = m.hidden(Binding(), m.destyle(Binding(), b.images));
  const auto hT = m.hidden(Binding(), m.destyle(Binding(), xT.detach()));
  EXPECT_NEAR(r.total.item(), -lf + sem_mmd(hS, hT, k).item(), 1e-4);
  tape.backward(r.total);
  EXPECT_EQ(tape.gradients().size(), 4u);
  Sgd opt({0.005, 0.9, 5e-4, true});
  opt.step(g.parameters(), tape.gradients());
  EXPECT_EQ(parameter_hash(m.f_parameters()), f_before);
  EXPECT_EQ(parameter_hash(m.h_parameters()), h_before);
}

TEST(LossG, IdentityDomainHasZeroSemanticTerm) {
  auto m = model_at(2);
  SemanticKernel k;
  const FormalModules mods{m, k, nullptr};
  const auto b = labeled_batch(4, 1);
  EXPECT_EQ(loss_G(Binding(), mods, b.images, b.images, b, LossConfig{}).parts.sem, 0.0);
}

namespace {

Tensor one_hot(int n, int k) {
  auto t = Tensor::zeros({n});
  t.mutable_data()[static_cast<std::size_t>(k)] = 1.0f;
  return t;
}

}  // namespace

TEST(LossPNas, AlphaZeroAndIdentity) {
  Supernet net(Backbone(BackboneSpec::lenet(10), 2));
  const auto b = labeled_batch(4, 3);
  const auto xT = random_tensor({4, 3, 32, 32}, 9, 0, 1);
  LossConfig cfg;
  cfg.alpha = 0;
  const auto hat = one_hot(6, 2);
  EXPECT_EQ(loss_P_nas(Binding(), net, hat, b.images, xT, b, cfg).total.item(),
            task_loss(net.forward(Binding(), xT, hat).logits, b, TaskKind::classification).item());
  EXPECT_EQ(loss_P_nas(Binding(), net, hat, b.images, b.images, b, LossConfig{}).parts.align_l2, 0.0);
}

TEST(LossPNas, OnlySampledPositionContributes) {
  Supernet net(Backbone(BackboneSpec::lenet(10), 2));
  const auto b = labeled_batch(4, 3);
  const auto xT = random_tensor({4, 3, 32, 32}, 9, 0, 1);
  for (int l = 0; l < 6; ++l) {
    const auto hat = one_hot(6, l);
    const auto s = net.forward(Binding(), b.images, hat), t = net.forward(Binding(), xT, hat);
    int nonzero = 0;
    for (int j = 0; j < 6; ++j) {
      const double term = hat[j] * sq_l2(s.adained[static_cast<std::size_t>(j)], t.adained[static_cast<std::size_t>(j)]).item();
      nonzero += term != 0;
    }
    EXPECT_EQ(nonzero, 1);
    const double expect = sq_l2(s.adained[static_cast<std::size_t>(l)], t.adained[static_cast<std::size_t>(l)]).item();
    EXPECT_NEAR(loss_P_nas(Binding(), net, hat, b.images, xT, b, LossConfig{}).parts.align_l2, expect, 1e-6 * expect);
  }
}

TEST(LossGNas, RecomposesAndFreezesSupernet) {
  Supernet net(Backbone(BackboneSpec::lenet(10), 2));
  Stylizer g(StylizerConfig{}, 1);
  SemanticKernel k;
  const auto b = labeled_batch(4, 3);
  const auto hat = one_hot(6, 4);
  const std::vector<double> w{1.2, -0.5};
  LossConfig cfg;
  const auto before = parameter_hash(net.parameters());
  Tape<float> tape;
  Binding bind(tape);
  bind.train_all(g.parameters());
  const auto xT = g.stylize(bind, b.images, w);
  const auto r = loss_G_nas(bind, net, hat, k, b.images, xT, b, cfg);
  const double lp = loss_P_nas(Binding(), net, hat, b.images, xT.detach(), b, cfg).total.item();
  const double sem = sem_mmd(net.forward(Binding(), b.images, hat).hidden, net.forward(Binding(), xT.detach(), hat).hidden, k).item();
  EXPECT_NEAR(r.total.item(), -lp + sem, 1e-6 * std::max(1.0, std::abs(lp)));
  tape.backward(r.total);
  EXPECT_EQ(tape.gradients().size(), 4u);
  EXPECT_EQ(parameter_hash(net.parameters()), before);
  cfg.beta = 0;
  EXPECT_EQ(loss_G_nas(Binding(), net, hat, k, b.images, xT.detach(), b, cfg).total.item(),
            -loss_P_nas(Binding(), net, hat, b.images, xT.detach(), b, cfg).total.item());
}

TEST(Ablations, NamesRoundTripAndRejectUnknown) {
  Ablations a;
  for (const char* n : {"no_align", "no_percpt", "no_destyle", "no_style", "no_adversarial", "end_to_end"}) a.enable(n);
  EXPECT_EQ(a.names().size(), 6u);
  EXPECT_THROW(a.enable("no_everything"), std::invalid_argument);
}

TEST(LossLog, HeaderAndRow) {
  const auto path = std::filesystem::temp_directory_path() / "stydesty_test_log.csv";
  {
    LossLog log(path);
    log.append(3, "F", {1.5, 2, 0.25, 0, 1.7});
  }
  std::ifstream in(path);
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  EXPECT_EQ(header, "iter,stage,task,align_l2,align_percpt,sem,total");
  EXPECT_EQ(row, "3,F,1.5,2,0.25,0,1.7");
}
