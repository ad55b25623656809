#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "stydesty/checkpoint.hpp"
#include "stydesty/rng.hpp"
#include "stydesty/trainer.hpp"

namespace stydesty {
namespace {

namespace fs = std::filesystem;

TrainConfig tiny_config(std::uint64_t seed = 1) {
  auto c = parse_config(R"(
[train]
batch_size = 16
max_iters = 3
t_h = 3
lr_f = 0.01
lr_h = 0.01
[loss]
alpha = 0.001
[nas]
max_iters = 12
check_every = 3
patience = 2
[data]
train = 150
test = 50
target_size = 40
[data.glyphs]
samples_per_class = 20
)");
  c.seed = seed;
  return c;
}

const DatasetSuite& tiny_suite() {
  static const DatasetSuite s = make_suite(tiny_config());
  return s;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("stydesty_trainer_" + name);
  fs::remove_all(p);
  return p;
}

TEST(Formal, StageTraceIsExactlyFThenHThenG) {
  auto cfg = tiny_config();
  cfg.t_f = 2;
  cfg.t_g = 2;
  auto model = make_split_model(cfg, 1, 3);
  Stylizer g(cfg.stylizer, 4);
  FormalState st{model, g};
  std::string trace, seen;
  RunHooks hooks;
  hooks.on_step = [&](int it, Stage s, bool after) {
    if (!after && it == 0) seen += stage_letter(s);
  };
  EXPECT_EQ(run_formal_stage(tiny_suite(), st, cfg, hooks, &trace), 3);
  EXPECT_EQ(trace, "FFHHHGG");
  EXPECT_EQ(seen, "FFHHHGG");
}

TEST(Formal, NoAdversarialDropsGSteps) {
  auto cfg = tiny_config();
  cfg.loss.ablations.enable("no_adversarial");
  auto model = make_split_model(cfg, 1, 3);
  Stylizer g(cfg.stylizer, 4);
  const auto before = parameter_hash(g.parameters());
  FormalState st{model, g};
  std::string trace;
  run_formal_stage(tiny_suite(), st, cfg, {}, &trace);
  EXPECT_EQ(trace, "FHHH");
  EXPECT_EQ(parameter_hash(g.parameters()), before);
}

TEST(Formal, StagesOnlyTouchTheirOwnParameters) {
  auto cfg = tiny_config();
  auto model = make_split_model(cfg, 2, 3);
  Stylizer g(cfg.stylizer, 4);
  FormalState st{model, g};
  struct Hashes {
    std::uint64_t f, h, g;
  } pre{};
  auto snap = [&] {
    return Hashes{parameter_hash(model.f_parameters()), parameter_hash(model.h_parameters()),
                  parameter_hash(g.parameters())};
  };
  int checked = 0;
  RunHooks hooks;
  hooks.on_step = [&](int, Stage s, bool after) {
    if (!after) {
      pre = snap();
      return;
    }
    const auto post = snap();
    ++checked;
    switch (s) {
      case Stage::F:
        EXPECT_NE(post.f, pre.f);
        EXPECT_EQ(post.h, pre.h);
        EXPECT_EQ(post.g, pre.g);
        break;
      case Stage::H:
        EXPECT_EQ(post.f, pre.f);
        EXPECT_NE(post.h, pre.h);
        EXPECT_EQ(post.g, pre.g);
        break;
      case Stage::G:
        EXPECT_EQ(post.f, pre.f);
        EXPECT_EQ(post.h, pre.h);
        EXPECT_NE(post.g, pre.g);
        break;
      case Stage::P:
        ADD_FAILURE();
    }
  };
  run_formal_stage(tiny_suite(), st, cfg, hooks);
  EXPECT_EQ(checked, 3 * (1 + 3 + 1));
}

TEST(Formal, EndToEndUpdatesHDuringFSteps) {
  auto cfg = tiny_config();
  cfg.loss.ablations.enable("end_to_end");
  auto model = make_split_model(cfg, 2, 3);
  Stylizer g(cfg.stylizer, 4);
  FormalState st{model, g};
  std::uint64_t h_before = 0;
  bool moved = false;
  RunHooks hooks;
  hooks.on_step = [&](int, Stage s, bool after) {
    if (s != Stage::F) return;
    if (!after) h_before = parameter_hash(model.h_parameters());
    else moved = moved || parameter_hash(model.h_parameters()) != h_before;
  };
  run_formal_stage(tiny_suite(), st, cfg, hooks);
  EXPECT_TRUE(moved);
}

TEST(Formal, NonFiniteLossAborts) {
  auto suite = make_suite(tiny_config());
  suite.source_train.images.mutable_data()[0] = std::nanf("");
  auto cfg = tiny_config();
  cfg.batch_size = 150;
  auto model = make_split_model(cfg, 1, 3);
  Stylizer g(cfg.stylizer, 4);
  FormalState st{model, g};
  EXPECT_THROW(run_formal_stage(suite, st, cfg), TrainingAbort);
}

TEST(Formal, AbortKeepsLastGoodCheckpoint) {
  auto suite = make_suite(tiny_config());
  suite.source_train.images.mutable_data()[0] = std::nanf("");
  auto cfg = tiny_config();
  cfg.batch_size = 150;
  cfg.loss.ablations.enable("no_destyle");
  const auto dir = scratch("abort");
  RunOptions opt;
  opt.out_dir = dir;
  EXPECT_THROW(train(cfg, suite, opt), TrainingAbort);
  const auto model = load_split_model(dir / "checkpoints", cfg);
  EXPECT_EQ(model.candidate(), cfg.default_position);
}

TEST(Nas, SingleCandidateConvergesImmediately) {
  auto cfg = tiny_config();
  auto spec = cfg.backbone_spec();
  spec.candidates = {2};
  Supernet net(Backbone(spec, 1));
  Stylizer g(cfg.stylizer, 2);
  const auto r = run_nas_stage(tiny_suite(), net, g, cfg);
  EXPECT_EQ(r.selected, 0);
  EXPECT_TRUE(r.converged);
  EXPECT_EQ(r.iterations, 0);
}

TEST(Nas, ReplaysIdenticallyAndStaysInRange) {
  auto cfg = tiny_config();
  auto run = [&] {
    Supernet net(Backbone(cfg.backbone_spec(), 1));
    Stylizer g(cfg.stylizer, 2);
    return run_nas_stage(tiny_suite(), net, g, cfg);
  };
  const auto a = run(), b = run();
  EXPECT_EQ(a.to_json().dump(), b.to_json().dump());
  EXPECT_GE(a.selected, 0);
  EXPECT_LT(a.selected, 6);
  EXPECT_EQ(a.pi.size(), 6u);
  EXPECT_GE(a.history.checkpoints.size(), 2u);
  EXPECT_EQ(a.to_json()["warning"].get<bool>(), !a.converged);
}

TEST(Nas, BudgetExhaustionSetsWarning) {
  auto cfg = tiny_config();
  cfg.nas_max_iters = 2;
  cfg.nas_check_every = 1;
  cfg.nas_patience = 3;
  Supernet net(Backbone(cfg.backbone_spec(), 1));
  Stylizer g(cfg.stylizer, 2);
  const auto r = run_nas_stage(tiny_suite(), net, g, cfg);
  EXPECT_FALSE(r.converged);
  EXPECT_EQ(r.iterations, 2);
  EXPECT_TRUE(r.to_json()["warning"].get<bool>());
}

TEST(Evaluate, ConstantPredictorScoresChanceOnBalancedData) {
  auto cfg = tiny_config();
  auto model = make_split_model(cfg, 1, 3);
  // Zero the last linear layer and bias one class.
  auto h = model.h_parameters();
  auto* w = h[h.size() - 2];
  auto* b = h.back();
  for (auto& v : w->value.mutable_data()) v = 0;
  for (auto& v : b->value.mutable_data()) v = 0;
  b->value.mutable_data()[4] = 1;
  const auto e = evaluate(model, tiny_suite().targets[0], TaskKind::classification);
  EXPECT_DOUBLE_EQ(e.metric, 0.1);
  EXPECT_EQ(e.samples, 40);
}

TEST(Evaluate, OrderInvariantAndReadOnly) {
  auto cfg = tiny_config();
  auto model = make_split_model(cfg, 1, 3);
  const auto& set = tiny_suite().source_test;
  std::vector<int> rev(static_cast<std::size_t>(set.size()));
  for (int i = 0; i < set.size(); ++i) rev[static_cast<std::size_t>(i)] = set.size() - 1 - i;
  LabeledSet shuffled = set;
  const auto g = set.gather(rev);
  shuffled.images = g.images;
  shuffled.labels = g.labels;
  const auto hash = parameter_hash(model.all_parameters());
  EXPECT_EQ(evaluate(model, set, TaskKind::classification).metric,
            evaluate(model, shuffled, TaskKind::classification).metric);
  EXPECT_EQ(parameter_hash(model.all_parameters()), hash);
}

TEST(Train, ReplayIsByteIdenticalAndCheckpointsReload) {
  const auto cfg = tiny_config(5);
  const auto d1 = scratch("replay1"), d2 = scratch("replay2");
  RunOptions o1, o2;
  o1.out_dir = d1;
  o2.out_dir = d2;
  const auto a = train(cfg, tiny_suite(), o1);
  train(cfg, tiny_suite(), o2);
  for (const auto* f : {"report.json", "nas.json", "train_log.csv", "checkpoints/F.bin", "checkpoints/F.json",
                        "checkpoints/H.bin", "checkpoints/G.bin"}) {
    ASSERT_TRUE(fs::exists(d1 / f)) << f;
    EXPECT_EQ(slurp(d1 / f), slurp(d2 / f)) << f;
  }
  const auto j = nlohmann::json::parse(slurp(d1 / "report.json"));
  EXPECT_EQ(j["config_hash"], cfg.hash());
  EXPECT_EQ(j["per_domain"].size(), 5u);
  double sum = 0;
  for (const auto& t : j["targets"]) sum += j["per_domain"][t.get<std::string>()].get<double>();
  EXPECT_NEAR(sum / 4, j["average"].get<double>(), 1e-9);

  const auto model = load_split_model(d1 / "checkpoints", cfg);
  const auto again = evaluate_suite(model, tiny_suite(), cfg, a.nas.selected);
  EXPECT_EQ(again.to_json().dump(), a.report.to_json().dump());
  const auto g = load_stylizer(d1 / "checkpoints");
  EXPECT_EQ(parameter_hash(g.parameters()), parameter_hash(a.stylizer->parameters()));
}

TEST(Train, CheckpointBackboneMismatchIsConfigError) {
  const auto cfg = tiny_config(5);
  const auto d = scratch("mismatch");
  RunOptions o;
  o.out_dir = d;
  auto c = cfg;
  c.loss.ablations.enable("no_destyle");
  train(c, tiny_suite(), o);
  auto reg = cfg;
  reg.task = TaskKind::regression;
  EXPECT_THROW(load_split_model(d / "checkpoints", reg), ConfigError);
}

TEST(Train, FullBaselineAblationSkipsNasAndStylizer) {
  auto cfg = tiny_config();
  for (const auto* n : {"no_destyle", "no_style", "no_adversarial"}) cfg.loss.ablations.enable(n);
  const auto a = train(cfg, tiny_suite());
  EXPECT_TRUE(a.nas.skipped);
  EXPECT_FALSE(a.model->adain_enabled());
  Stylizer fresh(cfg.stylizer, stream_seed(cfg.seed, Stream::stylizer_init, 1));
  EXPECT_EQ(parameter_hash(a.stylizer->parameters()), parameter_hash(fresh.parameters()));
  const auto j = a.report.to_json();
  EXPECT_EQ(j["ablations"].size(), 3u);
}

TEST(Train, RegressionReportsMse) {
  auto cfg = tiny_config();
  cfg.task = TaskKind::regression;
  cfg.loss.task = TaskKind::regression;
  cfg.suite.glyphs.task = TaskKind::regression;
  const auto suite = make_suite(cfg);
  const auto a = train(cfg, suite);
  EXPECT_EQ(a.report.metric_name(), "mse");
  for (const auto& d : a.report.domains) EXPECT_GE(d.metric, 0.0);
}

}  // namespace
}  // namespace stydesty
