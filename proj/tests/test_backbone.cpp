#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "stydesty/backbone.hpp"
#include "stydesty/checkpoint.hpp"
#include "stydesty/ops.hpp"
#include "stydesty/optimizer.hpp"
#include "stydesty/supernet.hpp"
#include "test_util.hpp"

using namespace stydesty;
using stydesty::testing::max_abs_diff;
using stydesty::testing::random_tensor;

namespace {

Tensor one_hot(int n, int k) {
  auto t = Tensor::zeros({n});
  t.mutable_data()[static_cast<std::size_t>(k)] = 1.0f;
  return t;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto d = std::filesystem::temp_directory_path() / ("stydesty_test_" + name);
  std::filesystem::remove_all(d);
  std::filesystem::create_directories(d);
  return d;
}

}  // namespace

TEST(Backbone, LenetGeometry) {
  const auto spec = BackboneSpec::lenet(10);
  EXPECT_EQ(spec.num_candidates(), 6);
  Backbone net(spec, 1);
  const auto y = net.forward(Binding(), random_tensor({3, 3, 32, 32}, 2, 0, 1), 0, net.num_layers());
  EXPECT_EQ(y.shape(), (Shape{3, 10}));
  const auto shapes = spec.activation_shapes();
  EXPECT_EQ(shapes[static_cast<std::size_t>(net.num_layers() - 1)], (Shape{84}));
}

TEST(Backbone, SameSeedSameParameters) {
  Backbone a(BackboneSpec::lenet(10), 7), b(BackboneSpec::lenet(10), 7), c(BackboneSpec::lenet(10), 8);
  EXPECT_EQ(parameter_hash(a.parameters()), parameter_hash(b.parameters()));
  EXPECT_NE(parameter_hash(a.parameters()), parameter_hash(c.parameters()));
}

TEST(Backbone, RejectsInvalidGeometry) {
  auto spec = BackboneSpec::lenet(10);
  spec.layers[3].kernel = 40;
  EXPECT_THROW(spec.validate(), std::invalid_argument);
  auto spec2 = BackboneSpec::lenet(10);
  spec2.candidates = {2, 1};
  EXPECT_THROW(spec2.validate(), std::invalid_argument);
}

TEST(Backbone, SpecJsonRoundTrip) {
  const auto spec = BackboneSpec::lenet(1);
  EXPECT_EQ(BackboneSpec::from_json(spec.to_json()).to_json(), spec.to_json());
}

TEST(SplitModel, FirstCandidateHoldsOnlyFirstConv) {
  const auto spec = BackboneSpec::lenet(10);
  auto m = split_at(Backbone(spec, 1), 0, AdaINParams::identity(spec.candidate_channels(0), "adain"));
  EXPECT_EQ(m.boundary(), 1);
  // conv weight + bias + AdaIN mu/sigma.
  EXPECT_EQ(m.f_parameters().size(), 4u);
}

TEST(SplitModel, LastCandidateHeadIsTheRest) {
  const auto spec = BackboneSpec::lenet(10);
  const int last = spec.num_candidates() - 1;
  auto m = split_at(Backbone(spec, 1), last, AdaINParams::identity(spec.candidate_channels(last), "adain"));
  EXPECT_EQ(m.boundary(), 6);
  // The three linear layers.
  EXPECT_EQ(m.h_parameters().size(), 6u);
}

TEST(SplitModel, RejectsNonCandidate) {
  const auto spec = BackboneSpec::lenet(10);
  EXPECT_THROW(split_at(Backbone(spec, 1), 6, AdaINParams::identity(6, "a")), std::out_of_range);
  EXPECT_THROW(split_at(Backbone(spec, 1), 0, AdaINParams::identity(16, "a")), std::invalid_argument);
}

TEST(SplitModel, ComposedForwardMatchesSupernetOneHot) {
  const auto spec = BackboneSpec::lenet(10);
  Supernet net(Backbone(spec, 3));
  // Non-trivial AdaIN parameters so the selected layer matters.
  for (int l = 0; l < net.num_positions(); ++l) {
    auto& a = net.adain(l);
    a.mu.value = random_tensor({a.channels()}, 100 + static_cast<std::uint64_t>(l));
    a.sigma.value = random_tensor({a.channels()}, 200 + static_cast<std::uint64_t>(l), 0.5, 1.5);
  }
  const auto x = random_tensor({4, 3, 32, 32}, 9, 0, 1);
  for (int l = 0; l < net.num_positions(); ++l) {
    const auto ref = net.forward(Binding(), x, one_hot(net.num_positions(), l));
    SplitModel m(net.backbone().clone(), l, net.adain(l).clone());
    const auto f = m.destyle(Binding(), x);
    EXPECT_LT(max_abs_diff(m.head(Binding(), f), ref.logits), 1e-6) << "position " << l;
  }
}

TEST(SplitModel, HiddenFeaturesComposeWithLastLayerExactly) {
  const auto spec = BackboneSpec::lenet(10);
  SplitModel m(Backbone(spec, 4), 2, AdaINParams::identity(spec.candidate_channels(2), "adain"));
  const auto f = m.destyle(Binding(), random_tensor({5, 3, 32, 32}, 1, 0, 1));
  const auto h = m.hidden(Binding(), f);
  EXPECT_EQ(h.shape(), (Shape{5, 84}));
  const auto a = m.head_from_hidden(Binding(), h);
  const auto b = m.head(Binding(), f);
  ASSERT_EQ(a.numel(), b.numel());
  for (std::int64_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a[i], b[i]);
  // Trace oracle: the full layer-by-layer forward sliced at the tap.
  Tensor t = f;
  for (int k = m.boundary(); k < m.hidden_tap(); ++k) t = m.backbone().apply(Binding(), k, t);
  for (std::int64_t i = 0; i < h.numel(); ++i) EXPECT_EQ(h[i], t[i]);
}

TEST(SplitModel, DisabledAdainIsBypass) {
  const auto spec = BackboneSpec::lenet(10);
  SplitModel m(Backbone(spec, 4), 2, AdaINParams::identity(spec.candidate_channels(2), "adain"), false);
  const auto x = random_tensor({2, 3, 32, 32}, 5, 0, 1);
  const auto ref = m.backbone().forward(Binding(), x, 0, m.backbone().num_layers());
  EXPECT_EQ(max_abs_diff(m.forward(Binding(), x), ref), 0.0);
}

namespace {

Parameter scalar_param(float v, bool decay = true) { return {"p", Tensor::full({1}, v), decay}; }

Gradients grads_for(const Parameter& p, float g) {
  Gradients gr;
  gr.slot(p, 1)[0] = g;
  return gr;
}

}  // namespace

TEST(Sgd, ZeroGradientNoDecayLeavesParameters) {
  auto p = scalar_param(0.7f);
  Sgd opt({0.1, 0.9, 0.0, true});
  std::vector<Parameter*> ps{&p};
  opt.step(ps, grads_for(p, 0));
  EXPECT_EQ(p.value[0], 0.7f);
}

TEST(Sgd, PlainStep) {
  auto p = scalar_param(1.0f);
  Sgd opt({0.1, 0.0, 0.0, false});
  std::vector<Parameter*> ps{&p};
  opt.step(ps, grads_for(p, 1));
  EXPECT_NEAR(p.value[0], 0.9f, 1e-7);
}

TEST(Sgd, NesterovQuadraticMatchesScalarRecurrence) {
  auto p = scalar_param(1.0f);
  const double lr = 0.1, m = 0.9, wd = 0.01;
  Sgd opt({lr, m, wd, true});
  std::vector<Parameter*> ps{&p};
  double q = 1.0, v = 0.0;
  for (int t = 0; t < 5; ++t) {
    const double g = static_cast<float>(p.value[0]);  // d/dp 0.5p²
    opt.step(ps, grads_for(p, static_cast<float>(g)));
    const double gq = q;
    v = m * v + (gq + wd * q);
    q = q - lr * (gq + wd * q + m * v);
    EXPECT_NEAR(p.value[0], q, 1e-7) << "step " << t;
  }
  EXPECT_NEAR(opt.velocity("p")[0], v, 1e-6);
}

TEST(Sgd, NoDecayOnUnflaggedParameters) {
  auto p = scalar_param(2.0f, false);
  Sgd opt({0.1, 0.0, 0.5, false});
  std::vector<Parameter*> ps{&p};
  opt.step(ps, grads_for(p, 0));
  EXPECT_EQ(p.value[0], 2.0f);
}

TEST(Sgd, NonFiniteGradientRejectsWholeStep) {
  auto a = scalar_param(1.0f);
  Parameter b{"second", Tensor::full({2}, 1.0f), true};
  Gradients g;
  g.slot(a, 1)[0] = 1.0f;
  g.slot(b, 2)[1] = std::nanf("");
  Sgd opt({0.1, 0.9, 0.0, true});
  std::vector<Parameter*> ps{&a, &b};
  try {
    opt.step(ps, g);
    FAIL() << "expected NonFiniteGradient";
  } catch (const NonFiniteGradient& e) {
    EXPECT_EQ(e.parameter(), "second");
  }
  EXPECT_EQ(a.value[0], 1.0f);
  EXPECT_EQ(opt.num_buffers(), 0u);
}

TEST(Sgd, ReplayIsBitIdentical) {
  auto run = [] {
    Parameter p{"w", random_tensor({8}, 3), true};
    Sgd opt;
    std::vector<Parameter*> ps{&p};
    for (int t = 0; t < 10; ++t) {
      Gradients g;
      auto& s = g.slot(p, 8);
      const auto gr = random_tensor({8}, 50 + static_cast<std::uint64_t>(t));
      for (int i = 0; i < 8; ++i) s[static_cast<std::size_t>(i)] = gr[i];
      opt.step(ps, g);
    }
    std::vector<Parameter*> v{&p};
    return parameter_hash(v);
  };
  EXPECT_EQ(run(), run());
}

TEST(Checkpoint, RoundTripAndLayout) {
  const auto dir = temp_dir("ckpt");
  Backbone net(BackboneSpec::lenet(10), 5);
  const auto params = net.parameters();
  std::vector<const Parameter*> cp(params.begin(), params.end());
  save_checkpoint(dir / "P", cp, {{"config_hash", "abc"}});
  const auto ck = load_checkpoint(dir / "P");
  EXPECT_EQ(ck.manifest.at("config_hash"), "abc");

  // Offsets follow lexicographic name order.
  std::vector<std::string> names;
  for (auto* p : params) names.push_back(p->name);
  std::sort(names.begin(), names.end());
  std::uint64_t expect = 0;
  for (const auto& n : names) {
    const auto& e = ck.manifest.at("tensors").at(n);
    EXPECT_EQ(e.at("offset").get<std::uint64_t>(), expect);
    expect += static_cast<std::uint64_t>(ck.tensors.at(n).numel()) * 4;
  }
  EXPECT_EQ(std::filesystem::file_size(dir / "P.bin"), expect);

  Backbone other(BackboneSpec::lenet(10), 6);
  ck.restore(other.parameters());
  EXPECT_EQ(parameter_hash(other.parameters()), parameter_hash(net.parameters()));
}

TEST(Checkpoint, RestoreRejectsShapeMismatch) {
  const auto dir = temp_dir("ckpt_shape");
  Backbone net(BackboneSpec::lenet(10), 5);
  const auto params = net.parameters();
  std::vector<const Parameter*> cp(params.begin(), params.end());
  save_checkpoint(dir / "P", cp, nlohmann::json::object());
  Backbone other(BackboneSpec::lenet(7), 5);
  EXPECT_THROW(load_checkpoint(dir / "P").restore(other.parameters()), CheckpointError);
}

TEST(Checkpoint, TruncatedBinaryIsRejected) {
  const auto dir = temp_dir("ckpt_trunc");
  Backbone net(BackboneSpec::lenet(10), 5);
  const auto params = net.parameters();
  std::vector<const Parameter*> cp(params.begin(), params.end());
  save_checkpoint(dir / "P", cp, nlohmann::json::object());
  std::filesystem::resize_file(dir / "P.bin", 100);
  EXPECT_THROW(load_checkpoint(dir / "P"), CheckpointError);
}
