#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "stydesty/checkpoint.hpp"
#include "stydesty/gradcheck.hpp"
#include "stydesty/ops.hpp"
#include "stydesty/rng.hpp"
#include "stydesty/stylizer.hpp"
#include "test_util.hpp"

using namespace stydesty;
using stydesty::testing::max_abs_diff;
using stydesty::testing::random_tensor;

TEST(Stylizer, DefaultConfiguration) {
  Stylizer g(StylizerConfig{}, 1);
  ASSERT_EQ(g.num_blocks(), 2);
  EXPECT_EQ(g.block(0).config.mode, StyleMode::local);
  EXPECT_EQ(g.block(1).config.mode, StyleMode::global);
  for (int j = 0; j < 2; ++j) {
    EXPECT_EQ(g.block(j).enc.shape(), (Shape{3, 3, 3, 3}));
    EXPECT_EQ(g.block(j).dec.shape(), (Shape{3, 3, 3, 3}));
    for (float v : g.block(j).mu.value.data()) EXPECT_EQ(v, 0.0f);
    for (float v : g.block(j).sigma.value.data()) EXPECT_EQ(v, 1.0f);
    EXPECT_FALSE(g.block(j).mu.decay);
  }
  // Local affine holds one value per (channel, pixel): 32×32×3 entries.
  EXPECT_EQ(g.block(0).mu.value.numel(), 32 * 32 * 3);
  EXPECT_EQ(g.block(1).mu.value.numel(), 3);
  EXPECT_EQ(g.parameters().size(), 4u);
}

TEST(Stylizer, RejectsEvenKernel) {
  StylizerConfig c;
  c.blocks[0].kernel = 4;
  EXPECT_THROW(Stylizer(c, 1), std::invalid_argument);
}

TEST(Stylizer, SameSeedSameCodecs) {
  Stylizer a(StylizerConfig{}, 5), b(StylizerConfig{}, 5);
  EXPECT_EQ(max_abs_diff(a.block(0).enc, b.block(0).enc), 0.0);
  EXPECT_EQ(max_abs_diff(a.block(1).dec, b.block(1).dec), 0.0);
}

TEST(Stylizer, ResampleKeepsAffineAndReplays) {
  Stylizer g(StylizerConfig{}, 5);
  g.block(0).mu.value = random_tensor({3, 32, 32}, 3);
  const auto before = parameter_hash(g.parameters());
  const Tensor enc0 = g.block(0).enc.clone();
  g.resample_codecs(derive_seed(9, {3, 0}));
  EXPECT_EQ(parameter_hash(g.parameters()), before);
  const Tensor enc1 = g.block(0).enc.clone();
  EXPECT_GT(max_abs_diff(enc0, enc1), 0.0);
  g.resample_codecs(derive_seed(9, {3, 1}));
  EXPECT_GT(max_abs_diff(enc1, g.block(0).enc), 0.0);
  g.resample_codecs(derive_seed(9, {3, 0}));
  EXPECT_EQ(max_abs_diff(enc1, g.block(0).enc), 0.0);
}

TEST(MixWeights, GuardAndDeterminism) {
  for (std::uint64_t s = 0; s < 2000; ++s) {
    const auto w = sample_mix_weights(1, s);
    ASSERT_EQ(w.size(), 1u);
    EXPECT_GE(std::abs(w[0]), kMinMixSum);
  }
  EXPECT_EQ(sample_mix_weights(3, 42), sample_mix_weights(3, 42));
}

TEST(MixWeights, MonteCarloMoments) {
  const int n = 100000;
  double s[2] = {0, 0}, q[2] = {0, 0};
  for (int i = 0; i < n; ++i) {
    const auto w = sample_mix_weights(2, derive_seed(77, {static_cast<std::uint64_t>(i)}));
    for (int j = 0; j < 2; ++j) {
      s[j] += w[static_cast<std::size_t>(j)];
      q[j] += w[static_cast<std::size_t>(j)] * w[static_cast<std::size_t>(j)];
    }
  }
  for (int j = 0; j < 2; ++j) {
    const double mean = s[j] / n, var = q[j] / n - mean * mean;
    EXPECT_NEAR(mean, 0.0, 0.02);
    EXPECT_NEAR(var, 1.0, 0.05);
  }
}

TEST(Stylize, OutputStrictlyInsideUnitInterval) {
  Stylizer g(StylizerConfig{}, 2);
  const auto y = g.stylize(Binding(), random_tensor({4, 3, 32, 32}, 1, 0, 1), std::vector<double>{0.7, -1.3});
  EXPECT_EQ(y.shape(), (Shape{4, 3, 32, 32}));
  for (float v : y.data()) {
    EXPECT_GT(v, 0.0f);
    EXPECT_LT(v, 1.0f);
  }
}

TEST(Stylize, RejectsDegenerateMix) {
  Stylizer g(StylizerConfig{}, 2);
  EXPECT_THROW(g.stylize(Binding(), random_tensor({1, 3, 32, 32}, 1, 0, 1), std::vector<double>{0.5, -0.45}),
               std::invalid_argument);
}

TEST(Stylize, SingleBlockIsTheBlockFormula) {
  StylizerConfig c;
  c.blocks = {{StyleMode::global, 3, 3}};
  Stylizer g(c, 4);
  g.block(0).mu.value = random_tensor({3, 1, 1}, 8);
  g.block(0).sigma.value = random_tensor({3, 1, 1}, 9, 0.5, 2);
  const auto x = random_tensor({2, 3, 32, 32}, 3, 0, 1);
  const auto& b = g.block(0);
  const auto f = conv2d(x, b.enc, 1, 1);
  const auto st = instance_stats(f);
  // Broadcast the c×1×1 affine per sample.
  const auto hat = normalize_affine(f, st.mean, st.std, reshape(b.sigma.value, {3}), reshape(b.mu.value, {3}));
  const auto ref = sigmoid(conv_transpose2d(hat, b.dec, 1, 1));
  EXPECT_LT(max_abs_diff(g.stylize(Binding(), x, std::vector<double>{1.0}), ref), 1e-6);
}

TEST(Stylize, ZeroAffineAnnihilatesContent) {
  Stylizer g(StylizerConfig{}, 2);
  for (int j = 0; j < g.num_blocks(); ++j) {
    for (auto& v : g.block(j).mu.value.mutable_data()) v = 0;
    for (auto& v : g.block(j).sigma.value.mutable_data()) v = 0;
  }
  const std::vector<double> w{0.4, 1.1};
  const auto a = g.stylize(Binding(), random_tensor({1, 3, 32, 32}, 1, 0, 1), w);
  const auto b = g.stylize(Binding(), random_tensor({1, 3, 32, 32}, 2, 0, 1), w);
  EXPECT_EQ(max_abs_diff(a, b), 0.0);
  for (float v : a.data()) EXPECT_EQ(v, a[0]);
}

// Analytic float gradients of mean(x^T) against central differences of the
// same formula evaluated in double precision.
TEST(Stylize, AffineGradientMatchesFiniteDifferences) {
  Stylizer g(StylizerConfig{}, 6);
  g.block(0).mu.value = random_tensor({3, 32, 32}, 4, -0.3, 0.3);
  g.block(1).sigma.value = random_tensor({3, 1, 1}, 5, 0.5, 1.5);
  const auto x = random_tensor({2, 3, 32, 32}, 7, 0, 1);
  const std::vector<double> w{0.8, 0.6};
  const double total = w[0] + w[1];

  Tape<float> tape;
  Binding bind(tape);
  bind.train_all(g.parameters());
  const auto y = g.stylize(bind, x, w);
  tape.backward(scale(sum(y), 1.0 / static_cast<double>(y.numel())));

  auto mean_xt = [&](int block, bool is_mu, std::int64_t k, double delta) {
    const auto xd = x.cast<double>();
    TensorD mix;
    for (int j = 0; j < g.num_blocks(); ++j) {
      const auto& b = g.block(j);
      auto mu = b.mu.value.cast<double>();
      auto sigma = b.sigma.value.cast<double>();
      if (j == block) (is_mu ? mu : sigma).mutable_data()[static_cast<std::size_t>(k)] += delta;
      const auto f = conv2d(xd, b.enc.cast<double>(), 1, 1);
      const auto st = instance_stats(f);
      const auto xj = scale(conv_transpose2d(normalize_affine(f, st.mean, st.std, sigma, mu), b.dec.cast<double>(), 1, 1),
                            w[static_cast<std::size_t>(j)] / total);
      mix = mix.defined() ? add(mix, xj) : xj;
    }
    const auto out = sigmoid(mix);
    return sum(out).item() / static_cast<double>(out.numel());
  };

  std::mt19937_64 rng(11);
  for (int j = 0; j < g.num_blocks(); ++j) {
    for (bool is_mu : {true, false}) {
      const auto& p = is_mu ? g.block(j).mu : g.block(j).sigma;
      const auto* grad = tape.gradients().find(p);
      ASSERT_NE(grad, nullptr);
      double worst = 0, scale_ref = 1e-12;
      for (int probe = 0; probe < 30; ++probe) {
        const auto k = static_cast<std::int64_t>(rng() % static_cast<std::uint64_t>(p.value.numel()));
        const double h = 1e-4;
        const double num = (mean_xt(j, is_mu, k, h) - mean_xt(j, is_mu, k, -h)) / (2 * h);
        const double ana = (*grad)[static_cast<std::size_t>(k)];
        worst = std::max(worst, std::abs(num - ana));
        scale_ref = std::max({scale_ref, std::abs(num), std::abs(ana)});
      }
      EXPECT_LT(worst / scale_ref, 1e-3) << p.name;
    }
  }
}

TEST(Stylize, OnlyAffineReceivesGradient) {
  Stylizer g(StylizerConfig{}, 6);
  Tape<float> tape;
  Binding bind(tape);
  bind.train_all(g.parameters());
  const auto y = g.stylize(bind, random_tensor({1, 3, 32, 32}, 1, 0, 1), std::vector<double>{1.0, 0.5});
  tape.backward(sum(y));
  EXPECT_EQ(tape.gradients().size(), 4u);
}

TEST(Ppm, WritesBinaryP6) {
  const auto dir = std::filesystem::temp_directory_path() / "stydesty_test_ppm";
  std::filesystem::create_directories(dir);
  auto img = Tensor::zeros({2, 3, 32, 32});
  img.mutable_data()[3 * 32 * 32] = 1.0f;  // sample 1, red, pixel (0,0)
  write_ppm(dir / "stylized_0_1.ppm", img, 1);
  std::ifstream in(dir / "stylized_0_1.ppm", std::ios::binary);
  std::string magic;
  int w = 0, h = 0, maxv = 0;
  in >> magic >> w >> h >> maxv;
  in.get();
  EXPECT_EQ(magic, "P6");
  EXPECT_EQ(w, 32);
  EXPECT_EQ(h, 32);
  EXPECT_EQ(maxv, 255);
  unsigned char px[3];
  in.read(reinterpret_cast<char*>(px), 3);
  EXPECT_EQ(px[0], 255);
  EXPECT_EQ(px[1], 0);
  EXPECT_EQ(std::filesystem::file_size(dir / "stylized_0_1.ppm"), static_cast<std::uintmax_t>(13 + 32 * 32 * 3));
}
