#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "stydesty/data.hpp"
#include "stydesty/rng.hpp"

namespace stydesty {
namespace {

namespace fs = std::filesystem;

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("stydesty_data_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void put32(std::vector<unsigned char>& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<unsigned char>(v >> s));
}

void write_bytes(const fs::path& p, const std::vector<unsigned char>& b) {
  std::ofstream(p, std::ios::binary).write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

// Four 28×28 grey images whose pixel (y, x) of image i is (i·37 + y·5 + x) mod 256.
struct Fixture {
  fs::path images, labels;
  std::vector<unsigned char> img, lab;
};

Fixture make_fixture(const std::string& name, int n = 4, int h = 28, int w = 28) {
  Fixture f;
  const auto dir = scratch(name);
  f.images = dir / "images.idx";
  f.labels = dir / "labels.idx";
  put32(f.img, 0x00000803);
  put32(f.img, static_cast<std::uint32_t>(n));
  put32(f.img, static_cast<std::uint32_t>(h));
  put32(f.img, static_cast<std::uint32_t>(w));
  for (int i = 0; i < n; ++i) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) f.img.push_back(static_cast<unsigned char>((i * 37 + y * 5 + x) % 256));
    }
  }
  put32(f.lab, 0x00000801);
  put32(f.lab, static_cast<std::uint32_t>(n));
  for (int i = 0; i < n; ++i) f.lab.push_back(static_cast<unsigned char>((3 * i + 1) % 10));
  write_bytes(f.images, f.img);
  write_bytes(f.labels, f.lab);
  return f;
}

float pixel(const LabeledSet& s, int i, int c, int y, int x) {
  return s.images[((static_cast<std::int64_t>(i) * 3 + c) * 32 + y) * 32 + x];
}

TEST(Idx, FixturePixelsAreBytesOver255WithZeroBorder) {
  const auto f = make_fixture("fixture");
  const auto s = load_idx(f.images, f.labels);
  ASSERT_EQ(s.size(), 4);
  EXPECT_EQ(s.images.shape(), (Shape{4, 3, 32, 32}));
  for (int i = 0; i < 4; ++i) {
    EXPECT_EQ(s.labels[static_cast<std::size_t>(i)], (3 * i + 1) % 10);
    for (int y = 0; y < 32; ++y) {
      for (int x = 0; x < 32; ++x) {
        const bool inside = y >= 2 && y < 30 && x >= 2 && x < 30;
        const float want = inside ? static_cast<float>((i * 37 + (y - 2) * 5 + (x - 2)) % 256) / 255.0f : 0.0f;
        for (int c = 0; c < 3; ++c) ASSERT_EQ(pixel(s, i, c, y, x), want) << i << " " << c << " " << y << " " << x;
      }
    }
  }
}

TEST(Idx, BadMagicNamesExpectedAndFound) {
  auto f = make_fixture("magic");
  f.img[3] = 0x02;
  write_bytes(f.images, f.img);
  try {
    load_idx(f.images, f.labels);
    FAIL() << "accepted a bad magic number";
  } catch (const IdxError& e) {
    EXPECT_EQ(e.offset(), 0u);
    EXPECT_NE(std::string(e.what()).find("0x00000803"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("0x00000802"), std::string::npos);
  }
}

TEST(Idx, TruncatedImagesReportFileSizeOffset) {
  auto f = make_fixture("trunc");
  f.img.resize(f.img.size() - 10);
  write_bytes(f.images, f.img);
  try {
    load_idx(f.images, f.labels);
    FAIL();
  } catch (const IdxError& e) {
    EXPECT_EQ(e.offset(), f.img.size());
  }
}

TEST(Idx, CountMismatchPointsAtLabelCount) {
  auto f = make_fixture("count");
  f.lab[7] = 3;
  f.lab.pop_back();
  write_bytes(f.labels, f.lab);
  try {
    load_idx(f.images, f.labels);
    FAIL();
  } catch (const IdxError& e) {
    EXPECT_EQ(e.offset(), 4u);
    EXPECT_NE(std::string(e.what()).find("count mismatch"), std::string::npos);
  }
}

TEST(Idx, MissingFileIsRejected) {
  EXPECT_THROW(load_idx("/nonexistent/a.idx", "/nonexistent/b.idx"), IdxError);
}

TEST(Glyphs, SameConfigIsBitIdenticalAndClassCountsExact) {
  GlyphConfig g;
  g.samples_per_class = 30;
  g.seed = 9;
  const auto a = synth_glyphs(g), b = synth_glyphs(g);
  ASSERT_EQ(a.size(), 300);
  EXPECT_TRUE(std::equal(a.images.data().begin(), a.images.data().end(), b.images.data().begin()));
  EXPECT_EQ(a.labels, b.labels);
  std::vector<int> hist(10);
  for (int l : a.labels) ++hist[static_cast<std::size_t>(l)];
  for (int c : hist) EXPECT_EQ(c, 30);
  for (float v : a.images.data()) ASSERT_TRUE(v >= 0.0f && v <= 1.0f);
}

TEST(Glyphs, SampleDependsOnlyOnSeedAndIndex) {
  GlyphConfig g;
  g.samples_per_class = 5;
  const auto all = synth_glyphs(g);
  const auto part = synth_glyph_range(g, 20, 30);
  const auto base = all.images.data().subspan(20 * 3 * 32 * 32, 10 * 3 * 32 * 32);
  EXPECT_TRUE(std::equal(base.begin(), base.end(), part.images.data().begin()));
  g.seed = 2;
  const auto other = synth_glyphs(g);
  EXPECT_FALSE(std::equal(all.images.data().begin(), all.images.data().end(), other.images.data().begin()));
}

TEST(Glyphs, DistinctIndicesRenderDistinctImages) {
  GlyphConfig g;
  g.samples_per_class = 20;
  const auto s = synth_glyphs(g);
  std::set<std::vector<float>> seen;
  const std::size_t per = 3 * 32 * 32;
  for (int i = 0; i < s.size(); ++i) {
    const auto d = s.images.data().subspan(static_cast<std::size_t>(i) * per, per);
    seen.emplace(d.begin(), d.end());
  }
  EXPECT_EQ(static_cast<int>(seen.size()), s.size());
}

TEST(Glyphs, RegressionTargetsAreNormalizedAngles) {
  GlyphConfig g;
  g.samples_per_class = 10;
  g.task = TaskKind::regression;
  const auto s = synth_glyphs(g);
  ASSERT_EQ(static_cast<int>(s.targets.size()), s.size());
  double lo = 1, hi = -1;
  for (float t : s.targets) {
    lo = std::min(lo, static_cast<double>(t));
    hi = std::max(hi, static_cast<double>(t));
  }
  EXPECT_GE(lo, -1.0);
  EXPECT_LE(hi, 1.0);
  EXPECT_LT(lo, -0.5);
  EXPECT_GT(hi, 0.5);
}

LabeledSet probe_set() {
  GlyphConfig g;
  g.samples_per_class = 10;
  g.seed = 5;
  return synth_glyphs(g);
}

double mean_abs_change(const LabeledSet& clean, CorruptionKind kind, int level) {
  auto img = clean.images.clone();
  const std::size_t per = 3 * 32 * 32;
  double total = 0;
  for (int i = 0; i < clean.size(); ++i) {
    auto span = img.mutable_data().subspan(static_cast<std::size_t>(i) * per, per);
    corrupt(span, 32, 32, kind, level, derive_seed(77, {static_cast<std::uint64_t>(i)}));
    for (std::size_t k = 0; k < per; ++k) total += std::abs(span[k] - clean.images.data()[static_cast<std::size_t>(i) * per + k]);
  }
  return total / static_cast<double>(clean.size() * per);
}

TEST(Corrupt, LevelZeroIsIdentityForEveryKind) {
  const auto clean = probe_set();
  for (auto kind : all_corruptions()) EXPECT_EQ(mean_abs_change(clean, kind, 0), 0.0) << to_string(kind);
}

TEST(Corrupt, SeverityIsMonotoneForEveryKindOn100Images) {
  const auto clean = probe_set();
  ASSERT_EQ(clean.size(), 100);
  for (auto kind : all_corruptions()) {
    double prev = 0;
    for (int level = 1; level <= kMaxSeverity; ++level) {
      const double d = mean_abs_change(clean, kind, level);
      EXPECT_GE(d, prev) << to_string(kind) << " level " << level;
      prev = d;
    }
  }
}

TEST(Corrupt, GaussianNoiseIsStrictlyIncreasing) {
  const auto clean = probe_set();
  double prev = 0;
  for (int level = 1; level <= kMaxSeverity; ++level) {
    const double d = mean_abs_change(clean, CorruptionKind::gaussian_noise, level);
    EXPECT_GT(d, prev) << level;
    prev = d;
  }
}

TEST(Corrupt, OutputIsClamped) {
  auto s = probe_set();
  const std::size_t per = 3 * 32 * 32;
  for (auto kind : all_corruptions()) {
    auto img = s.images.clone();
    for (int i = 0; i < 10; ++i) {
      auto span = img.mutable_data().subspan(static_cast<std::size_t>(i) * per, per);
      corrupt(span, 32, 32, kind, 5, static_cast<std::uint64_t>(i));
      for (float v : span) ASSERT_TRUE(v >= 0.0f && v <= 1.0f) << to_string(kind);
    }
  }
}

TEST(Corrupt, RejectsUnknownKindAndBadLevel) {
  EXPECT_THROW(corruption_from_string("fog"), std::invalid_argument);
  std::vector<float> img(3 * 32 * 32, 0.5f);
  EXPECT_THROW(corrupt(img, 32, 32, CorruptionKind::contrast, 6, 0), std::invalid_argument);
  for (auto kind : all_corruptions()) EXPECT_EQ(corruption_from_string(to_string(kind)), kind);
}

SuiteConfig small_suite() {
  auto cfg = SuiteConfig::desk_default(3);
  cfg.glyphs.samples_per_class = 20;
  cfg.source_train = 150;
  cfg.source_test = 50;
  cfg.target_size = 40;
  return cfg;
}

TEST(Suite, DefaultShapeIsOneSourceAndFourTargets) {
  const auto cfg = SuiteConfig::desk_default();
  EXPECT_EQ(cfg.targets.size(), 4u);
  EXPECT_EQ(cfg.source_train, 5000);
  EXPECT_EQ(cfg.source_test, 1000);
  EXPECT_EQ(cfg.target_size, 1000);
  for (const auto& t : cfg.targets) {
    ASSERT_EQ(t.recipe.size(), 1u);
    EXPECT_EQ(t.recipe[0].level, 3);
  }
  const auto s = build_suite(small_suite());
  EXPECT_EQ(s.source_train.size(), 150);
  EXPECT_EQ(s.source_test.size(), 50);
  ASSERT_EQ(s.targets.size(), 4u);
  for (const auto& t : s.targets) {
    EXPECT_EQ(t.size(), 40);
    EXPECT_EQ(t.images.shape(), (Shape{40, 3, 32, 32}));
    for (int l : t.labels) ASSERT_TRUE(l >= 0 && l < 10);
    for (float v : t.images.data()) ASSERT_TRUE(v >= 0.0f && v <= 1.0f);
  }
}

TEST(Suite, SourceSplitsAreDisjoint) {
  const auto s = build_suite(small_suite());
  const std::size_t per = 3 * 32 * 32;
  std::set<std::vector<float>> train;
  for (int i = 0; i < s.source_train.size(); ++i) {
    const auto d = s.source_train.images.data().subspan(static_cast<std::size_t>(i) * per, per);
    train.emplace(d.begin(), d.end());
  }
  for (int i = 0; i < s.source_test.size(); ++i) {
    const auto d = s.source_test.images.data().subspan(static_cast<std::size_t>(i) * per, per);
    EXPECT_EQ(train.count(std::vector<float>(d.begin(), d.end())), 0u);
  }
}

TEST(Suite, IdenticalSpecsGiveBitIdenticalSuites) {
  const auto a = build_suite(small_suite()), b = build_suite(small_suite());
  auto same = [](const LabeledSet& x, const LabeledSet& y) {
    return x.labels == y.labels && std::equal(x.images.data().begin(), x.images.data().end(), y.images.data().begin());
  };
  EXPECT_TRUE(same(a.source_train, b.source_train));
  EXPECT_TRUE(same(a.source_test, b.source_test));
  for (std::size_t k = 0; k < a.targets.size(); ++k) EXPECT_TRUE(same(a.targets[k], b.targets[k]));
}

TEST(Suite, CacheRoundTripAndRecipeMismatch) {
  const auto dir = scratch("cache");
  const auto cfg = small_suite();
  const auto s = build_suite(cfg);
  save_suite(dir, s, cfg.to_json());
  for (const auto* name : {"source_train", "source_test", "noise_L3"}) {
    EXPECT_TRUE(fs::exists(dir / name / "data.bin"));
    EXPECT_TRUE(fs::exists(dir / name / "meta.json"));
  }
  DatasetSuite back;
  ASSERT_TRUE(load_suite(dir, cfg.to_json(), back));
  ASSERT_EQ(back.targets.size(), s.targets.size());
  EXPECT_EQ(back.targets[2].name, s.targets[2].name);
  EXPECT_TRUE(std::equal(back.targets[2].images.data().begin(), back.targets[2].images.data().end(),
                         s.targets[2].images.data().begin()));
  auto other = cfg;
  other.target_size = 41;
  EXPECT_FALSE(load_suite(dir, other.to_json(), back));
  EXPECT_FALSE(load_suite(dir / "absent", cfg.to_json(), back));
}

TEST(Batches, FullSizeBatchIsAPermutation) {
  const auto b = iterate_batches(17, 17, 4);
  ASSERT_EQ(b.size(), 1u);
  auto sorted = b[0];
  std::sort(sorted.begin(), sorted.end());
  for (int i = 0; i < 17; ++i) EXPECT_EQ(sorted[static_cast<std::size_t>(i)], i);
}

TEST(Batches, EpochSeedsChangeOrderNotMultiset) {
  const auto a = iterate_batches(100, 32, 1), b = iterate_batches(100, 32, 2), c = iterate_batches(100, 32, 1);
  ASSERT_EQ(a.size(), 4u);
  EXPECT_EQ(a.back().size(), 4u);
  EXPECT_EQ(a, c);
  EXPECT_NE(a, b);
  auto flat = [](const std::vector<std::vector<int>>& v) {
    std::vector<int> out;
    for (const auto& x : v) out.insert(out.end(), x.begin(), x.end());
    std::sort(out.begin(), out.end());
    return out;
  };
  EXPECT_EQ(flat(a), flat(b));
  EXPECT_THROW(iterate_batches(10, 0, 1), std::invalid_argument);
}

TEST(Threads, EnvironmentCapsWorkers) {
  setenv("STYDESTY_THREADS", "3", 1);
  EXPECT_EQ(worker_threads(), 3);
  setenv("STYDESTY_THREADS", "zero", 1);
  EXPECT_GE(worker_threads(), 1);
  unsetenv("STYDESTY_THREADS");
}

}  // namespace
}  // namespace stydesty
