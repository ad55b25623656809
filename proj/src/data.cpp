#include "stydesty/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <numbers>
#include <random>
#include <thread>

#include "parallel.hpp"
#include "stydesty/rng.hpp"

namespace stydesty {
namespace {

#include "glyph_font.inc"

constexpr int kPlane = kImageSize * kImageSize;
constexpr int kImageNumel = kImageChannels * kPlane;

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IdxError(path.string(), 0, "cannot open file");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t at) {
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) | b[at + 3];
}

std::string hex32(std::uint32_t v) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "0x%08x", v);
  return buf;
}

// Bilinear lookup into glyph c with zero outside.
float glyph_at(int c, double u, double v) {
  const int x0 = static_cast<int>(std::floor(u)), y0 = static_cast<int>(std::floor(v));
  const double fx = u - x0, fy = v - y0;
  auto px = [c](int x, int y) -> double {
    if (x < 0 || y < 0 || x >= 16 || y >= 16) return 0.0;
    return kGlyphFont[c][y][x] == '#' ? 1.0 : 0.0;
  };
  return static_cast<float>((1 - fx) * (1 - fy) * px(x0, y0) + fx * (1 - fy) * px(x0 + 1, y0) +
                            (1 - fx) * fy * px(x0, y0 + 1) + fx * fy * px(x0 + 1, y0 + 1));
}

void render_glyph(const GlyphConfig& cfg, int index, float* out, int& label, float& target) {
  Rng rng(derive_seed(cfg.seed, {static_cast<std::uint64_t>(index)}));
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  label = index % cfg.num_classes;
  const int glyph = label % 10;
  const double max_deg = cfg.task == TaskKind::regression ? cfg.regression_degrees : cfg.rotation_degrees;
  const double a = unit(rng);
  const double theta = a * max_deg * std::numbers::pi / 180.0;
  target = static_cast<float>(a);
  const double s = (1.0 + cfg.scale_jitter * unit(rng)) * (22.0 / 16.0);
  const double tx = cfg.translation_pixels * unit(rng), ty = cfg.translation_pixels * unit(rng);
  const double thr = 0.5 + cfg.stroke_jitter * unit(rng);
  const double ct = std::cos(theta), st = std::sin(theta);
  const double centre = (kImageSize - 1) / 2.0;
  for (int y = 0; y < kImageSize; ++y) {
    for (int x = 0; x < kImageSize; ++x) {
      const double dx = x - centre - tx, dy = y - centre - ty;
      const double u = (ct * dx + st * dy) / s + 7.5, v = (-st * dx + ct * dy) / s + 7.5;
      const double b = glyph_at(glyph, u, v);
      const float val = static_cast<float>(std::clamp((b - thr) * 4.0 + 0.5, 0.0, 1.0));
      for (int ch = 0; ch < kImageChannels; ++ch) out[ch * kPlane + y * kImageSize + x] = val;
    }
  }
}

LabeledSet empty_set(std::string name, int n, int classes, bool targets) {
  LabeledSet s;
  s.name = std::move(name);
  s.images = Tensor::zeros({n, kImageChannels, kImageSize, kImageSize});
  s.labels.assign(static_cast<std::size_t>(n), 0);
  if (targets) s.targets.assign(static_cast<std::size_t>(n), 0.0f);
  s.num_classes = classes;
  return s;
}

void gaussian_blur(std::span<float> img, int h, int w, double sigma) {
  const int r = static_cast<int>(std::ceil(3 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
  double z = 0;
  for (int i = -r; i <= r; ++i) z += k[static_cast<std::size_t>(i + r)] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= z;
  std::vector<float> tmp(static_cast<std::size_t>(h * w));
  for (int c = 0; c < kImageChannels; ++c) {
    float* p = img.data() + static_cast<std::size_t>(c * h * w);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        double acc = 0;
        for (int i = -r; i <= r; ++i) acc += k[static_cast<std::size_t>(i + r)] * p[y * w + std::clamp(x + i, 0, w - 1)];
        tmp[static_cast<std::size_t>(y * w + x)] = static_cast<float>(acc);
      }
    }
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        double acc = 0;
        for (int i = -r; i <= r; ++i) {
          acc += k[static_cast<std::size_t>(i + r)] * tmp[static_cast<std::size_t>(std::clamp(y + i, 0, h - 1) * w + x)];
        }
        p[y * w + x] = static_cast<float>(acc);
      }
    }
  }
}

void pixelate(std::span<float> img, int h, int w, int block) {
  for (int c = 0; c < kImageChannels; ++c) {
    float* p = img.data() + static_cast<std::size_t>(c * h * w);
    for (int by = 0; by < h; by += block) {
      for (int bx = 0; bx < w; bx += block) {
        const int ey = std::min(by + block, h), ex = std::min(bx + block, w);
        double acc = 0;
        for (int y = by; y < ey; ++y)
          for (int x = bx; x < ex; ++x) acc += p[y * w + x];
        const float m = static_cast<float>(acc / ((ey - by) * (ex - bx)));
        for (int y = by; y < ey; ++y)
          for (int x = bx; x < ex; ++x) p[y * w + x] = m;
      }
    }
  }
}

void write_raw(std::ofstream& out, const void* data, std::size_t bytes) {
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(bytes));
}

}  // namespace

std::string to_string(TaskKind kind) { return kind == TaskKind::classification ? "classification" : "regression"; }

TaskKind task_kind_from_string(const std::string& name) {
  if (name == "classification") return TaskKind::classification;
  if (name == "regression") return TaskKind::regression;
  throw std::invalid_argument("unknown task kind '" + name + "' (expected classification or regression)");
}

Batch LabeledSet::gather(std::span<const int> indices) const {
  const int n = static_cast<int>(indices.size());
  std::vector<float> img(static_cast<std::size_t>(n) * kImageNumel);
  Batch b;
  b.labels.resize(static_cast<std::size_t>(n));
  std::vector<float> tg(static_cast<std::size_t>(n), 0.0f);
  const auto src = images.data();
  for (int i = 0; i < n; ++i) {
    const int k = indices[static_cast<std::size_t>(i)];
    if (k < 0 || k >= size()) throw std::out_of_range("gather: index " + std::to_string(k) + " outside " + name);
    std::memcpy(img.data() + static_cast<std::size_t>(i) * kImageNumel, src.data() + static_cast<std::size_t>(k) * kImageNumel,
                kImageNumel * sizeof(float));
    b.labels[static_cast<std::size_t>(i)] = labels[static_cast<std::size_t>(k)];
    if (!targets.empty()) tg[static_cast<std::size_t>(i)] = targets[static_cast<std::size_t>(k)];
  }
  b.images = Tensor({n, kImageChannels, kImageSize, kImageSize}, std::move(img));
  b.targets = Tensor({n, 1}, std::move(tg));
  return b;
}

LabeledSet LabeledSet::subset(int begin, int end, std::string new_name) const {
  if (begin < 0 || end > size() || begin > end) throw std::out_of_range("subset: bad range for " + name);
  std::vector<int> idx(static_cast<std::size_t>(end - begin));
  for (int i = begin; i < end; ++i) idx[static_cast<std::size_t>(i - begin)] = i;
  auto b = gather(idx);
  LabeledSet s;
  s.name = std::move(new_name);
  s.images = b.images;
  s.labels = b.labels;
  if (!targets.empty()) s.targets.assign(targets.begin() + begin, targets.begin() + end);
  s.num_classes = num_classes;
  return s;
}

IdxError::IdxError(const std::string& path, std::uint64_t offset, const std::string& what)
    : std::runtime_error(path + ": byte offset " + std::to_string(offset) + ": " + what), offset_(offset) {}

LabeledSet load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
  const auto img = read_file(images_path);
  const auto lab = read_file(labels_path);
  const std::string ip = images_path.string(), lp = labels_path.string();

  if (img.size() < 4) throw IdxError(ip, img.size(), "truncated header");
  const std::uint32_t magic = be32(img, 0);
  if (magic != 0x00000803 && magic != 0x00000804) {
    throw IdxError(ip, 0, "bad magic: expected 0x00000803 (or 0x00000804), found " + hex32(magic));
  }
  const int ndim = magic == 0x00000803 ? 3 : 4;
  const std::size_t header = 4 + 4 * static_cast<std::size_t>(ndim);
  if (img.size() < header) throw IdxError(ip, img.size(), "truncated header, need " + std::to_string(header) + " bytes");
  const std::uint32_t n = be32(img, 4), h = be32(img, 8), w = be32(img, 12);
  const std::uint32_t depth = ndim == 4 ? be32(img, 16) : 1;
  if (ndim == 4 && depth != 3) throw IdxError(ip, 16, "colour images need 3 channels, found " + std::to_string(depth));
  if (h == 0 || w == 0) throw IdxError(ip, 8, "zero image size");
  const std::uint64_t per = std::uint64_t{h} * w * depth;
  if (img.size() < header + n * per) {
    throw IdxError(ip, img.size(), "truncated: " + std::to_string(n) + " images need " + std::to_string(header + n * per) +
                                       " bytes, file has " + std::to_string(img.size()));
  }

  if (lab.size() < 8) throw IdxError(lp, lab.size(), "truncated header");
  const std::uint32_t lmagic = be32(lab, 0);
  if (lmagic != 0x00000801) throw IdxError(lp, 0, "bad magic: expected 0x00000801, found " + hex32(lmagic));
  const std::uint32_t ln = be32(lab, 4);
  if (ln != n) throw IdxError(lp, 4, "count mismatch: " + std::to_string(ln) + " labels for " + std::to_string(n) + " images");
  if (lab.size() < 8 + std::uint64_t{n}) {
    throw IdxError(lp, lab.size(), "truncated: need " + std::to_string(8 + std::uint64_t{n}) + " bytes");
  }

  LabeledSet set = empty_set(images_path.filename().string(), static_cast<int>(n), 10, false);
  int max_label = 0;
  for (std::uint32_t i = 0; i < n; ++i) {
    set.labels[i] = lab[8 + i];
    max_label = std::max(max_label, set.labels[i]);
  }
  set.num_classes = std::max(10, max_label + 1);
  auto out = set.images.mutable_data();
  const bool pad = h <= kImageSize && w <= kImageSize;
  const int oy = pad ? (kImageSize - static_cast<int>(h)) / 2 : 0, ox = pad ? (kImageSize - static_cast<int>(w)) / 2 : 0;
  for (std::uint32_t i = 0; i < n; ++i) {
    const unsigned char* src = img.data() + header + i * per;
    float* dst = out.data() + static_cast<std::size_t>(i) * kImageNumel;
    for (int y = 0; y < kImageSize; ++y) {
      for (int x = 0; x < kImageSize; ++x) {
        int sy, sx;
        if (pad) {
          sy = y - oy;
          sx = x - ox;
          if (sy < 0 || sx < 0 || sy >= static_cast<int>(h) || sx >= static_cast<int>(w)) continue;
        } else {
          sy = static_cast<int>(static_cast<std::uint64_t>(y) * h / kImageSize);
          sx = static_cast<int>(static_cast<std::uint64_t>(x) * w / kImageSize);
        }
        for (int c = 0; c < kImageChannels; ++c) {
          const std::uint32_t ch = depth == 3 ? static_cast<std::uint32_t>(c) : 0;
          dst[c * kPlane + y * kImageSize + x] = src[(static_cast<std::uint64_t>(sy) * w + sx) * depth + ch] / 255.0f;
        }
      }
    }
  }
  return set;
}

void GlyphConfig::validate() const {
  if (num_classes < 1 || num_classes > 10) throw std::invalid_argument("glyphs: num_classes must be in [1, 10]");
  if (samples_per_class < 1) throw std::invalid_argument("glyphs: samples_per_class must be >= 1");
  if (stroke_jitter < 0 || stroke_jitter >= 0.45) throw std::invalid_argument("glyphs: stroke_jitter must be in [0, 0.45)");
  if (rotation_degrees < 0 || rotation_degrees > 90) throw std::invalid_argument("glyphs: rotation_degrees must be in [0, 90]");
  if (translation_pixels < 0 || translation_pixels > 8) throw std::invalid_argument("glyphs: translation_pixels must be in [0, 8]");
  if (scale_jitter < 0 || scale_jitter >= 0.5) throw std::invalid_argument("glyphs: scale_jitter must be in [0, 0.5)");
  if (!(regression_degrees > 0) || regression_degrees > 90) throw std::invalid_argument("glyphs: regression_degrees must be in (0, 90]");
}

nlohmann::json GlyphConfig::to_json() const {
  return {{"num_classes", num_classes},           {"samples_per_class", samples_per_class},
          {"stroke_jitter", stroke_jitter},       {"rotation_degrees", rotation_degrees},
          {"translation_pixels", translation_pixels}, {"scale_jitter", scale_jitter},
          {"seed", seed},                         {"task", to_string(task)},
          {"regression_degrees", regression_degrees}};
}

LabeledSet synth_glyph_range(const GlyphConfig& cfg, int begin, int end) {
  cfg.validate();
  if (begin < 0 || end < begin) throw std::invalid_argument("synth_glyphs: bad sample range");
  LabeledSet set = empty_set("glyphs", end - begin, cfg.num_classes, cfg.task == TaskKind::regression);
  if (set.targets.empty()) set.targets.assign(static_cast<std::size_t>(end - begin), 0.0f);
  auto out = set.images.mutable_data();
  parallel_for(end - begin, [&](int i) {
    float t = 0;
    render_glyph(cfg, begin + i, out.data() + static_cast<std::size_t>(i) * kImageNumel, set.labels[static_cast<std::size_t>(i)], t);
    set.targets[static_cast<std::size_t>(i)] = t;
  });
  if (cfg.task != TaskKind::regression) set.targets.clear();
  return set;
}

LabeledSet synth_glyphs(const GlyphConfig& cfg) { return synth_glyph_range(cfg, 0, cfg.num_classes * cfg.samples_per_class); }

std::string to_string(CorruptionKind kind) {
  switch (kind) {
    case CorruptionKind::gaussian_noise: return "gaussian_noise";
    case CorruptionKind::gaussian_blur: return "gaussian_blur";
    case CorruptionKind::invert_blend: return "invert_blend";
    case CorruptionKind::contrast: return "contrast";
    case CorruptionKind::brightness: return "brightness";
    case CorruptionKind::pixelate: return "pixelate";
    case CorruptionKind::background_texture: return "background_texture";
    case CorruptionKind::color_jitter: return "color_jitter";
  }
  return "?";
}

std::vector<CorruptionKind> all_corruptions() {
  return {CorruptionKind::gaussian_noise, CorruptionKind::gaussian_blur, CorruptionKind::invert_blend,
          CorruptionKind::contrast,       CorruptionKind::brightness,    CorruptionKind::pixelate,
          CorruptionKind::background_texture, CorruptionKind::color_jitter};
}

CorruptionKind corruption_from_string(const std::string& name) {
  for (auto k : all_corruptions()) {
    if (to_string(k) == name) return k;
  }
  throw std::invalid_argument("unknown corruption kind '" + name + "'");
}

void corrupt(std::span<float> image, int height, int width, CorruptionKind kind, int level, std::uint64_t seed) {
  if (level < 0 || level > kMaxSeverity) {
    throw std::invalid_argument("corrupt: level " + std::to_string(level) + " outside [0, " + std::to_string(kMaxSeverity) + "]");
  }
  if (image.size() != static_cast<std::size_t>(kImageChannels * height * width)) {
    throw ShapeError("corrupt: expected a 3×" + std::to_string(height) + "×" + std::to_string(width) + " image");
  }
  if (level == 0) return;
  const std::size_t li = static_cast<std::size_t>(level - 1);
  Rng rng(seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  switch (kind) {
    case CorruptionKind::gaussian_noise: {
      static constexpr double sigma[] = {0.04, 0.08, 0.12, 0.18, 0.26};
      std::normal_distribution<double> z(0.0, 1.0);
      for (auto& v : image) v = static_cast<float>(v + sigma[li] * z(rng));
      break;
    }
    case CorruptionKind::gaussian_blur: {
      static constexpr double sigma[] = {0.5, 0.8, 1.1, 1.5, 2.0};
      gaussian_blur(image, height, width, sigma[li]);
      break;
    }
    case CorruptionKind::invert_blend: {
      static constexpr double alpha[] = {0.6, 0.7, 0.8, 0.9, 1.0};
      for (auto& v : image) v = static_cast<float>((1 - alpha[li]) * v + alpha[li] * (1 - v));
      break;
    }
    case CorruptionKind::contrast: {
      static constexpr double c[] = {0.75, 0.6, 0.45, 0.3, 0.2};
      double m = 0;
      for (float v : image) m += v;
      m /= static_cast<double>(image.size());
      for (auto& v : image) v = static_cast<float>((v - m) * c[li] + m);
      break;
    }
    case CorruptionKind::brightness: {
      static constexpr double b[] = {0.1, 0.2, 0.3, 0.4, 0.5};
      for (auto& v : image) v = static_cast<float>(v + b[li]);
      break;
    }
    case CorruptionKind::pixelate: {
      static constexpr int block[] = {2, 3, 4, 5, 6};
      pixelate(image, height, width, block[li]);
      break;
    }
    case CorruptionKind::background_texture: {
      static constexpr double a[] = {0.2, 0.35, 0.5, 0.65, 0.8};
      const double two_pi = 2 * std::numbers::pi;
      for (int c = 0; c < kImageChannels; ++c) {
        const double fx = 1.5 + 1.5 * unit(rng), fy = 1.5 + 1.5 * unit(rng);
        const double gx = 3.0 + 2.0 * unit(rng), gy = 3.0 + 2.0 * unit(rng);
        const double p1 = std::numbers::pi * unit(rng), p2 = std::numbers::pi * unit(rng);
        float* p = image.data() + static_cast<std::size_t>(c * height * width);
        for (int y = 0; y < height; ++y) {
          for (int x = 0; x < width; ++x) {
            const double t = 0.5 + 0.25 * std::sin(two_pi * (fx * x / width + fy * y / height) + p1) +
                             0.25 * std::sin(two_pi * (gx * x / width - gy * y / height) + p2);
            float& v = p[y * width + x];
            v = static_cast<float>(v + (1 - v) * a[li] * t);
          }
        }
      }
      break;
    }
    case CorruptionKind::color_jitter: {
      static constexpr double s[] = {0.15, 0.3, 0.45, 0.6, 0.75};
      for (int c = 0; c < kImageChannels; ++c) {
        const double gain = 1 + s[li] * unit(rng), offset = 0.5 * s[li] * unit(rng);
        float* p = image.data() + static_cast<std::size_t>(c * height * width);
        for (int i = 0; i < height * width; ++i) p[i] = static_cast<float>(p[i] * gain + offset);
      }
      break;
    }
  }
  for (auto& v : image) v = std::clamp(v, 0.0f, 1.0f);
}

void DomainSpec::validate() const {
  if (name.empty()) throw std::invalid_argument("domain: name must not be empty");
  for (const auto& t : recipe) {
    if (t.level < 0 || t.level > kMaxSeverity) {
      throw std::invalid_argument("domain " + name + ": level " + std::to_string(t.level) + " outside [0, 5]");
    }
  }
}

nlohmann::json DomainSpec::to_json() const {
  nlohmann::json r = nlohmann::json::array();
  for (const auto& t : recipe) r.push_back({{"kind", to_string(t.kind)}, {"level", t.level}});
  return {{"name", name}, {"recipe", r}, {"seed", seed}};
}

void DomainSpec::apply(LabeledSet& set) const {
  validate();
  auto data = set.images.mutable_data();
  parallel_for(set.size(), [&](int i) {
    std::span<float> img(data.data() + static_cast<std::size_t>(i) * kImageNumel, kImageNumel);
    for (std::size_t k = 0; k < recipe.size(); ++k) {
      corrupt(img, kImageSize, kImageSize, recipe[k].kind, recipe[k].level,
              derive_seed(seed, {static_cast<std::uint64_t>(i), k}));
    }
  });
}

SuiteConfig SuiteConfig::desk_default(std::uint64_t seed) {
  SuiteConfig s;
  s.glyphs.seed = seed;
  const std::pair<const char*, CorruptionKind> targets[] = {
      {"noise_L3", CorruptionKind::gaussian_noise},
      {"blur_L3", CorruptionKind::gaussian_blur},
      {"invert_blend_L3", CorruptionKind::invert_blend},
      {"background_texture_L3", CorruptionKind::background_texture},
  };
  std::uint64_t k = 0;
  for (const auto& [name, kind] : targets) s.targets.push_back({name, {{kind, 3}}, derive_seed(seed, {0x7a, k++})});
  return s;
}

void SuiteConfig::validate() const {
  glyphs.validate();
  if (source_train < 1 || source_test < 1 || target_size < 1) throw std::invalid_argument("suite: set sizes must be >= 1");
  if (source_train + source_test > glyphs.num_classes * glyphs.samples_per_class) {
    throw std::invalid_argument("suite: source_train + source_test exceeds num_classes × samples_per_class");
  }
  if (targets.empty()) throw std::invalid_argument("suite: at least one target domain is required");
  for (const auto& t : targets) t.validate();
}

nlohmann::json SuiteConfig::to_json() const {
  nlohmann::json t = nlohmann::json::array();
  for (const auto& d : targets) t.push_back(d.to_json());
  return {{"glyphs", glyphs.to_json()},
          {"source_train", source_train},
          {"source_test", source_test},
          {"target_size", target_size},
          {"targets", t}};
}

DatasetSuite build_suite(const SuiteConfig& cfg) {
  cfg.validate();
  DatasetSuite suite;
  suite.task = cfg.glyphs.task;
  suite.num_classes = cfg.glyphs.num_classes;
  auto source = synth_glyph_range(cfg.glyphs, 0, cfg.source_train + cfg.source_test);
  suite.source_train = source.subset(0, cfg.source_train, "source_train");
  suite.source_test = source.subset(cfg.source_train, cfg.source_train + cfg.source_test, "source_test");
  for (std::size_t k = 0; k < cfg.targets.size(); ++k) {
    GlyphConfig g = cfg.glyphs;
    g.seed = derive_seed(cfg.glyphs.seed, {0x7461, k});
    auto set = synth_glyph_range(g, 0, cfg.target_size);
    set.name = cfg.targets[k].name;
    cfg.targets[k].apply(set);
    suite.targets.push_back(std::move(set));
  }
  return suite;
}

void save_suite(const std::filesystem::path& dir, const DatasetSuite& suite, const nlohmann::json& recipe) {
  std::vector<const LabeledSet*> sets{&suite.source_train, &suite.source_test};
  for (const auto& t : suite.targets) sets.push_back(&t);
  nlohmann::json order = nlohmann::json::array();
  for (const auto* s : sets) order.push_back(s->name);
  for (std::size_t i = 0; i < sets.size(); ++i) {
    const auto& s = *sets[i];
    const auto d = dir / s.name;
    std::filesystem::create_directories(d);
    std::ofstream bin(d / "data.bin", std::ios::binary);
    const auto img = s.images.data();
    write_raw(bin, img.data(), img.size_bytes());
    std::vector<std::int32_t> labels(s.labels.begin(), s.labels.end());
    write_raw(bin, labels.data(), labels.size() * sizeof(std::int32_t));
    write_raw(bin, s.targets.data(), s.targets.size() * sizeof(float));
    if (!bin) throw std::runtime_error("cannot write " + (d / "data.bin").string());
    nlohmann::json meta = {{"name", s.name},
                           {"count", s.size()},
                           {"num_classes", s.num_classes},
                           {"image_shape", {kImageChannels, kImageSize, kImageSize}},
                           {"has_targets", !s.targets.empty()},
                           {"role", i == 0 ? "source_train" : i == 1 ? "source_test" : "target"},
                           {"task", to_string(suite.task)},
                           {"domains", order},
                           {"recipe", recipe}};
    std::ofstream(d / "meta.json") << meta.dump(2) << '\n';
  }
}

bool load_suite(const std::filesystem::path& dir, const nlohmann::json& recipe, DatasetSuite& out) {
  auto read_set = [&](const std::string& name, LabeledSet& s, nlohmann::json& meta) {
    const auto d = dir / name;
    std::ifstream mj(d / "meta.json");
    if (!mj) return false;
    try {
      meta = nlohmann::json::parse(mj);
    } catch (const nlohmann::json::exception&) {
      return false;
    }
    if (meta.value("recipe", nlohmann::json()) != recipe) return false;
    const int n = meta.at("count").get<int>();
    const bool has_targets = meta.at("has_targets").get<bool>();
    std::ifstream bin(d / "data.bin", std::ios::binary);
    if (!bin) return false;
    s = empty_set(name, n, meta.at("num_classes").get<int>(), has_targets);
    auto img = s.images.mutable_data();
    bin.read(reinterpret_cast<char*>(img.data()), static_cast<std::streamsize>(img.size_bytes()));
    std::vector<std::int32_t> labels(static_cast<std::size_t>(n));
    bin.read(reinterpret_cast<char*>(labels.data()), static_cast<std::streamsize>(labels.size() * sizeof(std::int32_t)));
    s.labels.assign(labels.begin(), labels.end());
    if (has_targets) bin.read(reinterpret_cast<char*>(s.targets.data()), static_cast<std::streamsize>(s.targets.size() * sizeof(float)));
    return static_cast<bool>(bin);
  };
  DatasetSuite suite;
  nlohmann::json meta;
  if (!read_set("source_train", suite.source_train, meta)) return false;
  suite.task = task_kind_from_string(meta.at("task").get<std::string>());
  suite.num_classes = suite.source_train.num_classes;
  const auto domains = meta.at("domains").get<std::vector<std::string>>();
  if (!read_set("source_test", suite.source_test, meta)) return false;
  for (std::size_t i = 2; i < domains.size(); ++i) {
    LabeledSet t;
    if (!read_set(domains[i], t, meta)) return false;
    suite.targets.push_back(std::move(t));
  }
  out = std::move(suite);
  return true;
}

std::vector<std::vector<int>> iterate_batches(int n, int batch_size, std::uint64_t epoch_seed) {
  if (batch_size < 1) throw std::invalid_argument("iterate_batches: batch size must be >= 1");
  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  Rng rng(epoch_seed);
  for (int i = n - 1; i > 0; --i) {
    const auto j = static_cast<int>(rng() % static_cast<std::uint64_t>(i + 1));
    std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
  }
  std::vector<std::vector<int>> batches;
  for (int b = 0; b < n; b += batch_size) {
    batches.emplace_back(order.begin() + b, order.begin() + std::min(n, b + batch_size));
  }
  return batches;
}

int worker_threads() {
  if (const char* env = std::getenv("STYDESTY_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v >= 1) return static_cast<int>(std::min(v, 256L));
  }
  return static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
}

}  // namespace stydesty
