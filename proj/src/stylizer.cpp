#include "stydesty/stylizer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <stdexcept>

#include "stydesty/ops.hpp"
#include "stydesty/rng.hpp"

namespace stydesty {
namespace {

Tensor fan_in_normal(Shape shape, int fan_in, Rng& rng) {
  std::normal_distribution<float> dist(0.0f, static_cast<float>(std::sqrt(2.0 / fan_in)));
  std::vector<float> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& e : v) e = dist(rng);
  return Tensor(std::move(shape), std::move(v));
}

}  // namespace

std::string to_string(StyleMode mode) { return mode == StyleMode::local ? "local" : "global"; }

StyleMode style_mode_from_string(const std::string& name) {
  if (name == "local") return StyleMode::local;
  if (name == "global") return StyleMode::global;
  throw std::invalid_argument("unknown style block mode '" + name + "' (expected local or global)");
}

void StylizerConfig::validate() const {
  if (in_channels < 1 || height < 1 || width < 1) throw std::invalid_argument("stylizer: input geometry must be positive");
  if (blocks.empty()) throw std::invalid_argument("stylizer: at least one block is required");
  for (std::size_t j = 0; j < blocks.size(); ++j) {
    const auto& b = blocks[j];
    const std::string where = "stylizer block " + std::to_string(j);
    if (b.channels < 1) throw std::invalid_argument(where + ": channels must be >= 1");
    if (b.kernel < 1 || b.kernel % 2 == 0) {
      throw std::invalid_argument(where + ": kernel " + std::to_string(b.kernel) +
                                  " must be odd so the codec preserves the spatial size");
    }
    if (b.kernel / 2 >= height || b.kernel / 2 >= width) {
      throw std::invalid_argument(where + ": kernel " + std::to_string(b.kernel) + " too large for " +
                                  std::to_string(height) + "x" + std::to_string(width));
    }
  }
}

nlohmann::json StylizerConfig::to_json() const {
  nlohmann::json b = nlohmann::json::array();
  for (const auto& blk : blocks) b.push_back({{"mode", to_string(blk.mode)}, {"channels", blk.channels}, {"kernel", blk.kernel}});
  return {{"input", {in_channels, height, width}}, {"blocks", b}, {"resample_each_iteration", resample_each_iteration}};
}

Stylizer::Stylizer(StylizerConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  for (std::size_t j = 0; j < config_.blocks.size(); ++j) {
    const auto& c = config_.blocks[j];
    Shape affine = c.mode == StyleMode::local ? Shape{c.channels, config_.height, config_.width} : Shape{c.channels, 1, 1};
    const std::string prefix = "block" + std::to_string(j);
    blocks_.push_back({c, Tensor(), Tensor(), Parameter{prefix + ".mu", Tensor::zeros(affine), false},
                       Parameter{prefix + ".sigma", Tensor::full(affine, 1.0f), false}});
  }
  resample_codecs(seed);
}

void Stylizer::resample_codecs(std::uint64_t seed) {
  Rng rng(seed);
  for (auto& b : blocks_) {
    const int c = b.config.channels, k = b.config.kernel, cin = config_.in_channels;
    b.enc = fan_in_normal({c, cin, k, k}, cin * k * k, rng);
    b.dec = fan_in_normal({c, cin, k, k}, c * k * k, rng);
  }
}

std::vector<Parameter*> Stylizer::parameters() {
  std::vector<Parameter*> out;
  for (auto& b : blocks_) {
    out.push_back(&b.mu);
    out.push_back(&b.sigma);
  }
  return out;
}

std::vector<const Parameter*> Stylizer::parameters() const {
  std::vector<const Parameter*> out;
  for (const auto& b : blocks_) {
    out.push_back(&b.mu);
    out.push_back(&b.sigma);
  }
  return out;
}

Tensor Stylizer::stylize(const Binding& bind, const Tensor& x, std::span<const double> w) const {
  if (static_cast<int>(w.size()) != num_blocks()) {
    throw std::invalid_argument("stylize: " + std::to_string(w.size()) + " mix weights for " +
                                std::to_string(num_blocks()) + " blocks");
  }
  double total = 0;
  for (double v : w) total += v;
  if (!(std::abs(total) >= kMinMixSum)) {
    throw std::invalid_argument("stylize: degenerate mix weight sum " + std::to_string(total));
  }
  if (x.rank() != 4 || x.dim(1) != config_.in_channels || x.dim(2) != config_.height || x.dim(3) != config_.width) {
    throw ShapeError("stylize: expected N×" + std::to_string(config_.in_channels) + "×" + std::to_string(config_.height) +
                     "×" + std::to_string(config_.width) + " images, got " + shape_str(x.shape()));
  }
  Tensor mix;
  for (int j = 0; j < num_blocks(); ++j) {
    const auto& b = blocks_[static_cast<std::size_t>(j)];
    const int pad = b.config.kernel / 2;
    auto f = conv2d(x, b.enc, 1, pad);
    auto stats = instance_stats(f);
    auto hat = normalize_affine(f, stats.mean, stats.std, bind(b.sigma), bind(b.mu));
    auto xj = scale(conv_transpose2d(hat, b.dec, 1, pad), w[static_cast<std::size_t>(j)] / total);
    mix = mix.defined() ? add(mix, xj) : xj;
  }
  return sigmoid(mix);
}

std::vector<double> sample_mix_weights(int blocks, std::uint64_t seed) {
  if (blocks < 1) throw std::invalid_argument("sample_mix_weights: need at least one block");
  Rng rng(seed);
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<double> w(static_cast<std::size_t>(blocks));
  for (;;) {
    double total = 0;
    for (auto& v : w) total += (v = dist(rng));
    if (std::abs(total) >= kMinMixSum) return w;
  }
}

void write_ppm(const std::filesystem::path& path, const Tensor& images, int index) {
  if (images.rank() != 4 || images.dim(1) != 3) throw ShapeError("write_ppm: need N×3×H×W, got " + shape_str(images.shape()));
  if (index < 0 || index >= images.dim(0)) throw std::out_of_range("write_ppm: image index out of range");
  const int h = images.dim(2), w = images.dim(3);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "P6\n" << w << ' ' << h << "\n255\n";
  const auto data = images.data();
  const std::size_t base = static_cast<std::size_t>(index) * 3 * h * w;
  std::vector<unsigned char> row(static_cast<std::size_t>(3 * w));
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) {
        const float v = std::clamp(data[base + static_cast<std::size_t>((c * h + y) * w + x)], 0.0f, 1.0f);
        row[static_cast<std::size_t>(3 * x + c)] = static_cast<unsigned char>(std::lround(v * 255.0f));
      }
    }
    out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!out) throw std::runtime_error("short write to " + path.string());
}

}  // namespace stydesty
