#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "stydesty/tensor.hpp"

namespace stydesty {

enum class StyleMode { local, global };

std::string to_string(StyleMode mode);
StyleMode style_mode_from_string(const std::string& name);

struct StyleBlockConfig {
  StyleMode mode = StyleMode::global;
  int channels = 3;
  int kernel = 3;  // odd; codecs use stride 1 and "same" padding
};

struct StylizerConfig {
  int in_channels = 3;
  int height = 32;
  int width = 32;
  std::vector<StyleBlockConfig> blocks{{StyleMode::local, 3, 3}, {StyleMode::global, 3, 3}};
  bool resample_each_iteration = true;

  void validate() const;
  nlohmann::json to_json() const;
};

/// enc: conv c×C×k×k; dec: conv_transpose with the same layout, mapping the c
/// channels back to C. mu/sigma are c×H×W (local) or c×1×1 (global).
struct StyleBlock {
  StyleBlockConfig config;
  Tensor enc;
  Tensor dec;
  Parameter mu;
  Parameter sigma;
};

/// The generator G. Only the affine parameters are persistent and trainable;
/// the codec kernels are redrawn by resample_codecs.
class Stylizer {
 public:
  Stylizer(StylizerConfig config, std::uint64_t seed);
  Stylizer(Stylizer&&) = default;
  Stylizer& operator=(Stylizer&&) = default;
  Stylizer(const Stylizer&) = delete;
  Stylizer& operator=(const Stylizer&) = delete;

  const StylizerConfig& config() const { return config_; }
  int num_blocks() const { return static_cast<int>(blocks_.size()); }
  const StyleBlock& block(int j) const { return blocks_[static_cast<std::size_t>(j)]; }
  StyleBlock& block(int j) { return blocks_[static_cast<std::size_t>(j)]; }

  void resample_codecs(std::uint64_t seed);

  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;

  /// sigmoid(Σ_j w_j x̂_j / Σ_j w_j) with x̂_j = dec_j(σ_j ⊙ IN(enc_j(x)) + μ_j).
  /// Throws std::invalid_argument when |Σ w| < 0.1.
  Tensor stylize(const Binding& bind, const Tensor& x, std::span<const double> w) const;

 private:
  StylizerConfig config_;
  std::vector<StyleBlock> blocks_;
};

inline constexpr double kMinMixSum = 0.1;

/// B i.i.d. standard normal draws, redrawn while |Σ w| < 0.1.
std::vector<double> sample_mix_weights(int blocks, std::uint64_t seed);

/// Binary 8-bit PPM of image `index` of an N×3×H×W batch in [0, 1].
void write_ppm(const std::filesystem::path& path, const Tensor& images, int index);

}  // namespace stydesty
