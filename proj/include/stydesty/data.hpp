#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "stydesty/tensor.hpp"

namespace stydesty {

inline constexpr int kImageChannels = 3;
inline constexpr int kImageSize = 32;

enum class TaskKind { classification, regression };

std::string to_string(TaskKind kind);
TaskKind task_kind_from_string(const std::string& name);

struct Batch {
  Tensor images;            // N×3×32×32 in [0, 1]
  std::vector<int> labels;  // class ids
  Tensor targets;           // N×1 regression targets
  int size() const { return images.defined() ? images.dim(0) : 0; }
};

/// Images stored as one N×3×32×32 float tensor. `labels` always holds class
/// ids; `targets` is filled for regression suites.
struct LabeledSet {
  std::string name;
  Tensor images;
  std::vector<int> labels;
  std::vector<float> targets;
  int num_classes = 10;

  int size() const { return static_cast<int>(labels.size()); }
  Batch gather(std::span<const int> indices) const;
  LabeledSet subset(int begin, int end, std::string new_name) const;
};

/// Malformed IDX input. `offset` is the byte position of the fault.
class IdxError : public std::runtime_error {
 public:
  IdxError(const std::string& path, std::uint64_t offset, const std::string& what);
  std::uint64_t offset() const { return offset_; }

 private:
  std::uint64_t offset_;
};

/// Reads an IDX image file (magic 0x00000803, N×H×W grey, or 0x00000804,
/// N×H×W×3 colour) and its label file (0x00000801). Images are zero-padded
/// (or nearest-resampled when larger) to 32×32, replicated to 3 channels and
/// scaled to [0, 1].
LabeledSet load_idx(const std::filesystem::path& images, const std::filesystem::path& labels);

struct GlyphConfig {
  int num_classes = 10;
  int samples_per_class = 600;
  double stroke_jitter = 0.15;      // threshold spread; larger → thicker/thinner strokes
  double rotation_degrees = 12.0;   // uniform in ±
  double translation_pixels = 2.5;  // uniform in ±, per axis
  double scale_jitter = 0.1;        // uniform in 1 ±
  std::uint64_t seed = 1;
  /// Regression suites draw the rotation from ±regression_degrees and store
  /// angle/regression_degrees as the target.
  TaskKind task = TaskKind::classification;
  double regression_degrees = 45.0;

  void validate() const;
  nlohmann::json to_json() const;
};

/// Renders digits from the embedded 16×16 font with seeded affine and stroke
/// jitter. Sample i has class i mod num_classes and depends only on
/// (seed, i).
LabeledSet synth_glyphs(const GlyphConfig& cfg);
/// Renders samples [begin, end) of the sequence synth_glyphs would produce.
LabeledSet synth_glyph_range(const GlyphConfig& cfg, int begin, int end);

enum class CorruptionKind {
  gaussian_noise,
  gaussian_blur,
  invert_blend,
  contrast,
  brightness,
  pixelate,
  background_texture,
  color_jitter,
};

std::string to_string(CorruptionKind kind);
CorruptionKind corruption_from_string(const std::string& name);
std::vector<CorruptionKind> all_corruptions();

inline constexpr int kMaxSeverity = 5;

/// Corrupts one 3×H×W image in place. Level 0 is the identity; output is
/// clamped to [0, 1].
void corrupt(std::span<float> image, int height, int width, CorruptionKind kind, int level, std::uint64_t seed);

struct Transform {
  CorruptionKind kind;
  int level = 3;
};

struct DomainSpec {
  std::string name;
  std::vector<Transform> recipe;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  /// Applies the recipe to every image of `set` (sample i seeded by
  /// (seed, i)).
  void apply(LabeledSet& set) const;
};

struct SuiteConfig {
  GlyphConfig glyphs;
  int source_train = 5000;
  int source_test = 1000;
  int target_size = 1000;
  std::vector<DomainSpec> targets;

  /// Clean source; noise, blur, invert-blend and background-texture targets
  /// at level 3.
  static SuiteConfig desk_default(std::uint64_t seed = 1);
  void validate() const;
  nlohmann::json to_json() const;
};

struct DatasetSuite {
  LabeledSet source_train;
  LabeledSet source_test;
  std::vector<LabeledSet> targets;
  TaskKind task = TaskKind::classification;
  int num_classes = 10;
};

DatasetSuite build_suite(const SuiteConfig& cfg);

/// Cache layout: <dir>/<domain>/{data.bin, meta.json}. load returns false
/// when the cache is absent or was written for a different recipe.
void save_suite(const std::filesystem::path& dir, const DatasetSuite& suite, const nlohmann::json& recipe);
bool load_suite(const std::filesystem::path& dir, const nlohmann::json& recipe, DatasetSuite& out);

/// Seeded shuffle of [0, n) cut into batches; the last partial batch is kept.
std::vector<std::vector<int>> iterate_batches(int n, int batch_size, std::uint64_t epoch_seed);

/// Worker count: STYDESTY_THREADS if set (≥ 1), else hardware concurrency.
int worker_threads();

}  // namespace stydesty
