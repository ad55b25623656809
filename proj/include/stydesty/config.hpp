#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

#include "json.hpp"
#include "stydesty/backbone.hpp"
#include "stydesty/data.hpp"
#include "stydesty/objectives.hpp"
#include "stydesty/optimizer.hpp"
#include "stydesty/stylizer.hpp"

namespace stydesty {

/// Invalid configuration. The message names the offending field.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class DataSource { synthetic, idx };

struct TrainConfig {
  std::uint64_t seed = 0;
  TaskKind task = TaskKind::classification;

  int batch_size = 64;
  int epochs = 30;
  /// Caps formal-stage outer iterations; 0 means epochs decide.
  int max_iters = 0;
  int t_p = 1, t_g = 1, t_f = 1, t_h = 10;
  double lr_f = 0.001, lr_h = 0.001, lr_g = 0.005, lr_p = 0.001, lr_q = 0.001;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  bool nesterov = true;
  bool resample_codecs = true;
  /// Split position used when the NAS stage is skipped (no_destyle).
  int default_position = 2;

  LossConfig loss;
  int rbf_features = 1024;

  double tau = 1.0;
  int nas_max_iters = 5000;
  int nas_check_every = 100;
  int nas_patience = 3;

  StylizerConfig stylizer;

  DataSource source = DataSource::synthetic;
  SuiteConfig suite = SuiteConfig::desk_default();
  std::string idx_dir;         // train-/t10k-{images,labels} IDX files
  std::string idx_target_dir;  // t10k-{images,labels} of the shifted domain
  std::string cache_dir;       // optional suite cache

  void validate() const;
  BackboneSpec backbone_spec() const;
  SgdOptions sgd(double lr, bool decay) const;
  nlohmann::json to_json() const;
  /// FNV-1a 64 of the canonical JSON, as 16 hex digits.
  std::string hash() const;
};

/// Parses TOML. Unknown keys and wrongly typed values are errors.
TrainConfig parse_config(const std::string& toml_text, const std::string& source_name = "config");
TrainConfig load_config(const std::filesystem::path& path);

/// Builds (or loads from cfg.cache_dir) the dataset suite the config names.
DatasetSuite make_suite(const TrainConfig& cfg);

}  // namespace stydesty
