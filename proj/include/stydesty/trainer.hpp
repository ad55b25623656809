#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "stydesty/backbone.hpp"
#include "stydesty/config.hpp"
#include "stydesty/data.hpp"
#include "stydesty/objectives.hpp"
#include "stydesty/stylizer.hpp"
#include "stydesty/supernet.hpp"

namespace stydesty {

/// A non-finite loss or gradient stopped training.
class TrainingAbort : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Stage { P, F, H, G };
char stage_letter(Stage s);

/// Called around every optimizer step; `after` is false before the step's
/// forward pass and true once its update is applied.
using StageHook = std::function<void(int iteration, Stage stage, bool after)>;

struct NASResult {
  int selected = 0;
  std::vector<float> pi;
  NASHistory history;
  std::vector<int> switches;  // checkpoint iterations at which argmax π changed
  int iterations = 0;
  bool converged = false;
  bool skipped = false;  // no NAS stage ran (no_destyle)
  nlohmann::json to_json() const;
};

struct RunHooks {
  StageHook on_step;
  std::function<void(int epoch)> on_epoch;
  LossLog* log = nullptr;
};

/// Algorithm 1, NAS stage. Stops when the argmax of π is unchanged over
/// `patience` checkpoints or at the iteration budget.
NASResult run_nas_stage(const DatasetSuite& suite, Supernet& net, Stylizer& g, const TrainConfig& cfg,
                        const RunHooks& hooks = {});

struct FormalState {
  SplitModel& model;
  Stylizer& stylizer;
  Perceptor* perceptor = nullptr;  // required for the variational metric
};

/// Algorithm 1, formal stage. Every outer iteration runs exactly
/// [F × T_F, H × T_H, G × T_G]; `trace` receives the stage letters of the last
/// iteration. Returns the number of outer iterations run.
int run_formal_stage(const DatasetSuite& suite, FormalState& state, const TrainConfig& cfg, const RunHooks& hooks = {},
                     std::string* trace = nullptr);

struct EvalEntry {
  std::string name;
  double metric = 0;  // accuracy or mean squared error
  int samples = 0;
};

struct EvalReport {
  std::string config_hash;
  std::uint64_t seed = 0;
  int selected_position = 0;
  TaskKind task = TaskKind::classification;
  std::vector<EvalEntry> domains;  // source test split first, then targets
  double average = 0;              // over targets only
  std::vector<std::string> ablations;
  nlohmann::json to_json() const;
  std::string metric_name() const { return task == TaskKind::classification ? "accuracy" : "mse"; }
};

/// F (with its AdaIN) then H on raw images; no stylizer, no parameter writes.
EvalEntry evaluate(const SplitModel& model, const LabeledSet& set, TaskKind task);
EvalReport evaluate_suite(const SplitModel& model, const DatasetSuite& suite, const TrainConfig& cfg, int position);

/// Everything a finished run leaves behind.
struct RunArtifacts {
  NASResult nas;
  EvalReport report;
  std::optional<SplitModel> model;
  std::optional<Stylizer> stylizer;
  std::map<std::string, std::string> files;  // role → path
  int formal_iterations = 0;
};

struct RunOptions {
  std::filesystem::path out_dir;  // empty: nothing written
  RunHooks hooks;
  bool nas_only = false;
};

/// NAS → split → formal stage → evaluation, persisting report.json,
/// nas.json, train_log.csv and checkpoints F/H/G under out_dir.
RunArtifacts train(const TrainConfig& cfg, const DatasetSuite& suite, const RunOptions& options = {});

/// Fresh model for a backbone spec and split position (AdaIN at identity).
SplitModel make_split_model(const TrainConfig& cfg, int position, std::uint64_t seed);

void save_run_checkpoints(const std::filesystem::path& dir, const TrainConfig& cfg, const SplitModel& model,
                          const Stylizer& g, std::map<std::string, std::string>* files = nullptr);
/// Rebuilds F and H from <dir>/F and <dir>/H; throws ConfigError when the
/// stored backbone differs from the config's.
SplitModel load_split_model(const std::filesystem::path& dir, const TrainConfig& cfg);
Stylizer load_stylizer(const std::filesystem::path& dir);

}  // namespace stydesty
