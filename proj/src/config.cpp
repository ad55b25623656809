#include "stydesty/config.hpp"

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "stydesty/rng.hpp"
#include "toml.hpp"

namespace stydesty {
namespace {

std::string type_name(const toml::node& n) {
  switch (n.type()) {
    case toml::node_type::table: return "table";
    case toml::node_type::array: return "array";
    case toml::node_type::string: return "string";
    case toml::node_type::integer: return "integer";
    case toml::node_type::floating_point: return "float";
    case toml::node_type::boolean: return "boolean";
    default: return "date/time";
  }
}

// One TOML table being consumed; finish() rejects keys nobody asked for.
class Section {
 public:
  Section(const toml::table& t, std::string path) : t_(t), path_(std::move(path)) {}

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const toml::node* find(const std::string& key) {
    used_.insert(key);
    return t_.get(key);
  }

  void get(const std::string& key, int& out) {
    if (auto* n = find(key)) {
      auto v = n->value_exact<std::int64_t>();
      if (!v) fail(key, "expected integer, got " + type_name(*n));
      if (*v < INT32_MIN || *v > INT32_MAX) fail(key, "integer out of range");
      out = static_cast<int>(*v);
    }
  }
  void get(const std::string& key, std::uint64_t& out) {
    if (auto* n = find(key)) {
      auto v = n->value_exact<std::int64_t>();
      if (!v) fail(key, "expected integer, got " + type_name(*n));
      if (*v < 0) fail(key, "must be non-negative");
      out = static_cast<std::uint64_t>(*v);
    }
  }
  void get(const std::string& key, double& out) {
    if (auto* n = find(key)) {
      if (n->is_integer()) {
        out = static_cast<double>(*n->value_exact<std::int64_t>());
      } else if (n->is_floating_point()) {
        out = *n->value_exact<double>();
      } else {
        fail(key, "expected number, got " + type_name(*n));
      }
    }
  }
  void get(const std::string& key, bool& out) {
    if (auto* n = find(key)) {
      auto v = n->value_exact<bool>();
      if (!v) fail(key, "expected boolean, got " + type_name(*n));
      out = *v;
    }
  }
  void get(const std::string& key, std::string& out) {
    if (auto* n = find(key)) {
      auto v = n->value_exact<std::string>();
      if (!v) fail(key, "expected string, got " + type_name(*n));
      out = *v;
    }
  }
  template <typename Enum, typename Parse>
  void get_enum(const std::string& key, Enum& out, Parse parse) {
    std::string s;
    if (!t_.contains(key)) {
      used_.insert(key);
      return;
    }
    get(key, s);
    try {
      out = parse(s);
    } catch (const std::invalid_argument& e) {
      fail(key, e.what());
    }
  }

  const toml::table* table(const std::string& key) {
    auto* n = find(key);
    if (!n) return nullptr;
    if (!n->is_table()) fail(key, "expected table, got " + type_name(*n));
    return n->as_table();
  }
  const toml::array* array(const std::string& key) {
    auto* n = find(key);
    if (!n) return nullptr;
    if (!n->is_array()) fail(key, "expected array, got " + type_name(*n));
    return n->as_array();
  }

  void finish() const {
    for (auto&& [k, v] : t_) {
      const std::string key(k.str());
      if (!used_.count(key)) throw ConfigError("unknown key '" + field(key) + "'");
    }
  }

  [[noreturn]] void fail(const std::string& key, const std::string& what) const {
    throw ConfigError(field(key) + ": " + what);
  }

 private:
  const toml::table& t_;
  std::string path_;
  std::set<std::string> used_;
};

const toml::table& as_table_entry(const toml::node& n, const std::string& where) {
  if (!n.is_table()) throw ConfigError(where + ": expected table, got " + type_name(n));
  return *n.as_table();
}

std::string idx_name(const std::string& where, std::size_t i) { return where + "[" + std::to_string(i) + "]"; }

// Targets without an explicit seed get the same derived seed the built-in
// suite uses for that slot.
void parse_targets(const toml::array& arr, std::vector<DomainSpec>& out, std::uint64_t suite_seed) {
  out.clear();
  for (std::size_t i = 0; i < arr.size(); ++i) {
    const std::string where = idx_name("data.targets", i);
    Section s(as_table_entry(*arr.get(i), where), where);
    DomainSpec d;
    d.seed = derive_seed(suite_seed, {0x7a, i});
    s.get("name", d.name);
    s.get("seed", d.seed);
    if (auto* recipe = s.array("recipe")) {
      for (std::size_t j = 0; j < recipe->size(); ++j) {
        const std::string rw = idx_name(where + ".recipe", j);
        Section r(as_table_entry(*recipe->get(j), rw), rw);
        Transform t{CorruptionKind::gaussian_noise, 3};
        std::string kind;
        r.get("kind", kind);
        if (kind.empty()) r.fail("kind", "required");
        try {
          t.kind = corruption_from_string(kind);
        } catch (const std::invalid_argument& e) {
          r.fail("kind", e.what());
        }
        r.get("level", t.level);
        r.finish();
        d.recipe.push_back(t);
      }
    }
    s.finish();
    out.push_back(std::move(d));
  }
}

void parse_blocks(const toml::array& arr, std::vector<StyleBlockConfig>& out) {
  out.clear();
  for (std::size_t i = 0; i < arr.size(); ++i) {
    const std::string where = idx_name("stylizer.blocks", i);
    Section s(as_table_entry(*arr.get(i), where), where);
    StyleBlockConfig b;
    s.get_enum("mode", b.mode, style_mode_from_string);
    s.get("channels", b.channels);
    s.get("kernel", b.kernel);
    s.finish();
    out.push_back(b);
  }
}

}  // namespace

void TrainConfig::validate() const {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError(what);
  };
  need(batch_size >= 1, "train.batch_size: must be >= 1");
  need(epochs >= 0, "train.epochs: must be >= 0");
  need(max_iters >= 0, "train.max_iters: must be >= 0");
  need(t_p >= 1, "train.t_p: must be >= 1");
  need(t_f >= 0 && t_h >= 0 && t_g >= 0, "train: stage counts must be >= 0");
  for (auto [v, name] : {std::pair{lr_f, "lr_f"}, {lr_h, "lr_h"}, {lr_g, "lr_g"}, {lr_p, "lr_p"}, {lr_q, "lr_q"}}) {
    need(v > 0, std::string("train.") + name + ": must be > 0");
  }
  need(momentum >= 0 && momentum < 1, "train.momentum: must be in [0, 1)");
  need(weight_decay >= 0, "train.weight_decay: must be >= 0");
  try {
    loss.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  need(rbf_features >= 1, "loss.rbf_features: must be >= 1");
  need(tau > 0, "nas.tau: must be > 0");
  need(nas_max_iters >= 0, "nas.max_iters: must be >= 0");
  need(nas_check_every >= 1, "nas.check_every: must be >= 1");
  need(nas_patience >= 1, "nas.patience: must be >= 1");
  try {
    stylizer.validate();
    if (source == DataSource::synthetic) suite.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  need(source == DataSource::synthetic || !idx_dir.empty(), "data.idx_dir: required when data.source = \"idx\"");
  need(source == DataSource::synthetic || !idx_target_dir.empty(), "data.idx_target_dir: required when data.source = \"idx\"");
  need(source == DataSource::synthetic || task == TaskKind::classification, "data.source: idx data supports classification only");
  const auto spec = backbone_spec();
  need(default_position >= 0 && default_position < spec.num_candidates(),
       "train.default_position: must be in [0, " + std::to_string(spec.num_candidates()) + ")");
}

BackboneSpec TrainConfig::backbone_spec() const {
  return BackboneSpec::lenet(task == TaskKind::classification ? suite.glyphs.num_classes : 1);
}

SgdOptions TrainConfig::sgd(double lr, bool decay) const {
  return {lr, momentum, decay ? weight_decay : 0.0, nesterov};
}

nlohmann::json TrainConfig::to_json() const {
  return {{"seed", seed},
          {"task", to_string(task)},
          {"train",
           {{"batch_size", batch_size},
            {"epochs", epochs},
            {"max_iters", max_iters},
            {"t_p", t_p},
            {"t_g", t_g},
            {"t_f", t_f},
            {"t_h", t_h},
            {"lr_f", lr_f},
            {"lr_h", lr_h},
            {"lr_g", lr_g},
            {"lr_p", lr_p},
            {"lr_q", lr_q},
            {"momentum", momentum},
            {"weight_decay", weight_decay},
            {"nesterov", nesterov},
            {"resample_codecs", resample_codecs},
            {"default_position", default_position}}},
          {"loss",
           {{"alpha", loss.alpha},
            {"beta", loss.beta},
            {"lambda", loss.lambda},
            {"perceptual", to_string(loss.perceptual)},
            {"kernel", to_string(loss.kernel)},
            {"rbf_features", rbf_features},
            {"ablations", loss.ablations.names()}}},
          {"nas", {{"tau", tau}, {"max_iters", nas_max_iters}, {"check_every", nas_check_every}, {"patience", nas_patience}}},
          {"stylizer", stylizer.to_json()},
          {"data",
           {{"source", source == DataSource::synthetic ? "synthetic" : "idx"},
            {"suite", suite.to_json()},
            {"idx_dir", idx_dir},
            {"idx_target_dir", idx_target_dir}}}};
}

std::string TrainConfig::hash() const {
  const std::string canon = to_json().dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : canon) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

TrainConfig parse_config(const std::string& text, const std::string& source_name) {
  toml::table root;
  try {
    root = toml::parse(text, source_name);
  } catch (const toml::parse_error& e) {
    std::ostringstream msg;
    msg << source_name << ":" << e.source().begin.line << ":" << e.source().begin.column << ": " << e.description();
    throw ConfigError(msg.str());
  }

  TrainConfig c;
  Section top(root, "");
  top.get("seed", c.seed);
  top.get_enum("task", c.task, task_kind_from_string);

  if (auto* t = top.table("train")) {
    Section s(*t, "train");
    s.get("batch_size", c.batch_size);
    s.get("epochs", c.epochs);
    s.get("max_iters", c.max_iters);
    s.get("t_p", c.t_p);
    s.get("t_g", c.t_g);
    s.get("t_f", c.t_f);
    s.get("t_h", c.t_h);
    s.get("lr_f", c.lr_f);
    s.get("lr_h", c.lr_h);
    s.get("lr_g", c.lr_g);
    s.get("lr_p", c.lr_p);
    s.get("lr_q", c.lr_q);
    s.get("momentum", c.momentum);
    s.get("weight_decay", c.weight_decay);
    s.get("nesterov", c.nesterov);
    s.get("resample_codecs", c.resample_codecs);
    s.get("default_position", c.default_position);
    s.finish();
  }
  if (auto* t = top.table("loss")) {
    Section s(*t, "loss");
    s.get("alpha", c.loss.alpha);
    s.get("beta", c.loss.beta);
    s.get("lambda", c.loss.lambda);
    s.get_enum("perceptual", c.loss.perceptual, perceptual_metric_from_string);
    s.get_enum("kernel", c.loss.kernel, kernel_kind_from_string);
    s.get("rbf_features", c.rbf_features);
    if (auto* a = s.array("ablations")) {
      for (std::size_t i = 0; i < a->size(); ++i) {
        auto v = a->get(i)->value_exact<std::string>();
        if (!v) throw ConfigError(idx_name("loss.ablations", i) + ": expected string");
        try {
          c.loss.ablations.enable(*v);
        } catch (const std::invalid_argument& e) {
          throw ConfigError(idx_name("loss.ablations", i) + ": " + e.what());
        }
      }
    }
    s.finish();
  }
  if (auto* t = top.table("nas")) {
    Section s(*t, "nas");
    s.get("tau", c.tau);
    s.get("max_iters", c.nas_max_iters);
    s.get("check_every", c.nas_check_every);
    s.get("patience", c.nas_patience);
    s.finish();
  }
  if (auto* t = top.table("stylizer")) {
    Section s(*t, "stylizer");
    s.get("resample_each_iteration", c.stylizer.resample_each_iteration);
    if (auto* a = s.array("blocks")) parse_blocks(*a, c.stylizer.blocks);
    s.finish();
  }
  if (auto* t = top.table("data")) {
    Section s(*t, "data");
    std::string src = "synthetic";
    s.get("source", src);
    if (src == "idx") {
      c.source = DataSource::idx;
    } else if (src != "synthetic") {
      s.fail("source", "expected \"synthetic\" or \"idx\", got \"" + src + "\"");
    }
    s.get("idx_dir", c.idx_dir);
    s.get("idx_target_dir", c.idx_target_dir);
    s.get("cache_dir", c.cache_dir);
    s.get("train", c.suite.source_train);
    s.get("test", c.suite.source_test);
    s.get("target_size", c.suite.target_size);
    if (auto* g = s.table("glyphs")) {
      Section gs(*g, "data.glyphs");
      gs.get("num_classes", c.suite.glyphs.num_classes);
      gs.get("samples_per_class", c.suite.glyphs.samples_per_class);
      gs.get("stroke_jitter", c.suite.glyphs.stroke_jitter);
      gs.get("rotation_degrees", c.suite.glyphs.rotation_degrees);
      gs.get("translation_pixels", c.suite.glyphs.translation_pixels);
      gs.get("scale_jitter", c.suite.glyphs.scale_jitter);
      gs.get("regression_degrees", c.suite.glyphs.regression_degrees);
      gs.get("seed", c.suite.glyphs.seed);
      gs.finish();
    }
    if (auto* a = s.array("targets")) parse_targets(*a, c.suite.targets, c.suite.glyphs.seed);
    s.finish();
  }
  top.finish();

  c.stylizer.resample_each_iteration = c.stylizer.resample_each_iteration && c.resample_codecs;
  c.suite.glyphs.task = c.task;
  c.loss.task = c.task;
  c.validate();
  return c;
}

TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.string());
}

DatasetSuite make_suite(const TrainConfig& cfg) {
  if (cfg.source == DataSource::idx) {
    const std::filesystem::path src(cfg.idx_dir), tgt(cfg.idx_target_dir);
    DatasetSuite suite;
    suite.task = TaskKind::classification;
    auto train = load_idx(src / "train-images-idx3-ubyte", src / "train-labels-idx1-ubyte");
    const int n = std::min(train.size(), cfg.suite.source_train);
    suite.source_train = train.subset(0, n, "source_train");
    auto test = load_idx(src / "t10k-images-idx3-ubyte", src / "t10k-labels-idx1-ubyte");
    suite.source_test = test.subset(0, std::min(test.size(), cfg.suite.source_test), "source_test");
    auto timg = tgt / "t10k-images-idx3-ubyte";
    if (!std::filesystem::exists(timg)) timg = tgt / "t10k-images-idx4-ubyte";
    auto target = load_idx(timg, tgt / "t10k-labels-idx1-ubyte");
    suite.targets.push_back(target.subset(0, std::min(target.size(), cfg.suite.target_size), tgt.filename().string()));
    suite.num_classes = std::max({suite.source_train.num_classes, suite.source_test.num_classes, suite.targets[0].num_classes});
    return suite;
  }
  const auto recipe = cfg.suite.to_json();
  DatasetSuite suite;
  if (!cfg.cache_dir.empty() && load_suite(cfg.cache_dir, recipe, suite)) return suite;
  suite = build_suite(cfg.suite);
  if (!cfg.cache_dir.empty()) save_suite(cfg.cache_dir, suite, recipe);
  return suite;
}

}  // namespace stydesty
