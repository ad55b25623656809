#include "stydesty/stydesty.h"

#include <cblas.h>

#include <chrono>
#include <cstdlib>
#include <cstring>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>

#include "stydesty/checkpoint.hpp"
#include "stydesty/config.hpp"
#include "stydesty/gradcheck_suite.hpp"
#include "stydesty/rng.hpp"
#include "stydesty/stylizer.hpp"
#include "stydesty/trainer.hpp"

struct stydesty_config {
  stydesty::TrainConfig cfg;
  std::string source_text;
  std::string source_name;
};

namespace {

namespace fs = std::filesystem;
using stydesty::TrainConfig;

constexpr const char* kVersion = "0.1.0";

thread_local std::string g_error;

int fail(int code, const std::string& what) {
  g_error = what;
  return code;
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (out) std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

void emit(char** out, const std::string& s) {
  if (out) *out = dup_string(s);
}

// Maps every exception the core throws onto a status code.
template <typename Fn>
int guarded(Fn&& fn) {
  g_error.clear();
  try {
    return fn();
  } catch (const stydesty::TrainingAbort& e) {
    return fail(STYDESTY_RUNTIME_ERROR, std::string("training aborted: ") + e.what());
  } catch (const stydesty::CheckpointError& e) {
    return fail(STYDESTY_CONFIG_ERROR, std::string("checkpoint: ") + e.what());
  } catch (const stydesty::IdxError& e) {
    return fail(STYDESTY_CONFIG_ERROR, e.what());
  } catch (const std::invalid_argument& e) {
    return fail(STYDESTY_CONFIG_ERROR, e.what());
  } catch (const std::out_of_range& e) {
    return fail(STYDESTY_CONFIG_ERROR, e.what());
  } catch (const std::exception& e) {
    return fail(STYDESTY_RUNTIME_ERROR, e.what());
  } catch (...) {
    return fail(STYDESTY_RUNTIME_ERROR, "unknown error");
  }
}

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// manifest.json: written when a command starts and rewritten on exit.
class Manifest {
 public:
  Manifest(const fs::path& dir, const std::string& command, const std::string& command_line,
           const stydesty_config* c) : path_(dir / "manifest.json") {
    fs::create_directories(dir);
    j_ = {{"command", command},
          {"command_line", command_line},
          {"tool", "stydesty"},
          {"version", kVersion},
          {"started_at", utc_now()},
          {"status", "running"}};
    if (c) {
      j_["config_hash"] = c->cfg.hash();
      j_["seed"] = c->cfg.seed;
      j_["ablations"] = c->cfg.loss.ablations.names();
      j_["config_file"] = c->source_name;
      j_["config_text"] = c->source_text;
      j_["config"] = c->cfg.to_json();
    }
    write();
  }

  void finish(int code, const std::string& error, const std::map<std::string, std::string>& outputs) {
    j_["ended_at"] = utc_now();
    j_["exit_code"] = code;
    j_["status"] = code == STYDESTY_OK ? "ok" : code == STYDESTY_CHECK_FAILED ? "check_failed" : "error";
    if (code != STYDESTY_OK) j_["error"] = error;
    j_["outputs"] = outputs;
    write();
  }

 private:
  void write() const { std::ofstream(path_) << j_.dump(2) << '\n'; }
  fs::path path_;
  nlohmann::json j_;
};

// Runs `body` between the two manifest writes. Without an output directory
// no manifest is kept.
template <typename Body>
int with_manifest(const char* out_dir, const char* command, const char* command_line, const stydesty_config* c,
                  Body&& body) {
  std::optional<Manifest> m;
  std::map<std::string, std::string> outputs;
  int code = guarded([&] {
    if (out_dir && *out_dir) m.emplace(out_dir, command, command_line ? command_line : "", c);
    return body(outputs);
  });
  if (m) {
    const std::string err = g_error;
    guarded([&] {
      m->finish(code, err, outputs);
      return 0;
    });
    if (code != STYDESTY_OK) g_error = err;
  }
  return code;
}

void apply_threads(int n) {
  if (n <= 0) n = stydesty::worker_threads();
  openblas_set_num_threads(n);
}

// BLAS threads follow STYDESTY_THREADS from the first call on.
struct ThreadInit {
  ThreadInit() { apply_threads(0); }
};
const ThreadInit g_thread_init;

}  // namespace

extern "C" {

const char* stydesty_version(void) { return kVersion; }

const char* stydesty_last_error(void) { return g_error.c_str(); }

int stydesty_set_threads(int n) {
  if (n > 0) setenv("STYDESTY_THREADS", std::to_string(n).c_str(), 1);
  apply_threads(n);
  return STYDESTY_OK;
}

void stydesty_free_string(char* s) { std::free(s); }

int stydesty_config_load(const char* path, stydesty_config** out) {
  if (!path || !out) return fail(STYDESTY_CONFIG_ERROR, "config_load: null argument");
  return guarded([&] {
    std::ifstream in(path);
    if (!in) throw stydesty::ConfigError(std::string("cannot read config file ") + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    auto c = std::make_unique<stydesty_config>();
    c->cfg = stydesty::parse_config(ss.str(), path);
    c->source_text = ss.str();
    c->source_name = path;
    *out = c.release();
    return STYDESTY_OK;
  });
}

int stydesty_config_parse(const char* toml_text, stydesty_config** out) {
  if (!toml_text || !out) return fail(STYDESTY_CONFIG_ERROR, "config_parse: null argument");
  return guarded([&] {
    auto c = std::make_unique<stydesty_config>();
    c->cfg = stydesty::parse_config(toml_text, "config");
    c->source_text = toml_text;
    *out = c.release();
    return STYDESTY_OK;
  });
}

void stydesty_config_free(stydesty_config* cfg) { delete cfg; }

int stydesty_config_set_seed(stydesty_config* cfg, uint64_t seed) {
  if (!cfg) return fail(STYDESTY_CONFIG_ERROR, "null config");
  cfg->cfg.seed = seed;
  return STYDESTY_OK;
}

int stydesty_config_set_max_iters(stydesty_config* cfg, int iters) {
  if (!cfg) return fail(STYDESTY_CONFIG_ERROR, "null config");
  if (iters < 0) return fail(STYDESTY_CONFIG_ERROR, "max-iters must be >= 0");
  cfg->cfg.max_iters = iters;
  return STYDESTY_OK;
}

int stydesty_config_set_nas_max_iters(stydesty_config* cfg, int iters) {
  if (!cfg) return fail(STYDESTY_CONFIG_ERROR, "null config");
  if (iters < 0) return fail(STYDESTY_CONFIG_ERROR, "max-iters must be >= 0");
  cfg->cfg.nas_max_iters = iters;
  return STYDESTY_OK;
}

int stydesty_config_enable_ablation(stydesty_config* cfg, const char* name) {
  if (!cfg || !name) return fail(STYDESTY_CONFIG_ERROR, "null argument");
  return guarded([&] {
    cfg->cfg.loss.ablations.enable(name);
    return STYDESTY_OK;
  });
}

int stydesty_config_hash(const stydesty_config* cfg, char* buf, size_t len) {
  if (!cfg || !buf) return fail(STYDESTY_CONFIG_ERROR, "null argument");
  const auto h = cfg->cfg.hash();
  if (len < h.size() + 1) return fail(STYDESTY_CONFIG_ERROR, "config_hash: buffer too small");
  std::memcpy(buf, h.c_str(), h.size() + 1);
  return STYDESTY_OK;
}

int stydesty_config_to_json(const stydesty_config* cfg, char** json_out) {
  if (!cfg || !json_out) return fail(STYDESTY_CONFIG_ERROR, "null argument");
  return guarded([&] {
    emit(json_out, cfg->cfg.to_json().dump(2));
    return STYDESTY_OK;
  });
}

int stydesty_train(const stydesty_config* cfg, const char* out_dir, const char* command_line, char** report_json) {
  if (!cfg) return fail(STYDESTY_CONFIG_ERROR, "null config");
  return with_manifest(out_dir, "train", command_line, cfg, [&](std::map<std::string, std::string>& outputs) {
    cfg->cfg.validate();
    const auto suite = stydesty::make_suite(cfg->cfg);
    stydesty::RunOptions opt;
    if (out_dir) opt.out_dir = out_dir;
    const auto art = stydesty::train(cfg->cfg, suite, opt);
    outputs = art.files;
    emit(report_json, art.report.to_json().dump(2));
    return STYDESTY_OK;
  });
}

int stydesty_nas(const stydesty_config* cfg, const char* out_dir, const char* command_line, char** nas_json) {
  if (!cfg) return fail(STYDESTY_CONFIG_ERROR, "null config");
  return with_manifest(out_dir, "nas", command_line, cfg, [&](std::map<std::string, std::string>& outputs) {
    cfg->cfg.validate();
    const auto suite = stydesty::make_suite(cfg->cfg);
    stydesty::RunOptions opt;
    if (out_dir) opt.out_dir = out_dir;
    opt.nas_only = true;
    const auto art = stydesty::train(cfg->cfg, suite, opt);
    outputs = art.files;
    emit(nas_json, art.nas.to_json().dump(2));
    return STYDESTY_OK;
  });
}

int stydesty_eval(const stydesty_config* cfg, const char* checkpoint_dir, const char* out_dir, const char* command_line,
                  char** report_json) {
  if (!cfg || !checkpoint_dir) return fail(STYDESTY_CONFIG_ERROR, "null argument");
  return with_manifest(out_dir, "eval", command_line, cfg, [&](std::map<std::string, std::string>& outputs) {
    const auto model = stydesty::load_split_model(checkpoint_dir, cfg->cfg);
    const auto suite = stydesty::make_suite(cfg->cfg);
    const auto report = stydesty::evaluate_suite(model, suite, cfg->cfg, model.candidate());
    const std::string text = report.to_json().dump(2);
    if (out_dir && *out_dir) {
      const auto p = fs::path(out_dir) / "report.json";
      std::ofstream(p) << text << '\n';
      outputs["report"] = p.string();
    }
    emit(report_json, text);
    return STYDESTY_OK;
  });
}

int stydesty_stylize(const stydesty_config* cfg, const char* checkpoint_dir, int n, uint64_t seed, const char* out_dir,
                     const char* command_line) {
  if (!cfg || !checkpoint_dir || !out_dir || !*out_dir) return fail(STYDESTY_CONFIG_ERROR, "null argument");
  if (n < 1) return fail(STYDESTY_CONFIG_ERROR, "stylize: n must be >= 1");
  return with_manifest(out_dir, "stylize", command_line, cfg, [&](std::map<std::string, std::string>& outputs) {
    auto g = stydesty::load_stylizer(checkpoint_dir);
    // Only the source test split is needed; skip rendering the targets.
    auto suite_cfg = cfg->cfg;
    suite_cfg.suite.target_size = 1;
    suite_cfg.cache_dir.clear();
    const auto suite = stydesty::make_suite(suite_cfg);
    const auto& src = suite.source_test;
    if (n > src.size()) throw std::invalid_argument("stylize: n exceeds the source test split");
    std::vector<int> idx(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
    const auto batch = src.gather(idx);
    g.resample_codecs(stydesty::stream_seed(seed, stydesty::Stream::codecs));
    const auto w = stydesty::sample_mix_weights(g.num_blocks(), stydesty::stream_seed(seed, stydesty::Stream::mix_weights));
    const auto styled = g.stylize(stydesty::Binding(), batch.images, w);
    for (int i = 0; i < n; ++i) {
      char name[64];
      std::snprintf(name, sizeof name, "original_%03d.ppm", i);
      stydesty::write_ppm(fs::path(out_dir) / name, batch.images, i);
      outputs[name] = (fs::path(out_dir) / name).string();
      std::snprintf(name, sizeof name, "stylized_%03d.ppm", i);
      stydesty::write_ppm(fs::path(out_dir) / name, styled, i);
      outputs[name] = (fs::path(out_dir) / name).string();
    }
    return STYDESTY_OK;
  });
}

int stydesty_gradcheck(const char* scope, const char* inject_fault, uint64_t seed, char** table, char** report_json) {
  return guarded([&] {
    stydesty::SuiteOptions opt;
    if (scope && *scope) opt.scope = scope;
    if (inject_fault) opt.inject_fault = inject_fault;
    opt.seed = seed;
    const auto rep = stydesty::run_gradcheck_suite(opt);
    emit(table, rep.table());
    emit(report_json, rep.to_json().dump(2));
    if (rep.pass) return static_cast<int>(STYDESTY_OK);
    std::string failing;
    for (const auto& r : rep.rows) {
      if (!r.pass) failing += (failing.empty() ? "" : ", ") + r.name + " (" + r.dtype + ")";
    }
    return fail(STYDESTY_CHECK_FAILED, "gradient check failed: " + failing);
  });
}

}  // extern "C"
