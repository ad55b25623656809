// Acceptance harness: one PASS/FAIL/SKIP line per criterion, exit 0 iff
// nothing failed. Training runs are shared between criteria and kept under
// --out for inspection.
#include <CLI11.hpp>
#include <cblas.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "stydesty/adain.hpp"
#include "stydesty/checkpoint.hpp"
#include "stydesty/gradcheck_suite.hpp"
#include "stydesty/ops.hpp"
#include "stydesty/rng.hpp"
#include "stydesty/supernet.hpp"
#include "stydesty/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace stydesty;

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct Verdict {
  int id = 0;
  std::string title;
  enum { pass, fail, skip } state = fail;
  std::string detail;
};

// ---- training runs ---------------------------------------------------------

struct RunSpec {
  std::string key;  // directory name under --out
  std::string config;
  std::uint64_t seed = 1;
  std::vector<std::string> ablations;
};

struct RunResult {
  json report;
  json nas;
  double seconds = 0;
  std::string error;
  fs::path dir;
};

class Runner {
 public:
  Runner(fs::path root, int jobs) : root_(std::move(root)), jobs_(std::max(1, jobs)) {}

  void want(const RunSpec& s) {
    if (!specs_.count(s.key)) order_.push_back(s.key);
    specs_[s.key] = s;
  }

  // Runs every requested spec, `jobs_` at a time. Each run is single-threaded
  // inside BLAS when several run side by side.
  void execute(const std::function<const DatasetSuite&(const TrainConfig&)>& suite_for) {
    if (jobs_ > 1) openblas_set_num_threads(1);
    std::vector<std::pair<std::string, TrainConfig>> todo;
    for (const auto& key : order_) {
      const auto& s = specs_.at(key);
      TrainConfig cfg = load_config(s.config);
      cfg.seed = s.seed;
      for (const auto& a : s.ablations) cfg.loss.ablations.enable(a);
      todo.emplace_back(key, cfg);
      suite_for(cfg);  // build suites up front, outside the workers
    }
    std::atomic<std::size_t> next{0};
    std::mutex mu;
    auto worker = [&] {
      for (std::size_t i; (i = next++) < todo.size();) {
        const auto& [key, cfg] = todo[i];
        RunResult r;
        r.dir = root_ / key;
        fs::remove_all(r.dir);
        const auto t0 = Clock::now();
        try {
          RunOptions opt;
          opt.out_dir = r.dir;
          auto art = train(cfg, suite_for(cfg), opt);
          r.report = art.report.to_json();
          r.nas = art.nas.to_json();
        } catch (const std::exception& e) {
          r.error = e.what();
        }
        r.seconds = since(t0);
        std::lock_guard lock(mu);
        std::printf("  run %-34s %7.1fs  %s\n", key.c_str(), r.seconds,
                    r.error.empty() ? fmt("avg %.4f", r.report.at("average").get<double>()).c_str() : r.error.c_str());
        std::fflush(stdout);
        results_[key] = std::move(r);
      }
    };
    std::vector<std::thread> pool;
    for (int j = 0; j < std::min<int>(jobs_, static_cast<int>(todo.size())); ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  const RunResult& at(const std::string& key) const { return results_.at(key); }
  bool has(const std::string& key) const { return results_.count(key) > 0; }

 private:
  fs::path root_;
  int jobs_;
  std::vector<std::string> order_;
  std::map<std::string, RunSpec> specs_;
  std::map<std::string, RunResult> results_;
};

// ---- criteria --------------------------------------------------------------

Verdict gradient_oracle() {
  Verdict v{1, "gradient oracle", Verdict::fail, ""};
  SuiteOptions opt;
  const auto rep = run_gradcheck_suite(opt);
  std::set<std::string> failing;
  int op_rows = 0, geometries_ok = 0;
  for (const auto& r : rep.rows) {
    if (!r.pass) failing.insert(r.name + "/" + r.dtype);
    if (r.kind == "op") {
      ++op_rows;
      if (r.geometries == opt.geometries && r.passed == r.geometries) ++geometries_ok;
    }
  }
  const std::size_t expected_rows = 2 * gradcheck_op_names().size();
  // The oracle must also have teeth: a negated conv2d backward is caught.
  SuiteOptions faulty;
  faulty.scope = "conv2d";
  faulty.inject_fault = "conv2d";
  const bool fault_caught = !run_gradcheck_suite(faulty).pass;

  const bool ok = rep.pass && failing.empty() && static_cast<std::size_t>(op_rows) == expected_rows &&
                  geometries_ok == op_rows && rep.seconds < 120.0 && fault_caught;
  v.state = ok ? Verdict::pass : Verdict::fail;
  v.detail = fmt("%d op rows x %d geometries (f32 tol 1e-3, f64 tol 1e-6), %zu composites, %.1fs < 120s, "
                 "injected conv2d fault %s",
                 op_rows, opt.geometries, rep.rows.size() - static_cast<std::size_t>(op_rows), rep.seconds,
                 fault_caught ? "caught" : "MISSED");
  if (!failing.empty()) {
    v.detail += "; failing:";
    for (const auto& f : failing) v.detail += " " + f;
  }
  return v;
}

Tensor uniform(Shape shape, std::uint64_t seed, double lo, double hi) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<float> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& e : v) e = static_cast<float>(u(rng));
  return Tensor(std::move(shape), std::move(v));
}

Tensor sample(const Tensor& f, int i) {
  Shape shape = f.shape();
  const auto per = f.numel() / shape[0];
  shape[0] = 1;
  const auto data = f.data();
  return Tensor(std::move(shape), std::vector<float>(data.begin() + i * per, data.begin() + (i + 1) * per));
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
  return m;
}

Verdict adain_contract() {
  Verdict v{2, "AdaIN contract", Verdict::fail, ""};
  double stat_err = 0, ident_err = 0, idem_err = 0;
  for (std::uint64_t trial = 0; trial < 20; ++trial) {
    const int n = 2 + static_cast<int>(trial % 3), c = 1 + static_cast<int>(trial % 6), h = 4 + static_cast<int>(trial % 5);
    const auto f = uniform({n, c, h, h}, derive_seed(trial, {1}), -3, 3);
    const auto mu = uniform({c}, derive_seed(trial, {2}), -2, 2);
    const auto sigma = uniform({c}, derive_seed(trial, {3}), 0.2, 2.0);

    const auto y = adain(f, mu, sigma);
    const auto st = instance_stats(y);
    for (int i = 0; i < n; ++i)
      for (int k = 0; k < c; ++k) {
        stat_err = std::max(stat_err, std::abs(static_cast<double>(st.mean[i * c + k]) - mu[k]));
        stat_err = std::max(stat_err, std::abs(static_cast<double>(st.std[i * c + k]) - sigma[k]));
      }

    // Per-sample identity: feed each sample its own statistics.
    for (int i = 0; i < n; ++i) {
      const auto fi = sample(f, i);
      const auto own = instance_stats(fi);
      ident_err = std::max(ident_err, max_abs_diff(adain(fi, reshape(own.mean, {c}), reshape(own.std, {c})), fi));
    }
    idem_err = std::max(idem_err, max_abs_diff(adain(y, mu, sigma), y));
  }
  const bool ok = stat_err < 1e-4 && ident_err < 1e-5 && idem_err < 1e-4;
  v.state = ok ? Verdict::pass : Verdict::fail;
  v.detail = fmt("20 random tensors: stats err %.2e (<1e-4), identity err %.2e (<1e-5), idempotence err %.2e (<1e-4)",
                 stat_err, ident_err, idem_err);
  return v;
}

Verdict gumbel_distribution() {
  Verdict v{3, "Gumbel-Softmax distribution", Verdict::fail, ""};
  constexpr int kSamples = 100000;
  double worst = 0;
  int cases = 0;
  for (int L : {4, 6}) {
    for (int trial = 0; trial < 4; ++trial) {
      const auto pi = trial == 0 ? Tensor::zeros({L}) : uniform({L}, derive_seed(77, {static_cast<std::uint64_t>(L),
                                                                                     static_cast<std::uint64_t>(trial)}),
                                                                 -2, 2);
      double z = 0;
      std::vector<double> p(static_cast<std::size_t>(L));
      for (int k = 0; k < L; ++k) z += (p[k] = std::exp(static_cast<double>(pi[k])));
      std::vector<int> count(static_cast<std::size_t>(L), 0);
      const std::uint64_t base = derive_seed(1234, {static_cast<std::uint64_t>(L), static_cast<std::uint64_t>(trial)});
      for (int s = 0; s < kSamples; ++s) {
        ++count[static_cast<std::size_t>(gumbel_softmax_hard(pi, 1.0, derive_seed(base, {static_cast<std::uint64_t>(s)})).index)];
      }
      for (int k = 0; k < L; ++k) worst = std::max(worst, std::abs(static_cast<double>(count[k]) / kSamples - p[k] / z));
      ++cases;
    }
  }
  v.state = worst <= 0.01 ? Verdict::pass : Verdict::fail;
  v.detail = fmt("%d pi vectors (zero + 3 random, L=4 and L=6), 1e5 samples each: max |freq - softmax| = %.4f (<=0.01)",
                 cases, worst);
  return v;
}

Verdict stage_isolation(const std::string& config, const std::function<const DatasetSuite&(const TrainConfig&)>& suite_for) {
  Verdict v{4, "stage isolation", Verdict::fail, ""};
  TrainConfig cfg = load_config(config);
  cfg.max_iters = 100;
  auto model = make_split_model(cfg, cfg.default_position, derive_seed(cfg.seed, {0x15}));
  Stylizer g(cfg.stylizer, derive_seed(cfg.seed, {0x16}));
  FormalState st{model, g};
  struct Snap {
    std::uint64_t f, h, g;
  } pre{};
  auto snap = [&] {
    return Snap{parameter_hash(model.f_parameters()), parameter_hash(model.h_parameters()), parameter_hash(g.parameters())};
  };
  std::map<Stage, int> steps;
  int violations = 0, idle = 0;
  RunHooks hooks;
  hooks.on_step = [&](int, Stage s, bool after) {
    if (!after) {
      pre = snap();
      return;
    }
    const auto post = snap();
    ++steps[s];
    switch (s) {
      case Stage::F:  // H and the stylizer frozen
        violations += (post.h != pre.h) + (post.g != pre.g);
        idle += post.f == pre.f;
        break;
      case Stage::H:
        violations += (post.f != pre.f) + (post.g != pre.g);
        idle += post.h == pre.h;
        break;
      case Stage::G:  // F and H frozen
        violations += (post.f != pre.f) + (post.h != pre.h);
        idle += post.g == pre.g;
        break;
      case Stage::P:
        ++violations;
    }
  };
  const auto t0 = Clock::now();
  const int iters = run_formal_stage(suite_for(cfg), st, cfg, hooks);
  v.state = iters == 100 && violations == 0 && idle == 0 ? Verdict::pass : Verdict::fail;
  v.detail = fmt("%d formal iterations: %d F, %d H, %d G steps checked, %d cross-stage writes, %d idle steps, %.0fs", iters,
                 steps[Stage::F], steps[Stage::H], steps[Stage::G], violations, idle, since(t0));
  return v;
}

double avg(const Runner& r, const std::string& key) { return r.at(key).report.at("average").get<double>(); }

double mean_over(const Runner& r, const std::string& prefix, int seeds) {
  double s = 0;
  for (int k = 1; k <= seeds; ++k) s += avg(r, prefix + "_s" + std::to_string(k));
  return s / seeds;
}

std::string failed_runs(const Runner& r, const std::vector<std::string>& keys) {
  std::string out;
  for (const auto& k : keys) {
    if (!r.has(k)) out += " " + k + "(not run)";
    else if (!r.at(k).error.empty()) out += " " + k + "(" + r.at(k).error + ")";
  }
  return out;
}

std::vector<std::string> keys_for(const std::string& prefix, int seeds) {
  std::vector<std::string> k;
  for (int s = 1; s <= seeds; ++s) k.push_back(prefix + "_s" + std::to_string(s));
  return k;
}

Verdict errored(int id, const std::string& title, const std::string& what) {
  return Verdict{id, title, Verdict::fail, "run error:" + what};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"stydesty acceptance criteria"};
  std::string out = "acceptance_runs";
  std::string source = STYDESTY_SOURCE_DIR;
  std::vector<int> only;
  int jobs = worker_threads();
  int seeds = 3;
  std::string mnist = std::getenv("STYDESTY_MNIST_DIR") ? std::getenv("STYDESTY_MNIST_DIR") : "";
  std::string mnistm = std::getenv("STYDESTY_MNISTM_DIR") ? std::getenv("STYDESTY_MNISTM_DIR") : "";
  app.add_option("--out", out, "directory for run artifacts and acceptance.json")->capture_default_str();
  app.add_option("--source-dir", source, "project root holding configs/")->capture_default_str();
  app.add_option("--only", only, "criterion numbers to run")->delimiter(',')->check(CLI::Range(1, 10));
  app.add_option("--jobs", jobs, "training runs in parallel")->capture_default_str();
  app.add_option("--mnist", mnist, "IDX MNIST directory (or STYDESTY_MNIST_DIR)");
  app.add_option("--mnist-m", mnistm, "IDX MNIST-M style target directory (or STYDESTY_MNISTM_DIR)");
  CLI11_PARSE(app, argc, argv);

  const auto want = [&](int id) { return only.empty() || std::find(only.begin(), only.end(), id) != only.end(); };
  const fs::path root(out);
  fs::create_directories(root);
  const std::string desk = (fs::path(source) / "configs" / "desk.toml").string();
  const std::string regression = (fs::path(source) / "configs" / "regression.toml").string();
  const auto t_start = Clock::now();

  std::map<std::string, DatasetSuite> suites;
  std::mutex suites_mu;
  auto suite_for = [&](const TrainConfig& cfg) -> const DatasetSuite& {
    const std::string key = cfg.suite.to_json().dump() + cfg.idx_dir + cfg.idx_target_dir + std::to_string(int(cfg.source));
    std::lock_guard lock(suites_mu);
    auto it = suites.find(key);
    if (it == suites.end()) it = suites.emplace(key, make_suite(cfg)).first;
    return it->second;
  };

  std::vector<Verdict> verdicts;
  auto report = [&](const Verdict& v) {
    const char* tag = v.state == Verdict::pass ? "PASS" : v.state == Verdict::skip ? "SKIP" : "FAIL";
    std::printf("[%s] %2d %s: %s\n", tag, v.id, v.title.c_str(), v.detail.c_str());
    std::fflush(stdout);
    verdicts.push_back(v);
  };
  auto guarded = [&](int id, const std::string& title, const std::function<Verdict()>& body) {
    try {
      report(body());
    } catch (const std::exception& e) {
      report(Verdict{id, title, Verdict::fail, std::string("exception: ") + e.what()});
    }
  };

  if (want(1)) guarded(1, "gradient oracle", gradient_oracle);
  if (want(2)) guarded(2, "AdaIN contract", adain_contract);
  if (want(3)) guarded(3, "Gumbel-Softmax distribution", gumbel_distribution);
  if (want(4)) guarded(4, "stage isolation", [&] { return stage_isolation(desk, suite_for); });

  // Training runs shared by criteria 5 to 10.
  const std::vector<std::string> baseline = {"no_destyle", "no_style", "no_adversarial"};
  Runner runs(root, jobs);
  for (int s = 1; s <= seeds; ++s) {
    const auto tag = "_s" + std::to_string(s);
    const std::uint64_t seed = static_cast<std::uint64_t>(s);
    if (want(5) || want(6) || want(7) || want(8)) runs.want({"full" + tag, desk, seed, {}});
    if (want(5)) runs.want({"baseline" + tag, desk, seed, baseline});
    if (want(6)) {
      runs.want({"no_adversarial" + tag, desk, seed, {"no_adversarial"}});
      runs.want({"no_destyle" + tag, desk, seed, {"no_destyle"}});
      runs.want({"no_style" + tag, desk, seed, {"no_style"}});
    }
    if (want(10)) {
      runs.want({"reg_full" + tag, regression, seed, {}});
      runs.want({"reg_baseline" + tag, regression, seed, baseline});
    }
  }
  if (want(8)) runs.want({"full_s1_replay", desk, 1, {}});

  const bool have_real = !mnist.empty() && !mnistm.empty();
  std::string real_cfg;
  if (want(9) && have_real) {
    real_cfg = (root / "mnist.toml").string();
    std::string text = slurp(fs::path(source) / "configs" / "mnist.toml");
    auto set = [&](const std::string& key, const std::string& val) {
      const auto p = text.find(key + " = ");
      const auto e = text.find('\n', p);
      text.replace(p, e - p, key + " = \"" + val + "\"");
    };
    set("idx_dir", fs::absolute(mnist).string());
    set("idx_target_dir", fs::absolute(mnistm).string());
    std::ofstream(real_cfg) << text;
    runs.want({"mnist_full", real_cfg, 1, {}});
    runs.want({"mnist_baseline", real_cfg, 1, baseline});
  }
  runs.execute(suite_for);

  if (want(5)) {
    guarded(5, "directional DG gain", [&] {
      const auto fail = failed_runs(runs, [&] {
        auto k = keys_for("full", seeds);
        for (auto& b : keys_for("baseline", seeds)) k.push_back(b);
        return k;
      }());
      if (!fail.empty()) return errored(5, "directional DG gain", fail);
      const double full = mean_over(runs, "full", seeds), base = mean_over(runs, "baseline", seeds);
      double slowest = 0;
      for (const auto& k : keys_for("full", seeds)) slowest = std::max(slowest, runs.at(k).seconds);
      for (const auto& k : keys_for("baseline", seeds)) slowest = std::max(slowest, runs.at(k).seconds);
      const bool ok = full - base >= 0.05 && slowest <= 1800;
      return Verdict{5, "directional DG gain", ok ? Verdict::pass : Verdict::fail,
                     fmt("mean target accuracy over %d seeds: full %.4f vs source-only %.4f, gain %+.2f pts (>= 5), "
                         "slowest run %.0fs (<= 1800s)",
                         seeds, full, base, 100 * (full - base), slowest)};
    });
  }

  if (want(6)) {
    guarded(6, "ablation ordering", [&] {
      std::vector<std::string> keys = keys_for("full", seeds);
      for (const char* p : {"no_adversarial", "no_destyle", "no_style"})
        for (auto& k : keys_for(p, seeds)) keys.push_back(k);
      const auto fail = failed_runs(runs, keys);
      if (!fail.empty()) return errored(6, "ablation ordering", fail);
      const double full = mean_over(runs, "full", seeds), adv = mean_over(runs, "no_adversarial", seeds),
                   des = mean_over(runs, "no_destyle", seeds), sty = mean_over(runs, "no_style", seeds);
      const bool ok = full >= adv && full - des >= 0.01 && full - sty >= 0.01;
      return Verdict{6, "ablation ordering", ok ? Verdict::pass : Verdict::fail,
                     fmt("mean over %d seeds: full %.4f, w/o Adv %.4f (gap %+.2f, needs >= 0), w/o Destyle %.4f "
                         "(gap %+.2f, needs >= 1 pt), w/o Style %.4f (gap %+.2f, needs >= 1 pt)",
                         seeds, full, adv, 100 * (full - adv), des, 100 * (full - des), sty, 100 * (full - sty))};
    });
  }

  if (want(7)) {
    guarded(7, "NAS stability", [&] {
      const auto fail = failed_runs(runs, keys_for("full", seeds));
      if (!fail.empty()) return errored(7, "NAS stability", fail);
      std::map<int, int> votes;
      bool all_converged = true;
      std::string picks;
      const int budget = load_config(desk).nas_max_iters;
      for (const auto& k : keys_for("full", seeds)) {
        const auto& nas = runs.at(k).nas;
        const int pos = nas.at("selected_position").get<int>(), it = nas.at("iterations").get<int>();
        ++votes[pos];
        const bool conv = nas.at("converged").get<bool>() && it <= 5000;
        all_converged = all_converged && conv;
        picks += fmt(" %s->%d (%d iters%s)", k.c_str(), pos, it, conv ? "" : ", NOT converged");
      }
      int best = 0;
      for (const auto& [pos, n] : votes) best = std::max(best, n);
      const bool ok = best >= 2 && all_converged && budget <= 5000;
      return Verdict{7, "NAS stability", ok ? Verdict::pass : Verdict::fail,
                     fmt("%d/%d runs agree, budget %d (<= 5000);", best, seeds, budget) + picks};
    });
  }

  if (want(8)) {
    guarded(8, "determinism", [&] {
      const auto fail = failed_runs(runs, {"full_s1", "full_s1_replay"});
      if (!fail.empty()) return errored(8, "determinism", fail);
      const fs::path a = runs.at("full_s1").dir, b = runs.at("full_s1_replay").dir;
      std::vector<std::string> differing;
      std::vector<fs::path> files = {"report.json", "nas.json", "train_log.csv"};
      for (const auto& e : fs::directory_iterator(a / "checkpoints")) files.push_back(fs::path("checkpoints") / e.path().filename());
      for (const auto& f : files) {
        const auto x = slurp(a / f);
        if (x.empty() || x != slurp(b / f)) differing.push_back(f.string());
      }
      std::string detail = fmt("two desk runs (seed 1): %zu files compared byte for byte (report, NAS record, log, "
                               "F/H/G checkpoints)",
                               files.size());
      for (const auto& d : differing) detail += "; differs: " + d;
      return Verdict{8, "determinism", differing.empty() ? Verdict::pass : Verdict::fail, detail};
    });
  }

  if (want(9)) {
    guarded(9, "real-data check", [&] {
      if (!have_real) {
        return Verdict{9, "real-data check", Verdict::skip,
                       "no IDX data (set STYDESTY_MNIST_DIR and STYDESTY_MNISTM_DIR or pass --mnist/--mnist-m)"};
      }
      const auto fail = failed_runs(runs, {"mnist_full", "mnist_baseline"});
      if (!fail.empty()) return errored(9, "real-data check", fail);
      const double full = avg(runs, "mnist_full"), base = avg(runs, "mnist_baseline");
      return Verdict{9, "real-data check", full - base >= 0.10 ? Verdict::pass : Verdict::fail,
                     fmt("target accuracy: full %.4f vs source-only %.4f, gain %+.2f pts (>= 10)", full, base,
                         100 * (full - base))};
    });
  }

  if (want(10)) {
    guarded(10, "regression path", [&] {
      auto keys = keys_for("reg_full", seeds);
      for (auto& k : keys_for("reg_baseline", seeds)) keys.push_back(k);
      const auto fail = failed_runs(runs, keys);
      if (!fail.empty()) return errored(10, "regression path", fail);
      const double full = mean_over(runs, "reg_full", seeds), base = mean_over(runs, "reg_baseline", seeds);
      std::string per;
      for (int s = 1; s <= seeds; ++s) {
        per += fmt(" s%d %.4f/%.4f", s, avg(runs, "reg_full_s" + std::to_string(s)),
                   avg(runs, "reg_baseline_s" + std::to_string(s)));
      }
      return Verdict{10, "regression path", full <= base ? Verdict::pass : Verdict::fail,
                     fmt("mean target MSE over %d seeds: full %.4f <= source-only %.4f;", seeds, full, base) + per};
    });
  }

  json summary = json::array();
  int failed = 0;
  for (const auto& v : verdicts) {
    failed += v.state == Verdict::fail;
    summary.push_back({{"criterion", v.id},
                       {"title", v.title},
                       {"result", v.state == Verdict::pass ? "pass" : v.state == Verdict::skip ? "skip" : "fail"},
                       {"detail", v.detail}});
  }
  std::ofstream(root / "acceptance.json") << json{{"criteria", summary}, {"seconds", since(t_start)}}.dump(2) << '\n';
  std::printf("%zu criteria checked, %d failed, %.0fs\n", verdicts.size(), failed, since(t_start));
  return failed ? 1 : 0;
}
