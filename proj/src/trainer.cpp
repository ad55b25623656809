#include "stydesty/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "stydesty/checkpoint.hpp"
#include "stydesty/ops.hpp"
#include "stydesty/rng.hpp"

namespace stydesty {
namespace {

constexpr std::uint64_t kNasStage = 0;
constexpr std::uint64_t kFormalStage = 1;

std::uint64_t sid(Stream s) { return static_cast<std::uint64_t>(s); }

// Endless seeded batch stream over one set: reshuffles at every pass.
class BatchCursor {
 public:
  BatchCursor(const LabeledSet& set, int batch_size, std::uint64_t seed)
      : set_(set), batch_size_(batch_size), seed_(seed) {}

  Batch next() {
    if (pos_ >= order_.size()) {
      order_ = iterate_batches(set_.size(), batch_size_, derive_seed(seed_, {pass_++}));
      pos_ = 0;
    }
    return set_.gather(order_[pos_++]);
  }

 private:
  const LabeledSet& set_;
  int batch_size_;
  std::uint64_t seed_;
  std::uint64_t pass_ = 0;
  std::vector<std::vector<int>> order_;
  std::size_t pos_ = 0;
};

int effective_t_g(const TrainConfig& cfg) {
  return cfg.loss.ablations.no_style || cfg.loss.ablations.no_adversarial ? 0 : cfg.t_g;
}

void check_finite(double v, int it, const char* stage) {
  if (!std::isfinite(v)) {
    throw TrainingAbort("non-finite loss at iteration " + std::to_string(it) + " (stage " + stage + ")");
  }
}

void apply_step(Sgd& opt, std::span<Parameter* const> params, const Gradients& grads, int it, const char* stage) {
  try {
    opt.step(params, grads);
  } catch (const NonFiniteGradient& e) {
    throw TrainingAbort(std::string(e.what()) + " at iteration " + std::to_string(it) + " (stage " + stage + ")");
  }
}

void fire(const RunHooks& hooks, int it, Stage s, bool after) {
  if (hooks.on_step) hooks.on_step(it, s, after);
}

Tensor stylized(const Stylizer& g, const TrainConfig& cfg, const Tensor& xS, std::uint64_t stage, int it, Stage s,
                int t) {
  if (cfg.loss.ablations.no_style) return xS;
  const auto w = sample_mix_weights(
      g.num_blocks(), derive_seed(cfg.seed, {sid(Stream::mix_weights), stage, static_cast<std::uint64_t>(it),
                                             static_cast<std::uint64_t>(s), static_cast<std::uint64_t>(t)}));
  return g.stylize(Binding(), xS, w);
}

std::vector<Parameter*> concat(std::vector<Parameter*> a, const std::vector<Parameter*>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

}  // namespace

char stage_letter(Stage s) {
  switch (s) {
    case Stage::P: return 'P';
    case Stage::F: return 'F';
    case Stage::H: return 'H';
    case Stage::G: return 'G';
  }
  return '?';
}

nlohmann::json NASResult::to_json() const {
  return {{"selected_position", selected},
          {"pi", pi},
          {"num_positions", pi.size()},
          {"iterations", iterations},
          {"converged", converged},
          {"warning", !converged && !skipped},
          {"skipped", skipped},
          {"argmax_switches", switches},
          {"history", history.to_json()}};
}

NASResult run_nas_stage(const DatasetSuite& suite, Supernet& net, Stylizer& g, const TrainConfig& cfg,
                        const RunHooks& hooks) {
  NASResult res;
  const int L = net.num_positions();
  if (L == 1) {
    res.selected = 0;
    res.pi = {net.pi().value[0]};
    res.converged = true;
    return res;
  }
  const auto net_params = net.parameters();
  const auto g_params = g.parameters();
  Sgd opt_p(cfg.sgd(cfg.lr_p, true));
  Sgd opt_g(cfg.sgd(cfg.lr_g, false));
  SemanticKernel kernel(cfg.loss.kernel, cfg.rbf_features, derive_seed(cfg.seed, {sid(Stream::kernel_features), kNasStage}));
  BatchCursor main(suite.source_train, cfg.batch_size, derive_seed(cfg.seed, {sid(Stream::batches), kNasStage}));
  BatchCursor aux(suite.source_train, cfg.batch_size, derive_seed(cfg.seed, {sid(Stream::head_batches), kNasStage}));
  const int t_g = effective_t_g(cfg);

  int prev_argmax = -1;
  int it = 0;
  for (; it < cfg.nas_max_iters; ++it) {
    const auto uit = static_cast<std::uint64_t>(it);
    if (g.config().resample_each_iteration) g.resample_codecs(derive_seed(cfg.seed, {sid(Stream::codecs), kNasStage, uit}));
    const Batch first = main.next();

    for (int t = 0; t < cfg.t_p; ++t) {
      const Batch b = t == 0 ? first : aux.next();
      const Tensor xT = stylized(g, cfg, b.images, kNasStage, it, Stage::P, t);
      fire(hooks, it, Stage::P, false);
      Tape<float> tape;
      Binding bind(tape);
      bind.train_all(net_params);
      const auto gs = gumbel_softmax_hard(bind(net.pi()), cfg.tau,
                                          derive_seed(cfg.seed, {sid(Stream::gumbel), uit, static_cast<std::uint64_t>(t)}));
      auto r = loss_P_nas(bind, net, gs.hard, b.images, xT, b, cfg.loss);
      check_finite(r.parts.total, it, "nas_P");
      tape.backward(r.total);
      apply_step(opt_p, net_params, tape.gradients(), it, "nas_P");
      if (hooks.log) hooks.log->append(it, "nas_P", r.parts);
      fire(hooks, it, Stage::P, true);
    }

    for (int t = 0; t < t_g; ++t) {
      const Batch b = t == 0 ? first : aux.next();
      const auto w = sample_mix_weights(
          g.num_blocks(), derive_seed(cfg.seed, {sid(Stream::mix_weights), kNasStage, uit, sid(Stream::stylizer_init),
                                                 static_cast<std::uint64_t>(t)}));
      const auto gs = gumbel_softmax_hard(net.pi().value, cfg.tau,
                                          derive_seed(cfg.seed, {sid(Stream::gumbel), uit, 1000 + static_cast<std::uint64_t>(t)}));
      if (!kernel.ready()) kernel.fit(net.forward(Binding(), b.images, gs.hard).hidden);
      fire(hooks, it, Stage::G, false);
      Tape<float> tape;
      Binding bind(tape);
      bind.train_all(g_params);
      const Tensor xT = g.stylize(bind, b.images, w);
      auto r = loss_G_nas(bind, net, gs.hard, kernel, b.images, xT, b, cfg.loss);
      check_finite(r.parts.total, it, "nas_G");
      tape.backward(r.total);
      apply_step(opt_g, g_params, tape.gradients(), it, "nas_G");
      if (hooks.log) hooks.log->append(it, "nas_G", r.parts);
      fire(hooks, it, Stage::G, true);
    }

    if ((it + 1) % cfg.nas_check_every == 0) {
      const int am = net.argmax();
      const auto pd = net.pi().value.data();
      res.history.add({it + 1, am, std::vector<float>(pd.begin(), pd.end())});
      if (prev_argmax >= 0 && am != prev_argmax) res.switches.push_back(it + 1);
      prev_argmax = am;
      if (nas_converged(res.history, cfg.nas_patience)) {
        res.converged = true;
        ++it;
        break;
      }
    }
  }
  res.iterations = it;
  res.selected = net.argmax();
  const auto pd = net.pi().value.data();
  res.pi.assign(pd.begin(), pd.end());
  return res;
}

int run_formal_stage(const DatasetSuite& suite, FormalState& st, const TrainConfig& cfg, const RunHooks& hooks,
                     std::string* trace_out) {
  auto& model = st.model;
  auto& g = st.stylizer;
  const auto& ab = cfg.loss.ablations;
  if (cfg.loss.perceptual == PerceptualMetric::variational_nll && st.perceptor == nullptr) {
    throw std::invalid_argument("formal stage: the variational perceptual metric needs a perceptor");
  }
  const auto f_params = model.f_parameters();
  const auto h_params = model.h_parameters();
  const auto g_params = g.parameters();
  const auto fh_params = concat(f_params, h_params);
  const auto& f_step_params = ab.end_to_end ? fh_params : f_params;

  Sgd opt_f(cfg.sgd(cfg.lr_f, true));
  Sgd opt_h(cfg.sgd(cfg.lr_h, true));
  Sgd opt_fh(cfg.sgd(cfg.lr_f, true));
  Sgd opt_g(cfg.sgd(cfg.lr_g, false));
  Sgd opt_q(cfg.sgd(cfg.lr_q, true));
  SemanticKernel kernel(cfg.loss.kernel, cfg.rbf_features, derive_seed(cfg.seed, {sid(Stream::kernel_features), kFormalStage}));
  const FormalModules mods{model, kernel, st.perceptor};
  BatchCursor aux(suite.source_train, cfg.batch_size, derive_seed(cfg.seed, {sid(Stream::head_batches), kFormalStage}));
  const int t_g = effective_t_g(cfg);
  const std::string expected =
      std::string(static_cast<std::size_t>(cfg.t_f), 'F') + std::string(static_cast<std::size_t>(cfg.t_h), 'H') +
      std::string(static_cast<std::size_t>(t_g), 'G');

  int it = 0;
  std::string trace;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto batches = iterate_batches(suite.source_train.size(), cfg.batch_size,
                                         derive_seed(cfg.seed, {sid(Stream::batches), kFormalStage, static_cast<std::uint64_t>(epoch)}));
    for (const auto& idx : batches) {
      if (cfg.max_iters > 0 && it >= cfg.max_iters) break;
      const auto uit = static_cast<std::uint64_t>(it);
      if (g.config().resample_each_iteration) g.resample_codecs(derive_seed(cfg.seed, {sid(Stream::codecs), kFormalStage, uit}));
      const Batch first = suite.source_train.gather(idx);
      trace.clear();

      for (int t = 0; t < cfg.t_f; ++t) {
        const Batch b = t == 0 ? first : aux.next();
        const Tensor xT = stylized(g, cfg, b.images, kFormalStage, it, Stage::F, t);
        fire(hooks, it, Stage::F, false);
        trace += 'F';
        {
          Tape<float> tape;
          Binding bind(tape);
          bind.train_all(f_step_params);
          auto r = loss_F(bind, mods, b.images, xT, b, cfg.loss);
          check_finite(r.parts.total, it, "F");
          tape.backward(r.total);
          apply_step(ab.end_to_end ? opt_fh : opt_f, f_step_params, tape.gradients(), it, "F");
          if (hooks.log) hooks.log->append(it, "F", r.parts);
        }
        if (st.perceptor != nullptr && cfg.loss.perceptual == PerceptualMetric::variational_nll) {
          const Binding none;
          const auto hS = model.hidden(none, model.destyle(none, b.images));
          const auto hT = model.hidden(none, model.destyle(none, xT));
          Tape<float> tape;
          Binding bind(tape);
          auto q_params = st.perceptor->parameters();
          bind.train_all(q_params);
          auto nll = variational_nll(bind, hS, hT, st.perceptor);
          check_finite(nll.item(), it, "q");
          tape.backward(nll);
          apply_step(opt_q, q_params, tape.gradients(), it, "q");
        }
        fire(hooks, it, Stage::F, true);
      }

      for (int t = 0; t < cfg.t_h; ++t) {
        const Batch b = aux.next();
        const Tensor xT = stylized(g, cfg, b.images, kFormalStage, it, Stage::H, t);
        fire(hooks, it, Stage::H, false);
        trace += 'H';
        Tape<float> tape;
        Binding bind(tape);
        bind.train_all(h_params);
        const auto f = model.destyle(Binding(), xT);
        auto loss = task_loss(model.head(bind, f), b, cfg.task);
        LossBreakdown parts;
        parts.task = parts.total = loss.item();
        check_finite(parts.total, it, "H");
        tape.backward(loss);
        apply_step(opt_h, h_params, tape.gradients(), it, "H");
        if (hooks.log) hooks.log->append(it, "H", parts);
        fire(hooks, it, Stage::H, true);
      }

      for (int t = 0; t < t_g; ++t) {
        const Batch b = t == 0 ? first : aux.next();
        const auto w = sample_mix_weights(
            g.num_blocks(), derive_seed(cfg.seed, {sid(Stream::mix_weights), kFormalStage, uit,
                                                   static_cast<std::uint64_t>(Stage::G), static_cast<std::uint64_t>(t)}));
        if (!kernel.ready()) {
          const Binding none;
          kernel.fit(model.hidden(none, model.destyle(none, b.images)));
        }
        fire(hooks, it, Stage::G, false);
        trace += 'G';
        Tape<float> tape;
        Binding bind(tape);
        bind.train_all(g_params);
        const Tensor xT = g.stylize(bind, b.images, w);
        auto r = loss_G(bind, mods, b.images, xT, b, cfg.loss);
        check_finite(r.parts.total, it, "G");
        tape.backward(r.total);
        apply_step(opt_g, g_params, tape.gradients(), it, "G");
        if (hooks.log) hooks.log->append(it, "G", r.parts);
        fire(hooks, it, Stage::G, true);
      }

      if (trace != expected) {
        throw std::logic_error("formal stage schedule violated at iteration " + std::to_string(it) + ": ran " + trace +
                               ", expected " + expected);
      }
      ++it;
    }
    if (hooks.on_epoch) hooks.on_epoch(epoch);
    if (cfg.max_iters > 0 && it >= cfg.max_iters) break;
  }
  if (trace_out) *trace_out = trace;
  return it;
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json per = nlohmann::json::object();
  nlohmann::json samples = nlohmann::json::object();
  for (const auto& d : domains) {
    per[d.name] = d.metric;
    samples[d.name] = d.samples;
  }
  nlohmann::json targets = nlohmann::json::array();
  for (std::size_t i = 1; i < domains.size(); ++i) targets.push_back(domains[i].name);
  return {{"config_hash", config_hash},
          {"seed", seed},
          {"selected_position", selected_position},
          {"task", to_string(task)},
          {"metric", metric_name()},
          {"per_domain", per},
          {"samples", samples},
          {"targets", targets},
          {"average", average},
          {"ablations", ablations}};
}

EvalEntry evaluate(const SplitModel& model, const LabeledSet& set, TaskKind task) {
  EvalEntry e;
  e.name = set.name;
  e.samples = set.size();
  if (set.size() == 0) return e;
  const Binding none;
  constexpr int kChunk = 250;
  long correct = 0;
  double sq = 0;
  for (int begin = 0; begin < set.size(); begin += kChunk) {
    const int end = std::min(set.size(), begin + kChunk);
    std::vector<int> idx(static_cast<std::size_t>(end - begin));
    for (int i = begin; i < end; ++i) idx[static_cast<std::size_t>(i - begin)] = i;
    const Batch b = set.gather(idx);
    const Tensor out = model.forward(none, b.images);
    const int k = out.dim(1);
    const auto o = out.data();
    for (int i = 0; i < b.size(); ++i) {
      if (task == TaskKind::classification) {
        const auto row = o.subspan(static_cast<std::size_t>(i * k), static_cast<std::size_t>(k));
        const auto pred = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
        correct += pred == b.labels[static_cast<std::size_t>(i)];
      } else {
        const auto tg = b.targets.data();
        for (int j = 0; j < k; ++j) {
          const double d = o[static_cast<std::size_t>(i * k + j)] - tg[static_cast<std::size_t>(i * k + j)];
          sq += d * d / k;
        }
      }
    }
  }
  e.metric = task == TaskKind::classification ? static_cast<double>(correct) / set.size() : sq / set.size();
  return e;
}

EvalReport evaluate_suite(const SplitModel& model, const DatasetSuite& suite, const TrainConfig& cfg, int position) {
  EvalReport r;
  r.config_hash = cfg.hash();
  r.seed = cfg.seed;
  r.selected_position = position;
  r.task = cfg.task;
  r.ablations = cfg.loss.ablations.names();
  r.domains.push_back(evaluate(model, suite.source_test, cfg.task));
  double total = 0;
  for (const auto& t : suite.targets) {
    r.domains.push_back(evaluate(model, t, cfg.task));
    total += r.domains.back().metric;
  }
  r.average = suite.targets.empty() ? 0.0 : total / static_cast<double>(suite.targets.size());
  return r;
}

SplitModel make_split_model(const TrainConfig& cfg, int position, std::uint64_t seed) {
  const auto spec = cfg.backbone_spec();
  Backbone net(spec, seed);
  return split_at(std::move(net), position, AdaINParams::identity(spec.candidate_channels(position), "adain"),
                  !cfg.loss.ablations.no_destyle);
}

namespace {

nlohmann::json checkpoint_meta(const TrainConfig& cfg, const SplitModel& model, const Stylizer& g, const char* group) {
  return {{"group", group},
          {"config_hash", cfg.hash()},
          {"seed", cfg.seed},
          {"selected_position", model.candidate()},
          {"adain_enabled", model.adain_enabled()},
          {"backbone", model.backbone().spec().to_json()},
          {"stylizer", g.config().to_json()},
          {"conventions",
           {{"weight_decay_in_velocity", true},
            {"nesterov", cfg.nesterov},
            {"tau", cfg.tau},
            {"tau_annealing", false},
            {"formal_stage_restarts_backbone", true}}}};
}

}  // namespace

void save_run_checkpoints(const std::filesystem::path& dir, const TrainConfig& cfg, const SplitModel& model,
                          const Stylizer& g, std::map<std::string, std::string>* files) {
  std::filesystem::create_directories(dir);
  auto& m = const_cast<SplitModel&>(model);
  auto& gm = const_cast<Stylizer&>(g);
  auto fp = m.f_parameters();
  if (!model.adain_enabled()) {
    fp.push_back(const_cast<Parameter*>(&model.adain_params().mu));
    fp.push_back(const_cast<Parameter*>(&model.adain_params().sigma));
  }
  const std::vector<const Parameter*> f(fp.begin(), fp.end());
  const auto h = model.h_parameters();
  const auto gp = gm.parameters();
  const std::vector<const Parameter*> gs(gp.begin(), gp.end());
  save_checkpoint(dir / "F", f, checkpoint_meta(cfg, model, g, "F"));
  save_checkpoint(dir / "H", h, checkpoint_meta(cfg, model, g, "H"));
  save_checkpoint(dir / "G", gs, checkpoint_meta(cfg, model, g, "G"));
  if (files) {
    for (const char* grp : {"F", "H", "G"}) {
      (*files)[std::string("checkpoint_") + grp] = (dir / grp).string();
    }
  }
}

SplitModel load_split_model(const std::filesystem::path& dir, const TrainConfig& cfg) {
  const auto f = load_checkpoint(dir / "F");
  const auto h = load_checkpoint(dir / "H");
  const auto spec = cfg.backbone_spec();
  if (f.manifest.value("backbone", nlohmann::json()) != spec.to_json()) {
    throw ConfigError("checkpoint backbone in " + (dir / "F.json").string() + " does not match the configured backbone");
  }
  const int position = f.manifest.at("selected_position").get<int>();
  const bool enabled = f.manifest.at("adain_enabled").get<bool>();
  if (position < 0 || position >= spec.num_candidates()) throw ConfigError("checkpoint: selected_position out of range");
  SplitModel model(Backbone(spec, 0), position, AdaINParams::identity(spec.candidate_channels(position), "adain"), enabled);
  auto fp = model.f_parameters();
  if (!enabled) {
    fp.push_back(const_cast<Parameter*>(&model.adain_params().mu));
    fp.push_back(const_cast<Parameter*>(&model.adain_params().sigma));
  }
  f.restore(fp);
  const auto hp = model.h_parameters();
  h.restore(hp);
  return model;
}

Stylizer load_stylizer(const std::filesystem::path& dir) {
  const auto ck = load_checkpoint(dir / "G");
  StylizerConfig sc;
  try {
    const auto& j = ck.manifest.at("stylizer");
    sc.in_channels = j.at("input").at(0).get<int>();
    sc.height = j.at("input").at(1).get<int>();
    sc.width = j.at("input").at(2).get<int>();
    sc.blocks.clear();
    for (const auto& b : j.at("blocks")) {
      sc.blocks.push_back({style_mode_from_string(b.at("mode").get<std::string>()), b.at("channels").get<int>(),
                           b.at("kernel").get<int>()});
    }
    sc.resample_each_iteration = j.at("resample_each_iteration").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError((dir / "G.json").string() + ": " + e.what());
  }
  Stylizer g(sc, 0);
  const auto gp = g.parameters();
  ck.restore(gp);
  return g;
}

RunArtifacts train(const TrainConfig& cfg, const DatasetSuite& suite, const RunOptions& options) {
  cfg.validate();
  if (suite.targets.empty()) throw std::invalid_argument("train: the suite needs at least one target domain");
  RunArtifacts art;
  const bool persist = !options.out_dir.empty();
  std::optional<LossLog> log;
  RunHooks hooks = options.hooks;
  if (persist) {
    std::filesystem::create_directories(options.out_dir);
    log.emplace(options.out_dir / "train_log.csv");
    art.files["log"] = (options.out_dir / "train_log.csv").string();
    if (!hooks.log) hooks.log = &*log;
  }
  const auto spec = cfg.backbone_spec();

  if (cfg.loss.ablations.no_destyle) {
    art.nas.skipped = true;
    art.nas.converged = true;
    art.nas.selected = cfg.default_position;
  } else {
    Supernet net(Backbone(spec, stream_seed(cfg.seed, Stream::backbone_init)), cfg.tau);
    Stylizer g(cfg.stylizer, stream_seed(cfg.seed, Stream::stylizer_init, 0));
    art.nas = run_nas_stage(suite, net, g, cfg, hooks);
  }
  if (persist) {
    std::ofstream(options.out_dir / "nas.json") << art.nas.to_json().dump(2) << '\n';
    art.files["nas"] = (options.out_dir / "nas.json").string();
  }
  if (options.nas_only) return art;

  art.model.emplace(make_split_model(cfg, art.nas.selected, stream_seed(cfg.seed, Stream::formal_backbone_init)));
  art.stylizer.emplace(cfg.stylizer, stream_seed(cfg.seed, Stream::stylizer_init, 1));
  std::optional<Perceptor> q;
  if (cfg.loss.perceptual == PerceptualMetric::variational_nll) {
    q.emplace(spec.activation_shapes()[static_cast<std::size_t>(spec.layers.size() - 1)][0],
              stream_seed(cfg.seed, Stream::perceptor_init));
  }
  FormalState st{*art.model, *art.stylizer, q ? &*q : nullptr};
  if (persist) {
    // Keep a valid checkpoint on disk from the start so an abort in the first
    // epoch still leaves the last good state behind.
    save_run_checkpoints(options.out_dir / "checkpoints", cfg, *art.model, *art.stylizer);
    hooks.on_epoch = [&, user = options.hooks.on_epoch](int epoch) {
      save_run_checkpoints(options.out_dir / "checkpoints", cfg, *art.model, *art.stylizer);
      if (user) user(epoch);
    };
  }
  art.formal_iterations = run_formal_stage(suite, st, cfg, hooks);

  art.report = evaluate_suite(*art.model, suite, cfg, art.nas.selected);
  if (persist) {
    save_run_checkpoints(options.out_dir / "checkpoints", cfg, *art.model, *art.stylizer, &art.files);
    std::ofstream(options.out_dir / "report.json") << art.report.to_json().dump(2) << '\n';
    art.files["report"] = (options.out_dir / "report.json").string();
    if (log) log->flush();
  }
  return art;
}

}  // namespace stydesty
