#include "stydesty/gradcheck_suite.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <sstream>
#include <unordered_map>

#include "stydesty/adain.hpp"
#include "stydesty/backbone.hpp"
#include "stydesty/gradcheck.hpp"
#include "stydesty/objectives.hpp"
#include "stydesty/ops.hpp"
#include "stydesty/rng.hpp"
#include "stydesty/stylizer.hpp"
#include "stydesty/supernet.hpp"

namespace stydesty {
namespace {

// ---------------------------------------------------------------------------
// Single-op checks
// ---------------------------------------------------------------------------

const std::vector<std::string>& op_names() {
  static const std::vector<std::string> names{
      "conv2d",  "conv_transpose2d", "instance_stats",   "normalize_affine", "relu",    "sigmoid",
      "cos",     "linear",           "max_pool",         "avg_pool",         "softmax_cross_entropy",
      "sq_l2",   "add",              "sub",              "scale",            "add_channel_bias",
      "blend",   "sum",              "batch_mean",       "element",          "reshape", "softmax",
      "gaussian_nll"};
  return names;
}

const std::vector<std::string>& composite_names() {
  static const std::vector<std::string> names{"stylize_destyle_classify", "loss_F", "loss_G", "loss_P_nas",
                                              "loss_G_nas"};
  return names;
}

int uniform_int(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

template <typename T>
BasicTensor<T> uniform(Rng& rng, Shape shape, double lo = -1, double hi = 1) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<T> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& e : v) e = static_cast<T>(u(rng));
  return BasicTensor<T>(std::move(shape), std::move(v));
}

/// Identity forward whose backward negates the incoming gradient.
template <typename T>
BasicTensor<T> flip_gradient(const BasicTensor<T>& y) {
  if (y.tape() == nullptr) return y;
  return y.tape()->record(y.detach(), {&y}, [](std::span<const T> g, std::span<std::vector<T>* const> in) {
    if (in[0]) {
      for (std::size_t i = 0; i < g.size(); ++i) (*in[0])[i] -= g[i];
    }
  });
}

template <typename T>
using OpFn = std::function<BasicTensor<T>(const BasicTensor<T>&)>;

template <typename T>
struct OpInput {
  BasicTensor<T> value;
  OpFn<T> fn;  // the op with every other operand held fixed
};

// Draws one random geometry for `op` and returns one closure per operand.
template <typename T>
std::vector<OpInput<T>> make_inputs(const std::string& op, Rng& rng) {
  using Tn = BasicTensor<T>;
  std::vector<OpInput<T>> in;
  auto rand_shape = [&](int min_rank) {
    Shape s;
    const int rank = uniform_int(rng, min_rank, 4);
    for (int i = 0; i < rank; ++i) s.push_back(uniform_int(rng, 1, 4));
    return s;
  };

  if (op == "conv2d" || op == "conv_transpose2d") {
    const int n = uniform_int(rng, 1, 2), ci = uniform_int(rng, 1, 3), co = uniform_int(rng, 1, 3);
    const int k = uniform_int(rng, 1, 3), stride = uniform_int(rng, 1, 2), pad = uniform_int(rng, 0, k - 1);
    const int h = uniform_int(rng, std::max(2, k), k + 4), w = uniform_int(rng, std::max(2, k), k + 4);
    if (op == "conv2d") {
      Tn x = uniform<T>(rng, {n, ci, h, w}), kern = uniform<T>(rng, {co, ci, k, k});
      in.push_back({x, [=](const Tn& v) { return conv2d(v, kern, stride, pad); }});
      in.push_back({kern, [=](const Tn& v) { return conv2d(x, v, stride, pad); }});
    } else {
      // Keep the output at least one pixel wide.
      const int p = std::min(pad, ((h - 1) * stride + k - 1) / 2);
      Tn x = uniform<T>(rng, {n, co, h, w}), kern = uniform<T>(rng, {co, ci, k, k});
      in.push_back({x, [=](const Tn& v) { return conv_transpose2d(v, kern, stride, p); }});
      in.push_back({kern, [=](const Tn& v) { return conv_transpose2d(x, v, stride, p); }});
    }
  } else if (op == "instance_stats") {
    Tn f = uniform<T>(rng, {uniform_int(rng, 1, 2), uniform_int(rng, 1, 3), uniform_int(rng, 2, 5), uniform_int(rng, 2, 5)});
    in.push_back({f, [](const Tn& v) {
                    auto s = instance_stats(v);
                    return add(s.mean, scale(s.std, 1.7));
                  }});
  } else if (op == "normalize_affine") {
    const int n = uniform_int(rng, 1, 2), c = uniform_int(rng, 1, 3), h = uniform_int(rng, 1, 4), w = uniform_int(rng, 1, 4);
    const bool per_position = uniform_int(rng, 0, 1) == 1;
    const Shape ps = per_position ? Shape{c, h, w} : Shape{c};
    Tn f = uniform<T>(rng, {n, c, h, w}), mean = uniform<T>(rng, {n, c}), sd = uniform<T>(rng, {n, c}, 0.5, 2.0);
    Tn sc = uniform<T>(rng, ps), sh = uniform<T>(rng, ps);
    in.push_back({f, [=](const Tn& v) { return normalize_affine(v, mean, sd, sc, sh); }});
    in.push_back({mean, [=](const Tn& v) { return normalize_affine(f, v, sd, sc, sh); }});
    in.push_back({sd, [=](const Tn& v) { return normalize_affine(f, mean, v, sc, sh); }});
    in.push_back({sc, [=](const Tn& v) { return normalize_affine(f, mean, sd, v, sh); }});
    in.push_back({sh, [=](const Tn& v) { return normalize_affine(f, mean, sd, sc, v); }});
  } else if (op == "relu" || op == "sigmoid" || op == "cos") {
    const auto kind = op == "relu" ? Pointwise::relu : op == "sigmoid" ? Pointwise::sigmoid : Pointwise::cos;
    in.push_back({uniform<T>(rng, rand_shape(1), -3, 3), [=](const Tn& v) { return pointwise(v, kind); }});
  } else if (op == "linear") {
    const int n = uniform_int(rng, 1, 4), d = uniform_int(rng, 1, 6), k = uniform_int(rng, 1, 5);
    Tn x = uniform<T>(rng, {n, d}), w = uniform<T>(rng, {d, k}), b = uniform<T>(rng, {k});
    in.push_back({x, [=](const Tn& v) { return linear(v, w, b); }});
    in.push_back({w, [=](const Tn& v) { return linear(x, v, b); }});
    in.push_back({b, [=](const Tn& v) { return linear(x, w, v); }});
  } else if (op == "max_pool" || op == "avg_pool") {
    const auto kind = op == "max_pool" ? PoolKind::max : PoolKind::avg;
    const int win = uniform_int(rng, 1, 3), stride = uniform_int(rng, 1, 3);
    Tn x = uniform<T>(rng, {uniform_int(rng, 1, 2), uniform_int(rng, 1, 3), uniform_int(rng, win, win + 4),
                            uniform_int(rng, win, win + 4)});
    in.push_back({x, [=](const Tn& v) { return pool(v, kind, win, stride); }});
  } else if (op == "softmax_cross_entropy") {
    const int n = uniform_int(rng, 1, 4), k = uniform_int(rng, 2, 6);
    std::vector<int> labels;
    for (int i = 0; i < n; ++i) labels.push_back(uniform_int(rng, 0, k - 1));
    in.push_back({uniform<T>(rng, {n, k}, -3, 3), [=](const Tn& v) { return softmax_cross_entropy(v, labels); }});
  } else if (op == "sq_l2" || op == "add" || op == "sub") {
    const Shape s = rand_shape(1);
    Tn a = uniform<T>(rng, s), b = uniform<T>(rng, s);
    auto f = [op](const Tn& x, const Tn& y) { return op == "sq_l2" ? sq_l2(x, y) : op == "add" ? add(x, y) : sub(x, y); };
    in.push_back({a, [=](const Tn& v) { return f(v, b); }});
    in.push_back({b, [=](const Tn& v) { return f(a, v); }});
  } else if (op == "scale") {
    const double factor = std::uniform_real_distribution<double>(-2, 2)(rng);
    in.push_back({uniform<T>(rng, rand_shape(1)), [=](const Tn& v) { return scale(v, factor); }});
  } else if (op == "add_channel_bias") {
    const int n = uniform_int(rng, 1, 3), c = uniform_int(rng, 1, 4);
    const Shape s = uniform_int(rng, 0, 1) ? Shape{n, c} : Shape{n, c, uniform_int(rng, 1, 4), uniform_int(rng, 1, 4)};
    Tn x = uniform<T>(rng, s), b = uniform<T>(rng, {c});
    in.push_back({x, [=](const Tn& v) { return add_channel_bias(v, b); }});
    in.push_back({b, [=](const Tn& v) { return add_channel_bias(x, v); }});
  } else if (op == "blend") {
    const Shape s = rand_shape(1);
    Tn t = uniform<T>(rng, {}, 0, 1), a = uniform<T>(rng, s), b = uniform<T>(rng, s);
    in.push_back({t, [=](const Tn& v) { return blend(v, a, b); }});
    in.push_back({a, [=](const Tn& v) { return blend(t, v, b); }});
    in.push_back({b, [=](const Tn& v) { return blend(t, a, v); }});
  } else if (op == "sum") {
    in.push_back({uniform<T>(rng, rand_shape(1)), [](const Tn& v) { return sum(v); }});
  } else if (op == "batch_mean") {
    in.push_back({uniform<T>(rng, rand_shape(2)), [](const Tn& v) { return batch_mean(v); }});
  } else if (op == "element") {
    Tn x = uniform<T>(rng, rand_shape(1));
    const auto idx = static_cast<std::int64_t>(uniform_int(rng, 0, static_cast<int>(x.numel()) - 1));
    in.push_back({x, [=](const Tn& v) { return element(v, idx); }});
  } else if (op == "reshape") {
    Tn x = uniform<T>(rng, rand_shape(1));
    const Shape flat{1, static_cast<int>(x.numel())};
    in.push_back({x, [=](const Tn& v) { return reshape(v, flat); }});
  } else if (op == "softmax") {
    in.push_back({uniform<T>(rng, {uniform_int(rng, 1, 7)}, -1.5, 1.5), [](const Tn& v) { return softmax(v); }});
  } else if (op == "gaussian_nll") {
    const int n = uniform_int(rng, 1, 4), d = uniform_int(rng, 1, 5);
    Tn t = uniform<T>(rng, {n, d}), m = uniform<T>(rng, {n, d}), lv = uniform<T>(rng, {n, d});
    in.push_back({t, [=](const Tn& v) { return gaussian_nll(v, m, lv); }});
    in.push_back({m, [=](const Tn& v) { return gaussian_nll(t, v, lv); }});
    in.push_back({lv, [=](const Tn& v) { return gaussian_nll(t, m, v); }});
  } else {
    throw std::invalid_argument("gradcheck: no generator for op '" + op + "'");
  }
  return in;
}

template <typename T>
SuiteRow check_op(const std::string& op, const SuiteOptions& opt, std::uint64_t salt) {
  constexpr bool f64 = std::is_same_v<T, double>;
  SuiteRow row{op, "op", f64 ? "float64" : "float32"};
  row.tolerance = f64 ? 1e-6 : 1e-3;
  const bool fault = opt.inject_fault == op;
  GradCheckOptions gc;
  gc.eps = f64 ? 1e-6 : 1e-2;
  gc.tolerance = row.tolerance;
  gc.max_probes = 48;
  // Each geometry checks sampled rows of the Jacobian of every operand. The
  // error is the largest entry-wise deviation over the largest Jacobian entry
  // seen for that geometry, so a row that happens to be near zero is not
  // judged on rounding noise alone.
  constexpr int kRows = 8;
  for (int g = 0; g < opt.geometries; ++g) {
    Rng rng(derive_seed(opt.seed, {salt, static_cast<std::uint64_t>(g)}));
    double max_abs = 0, max_mag = 0;
    for (auto& input : make_inputs<T>(op, rng)) {
      // Differencing against y(x0) keeps the scalar small, so its rounding
      // does not swamp the difference quotient.
      const BasicTensor<T> y0 = input.fn(input.value);
      const auto n = static_cast<int>(y0.numel());
      for (int r = 0; r < std::min(n, kRows); ++r) {
        const std::int64_t k = n <= kRows ? r : uniform_int(rng, 0, n - 1);
        auto loss = [&](const BasicTensor<T>& x) {
          auto y = input.fn(x);
          if (fault) y = flip_gradient(y);
          return element(sub(y, y0), k);
        };
        gc.seed = derive_seed(opt.seed, {salt, static_cast<std::uint64_t>(g), static_cast<std::uint64_t>(r)});
        const auto rep = grad_check<T>(loss, input.value, gc);
        row.probes += rep.probes;
        for (const auto& e : rep.entries) {
          row.excluded += e.excluded;
          max_abs = std::max(max_abs, e.max_abs_error);
          max_mag = std::max(max_mag, e.max_magnitude);
        }
      }
    }
    const double rel = max_abs / std::max(max_mag, 1e-8);
    row.max_rel_error = std::max(row.max_rel_error, rel);
    ++row.geometries;
    row.passed += rel < row.tolerance;
  }
  row.pass = row.passed == row.geometries;
  return row;
}

// ---------------------------------------------------------------------------
// Composite graphs: float32 analytic gradients against central differences
// of a float64 replica of the same graph.
// ---------------------------------------------------------------------------

/// Float64 copies of parameter values, perturbed in place by the checker.
struct Shadow {
  std::unordered_map<const Parameter*, TensorD> values;
  TensorD operator()(const Parameter& p) const {
    auto it = values.find(&p);
    return it == values.end() ? p.value.cast<double>() : it->second;
  }
};

TensorD replay_layers(const Backbone& net, const Shadow& s, TensorD x, int begin, int end) {
  for (int i = begin; i < end; ++i) {
    std::vector<TensorD> p;
    for (const auto* q : net.parameters(i, i + 1)) p.push_back(s(*q));
    x = apply_layer<double>(net.spec().layers[static_cast<std::size_t>(i)], p, x);
  }
  return x;
}

TensorD replay_destyle(const SplitModel& m, const Shadow& s, const TensorD& x) {
  auto f = replay_layers(m.backbone(), s, x, 0, m.boundary());
  return m.adain_enabled() ? adain(f, s(m.adain_params().mu), s(m.adain_params().sigma)) : f;
}

TensorD replay_hidden(const SplitModel& m, const Shadow& s, const TensorD& f) {
  return replay_layers(m.backbone(), s, f, m.boundary(), m.hidden_tap());
}

TensorD replay_logits(const SplitModel& m, const Shadow& s, const TensorD& h) {
  return replay_layers(m.backbone(), s, h, m.hidden_tap(), m.hidden_tap() + 1);
}

TensorD replay_stylize(const Stylizer& g, const Shadow& s, const TensorD& x, const std::vector<double>& w) {
  double total = 0;
  for (double v : w) total += v;
  TensorD mix;
  for (int j = 0; j < g.num_blocks(); ++j) {
    const auto& b = g.block(j);
    const int pad = b.config.kernel / 2;
    const auto f = conv2d(x, b.enc.cast<double>(), 1, pad);
    const auto st = instance_stats(f);
    const auto xj = scale(conv_transpose2d(normalize_affine(f, st.mean, st.std, s(b.sigma), s(b.mu)), b.dec.cast<double>(), 1, pad),
                          w[static_cast<std::size_t>(j)] / total);
    mix = mix.defined() ? add(mix, xj) : xj;
  }
  return sigmoid(mix);
}

struct ReplayTrace {
  TensorD logits, hidden;
  std::vector<TensorD> adained;
};

ReplayTrace replay_supernet(const Supernet& net, const Shadow& s, const TensorD& x, const TensorD& pi_hat) {
  const auto& bb = net.backbone();
  const auto& cands = bb.spec().candidates;
  ReplayTrace tr;
  TensorD h = x;
  std::size_t next = 0;
  const int last = bb.num_layers() - 1;
  for (int i = 0; i <= last; ++i) {
    if (next < cands.size() && cands[next] == i) {
      const auto& p = net.adain(static_cast<int>(next));
      auto a = adain(h, s(p.mu), s(p.sigma));
      tr.adained.push_back(a);
      h = blend(element(pi_hat, static_cast<std::int64_t>(next)), a, h);
      ++next;
    }
    if (i == last) tr.hidden = h;
    h = replay_layers(bb, s, h, i, i + 1);
  }
  tr.logits = h;
  return tr;
}

double replay_loss_F(const SplitModel& m, const Shadow& s, const TensorD& xS, const TensorD& xT,
                     const std::vector<int>& labels, const LossConfig& cfg, TensorD* hS_out = nullptr,
                     TensorD* hT_out = nullptr) {
  const auto fT = replay_destyle(m, s, xT), fS = replay_destyle(m, s, xS);
  const auto hT = replay_hidden(m, s, fT), hS = replay_hidden(m, s, fS);
  double total = softmax_cross_entropy(replay_logits(m, s, hT), labels).item();
  total += cfg.alpha * (sq_l2(fS, fT).item() + cfg.lambda * sq_l2(hS, hT).item());
  if (hS_out) *hS_out = hS;
  if (hT_out) *hT_out = hT;
  return total;
}

struct Composite {
  std::vector<Parameter*> params;
  std::function<Tensor(const Binding&)> analytic;
  std::function<double(const Shadow&)> replay;
};

SuiteRow check_composite(const std::string& name, const SuiteOptions& opt, std::uint64_t salt) {
  SuiteRow row{name, "composite", "float32"};
  row.tolerance = 1e-3;
  const bool fault = opt.inject_fault == name;
  for (int g = 0; g < opt.composite_geometries; ++g) {
    const std::uint64_t seed = derive_seed(opt.seed, {salt, static_cast<std::uint64_t>(g)});
    Rng rng(seed);
    const int n = 4;
    const auto xS = uniform<float>(rng, {n, 3, 32, 32}, 0, 1);
    const auto xS_d = xS.cast<double>();
    std::vector<int> labels;
    for (int i = 0; i < n; ++i) labels.push_back(uniform_int(rng, 0, 9));
    Batch batch{xS, labels, {}};
    const auto spec = BackboneSpec::lenet(10);
    const int position = uniform_int(rng, 0, spec.num_candidates() - 1);
    auto ada = AdaINParams::identity(spec.candidate_channels(position), "adain");
    ada.mu.value = uniform<float>(rng, ada.mu.value.shape(), -0.5, 0.5);
    ada.sigma.value = uniform<float>(rng, ada.sigma.value.shape(), 0.5, 1.5);
    SplitModel model(Backbone(spec, derive_seed(seed, {1})), position, std::move(ada));
    Stylizer styl(StylizerConfig{}, derive_seed(seed, {2}));
    for (int j = 0; j < styl.num_blocks(); ++j) {
      auto& b = styl.block(j);
      b.mu.value = uniform<float>(rng, b.mu.value.shape(), -0.3, 0.3);
      b.sigma.value = uniform<float>(rng, b.sigma.value.shape(), 0.6, 1.4);
    }
    const std::vector<double> w = sample_mix_weights(styl.num_blocks(), derive_seed(seed, {3}));
    Supernet net(Backbone(spec, derive_seed(seed, {4})));
    for (int l = 0; l < net.num_positions(); ++l) {
      net.adain(l).mu.value = uniform<float>(rng, net.adain(l).mu.value.shape(), -0.5, 0.5);
      net.adain(l).sigma.value = uniform<float>(rng, net.adain(l).sigma.value.shape(), 0.5, 1.5);
    }
    TensorD pi_hat_d = TensorD::zeros({spec.num_candidates()});
    pi_hat_d.mutable_data()[static_cast<std::size_t>(position)] = 1.0;
    const Tensor pi_hat = pi_hat_d.cast<float>();
    const SemanticKernel kernel;
    LossConfig cfg;
    const FormalModules mods{model, kernel, nullptr};

    Composite c;
    if (name == "stylize_destyle_classify") {
      c.params = styl.parameters();
      for (auto* p : model.f_parameters()) c.params.push_back(p);
      for (auto* p : model.h_parameters()) c.params.push_back(p);
      c.analytic = [&](const Binding& b) {
        return softmax_cross_entropy(model.forward(b, styl.stylize(b, xS, w)), labels);
      };
      c.replay = [&](const Shadow& s) {
        const auto xT = replay_stylize(styl, s, xS_d, w);
        return softmax_cross_entropy(replay_logits(model, s, replay_hidden(model, s, replay_destyle(model, s, xT))), labels)
            .item();
      };
    } else if (name == "loss_F") {
      const auto xT = styl.stylize(Binding(), xS, w);
      const auto xT_d = xT.cast<double>();
      c.params = model.f_parameters();
      c.analytic = [&, xT](const Binding& b) { return loss_F(b, mods, xS, xT, batch, cfg).total; };
      c.replay = [&, xT_d](const Shadow& s) { return replay_loss_F(model, s, xS_d, xT_d, labels, cfg); };
    } else if (name == "loss_G") {
      c.params = styl.parameters();
      c.analytic = [&](const Binding& b) { return loss_G(b, mods, xS, styl.stylize(b, xS, w), batch, cfg).total; };
      c.replay = [&](const Shadow& s) {
        TensorD hS, hT;
        const double lf = replay_loss_F(model, s, xS_d, replay_stylize(styl, s, xS_d, w), labels, cfg, &hS, &hT);
        return -lf + cfg.beta * sq_l2(batch_mean(hS), batch_mean(hT)).item();
      };
    } else if (name == "loss_P_nas") {
      const auto xT = styl.stylize(Binding(), xS, w);
      const auto xT_d = xT.cast<double>();
      c.params = net.network_parameters();
      c.analytic = [&, xT](const Binding& b) { return loss_P_nas(b, net, pi_hat, xS, xT, batch, cfg).total; };
      c.replay = [&, xT_d](const Shadow& s) {
        const auto t = replay_supernet(net, s, xT_d, pi_hat_d), src = replay_supernet(net, s, xS_d, pi_hat_d);
        const auto l = static_cast<std::size_t>(position);
        return softmax_cross_entropy(t.logits, labels).item() + cfg.alpha * sq_l2(src.adained[l], t.adained[l]).item();
      };
    } else if (name == "loss_G_nas") {
      c.params = styl.parameters();
      c.analytic = [&](const Binding& b) {
        return loss_G_nas(b, net, pi_hat, kernel, xS, styl.stylize(b, xS, w), batch, cfg).total;
      };
      c.replay = [&](const Shadow& s) {
        const auto xT = replay_stylize(styl, s, xS_d, w);
        const auto t = replay_supernet(net, s, xT, pi_hat_d), src = replay_supernet(net, s, xS_d, pi_hat_d);
        const auto l = static_cast<std::size_t>(position);
        const double lp = softmax_cross_entropy(t.logits, labels).item() + cfg.alpha * sq_l2(src.adained[l], t.adained[l]).item();
        return -lp + cfg.beta * sq_l2(batch_mean(src.hidden), batch_mean(t.hidden)).item();
      };
    } else {
      throw std::invalid_argument("gradcheck: unknown composite '" + name + "'");
    }

    Tape<float> tape;
    Binding bind(tape);
    bind.train_all(c.params);
    tape.backward(c.analytic(bind));

    Shadow shadow;
    for (auto* p : c.params) shadow.values[p] = p->value.cast<double>();
    auto eval = [&] {
      KinkProbe probe;
      const double v = c.replay(shadow);
      return std::pair<double, std::uint64_t>{v, probe.signature()};
    };
    const auto centre = eval();
    double max_diff = 0, max_mag = 0;
    for (auto* p : c.params) {
      const auto* grad = tape.gradients().find(*p);
      auto& vals = shadow.values[p];
      const auto count = static_cast<int>(vals.numel());
      for (int probe = 0; probe < std::min(count, 6); ++probe) {
        const auto k = static_cast<std::size_t>(count <= 6 ? probe : uniform_int(rng, 0, count - 1));
        const double x0 = vals.data()[k];
        const double h = 1e-6 * std::max(1.0, std::abs(x0));
        vals.mutable_data()[k] = x0 + h;
        const auto plus = eval();
        vals.mutable_data()[k] = x0 - h;
        const auto minus = eval();
        vals.mutable_data()[k] = x0;
        if (plus.second != centre.second || minus.second != centre.second) {
          ++row.excluded;
          continue;
        }
        const double numeric = (plus.first - minus.first) / (2 * h);
        double analytic = grad ? static_cast<double>((*grad)[k]) : 0.0;
        if (fault) analytic = -analytic;
        max_diff = std::max(max_diff, std::abs(analytic - numeric));
        max_mag = std::max({max_mag, std::abs(analytic), std::abs(numeric)});
        ++row.probes;
      }
    }
    const double rel = max_diff / std::max(max_mag, 1e-12);
    row.max_rel_error = std::max(row.max_rel_error, rel);
    ++row.geometries;
    row.passed += rel < row.tolerance;
  }
  row.pass = row.passed == row.geometries;
  return row;
}

bool contains(const std::vector<std::string>& v, const std::string& s) {
  return std::find(v.begin(), v.end(), s) != v.end();
}

}  // namespace

std::vector<std::string> gradcheck_op_names() { return op_names(); }
std::vector<std::string> gradcheck_composite_names() { return composite_names(); }

SuiteReport run_gradcheck_suite(const SuiteOptions& options) {
  const auto& ops = op_names();
  const auto& comps = composite_names();
  const auto& scope = options.scope;
  if (scope != "all" && scope != "ops" && scope != "composites" && !contains(ops, scope) && !contains(comps, scope)) {
    throw std::invalid_argument("gradcheck: unknown scope '" + scope + "' (expected all, ops, composites or an op name)");
  }
  if (!options.inject_fault.empty() && !contains(ops, options.inject_fault) && !contains(comps, options.inject_fault)) {
    throw std::invalid_argument("gradcheck: cannot inject a fault into unknown op '" + options.inject_fault + "'");
  }
  if (options.geometries < 1 || options.composite_geometries < 1) {
    throw std::invalid_argument("gradcheck: geometry counts must be >= 1");
  }
  const auto start = std::chrono::steady_clock::now();
  SuiteReport rep;
  rep.fault = options.inject_fault;
  std::uint64_t salt = 0;
  for (const auto& op : ops) {
    ++salt;
    if (scope != "all" && scope != "ops" && scope != op) continue;
    rep.rows.push_back(check_op<float>(op, options, salt));
    rep.rows.push_back(check_op<double>(op, options, salt));
  }
  for (const auto& c : comps) {
    ++salt;
    if (scope != "all" && scope != "composites" && scope != c) continue;
    rep.rows.push_back(check_composite(c, options, salt));
  }
  rep.pass = std::all_of(rep.rows.begin(), rep.rows.end(), [](const SuiteRow& r) { return r.pass; });
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return rep;
}

nlohmann::json SuiteReport::to_json() const {
  nlohmann::json rs = nlohmann::json::array();
  for (const auto& r : rows) {
    rs.push_back({{"name", r.name},
                  {"kind", r.kind},
                  {"dtype", r.dtype},
                  {"geometries", r.geometries},
                  {"passed", r.passed},
                  {"max_rel_error", r.max_rel_error},
                  {"tolerance", r.tolerance},
                  {"probes", r.probes},
                  {"excluded", r.excluded},
                  {"pass", r.pass}});
  }
  return {{"rows", rs}, {"pass", pass}, {"fault", fault.empty() ? nlohmann::json() : nlohmann::json(fault)},
          {"seconds", seconds}};
}

std::string SuiteReport::table() const {
  std::ostringstream os;
  char buf[200];
  std::snprintf(buf, sizeof buf, "%-26s %-9s %-7s %8s %12s %9s %7s %8s  %s\n", "name", "kind", "dtype", "passed",
                "max_rel_err", "tol", "probes", "excluded", "result");
  os << buf;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-26s %-9s %-7s %4d/%-3d %12.3e %9.0e %7d %8d  %s\n", r.name.c_str(), r.kind.c_str(),
                  r.dtype == "float32" ? "f32" : "f64", r.passed, r.geometries, r.max_rel_error, r.tolerance, r.probes,
                  r.excluded, r.pass ? "PASS" : "FAIL");
    os << buf;
  }
  std::snprintf(buf, sizeof buf, "%s in %.1fs%s\n", pass ? "all checks passed" : "GRADIENT CHECK FAILED", seconds,
                fault.empty() ? "" : (" (fault injected into " + fault + ")").c_str());
  os << buf;
  return os.str();
}

}  // namespace stydesty
