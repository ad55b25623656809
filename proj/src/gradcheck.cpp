#include "stydesty/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "stydesty/ops.hpp"
#include "stydesty/rng.hpp"

namespace stydesty {
namespace {

struct Probe {
  double value;
  std::uint64_t signature;
};

std::vector<std::int64_t> probe_coordinates(std::int64_t numel, const GradCheckOptions& options, std::uint64_t salt) {
  std::vector<std::int64_t> coords(static_cast<std::size_t>(numel));
  std::iota(coords.begin(), coords.end(), std::int64_t{0});
  if (options.max_probes > 0 && options.max_probes < numel) {
    Rng rng(derive_seed(options.seed, {salt}));
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(static_cast<std::size_t>(options.max_probes));
    std::sort(coords.begin(), coords.end());
  }
  return coords;
}

// `set(i, v)` writes coordinate i, `eval()` evaluates the function at the
// current point under a kink probe.
template <typename T, typename Set, typename Eval>
GradCheckEntry check_tensor(std::string name, std::span<const T> base, std::span<const T> analytic,
                            const GradCheckOptions& options, std::uint64_t salt, Set set, Eval eval) {
  GradCheckEntry entry{std::move(name)};
  const Probe centre = eval();
  double max_diff = 0, max_mag = 0;
  for (std::int64_t i : probe_coordinates(static_cast<std::int64_t>(base.size()), options, salt)) {
    const auto u = static_cast<std::size_t>(i);
    const T x0 = base[u];
    const double h = options.eps * std::max(1.0, std::abs(static_cast<double>(x0)));
    // Central differences at h and h/2, combined by Richardson extrapolation
    // to cancel the O(h²) truncation term.
    double quotient[2];
    bool crossed = false;
    for (int level = 0; level < 2 && !crossed; ++level) {
      const T step = static_cast<T>(level == 0 ? h : h / 2);
      const T xp = x0 + step, xm = x0 - step;
      set(i, xp);
      const Probe plus = eval();
      set(i, xm);
      const Probe minus = eval();
      set(i, x0);
      crossed = plus.signature != centre.signature || minus.signature != centre.signature;
      quotient[level] = (plus.value - minus.value) / (static_cast<double>(xp) - static_cast<double>(xm));
    }
    if (crossed) {
      ++entry.excluded;
      continue;
    }
    const double numeric = (4 * quotient[1] - quotient[0]) / 3;
    const double a = analytic.empty() ? 0.0 : static_cast<double>(analytic[u]);
    max_diff = std::max(max_diff, std::abs(a - numeric));
    max_mag = std::max({max_mag, std::abs(a), std::abs(numeric)});
    ++entry.probes;
  }
  entry.max_rel_error = max_diff / std::max(max_mag, 1e-8);
  entry.max_abs_error = max_diff;
  entry.max_magnitude = max_mag;
  return entry;
}

void finish(GradCheckReport& report, const GradCheckOptions& options) {
  report.max_rel_error = 0;
  report.probes = 0;
  double diff = 0, mag = 0;
  for (const auto& e : report.entries) {
    report.max_rel_error = std::max(report.max_rel_error, e.max_rel_error);
    report.probes += e.probes;
    diff = std::max(diff, e.max_abs_error);
    mag = std::max(mag, e.max_magnitude);
  }
  report.group_rel_error = diff / std::max(mag, 1e-8);
  report.pass = report.max_rel_error < options.tolerance;
}

template <typename T>
void require_deterministic(const std::function<T()>& value) {
  const T a = value();
  const T b = value();
  if (std::memcmp(&a, &b, sizeof(T)) != 0) {
    throw NondeterminismError("grad_check: function is not deterministic at a fixed point");
  }
}

}  // namespace

template <typename T>
GradCheckReport grad_check(const std::function<BasicTensor<T>(const BasicTensor<T>&)>& f, const BasicTensor<T>& x,
                           const GradCheckOptions& options) {
  std::vector<T> analytic;
  {
    Tape<T> tape;
    auto xv = tape.variable(x);
    auto loss = f(xv);
    if (loss.tape() == &tape) {
      tape.backward(loss);
      auto g = tape.grad(xv);
      analytic.assign(g.begin(), g.end());
    } else if (loss.numel() != 1) {
      throw ShapeError("grad_check: function must return a scalar");
    }
  }
  auto point = x.clone();
  require_deterministic<T>([&] { return f(point).item(); });

  GradCheckReport report;
  report.entries.push_back(check_tensor<T>(
      "x", point.data(), std::span<const T>(analytic), options, 0,
      [&](std::int64_t i, T v) { point.mutable_data()[static_cast<std::size_t>(i)] = v; },
      [&] {
        KinkProbe probe;
        const double v = f(point).item();
        return Probe{v, probe.signature()};
      }));
  finish(report, options);
  return report;
}

template <typename T>
GradCheckReport grad_check_parameters(const std::function<BasicTensor<T>(const BasicBinding<T>&)>& loss,
                                      std::span<BasicParameter<T>* const> params, const GradCheckOptions& options) {
  Tape<T> tape;
  BasicBinding<T> binding(tape);
  for (auto* p : params) binding.train(*p);
  auto l = loss(binding);
  if (l.tape() == &tape) tape.backward(l);

  const BasicBinding<T> constant;
  require_deterministic<T>([&] { return loss(constant).item(); });

  GradCheckReport report;
  std::uint64_t salt = 0;
  for (auto* p : params) {
    const auto* g = tape.gradients().find(*p);
    std::vector<T> analytic = g ? *g : std::vector<T>(static_cast<std::size_t>(p->value.numel()), T(0));
    std::vector<T> base(p->value.data().begin(), p->value.data().end());
    report.entries.push_back(check_tensor<T>(
        p->name, std::span<const T>(base), std::span<const T>(analytic), options, ++salt,
        [&](std::int64_t i, T v) { p->value.mutable_data()[static_cast<std::size_t>(i)] = v; },
        [&] {
          KinkProbe probe;
          const double v = loss(constant).item();
          return Probe{v, probe.signature()};
        }));
  }
  finish(report, options);
  return report;
}

template GradCheckReport grad_check<float>(const std::function<Tensor(const Tensor&)>&, const Tensor&,
                                           const GradCheckOptions&);
template GradCheckReport grad_check<double>(const std::function<TensorD(const TensorD&)>&, const TensorD&,
                                            const GradCheckOptions&);
template GradCheckReport grad_check_parameters<float>(const std::function<Tensor(const Binding&)>&,
                                                      std::span<Parameter* const>, const GradCheckOptions&);
template GradCheckReport grad_check_parameters<double>(const std::function<TensorD(const BasicBinding<double>&)>&,
                                                       std::span<BasicParameter<double>* const>,
                                                       const GradCheckOptions&);

}  // namespace stydesty
