#include "stydesty/backbone.hpp"

#include <cmath>
#include <cstdio>
#include <random>
#include <stdexcept>

#include "stydesty/ops.hpp"
#include "stydesty/rng.hpp"

namespace stydesty {
namespace {

std::string layer_name(int index, const char* what) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "layer%02d.%s", index, what);
  return buf;
}

Tensor he_normal(Shape shape, int fan_in, Rng& rng) {
  std::normal_distribution<float> dist(0.0f, static_cast<float>(std::sqrt(2.0 / fan_in)));
  std::vector<float> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& e : v) e = dist(rng);
  return Tensor(std::move(shape), std::move(v));
}

}  // namespace

std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv: return "conv";
    case LayerKind::relu: return "relu";
    case LayerKind::max_pool: return "max_pool";
    case LayerKind::avg_pool: return "avg_pool";
    case LayerKind::flatten: return "flatten";
    case LayerKind::linear: return "linear";
  }
  return "?";
}

LayerKind layer_kind_from_string(const std::string& name) {
  for (auto k : {LayerKind::conv, LayerKind::relu, LayerKind::max_pool, LayerKind::avg_pool, LayerKind::flatten,
                 LayerKind::linear}) {
    if (to_string(k) == name) return k;
  }
  throw std::invalid_argument("unknown layer kind '" + name + "'");
}

BackboneSpec BackboneSpec::lenet(int outputs) {
  BackboneSpec s;
  s.layers = {
      {LayerKind::conv, 6, 5},     {LayerKind::relu},           {LayerKind::max_pool, 0, 2, 2},
      {LayerKind::conv, 16, 5},    {LayerKind::relu},           {LayerKind::max_pool, 0, 2, 2},
      {LayerKind::flatten},        {LayerKind::linear, 120},    {LayerKind::relu},
      {LayerKind::linear, 84},     {LayerKind::relu},           {LayerKind::linear, outputs},
  };
  s.candidates = {1, 2, 3, 4, 5, 6};
  return s;
}

std::vector<Shape> BackboneSpec::activation_shapes() const {
  if (in_channels < 1 || in_height < 1 || in_width < 1) {
    throw std::invalid_argument("backbone: input geometry must be positive");
  }
  std::vector<Shape> shapes{{in_channels, in_height, in_width}};
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    const Shape& in = shapes.back();
    const std::string where = "backbone layer " + std::to_string(i) + " (" + to_string(l.kind) + ")";
    auto need_map = [&] {
      if (in.size() != 3) throw std::invalid_argument(where + " needs a C×H×W input, got " + shape_str(in));
    };
    switch (l.kind) {
      case LayerKind::conv: {
        need_map();
        if (l.size < 1 || l.kernel < 1 || l.stride < 1 || l.padding < 0) {
          throw std::invalid_argument(where + ": channels, kernel and stride must be >= 1");
        }
        const int h = (in[1] + 2 * l.padding - l.kernel) / l.stride + 1;
        const int w = (in[2] + 2 * l.padding - l.kernel) / l.stride + 1;
        if (in[1] + 2 * l.padding < l.kernel || in[2] + 2 * l.padding < l.kernel) {
          throw std::invalid_argument(where + ": kernel " + std::to_string(l.kernel) + " does not fit " +
                                      shape_str(in));
        }
        shapes.push_back({l.size, h, w});
        break;
      }
      case LayerKind::relu:
        shapes.push_back(in);
        break;
      case LayerKind::max_pool:
      case LayerKind::avg_pool: {
        need_map();
        if (l.kernel < 1 || l.stride < 1 || l.kernel > in[1] || l.kernel > in[2]) {
          throw std::invalid_argument(where + ": window " + std::to_string(l.kernel) + " does not fit " +
                                      shape_str(in));
        }
        shapes.push_back({in[0], (in[1] - l.kernel) / l.stride + 1, (in[2] - l.kernel) / l.stride + 1});
        break;
      }
      case LayerKind::flatten:
        shapes.push_back({static_cast<int>(shape_numel(in))});
        break;
      case LayerKind::linear:
        if (in.size() != 1) throw std::invalid_argument(where + " needs a flat input, got " + shape_str(in));
        if (l.size < 1) throw std::invalid_argument(where + ": out-features must be >= 1");
        shapes.push_back({l.size});
        break;
    }
  }
  return shapes;
}

void BackboneSpec::validate() const {
  if (layers.empty()) throw std::invalid_argument("backbone: no layers");
  const auto shapes = activation_shapes();
  if (layers.back().kind != LayerKind::linear) throw std::invalid_argument("backbone: last layer must be linear");
  int prev = 0;
  for (int c : candidates) {
    if (c <= prev || c >= static_cast<int>(layers.size())) {
      throw std::invalid_argument("backbone: candidate positions must be strictly increasing boundaries in [1, " +
                                  std::to_string(layers.size() - 1) + "], got " + std::to_string(c));
    }
    if (shapes[static_cast<std::size_t>(c)].size() != 3) {
      throw std::invalid_argument("backbone: candidate " + std::to_string(c) + " sits on a flat activation " +
                                  shape_str(shapes[static_cast<std::size_t>(c)]));
    }
    prev = c;
  }
  if (candidates.empty()) throw std::invalid_argument("backbone: at least one candidate position is required");
}

int BackboneSpec::outputs() const { return layers.empty() ? 0 : layers.back().size; }

int BackboneSpec::candidate_channels(int candidate) const {
  if (candidate < 0 || candidate >= num_candidates()) {
    throw std::out_of_range("candidate index " + std::to_string(candidate) + " outside [0, " +
                            std::to_string(num_candidates()) + ")");
  }
  return activation_shapes()[static_cast<std::size_t>(candidates[static_cast<std::size_t>(candidate)])][0];
}

nlohmann::json BackboneSpec::to_json() const {
  nlohmann::json layers_json = nlohmann::json::array();
  for (const auto& l : layers) {
    layers_json.push_back({{"kind", to_string(l.kind)},
                           {"size", l.size},
                           {"kernel", l.kernel},
                           {"stride", l.stride},
                           {"padding", l.padding}});
  }
  return {{"input", {in_channels, in_height, in_width}}, {"layers", layers_json}, {"candidates", candidates}};
}

BackboneSpec BackboneSpec::from_json(const nlohmann::json& j) {
  BackboneSpec s;
  const auto& in = j.at("input");
  s.in_channels = in.at(0).get<int>();
  s.in_height = in.at(1).get<int>();
  s.in_width = in.at(2).get<int>();
  for (const auto& l : j.at("layers")) {
    s.layers.push_back({layer_kind_from_string(l.at("kind").get<std::string>()), l.at("size").get<int>(),
                        l.at("kernel").get<int>(), l.at("stride").get<int>(), l.at("padding").get<int>()});
  }
  s.candidates = j.at("candidates").get<std::vector<int>>();
  return s;
}

Backbone::Backbone(BackboneSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
  spec_.validate();
  const auto shapes = spec_.activation_shapes();
  Rng rng(seed);
  params_.resize(spec_.layers.size());
  for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
    const auto& l = spec_.layers[i];
    const int idx = static_cast<int>(i);
    if (l.kind == LayerKind::conv) {
      const int c = shapes[i][0];
      params_[i].push_back({layer_name(idx, "weight"), he_normal({l.size, c, l.kernel, l.kernel}, c * l.kernel * l.kernel, rng), true});
      params_[i].push_back({layer_name(idx, "bias"), Tensor::zeros({l.size}), true});
    } else if (l.kind == LayerKind::linear) {
      const int d = shapes[i][0];
      params_[i].push_back({layer_name(idx, "weight"), he_normal({d, l.size}, d, rng), true});
      params_[i].push_back({layer_name(idx, "bias"), Tensor::zeros({l.size}), true});
    }
  }
}

Backbone Backbone::clone() const {
  Backbone b;
  b.spec_ = spec_;
  b.params_.resize(params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i) {
    for (const auto& p : params_[i]) b.params_[i].push_back({p.name, p.value.clone(), p.decay});
  }
  return b;
}

std::vector<Parameter*> Backbone::parameters(int begin, int end) {
  if (end < 0) end = num_layers();
  std::vector<Parameter*> out;
  for (int i = begin; i < end; ++i) {
    for (auto& p : params_[static_cast<std::size_t>(i)]) out.push_back(&p);
  }
  return out;
}

std::vector<const Parameter*> Backbone::parameters(int begin, int end) const {
  if (end < 0) end = num_layers();
  std::vector<const Parameter*> out;
  for (int i = begin; i < end; ++i) {
    for (const auto& p : params_[static_cast<std::size_t>(i)]) out.push_back(&p);
  }
  return out;
}

template <typename T>
BasicTensor<T> apply_layer(const LayerSpec& l, std::span<const BasicTensor<T>> p, const BasicTensor<T>& x) {
  const bool has_params = l.kind == LayerKind::conv || l.kind == LayerKind::linear;
  if (p.size() != (has_params ? 2u : 0u)) {
    throw std::invalid_argument("apply_layer: " + to_string(l.kind) + " takes " + (has_params ? "2" : "0") +
                                " parameters, got " + std::to_string(p.size()));
  }
  switch (l.kind) {
    case LayerKind::conv:
      return add_channel_bias(conv2d(x, p[0], l.stride, l.padding), p[1]);
    case LayerKind::relu:
      return relu(x);
    case LayerKind::max_pool:
      return pool(x, PoolKind::max, l.kernel, l.stride);
    case LayerKind::avg_pool:
      return pool(x, PoolKind::avg, l.kernel, l.stride);
    case LayerKind::flatten:
      return reshape(x, {x.dim(0), static_cast<int>(x.numel() / x.dim(0))});
    case LayerKind::linear:
      return linear(x, p[0], p[1]);
  }
  return x;
}

template Tensor apply_layer<float>(const LayerSpec&, std::span<const Tensor>, const Tensor&);
template TensorD apply_layer<double>(const LayerSpec&, std::span<const TensorD>, const TensorD&);

Tensor Backbone::apply(const Binding& bind, int layer, const Tensor& x) const {
  const auto& l = spec_.layers[static_cast<std::size_t>(layer)];
  const auto& p = params_[static_cast<std::size_t>(layer)];
  if (p.empty()) return apply_layer<float>(l, {}, x);
  const Tensor bound[2] = {bind(p[0]), bind(p[1])};
  return apply_layer<float>(l, bound, x);
}

Tensor Backbone::forward(const Binding& bind, Tensor x, int begin, int end) const {
  for (int i = begin; i < end; ++i) x = apply(bind, i, x);
  return x;
}

SplitModel::SplitModel(Backbone net, int candidate, AdaINParams adain, bool adain_enabled)
    : net_(std::move(net)), candidate_(candidate), adain_(std::move(adain)), adain_enabled_(adain_enabled) {
  const auto& spec = net_.spec();
  if (candidate < 0 || candidate >= spec.num_candidates()) {
    throw std::out_of_range("split_at: " + std::to_string(candidate) + " is not a declared candidate (have " +
                            std::to_string(spec.num_candidates()) + ")");
  }
  boundary_ = spec.candidates[static_cast<std::size_t>(candidate)];
  if (adain_.channels() != spec.candidate_channels(candidate)) {
    throw ShapeError("split_at: AdaIN has " + std::to_string(adain_.channels()) + " channels, position " +
                     std::to_string(candidate) + " carries " + std::to_string(spec.candidate_channels(candidate)));
  }
}

Tensor SplitModel::destyle(const Binding& bind, const Tensor& x) const {
  auto f = net_.forward(bind, x, 0, boundary_);
  return adain_enabled_ ? adain(bind, f, adain_) : f;
}

Tensor SplitModel::hidden(const Binding& bind, const Tensor& f) const {
  return net_.forward(bind, f, boundary_, hidden_tap());
}

Tensor SplitModel::head_from_hidden(const Binding& bind, const Tensor& h) const {
  return net_.apply(bind, hidden_tap(), h);
}

Tensor SplitModel::head(const Binding& bind, const Tensor& f) const { return head_from_hidden(bind, hidden(bind, f)); }

Tensor SplitModel::forward(const Binding& bind, const Tensor& x) const { return head(bind, destyle(bind, x)); }

std::vector<Parameter*> SplitModel::f_parameters() {
  auto out = net_.parameters(0, boundary_);
  if (adain_enabled_) {
    out.push_back(&adain_.mu);
    out.push_back(&adain_.sigma);
  }
  return out;
}

std::vector<Parameter*> SplitModel::h_parameters() { return net_.parameters(boundary_); }

std::vector<const Parameter*> SplitModel::h_parameters() const { return net_.parameters(boundary_); }

std::vector<const Parameter*> SplitModel::all_parameters() const {
  auto out = net_.parameters(0, -1);
  out.push_back(&adain_.mu);
  out.push_back(&adain_.sigma);
  return out;
}

SplitModel split_at(Backbone net, int candidate, AdaINParams adain, bool adain_enabled) {
  return SplitModel(std::move(net), candidate, std::move(adain), adain_enabled);
}

}  // namespace stydesty
