#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "stydesty/adain.hpp"
#include "stydesty/tensor.hpp"

namespace stydesty {

enum class LayerKind { conv, relu, max_pool, avg_pool, flatten, linear };

std::string to_string(LayerKind kind);
LayerKind layer_kind_from_string(const std::string& name);

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  int size = 0;  // conv out-channels / linear out-features
  int kernel = 0;
  int stride = 1;
  int padding = 0;
};

/// Layer list of the backbone P. A candidate value b marks the boundary after
/// layers[b − 1], i.e. the activation feeding layers[b].
struct BackboneSpec {
  int in_channels = 3;
  int in_height = 32;
  int in_width = 32;
  std::vector<LayerSpec> layers;
  std::vector<int> candidates;

  /// conv(6@5) relu pool(2) conv(16@5) relu pool(2) flatten linear(120) relu
  /// linear(84) relu linear(outputs), with candidates after each of the first
  /// six layers.
  static BackboneSpec lenet(int outputs);

  /// Throws std::invalid_argument naming the first offending layer.
  void validate() const;
  /// Per-sample activation shape at every boundary 0..layers.size().
  std::vector<Shape> activation_shapes() const;
  int outputs() const;
  int num_candidates() const { return static_cast<int>(candidates.size()); }
  /// Channel count of the activation at a candidate position.
  int candidate_channels(int candidate) const;

  nlohmann::json to_json() const;
  static BackboneSpec from_json(const nlohmann::json& j);
};

/// One layer's forward rule; `params` holds {weight, bias} for conv/linear
/// layers and is empty otherwise.
template <typename T>
BasicTensor<T> apply_layer(const LayerSpec& layer, std::span<const BasicTensor<T>> params, const BasicTensor<T>& x);

/// The layer stack with its conv/linear parameters. Parameter addresses are
/// stable for the lifetime of the object (gradients are keyed by them), so
/// copies are explicit.
class Backbone {
 public:
  Backbone(BackboneSpec spec, std::uint64_t seed);
  Backbone(Backbone&&) = default;
  Backbone& operator=(Backbone&&) = default;
  Backbone(const Backbone&) = delete;
  Backbone& operator=(const Backbone&) = delete;

  Backbone clone() const;

  const BackboneSpec& spec() const { return spec_; }
  int num_layers() const { return static_cast<int>(spec_.layers.size()); }

  /// Parameters of layers in [begin, end); end < 0 means through the last layer.
  std::vector<Parameter*> parameters(int begin = 0, int end = -1);
  std::vector<const Parameter*> parameters(int begin = 0, int end = -1) const;

  Tensor apply(const Binding& bind, int layer, const Tensor& x) const;
  /// Runs layers [begin, end).
  Tensor forward(const Binding& bind, Tensor x, int begin, int end) const;

 private:
  Backbone() = default;
  BackboneSpec spec_;
  std::vector<std::vector<Parameter>> params_;
};

/// The backbone cut at a candidate position into the destylization module F
/// (prefix plus the AdaIN layer) and the task head H (the rest).
class SplitModel {
 public:
  SplitModel(Backbone net, int candidate, AdaINParams adain, bool adain_enabled = true);

  int candidate() const { return candidate_; }
  /// Layer boundary at which F ends.
  int boundary() const { return boundary_; }
  /// Boundary holding H₋₁, the input of H's final linear layer.
  int hidden_tap() const { return net_.num_layers() - 1; }
  bool adain_enabled() const { return adain_enabled_; }

  Tensor destyle(const Binding& bind, const Tensor& x) const;
  Tensor hidden(const Binding& bind, const Tensor& f) const;
  Tensor head_from_hidden(const Binding& bind, const Tensor& h) const;
  Tensor head(const Binding& bind, const Tensor& f) const;
  Tensor forward(const Binding& bind, const Tensor& x) const;

  std::vector<Parameter*> f_parameters();
  std::vector<Parameter*> h_parameters();
  std::vector<const Parameter*> h_parameters() const;
  std::vector<const Parameter*> all_parameters() const;

  const Backbone& backbone() const { return net_; }
  const AdaINParams& adain_params() const { return adain_; }

 private:
  Backbone net_;
  int candidate_;
  int boundary_;
  AdaINParams adain_;
  bool adain_enabled_;
};

SplitModel split_at(Backbone net, int candidate, AdaINParams adain, bool adain_enabled = true);

}  // namespace stydesty
