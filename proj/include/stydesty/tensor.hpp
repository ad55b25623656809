#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace stydesty {

using Shape = std::vector<int>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Thrown by every primitive on incompatible operand geometry. The message
/// always carries the offending dimensions.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

template <typename T>
class Tape;

/// Dense row-major array. The element buffer is shared between copies and is
/// treated as immutable once a tensor has been produced by a primitive; only
/// parameter owners write through mutable_data(), and only between steps.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;
  BasicTensor(Shape shape, std::vector<T> data);

  static BasicTensor zeros(Shape shape);
  static BasicTensor full(Shape shape, T value);
  static BasicTensor scalar(T value);

  bool defined() const { return static_cast<bool>(data_); }
  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int axis) const;
  std::int64_t numel() const { return data_ ? static_cast<std::int64_t>(data_->size()) : 0; }

  std::span<const T> data() const { return {data_->data(), data_->size()}; }
  std::span<T> mutable_data() { return {data_->data(), data_->size()}; }
  T operator[](std::int64_t i) const { return (*data_)[static_cast<std::size_t>(i)]; }
  T item() const;

  Tape<T>* tape() const { return tape_; }
  int node() const { return node_; }
  bool requires_grad() const { return tape_ != nullptr; }

  /// Same buffer, cut from any tape.
  BasicTensor detach() const;
  /// Deep copy, cut from any tape.
  BasicTensor clone() const;

  template <typename U>
  BasicTensor<U> cast() const {
    std::vector<U> out(data_->begin(), data_->end());
    return BasicTensor<U>(shape_, std::move(out));
  }

 private:
  friend class Tape<T>;
  Shape shape_;
  std::shared_ptr<std::vector<T>> data_;
  Tape<T>* tape_ = nullptr;
  int node_ = -1;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

/// A named, persistent trainable array. `decay` marks conv/linear weights
/// that receive weight decay.
template <typename T>
struct BasicParameter {
  std::string name;
  BasicTensor<T> value;
  bool decay = false;
};

using Parameter = BasicParameter<float>;

/// Gradients produced by one backward pass, keyed by parameter identity.
template <typename T>
class BasicGradients {
 public:
  const std::vector<T>* find(const BasicParameter<T>& p) const {
    auto it = grads_.find(&p);
    return it == grads_.end() ? nullptr : &it->second;
  }
  std::vector<T>& slot(const BasicParameter<T>& p, std::size_t n) {
    auto& g = grads_[&p];
    if (g.empty()) g.assign(n, T(0));
    return g;
  }
  std::size_t size() const { return grads_.size(); }

 private:
  std::unordered_map<const BasicParameter<T>*, std::vector<T>> grads_;
};

using Gradients = BasicGradients<float>;

/// Append-only record of primitive applications. Nodes are appended in
/// evaluation order, so the node list is already topologically sorted and a
/// reverse sweep visits each node once.
template <typename T>
class Tape {
 public:
  using GradBuffer = std::vector<T>;
  /// grad_in[i] is null when input i does not require a gradient.
  using BackwardFn = std::function<void(std::span<const T> grad_out, std::span<GradBuffer* const> grad_in)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf whose gradient is read back with grad().
  BasicTensor<T> variable(const BasicTensor<T>& value);
  /// Leaf bound to a parameter; its gradient lands in gradients().
  BasicTensor<T> watch(const BasicParameter<T>& p);

  /// Attach `out` to the tape as the result of a primitive over `inputs`.
  /// Inputs that are not on this tape are treated as constants.
  BasicTensor<T> record(BasicTensor<T> out, std::initializer_list<const BasicTensor<T>*> inputs, BackwardFn fn);

  /// Reverse sweep from a scalar loss. May be called once per tape.
  void backward(const BasicTensor<T>& loss);

  std::span<const T> grad(const BasicTensor<T>& leaf) const;
  const BasicGradients<T>& gradients() const { return param_grads_; }

  std::size_t size() const { return nodes_.size(); }
  std::size_t visited() const { return visited_; }

 private:
  struct Node {
    std::vector<int> inputs;
    BackwardFn backward;
    const BasicParameter<T>* param = nullptr;
    std::size_t numel = 0;
  };

  BasicTensor<T> attach(BasicTensor<T> t, Node node);

  std::vector<Node> nodes_;
  std::vector<GradBuffer> grads_;
  BasicGradients<T> param_grads_;
  std::size_t visited_ = 0;
  bool done_ = false;
};

/// Decides, per forward pass, which parameters are recorded on the tape and
/// which enter as constants. Frozen parameters still pass gradients through
/// to their inputs; they simply never receive one.
template <typename T>
class BasicBinding {
 public:
  BasicBinding() = default;
  explicit BasicBinding(Tape<T>& tape) : tape_(&tape) {}

  BasicBinding& train(const BasicParameter<T>& p) {
    trainable_.emplace(&p, BasicTensor<T>());
    return *this;
  }
  template <typename Range>
  BasicBinding& train_all(const Range& params) {
    for (auto* p : params) train(*p);
    return *this;
  }

  /// Copy in which the listed parameters enter as constants.
  template <typename Range>
  BasicBinding without(const Range& params) const {
    BasicBinding b = *this;
    for (auto* p : params) b.trainable_.erase(p);
    return b;
  }

  bool trains(const BasicParameter<T>& p) const { return tape_ != nullptr && trainable_.count(&p) != 0; }

  BasicTensor<T> operator()(const BasicParameter<T>& p) const;
  Tape<T>* tape() const { return tape_; }

 private:
  Tape<T>* tape_ = nullptr;
  mutable std::unordered_map<const BasicParameter<T>*, BasicTensor<T>> trainable_;
};

using Binding = BasicBinding<float>;

}  // namespace stydesty
