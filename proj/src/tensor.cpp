#include "stydesty/tensor.hpp"

#include <numeric>
#include <sstream>

namespace stydesty {

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (int d : shape) {
    if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)) {
  if (shape_numel(shape_) != static_cast<std::int64_t>(data.size())) {
    throw ShapeError("tensor of shape " + shape_str(shape_) + " cannot hold " + std::to_string(data.size()) +
                     " elements");
  }
  data_ = std::make_shared<std::vector<T>>(std::move(data));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::zeros(Shape shape) {
  return full(std::move(shape), T(0));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::full(Shape shape, T value) {
  auto n = static_cast<std::size_t>(shape_numel(shape));
  return BasicTensor(std::move(shape), std::vector<T>(n, value));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::scalar(T value) {
  return BasicTensor(Shape{}, std::vector<T>{value});
}

template <typename T>
int BasicTensor<T>::dim(int axis) const {
  if (axis < 0) axis += rank();
  if (axis < 0 || axis >= rank()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape_));
  }
  return shape_[static_cast<std::size_t>(axis)];
}

template <typename T>
T BasicTensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
  return (*data_)[0];
}

template <typename T>
BasicTensor<T> BasicTensor<T>::detach() const {
  BasicTensor out = *this;
  out.tape_ = nullptr;
  out.node_ = -1;
  return out;
}

template <typename T>
BasicTensor<T> BasicTensor<T>::clone() const {
  return BasicTensor(shape_, *data_);
}

template <typename T>
BasicTensor<T> Tape<T>::attach(BasicTensor<T> t, Node node) {
  node.numel = static_cast<std::size_t>(t.numel());
  nodes_.push_back(std::move(node));
  t.tape_ = this;
  t.node_ = static_cast<int>(nodes_.size()) - 1;
  return t;
}

template <typename T>
BasicTensor<T> Tape<T>::variable(const BasicTensor<T>& value) {
  return attach(value.detach(), Node{});
}

template <typename T>
BasicTensor<T> Tape<T>::watch(const BasicParameter<T>& p) {
  Node node;
  node.param = &p;
  return attach(p.value.detach(), std::move(node));
}

template <typename T>
BasicTensor<T> Tape<T>::record(BasicTensor<T> out, std::initializer_list<const BasicTensor<T>*> inputs,
                               BackwardFn fn) {
  Node node;
  bool any = false;
  for (const auto* in : inputs) {
    if (in->tape_ != nullptr && in->tape_ != this) {
      throw std::logic_error("primitive mixes tensors from two different tapes");
    }
    node.inputs.push_back(in->tape_ == this ? in->node_ : -1);
    any = any || in->tape_ == this;
  }
  if (!any) return out.detach();
  node.backward = std::move(fn);
  return attach(std::move(out), std::move(node));
}

template <typename T>
void Tape<T>::backward(const BasicTensor<T>& loss) {
  if (loss.tape_ != this) throw std::invalid_argument("backward: loss is not on this tape");
  if (loss.numel() != 1) throw ShapeError("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
  if (done_) throw std::logic_error("backward: tape already consumed");
  done_ = true;

  grads_.assign(nodes_.size(), GradBuffer{});
  grads_[static_cast<std::size_t>(loss.node_)].assign(1, T(1));

  std::vector<GradBuffer*> in_ptrs;
  for (int i = loss.node_; i >= 0; --i) {
    auto& node = nodes_[static_cast<std::size_t>(i)];
    auto& g = grads_[static_cast<std::size_t>(i)];
    if (g.empty()) continue;
    ++visited_;
    if (node.param != nullptr) {
      auto& slot = param_grads_.slot(*node.param, node.numel);
      for (std::size_t k = 0; k < g.size(); ++k) slot[k] += g[k];
      continue;
    }
    if (!node.backward) continue;
    in_ptrs.clear();
    for (int in : node.inputs) {
      if (in < 0) {
        in_ptrs.push_back(nullptr);
        continue;
      }
      auto& buf = grads_[static_cast<std::size_t>(in)];
      if (buf.empty()) buf.assign(nodes_[static_cast<std::size_t>(in)].numel, T(0));
      in_ptrs.push_back(&buf);
    }
    node.backward(std::span<const T>(g), std::span<GradBuffer* const>(in_ptrs));
    // Intermediate gradients are not needed once propagated.
    if (i != loss.node_) GradBuffer().swap(g);
  }
}

template <typename T>
std::span<const T> Tape<T>::grad(const BasicTensor<T>& leaf) const {
  if (leaf.tape_ != this) throw std::invalid_argument("grad: tensor is not on this tape");
  const auto idx = static_cast<std::size_t>(leaf.node_);
  if (!nodes_[idx].inputs.empty() || nodes_[idx].backward) {
    throw std::invalid_argument("grad: only leaf gradients are retained");
  }
  if (idx >= grads_.size()) return {};
  return grads_[idx];
}

template <typename T>
BasicTensor<T> BasicBinding<T>::operator()(const BasicParameter<T>& p) const {
  auto it = trainable_.find(&p);
  if (tape_ == nullptr || it == trainable_.end()) return p.value.detach();
  if (!it->second.defined()) it->second = tape_->watch(p);
  return it->second;
}

template class BasicTensor<float>;
template class BasicTensor<double>;
template class Tape<float>;
template class Tape<double>;
template class BasicBinding<float>;
template class BasicBinding<double>;

}  // namespace stydesty
