// Copyright 2026 The lowres-speech Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

namespace lowres {

using Index = Eigen::Index;

/// Row-major dense matrix; the storage type of every tensor.
template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Shape = std::vector<Index>;

/// Raised when an operation's preconditions are violated by its caller.
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

inline void require(bool condition, const std::string& message) {
  if (!condition) throw ContractViolation(message);
}

inline Index shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1},
                         [](Index a, Index b) { return a * b; });
}

inline std::string shape_string(const Shape& shape) {
  std::string out = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(shape[i]);
  }
  return out + ")";
}

template <typename Scalar>
struct Node {
  using BackwardFn = std::function<void(const Mat<Scalar>& grad_out,
                                        std::span<Mat<Scalar>* const> parent_grads)>;

  Shape shape;
  // Leading extents are folded into rows; the last extent is the column count.
  Mat<Scalar> value;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn backward;
};

namespace detail {
inline thread_local bool grad_enabled = true;
}

/// True while operations record a graph on the current thread.
inline bool grad_mode_enabled() { return detail::grad_enabled; }

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename Scalar>
class Tensor {
 public:
  using scalar_type = Scalar;
  using NodeT = Node<Scalar>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<NodeT> node) : node_(std::move(node)) {}

  static Tensor constant(Mat<Scalar> value, Shape shape) {
    return leaf(std::move(value), std::move(shape), false);
  }
  static Tensor constant(Mat<Scalar> value) {
    Shape shape{value.rows(), value.cols()};
    return leaf(std::move(value), std::move(shape), false);
  }
  static Tensor parameter(Mat<Scalar> value, Shape shape) {
    return leaf(std::move(value), std::move(shape), true);
  }
  static Tensor parameter(Mat<Scalar> value) {
    Shape shape{value.rows(), value.cols()};
    return leaf(std::move(value), std::move(shape), true);
  }
  static Tensor scalar(Scalar v) {
    Mat<Scalar> m(1, 1);
    m(0, 0) = v;
    return leaf(std::move(m), Shape{1}, false);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  Index rank() const { return static_cast<Index>(node_->shape.size()); }
  Index dim(Index axis) const {
    return node_->shape[static_cast<std::size_t>(axis < 0 ? rank() + axis : axis)];
  }
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  Index numel() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->parents.empty(); }

  const Mat<Scalar>& value() const { return node_->value; }
  /// In-place access for leaves (parameter updates, initialization).
  Mat<Scalar>& mutable_value() { return node_->value; }
  Scalar item() const {
    require(numel() == 1, "item() on tensor with " + std::to_string(numel()) + " values");
    return node_->value(0, 0);
  }

  const NodeT* id() const { return node_.get(); }
  const std::shared_ptr<NodeT>& node() const { return node_; }

  /// Same storage viewed with a different shape (same value count).
  Tensor reshape(Shape shape) const;

  /// Detached copy that shares no graph history.
  Tensor detach() const { return constant(node_->value, node_->shape); }

 private:
  static Tensor leaf(Mat<Scalar> value, Shape shape, bool requires_grad) {
    require(!shape.empty(), "tensor shape must have at least one extent");
    for (Index e : shape) require(e > 0, "tensor extents must be positive: " + shape_string(shape));
    require(shape_numel(shape) == value.size(),
            "shape " + shape_string(shape) + " does not match value count " +
                std::to_string(value.size()));
    auto node = std::make_shared<NodeT>();
    const Index cols = shape.back();
    node->value = std::move(value);
    if (node->value.cols() != cols) {
      Mat<Scalar> reshaped = Eigen::Map<const Mat<Scalar>>(node->value.data(),
                                                           node->value.size() / cols, cols);
      node->value = std::move(reshaped);
    }
    node->shape = std::move(shape);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  std::shared_ptr<NodeT> node_;
};

/// Builds the result node of a differentiable operation. The backward closure
/// is kept only if grad mode is on and some input requires a gradient.
template <typename Scalar>
Tensor<Scalar> make_result(Mat<Scalar> value, Shape shape,
                           std::initializer_list<Tensor<Scalar>> inputs,
                           typename Node<Scalar>::BackwardFn backward) {
  auto node = std::make_shared<Node<Scalar>>();
  node->value = std::move(value);
  node->shape = std::move(shape);
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (any && grad_mode_enabled()) {
    node->requires_grad = true;
    for (const auto& in : inputs) node->parents.push_back(in.node());
    node->backward = std::move(backward);
  }
  return Tensor<Scalar>(std::move(node));
}

template <typename Scalar>
Tensor<Scalar> make_result(Mat<Scalar> value, Shape shape,
                           const std::vector<Tensor<Scalar>>& inputs,
                           typename Node<Scalar>::BackwardFn backward) {
  auto node = std::make_shared<Node<Scalar>>();
  node->value = std::move(value);
  node->shape = std::move(shape);
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (any && grad_mode_enabled()) {
    node->requires_grad = true;
    for (const auto& in : inputs) node->parents.push_back(in.node());
    node->backward = std::move(backward);
  }
  return Tensor<Scalar>(std::move(node));
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::reshape(Shape shape) const {
  require(shape_numel(shape) == numel(), "reshape " + shape_string(node_->shape) + " -> " +
                                             shape_string(shape) + " changes value count");
  const Index cols = shape.back();
  Mat<Scalar> v = Eigen::Map<const Mat<Scalar>>(node_->value.data(), numel() / cols, cols);
  const Index in_rows = rows(), in_cols = this->cols();
  return make_result<Scalar>(std::move(v), std::move(shape), {*this},
                             [in_rows, in_cols](const Mat<Scalar>& g, auto grads) {
                               if (grads[0])
                                 *grads[0] += Eigen::Map<const Mat<Scalar>>(g.data(), in_rows,
                                                                            in_cols);
                             });
}

/// Parameter gradients produced by one backward pass.
template <typename Scalar>
class Gradients {
 public:
  const Mat<Scalar>* find(const Tensor<Scalar>& param) const {
    auto it = grads_.find(param.id());
    return it == grads_.end() ? nullptr : &it->second;
  }

  /// Gradient of `param`; zeros when it was not reachable from the loss.
  Mat<Scalar> get(const Tensor<Scalar>& param) const {
    if (const auto* g = find(param)) return *g;
    return Mat<Scalar>::Zero(param.rows(), param.cols());
  }

  void accumulate(const Gradients& other) {
    for (const auto& [key, g] : other.grads_) {
      auto it = grads_.find(key);
      if (it == grads_.end())
        grads_.emplace(key, g);
      else
        it->second += g;
    }
  }

  void scale(Scalar factor) {
    for (auto& [key, g] : grads_) g *= factor;
  }

  std::size_t size() const { return grads_.size(); }
  bool empty() const { return grads_.empty(); }

  void set(const Node<Scalar>* key, Mat<Scalar> g) { grads_[key] = std::move(g); }

 private:
  std::unordered_map<const Node<Scalar>*, Mat<Scalar>> grads_;
};

/// Reverse-mode sweep from a scalar loss. Returns gradients of every leaf that
/// requires one and is reachable from `loss`.
template <typename Scalar>
Gradients<Scalar> backward(const Tensor<Scalar>& loss) {
  require(loss.defined() && loss.numel() == 1,
          "backward() needs a scalar loss, got shape " + shape_string(loss.shape()));
  Gradients<Scalar> result;
  if (!loss.requires_grad()) return result;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node<Scalar>*> order;
  std::unordered_set<const Node<Scalar>*> visited;
  std::vector<std::pair<Node<Scalar>*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<Scalar>* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  std::unordered_map<const Node<Scalar>*, Mat<Scalar>> grads;
  grads.reserve(order.size());
  grads.emplace(loss.node().get(), Mat<Scalar>::Ones(1, 1));
  std::vector<Mat<Scalar>*> parent_grads;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<Scalar>* node = *it;
    auto found = grads.find(node);
    if (found == grads.end()) continue;
    if (node->parents.empty()) {
      result.set(node, std::move(found->second));
      grads.erase(found);
      continue;
    }
    // References into the map survive rehashing; iterators do not.
    const Mat<Scalar>& grad_out = found->second;
    parent_grads.clear();
    for (const auto& parent : node->parents) {
      if (!parent->requires_grad) {
        parent_grads.push_back(nullptr);
        continue;
      }
      auto [pit, inserted] = grads.try_emplace(parent.get());
      if (inserted) pit->second = Mat<Scalar>::Zero(parent->value.rows(), parent->value.cols());
      parent_grads.push_back(&pit->second);
    }
    node->backward(grad_out,
                   std::span<Mat<Scalar>* const>(parent_grads.data(), parent_grads.size()));
    grads.erase(node);
  }
  return result;
}

}  // namespace lowres
