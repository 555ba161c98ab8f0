#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace casam::tensor {

using Shape = std::vector<std::size_t>;

[[nodiscard]] std::size_t numel(const Shape& shape);
[[nodiscard]] std::string to_string(const Shape& shape);

/// Raised when operand shapes are incompatible with an op.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a value that must be finite is not (NaN loss, diverging run).
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Node {
  Shape shape;
  std::vector<float> value;
  std::vector<float> grad;  // empty until something accumulates into it
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::vector<float>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), 0.0f);
    return grad;
  }
};

/// Handle to a node in the differentiation graph. Copies share the node;
/// use clone() for an independent leaf.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> data);

  static Tensor scalar(float value);
  static Tensor from_node(std::shared_ptr<Node> node);

  [[nodiscard]] bool defined() const { return node_ != nullptr; }
  [[nodiscard]] const Shape& shape() const { return node_->shape; }
  [[nodiscard]] std::size_t rank() const { return node_->shape.size(); }
  [[nodiscard]] std::size_t dim(std::size_t axis) const;
  [[nodiscard]] std::size_t numel() const { return node_->value.size(); }

  [[nodiscard]] std::span<const float> data() const { return node_->value; }
  [[nodiscard]] std::span<float> mutable_data() { return node_->value; }
  [[nodiscard]] float item() const;
  [[nodiscard]] float at(std::size_t flat_index) const { return node_->value.at(flat_index); }

  [[nodiscard]] bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }
  [[nodiscard]] bool has_grad() const { return !node_->grad.empty(); }
  [[nodiscard]] std::span<const float> grad() const { return node_->grad; }
  [[nodiscard]] std::span<float> mutable_grad() { return node_->grad_buffer(); }
  void clear_grad() { node_->grad.clear(); }

  /// Fresh leaf holding a copy of the values, detached from any graph.
  [[nodiscard]] Tensor clone() const;
  /// Leaf sharing nothing with this tensor's graph; same as clone() with requires_grad off.
  [[nodiscard]] Tensor detach() const;

  [[nodiscard]] const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// True when ops should record the graph (thread-local).
[[nodiscard]] bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Builds an op result. The node records parents and the backward closure only
/// when grad mode is on and at least one parent requires a gradient.
Tensor make_result(Shape shape, std::vector<float> value,
                   std::vector<std::shared_ptr<Node>> parents,
                   std::function<void(Node&)> backward_fn);

/// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
/// reachable node that requires one; frozen leaves are never touched.
void backward(const Tensor& loss);

}  // namespace casam::tensor
