#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace immunity {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

namespace detail {

struct TensorImpl;

// Gradient buffers handed to a backward function, one slot per parent.
// A null slot means the parent does not need a gradient.
using GradSlots = std::vector<std::vector<double>*>;
using BackwardFn = std::function<void(const std::vector<double>& out_grad, GradSlots& parent_grads)>;

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty when no gradient has been accumulated
  bool requires_grad = false;
  const char* op = nullptr;  // null for leaves
  std::vector<std::shared_ptr<TensorImpl>> parents;
  BackwardFn backward;
};

}  // namespace detail

/// Dense row-major array of doubles with optional reverse-mode graph linkage.
///
/// Tensors are cheap handles: copies share storage. Leaves created with
/// requires_grad accumulate gradients when backward() is called on a scalar
/// that depends on them. Non-leaf tensors record the producing operation and
/// their parents; the graph is released when the last handle goes away.
class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  const Shape& shape() const;
  std::size_t dim() const { return shape().size(); }
  std::size_t size(std::size_t axis) const { return shape().at(axis); }
  std::size_t numel() const;

  std::span<const double> data() const;
  // Mutable access is meant for leaves (parameter updates, input edits).
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t flat_index) const { return data()[flat_index]; }

  bool requires_grad() const;
  void set_requires_grad(bool value);
  bool is_leaf() const;
  const char* op_name() const;

  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  /// New leaf sharing no graph and no storage with this tensor.
  Tensor detach() const;
  /// Same storage, new shape with equal element count; participates in the graph.
  Tensor reshape(Shape shape) const;

  bool defined() const { return impl_ != nullptr; }
  const detail::TensorImpl* impl() const { return impl_.get(); }

  // Used by op implementations to wire up graph nodes.
  static Tensor from_op(Shape shape, std::vector<double> data, const char* op,
                        std::vector<Tensor> parents, detail::BackwardFn backward);
  std::shared_ptr<detail::TensorImpl> impl_ptr() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl);
  std::shared_ptr<detail::TensorImpl> impl_;
};

/// While alive, ops on this thread record no graph nodes (inference passes).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

  static bool active();

 private:
  bool previous_;
};

/// Accumulates d(root)/d(leaf) into every reachable leaf that requires grad.
/// Repeated calls add to existing gradients.
void backward(const Tensor& root);

/// Gradients of a scalar root with respect to the given tensors, which may be
/// intermediate nodes. Propagation stops at the targets and no leaf gradient
/// is modified. Unreachable targets receive zeros.
std::vector<std::vector<double>> gradients(const Tensor& root, const std::vector<Tensor>& targets);

}  // namespace immunity
