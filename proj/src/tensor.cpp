#include "immunity/tensor.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>
#include <unordered_map>
#include <unordered_set>
#include <utility>

#include "immunity/error.hpp"

namespace immunity {

using detail::TensorImpl;

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor() = default;

Tensor::Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad)
    : impl_(std::make_shared<TensorImpl>()) {
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("tensor: shape " + shape_to_string(shape) + " holds " +
                     std::to_string(shape_numel(shape)) + " values but " +
                     std::to_string(data.size()) + " were given");
  }
  for (std::size_t d : shape) {
    if (d == 0) throw ShapeError("tensor: zero-sized dimension in " + shape_to_string(shape));
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::vector<double> data(shape_numel(shape), value);
  return Tensor(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor({1}, {value}, requires_grad); }

const Shape& Tensor::shape() const { return impl_->shape; }
std::size_t Tensor::numel() const { return impl_->data.size(); }
std::span<const double> Tensor::data() const { return impl_->data; }
std::span<double> Tensor::mutable_data() { return impl_->data; }

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item: tensor of shape " + shape_to_string(shape()) + " is not a scalar");
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }
void Tensor::set_requires_grad(bool value) {
  if (!is_leaf()) throw Error("set_requires_grad: only leaves can change requires_grad");
  impl_->requires_grad = value;
}
bool Tensor::is_leaf() const { return impl_->op == nullptr; }
const char* Tensor::op_name() const { return impl_->op ? impl_->op : "leaf"; }

bool Tensor::has_grad() const { return !impl_->grad.empty(); }
std::span<const double> Tensor::grad() const { return impl_->grad; }
void Tensor::zero_grad() { impl_->grad.clear(); }

Tensor Tensor::detach() const { return Tensor(shape(), impl_->data, false); }

Tensor Tensor::reshape(Shape new_shape) const {
  if (shape_numel(new_shape) != numel()) {
    throw ShapeError("reshape: cannot view " + shape_to_string(shape()) + " as " + shape_to_string(new_shape));
  }
  return from_op(std::move(new_shape), impl_->data, "reshape", {*this},
                 [](const std::vector<double>& g, detail::GradSlots& slots) {
                   if (auto* s = slots[0]) {
                     for (std::size_t i = 0; i < g.size(); ++i) (*s)[i] += g[i];
                   }
                 });
}

namespace {
thread_local bool g_no_grad = false;
}

NoGradGuard::NoGradGuard() : previous_(g_no_grad) { g_no_grad = true; }
NoGradGuard::~NoGradGuard() { g_no_grad = previous_; }
bool NoGradGuard::active() { return g_no_grad; }

Tensor Tensor::from_op(Shape shape, std::vector<double> data, const char* op, std::vector<Tensor> parents,
                       detail::BackwardFn backward) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->op = op;
  bool any = false;
  if (!g_no_grad)
    for (const Tensor& p : parents) any = any || p.requires_grad();
  if (any) {
    impl->requires_grad = true;
    impl->parents.reserve(parents.size());
    for (Tensor& p : parents) impl->parents.push_back(p.impl_);
    impl->backward = std::move(backward);
  }
  return Tensor(std::move(impl));
}

namespace {

// Reverse topological order of nodes that require grad, restricted to nodes
// from which some node in `relevant` is reachable. When `stop` is non-empty,
// traversal does not descend past stop nodes.
struct Plan {
  std::vector<TensorImpl*> order;  // root first
  std::unordered_set<const TensorImpl*> relevant;
};

Plan make_plan(TensorImpl* root, const std::unordered_set<const TensorImpl*>& stop) {
  Plan plan;
  std::vector<TensorImpl*> post;
  std::unordered_set<const TensorImpl*> visited;
  std::vector<std::pair<TensorImpl*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    const bool descend = !stop.contains(node);
    if (descend && next < node->parents.size()) {
      TensorImpl* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
      continue;
    }
    post.push_back(node);
    stack.pop_back();
  }
  // post is parents-before-children; relevance flows from parents to children.
  for (TensorImpl* node : post) {
    bool rel = stop.empty() ? node->parents.empty() : stop.contains(node);
    if (!rel && !stop.contains(node)) {
      for (const auto& p : node->parents) {
        if (plan.relevant.contains(p.get())) {
          rel = true;
          break;
        }
      }
    }
    if (rel) plan.relevant.insert(node);
  }
  plan.order.assign(post.rbegin(), post.rend());
  return plan;
}

std::unordered_map<const TensorImpl*, std::vector<double>> propagate(TensorImpl* root, const Plan& plan,
                                                                     const std::unordered_set<const TensorImpl*>& stop) {
  std::unordered_map<const TensorImpl*, std::vector<double>> buffers;
  buffers[root] = std::vector<double>(root->data.size(), 1.0);
  detail::GradSlots slots;
  for (TensorImpl* node : plan.order) {
    if (node->parents.empty() || stop.contains(node)) continue;
    auto it = buffers.find(node);
    if (it == buffers.end()) continue;
    // References into unordered_map survive rehashing; iterators do not.
    const std::vector<double>& node_grad = it->second;
    slots.assign(node->parents.size(), nullptr);
    bool any = false;
    for (std::size_t i = 0; i < node->parents.size(); ++i) {
      TensorImpl* parent = node->parents[i].get();
      if (!parent->requires_grad || !plan.relevant.contains(parent)) continue;
      auto& buf = buffers[parent];
      if (buf.empty()) buf.assign(parent->data.size(), 0.0);
      slots[i] = &buf;
      any = true;
    }
    if (any) node->backward(node_grad, slots);
    // Intermediate buffers are no longer needed once consumed.
    buffers.erase(node);
  }
  return buffers;
}

}  // namespace

void backward(const Tensor& root) {
  if (!root.defined() || root.numel() != 1) {
    throw ShapeError("backward: root must be a scalar, got shape " +
                     (root.defined() ? shape_to_string(root.shape()) : std::string("<undefined>")));
  }
  TensorImpl* r = root.impl_ptr().get();
  if (!r->requires_grad) return;
  const std::unordered_set<const TensorImpl*> no_stop;
  Plan plan = make_plan(r, no_stop);
  auto buffers = propagate(r, plan, no_stop);
  if (r->parents.empty()) buffers[r] = std::vector<double>(1, 1.0);
  for (auto& [node, buf] : buffers) {
    auto* leaf = const_cast<TensorImpl*>(node);
    if (!leaf->parents.empty()) continue;
    if (leaf->grad.empty()) {
      leaf->grad = std::move(buf);
    } else {
      for (std::size_t i = 0; i < buf.size(); ++i) leaf->grad[i] += buf[i];
    }
  }
}

std::vector<std::vector<double>> gradients(const Tensor& root, const std::vector<Tensor>& targets) {
  if (!root.defined() || root.numel() != 1) {
    throw ShapeError("gradients: root must be a scalar");
  }
  std::unordered_set<const TensorImpl*> stop;
  for (const Tensor& t : targets) stop.insert(t.impl());
  std::vector<std::vector<double>> out;
  out.reserve(targets.size());
  TensorImpl* r = root.impl_ptr().get();
  if (!r->requires_grad) {
    for (const Tensor& t : targets) out.emplace_back(t.numel(), 0.0);
    return out;
  }
  Plan plan = make_plan(r, stop);
  auto buffers = propagate(r, plan, stop);
  for (const Tensor& t : targets) {
    if (t.impl() == r) {
      out.emplace_back(t.numel(), 1.0);
      continue;
    }
    auto it = buffers.find(t.impl());
    out.push_back(it == buffers.end() ? std::vector<double>(t.numel(), 0.0) : it->second);
  }
  return out;
}

}  // namespace immunity
