#include "refinery/tape.hpp"

#include <unordered_map>

#include "refinery/error.hpp"

namespace refinery {

bool Tape::wants(std::initializer_list<const Tensor*> inputs) const {
  if (!recording()) return false;
  for (const Tensor* t : inputs) {
    if (t != nullptr && t->defined() && t->requires_grad()) return true;
  }
  return false;
}

void Tape::record(std::string op, std::vector<Tensor> inputs, Tensor& output,
                  BackwardFn backward) {
  output.impl_->requires_grad = true;
  output.impl_->leaf = false;
  nodes_.push_back(Node{std::move(op), std::move(inputs), output, std::move(backward)});
}

void Tape::backward(const Tensor& root) {
  if (root.numel() != 1) {
    throw ShapeError("backward() without a seed needs a single-element root, got " +
                     root.shape().str());
  }
  const double one = 1.0;
  backward(root, std::span<const double>(&one, 1));
}

void Tape::backward(const Tensor& root, std::span<const double> seed) {
  if (seed.size() != root.numel()) {
    throw ShapeError("backward seed has " + std::to_string(seed.size()) +
                     " values for root " + root.shape().str());
  }
  if (!root.requires_grad()) return;

  if (root.is_leaf()) {
    auto g = const_cast<Tensor&>(root).mutable_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
    return;
  }

  // Gradients of intermediate values live here only for the duration of the
  // traversal, so repeated backward() calls add exactly one more copy of the
  // gradient into every leaf.
  std::unordered_map<const void*, std::vector<double>> pending;
  pending[root.id()].assign(seed.begin(), seed.end());

  std::vector<GradSlot> slots;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node& node = *it;
    auto found = pending.find(node.output.id());
    if (found == pending.end()) continue;
    std::vector<double> grad_out = std::move(found->second);
    pending.erase(found);

    slots.assign(node.inputs.size(), GradSlot{});
    for (std::size_t i = 0; i < node.inputs.size(); ++i) {
      Tensor& in = node.inputs[i];
      if (!in.defined() || !in.requires_grad()) continue;
      if (in.is_leaf()) {
        slots[i] = in.mutable_grad();
      } else {
        auto& buf = pending[in.id()];
        if (buf.empty()) buf.assign(in.numel(), 0.0);
        slots[i] = buf;
      }
    }
    node.backward(grad_out, slots);
  }
}

}  // namespace refinery
