#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "refinery/tensor.hpp"

namespace refinery {

// Gradient slot handed to a backward function, one per recorded input.
// Empty when that input does not need a gradient.
using GradSlot = std::span<double>;

// Receives the gradient w.r.t. the node output and adds (never assigns) the
// contributions for each input into the matching slot.
using BackwardFn =
    std::function<void(std::span<const double> grad_out, std::span<GradSlot> grad_in)>;

// Dynamic reverse-mode tape. Ops append nodes in execution order, so the
// node list is already topologically sorted; backward() walks it in reverse.
//
// A tape and the tensors recorded on it belong to one thread at a time.
class Tape {
 public:
  enum class Mode { kRecord, kInference };

  explicit Tape(Mode mode = Mode::kRecord) : mode_(mode) {}
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return mode_ == Mode::kRecord; }

  // True when an op over these inputs must be recorded.
  bool wants(std::initializer_list<const Tensor*> inputs) const;

  // Appends a node. The output is marked as a non-leaf requiring grad.
  void record(std::string op, std::vector<Tensor> inputs, Tensor& output,
              BackwardFn backward);

  // Seeds d(root)/d(root) = 1 for a single-element root.
  void backward(const Tensor& root);
  // Seeds an arbitrary upstream gradient of root's shape.
  void backward(const Tensor& root, std::span<const double> seed);

  std::size_t size() const { return nodes_.size(); }
  const std::string& op_name(std::size_t i) const { return nodes_[i].op; }
  void clear() { nodes_.clear(); }

 private:
  struct Node {
    std::string op;
    std::vector<Tensor> inputs;
    Tensor output;
    BackwardFn backward;
  };

  Mode mode_;
  std::vector<Node> nodes_;
};

}  // namespace refinery
