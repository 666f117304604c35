#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace refinery {

// Rank-4 extent in (batch, channel, row, col) order.
struct Shape {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  std::size_t numel() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  bool operator==(const Shape&) const = default;
  std::string str() const;
};

class Tape;

// Dense row-major NCHW array of doubles with an optional gradient.
//
// Tensor is a handle: copies share storage, the way parameters are shared
// between the registry, the model and the tape. Use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t numel() const { return shape().numel(); }

  std::span<double> data();
  std::span<const double> data() const;

  double& at(int n, int c, int y, int x);
  double at(int n, int c, int y, int x) const;
  std::size_t offset(int n, int c, int y, int x) const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);

  // Leaf tensors are the ones not produced by a recorded op; backward
  // accumulates only into leaves.
  bool is_leaf() const;

  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();  // allocates zeros on first use
  void zero_grad();

  // Deep copy of the values; the copy is a detached leaf without grad.
  Tensor clone() const;

  const void* id() const { return impl_.get(); }

 private:
  struct Impl {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;
    bool requires_grad = false;
    bool leaf = true;
  };
  std::shared_ptr<Impl> impl_;

  friend class Tape;
};

inline constexpr std::uint8_t kIgnoreLabel = 255;

// Integer class-index map (n, h, w). Value kIgnoreLabel marks pixels excluded
// from the loss and the metrics.
struct LabelMap {
  int n = 0;
  int h = 0;
  int w = 0;
  std::vector<std::uint8_t> labels;

  LabelMap() = default;
  LabelMap(int n, int h, int w, std::uint8_t fill = 0)
      : n(n), h(h), w(w), labels(static_cast<std::size_t>(n) * h * w, fill) {}

  std::uint8_t& at(int b, int y, int x) {
    return labels[(static_cast<std::size_t>(b) * h + y) * w + x];
  }
  std::uint8_t at(int b, int y, int x) const {
    return labels[(static_cast<std::size_t>(b) * h + y) * w + x];
  }
  bool operator==(const LabelMap&) const = default;
};

}  // namespace refinery
