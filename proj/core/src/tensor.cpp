#include "refinery/tensor.hpp"

#include <algorithm>
#include <sstream>

#include "refinery/error.hpp"

namespace refinery {

std::string Shape::str() const {
  std::ostringstream os;
  os << n << "x" << c << "x" << h << "x" << w;
  return os.str();
}

Tensor::Tensor(Shape shape, double fill) : impl_(std::make_shared<Impl>()) {
  if (shape.n < 0 || shape.c < 0 || shape.h < 0 || shape.w < 0) {
    throw ShapeError("negative tensor extent " + shape.str());
  }
  impl_->shape = shape;
  impl_->values.assign(shape.numel(), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : impl_(std::make_shared<Impl>()) {
  if (values.size() != shape.numel()) {
    throw ShapeError("tensor " + shape.str() + " needs " +
                     std::to_string(shape.numel()) + " values, got " +
                     std::to_string(values.size()));
  }
  impl_->shape = shape;
  impl_->values = std::move(values);
}

const Shape& Tensor::shape() const {
  static const Shape kEmpty{};
  return impl_ ? impl_->shape : kEmpty;
}

std::span<double> Tensor::data() { return impl_->values; }
std::span<const double> Tensor::data() const { return impl_->values; }

std::size_t Tensor::offset(int n, int c, int y, int x) const {
  const Shape& s = impl_->shape;
  return ((static_cast<std::size_t>(n) * s.c + c) * s.h + y) * s.w + x;
}

double& Tensor::at(int n, int c, int y, int x) {
  return impl_->values[offset(n, c, y, x)];
}

double Tensor::at(int n, int c, int y, int x) const {
  return impl_->values[offset(n, c, y, x)];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  impl_->requires_grad = on;
  return *this;
}

bool Tensor::is_leaf() const { return !impl_ || impl_->leaf; }

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

std::span<const double> Tensor::grad() const { return impl_->grad; }

std::span<double> Tensor::mutable_grad() {
  if (impl_->grad.size() != impl_->values.size()) {
    impl_->grad.assign(impl_->values.size(), 0.0);
  }
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (impl_) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::clone() const {
  if (!impl_) return {};
  return Tensor(impl_->shape, impl_->values);
}

}  // namespace refinery
