#include "refinery/params.hpp"

#include <cmath>

#include "refinery/error.hpp"

namespace refinery {

Tensor ParamRegistry::add(const std::string& name, Tensor value) {
  if (index_.contains(name)) throw ValidationError("duplicate parameter name '" + name + "'");
  value.set_requires_grad(true);
  index_[name] = entries_.size();
  entries_.emplace_back(name, value);
  return value;
}

bool ParamRegistry::contains(const std::string& name) const { return index_.contains(name); }

Tensor ParamRegistry::find(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ValidationError("no parameter named '" + name + "'");
  return entries_[it->second].second;
}

std::size_t ParamRegistry::total_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.second.numel();
  return n;
}

void ParamRegistry::zero_grad() {
  for (auto& e : entries_) e.second.zero_grad();
}

Tensor he_normal(Shape shape, int fan_in, SplitMix64& rng) {
  Tensor t(shape);
  const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (double& v : t.data()) v = std * rng.normal();
  return t;
}

ConvLayer make_conv(ParamRegistry& reg, const std::string& prefix, const ConvSpec& spec,
                    SplitMix64& rng, WeightInit init) {
  if (spec.in_channels < 1 || spec.out_channels < 1) {
    throw ValidationError(prefix + ": channel counts must be positive");
  }
  ConvLayer layer;
  layer.spec = spec;
  const int fan_in = spec.in_channels * spec.kernel.h * spec.kernel.w;
  layer.weight = reg.add(prefix + ".weight", init == WeightInit::kZero
                                                 ? Tensor(spec.weight_shape())
                                                 : he_normal(spec.weight_shape(), fan_in, rng));
  if (spec.has_bias) {
    layer.bias = reg.add(prefix + ".bias", Tensor(Shape{1, spec.out_channels, 1, 1}));
  }
  return layer;
}

}  // namespace refinery
