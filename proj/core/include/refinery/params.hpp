#pragma once

#include <map>
#include <string>
#include <vector>

#include "refinery/ops.hpp"
#include "refinery/rng.hpp"
#include "refinery/tensor.hpp"

namespace refinery {

// Ordered, uniquely named set of learnable tensors. Registration order is the
// iteration order everywhere (optimizer state, checkpoints, audits).
class ParamRegistry {
 public:
  Tensor add(const std::string& name, Tensor value);

  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  bool contains(const std::string& name) const;
  Tensor find(const std::string& name) const;  // throws ValidationError

  std::size_t total_count() const;
  void zero_grad();

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
  std::map<std::string, std::size_t> index_;
};

// Zero-mean Gaussian with std sqrt(2 / fan_in).
Tensor he_normal(Shape shape, int fan_in, SplitMix64& rng);

// One convolution layer: its spec plus weight and optional bias.
struct ConvLayer {
  ConvSpec spec;
  Tensor weight;
  Tensor bias;  // undefined when !spec.has_bias

  Tensor operator()(Tape& tape, const Tensor& x) const {
    return ops::conv2d(tape, x, weight, bias, spec);
  }
};

// kZero is used for the last convolution of a residual branch, so the branch
// starts as an exact identity and stacked units do not inflate activations.
enum class WeightInit { kHeNormal, kZero };

// Registers `<prefix>.weight` and `<prefix>.bias` (zeros).
ConvLayer make_conv(ParamRegistry& reg, const std::string& prefix, const ConvSpec& spec,
                    SplitMix64& rng, WeightInit init = WeightInit::kHeNormal);

}  // namespace refinery
