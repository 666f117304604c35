#include "refinery/backbone.hpp"

#include "refinery/error.hpp"

namespace refinery {

void BackboneSpec::validate() const {
  if (in_channels < 1 || stem_channels < 1) {
    throw ValidationError("backbone: stem channels must be positive");
  }
  int prev = stem_channels;
  for (int m = 0; m < 4; ++m) {
    const auto& b = blocks[m];
    const std::string name = "backbone.block" + std::to_string(m + 1);
    if (b.channels < 1 || b.units < 1) {
      throw ValidationError(name + ": channels and units must be positive");
    }
    if (b.channels < prev) throw ValidationError(name + ": channel counts must not decrease");
    const int want = m == 0 ? 1 : 2;
    if (b.stride != want) {
      throw ValidationError(name + ": stride must be " + std::to_string(want) +
                            " to keep the 1/4..1/32 resolution ladder");
    }
    prev = b.channels;
  }
}

Backbone make_backbone(ParamRegistry& reg, const std::string& prefix, const BackboneSpec& spec,
                       SplitMix64& rng) {
  spec.validate();
  Backbone net;
  net.spec = spec;
  const ConvSpec stem{spec.in_channels, spec.stem_channels, {3, 3}, {2, 2}, {1, 1}, true};
  net.stem1 = make_conv(reg, prefix + ".stem.conv1", stem, rng);
  net.stem2 = make_conv(reg, prefix + ".stem.conv2",
                        {spec.stem_channels, spec.stem_channels, {3, 3}, {2, 2}, {1, 1}, true},
                        rng);
  int in = spec.stem_channels;
  for (int m = 0; m < 4; ++m) {
    const auto& b = spec.blocks[m];
    for (int k = 0; k < b.units; ++k) {
      const std::string unit =
          prefix + ".block" + std::to_string(m + 1) + ".unit" + std::to_string(k + 1);
      const int stride = k == 0 ? b.stride : 1;
      ResidualUnit u;
      u.conv1 = make_conv(reg, unit + ".conv1",
                          {in, b.channels, {3, 3}, {stride, stride}, {1, 1}, false}, rng);
      u.conv2 = make_conv(reg, unit + ".conv2", ConvSpec::same3x3(b.channels, b.channels, false),
                          rng, WeightInit::kZero);
      if (stride != 1 || in != b.channels) {
        u.has_projection = true;
        u.projection = make_conv(reg, unit + ".proj",
                                 {in, b.channels, {1, 1}, {stride, stride}, {0, 0}, false}, rng);
      }
      net.blocks[m].push_back(std::move(u));
      in = b.channels;
    }
  }
  return net;
}

Tensor residual_unit_forward(Tape& tape, const Tensor& x, const ResidualUnit& unit) {
  Tensor branch = ops::relu(tape, x);
  branch = unit.conv1(tape, branch);
  branch = ops::relu(tape, branch);
  branch = unit.conv2(tape, branch);
  const Tensor shortcut = unit.has_projection ? unit.projection(tape, x) : x;
  return ops::add(tape, shortcut, branch);
}

std::array<Tensor, 4> backbone_forward(Tape& tape, const Tensor& image, const Backbone& net) {
  const Shape s = image.shape();
  if (s.h % 32 != 0 || s.w % 32 != 0 || s.h == 0 || s.w == 0) {
    throw ShapeError("backbone: input " + std::to_string(s.h) + "x" + std::to_string(s.w) +
                     " is not a multiple of 32; pad or crop the image first");
  }
  if (s.c != net.spec.in_channels) {
    throw ShapeError("backbone: expected " + std::to_string(net.spec.in_channels) +
                     " input channels, got " + std::to_string(s.c));
  }
  Tensor x = ops::relu(tape, net.stem1(tape, image));
  // No ReLU after the second stem conv: the first unit pre-activates its
  // branch, and a linear shortcut input cannot die as a whole.
  x = net.stem2(tape, x);
  std::array<Tensor, 4> out;
  for (int m = 0; m < 4; ++m) {
    for (const ResidualUnit& u : net.blocks[m]) x = residual_unit_forward(tape, x, u);
    out[m] = x;
  }
  return out;
}

}  // namespace refinery
