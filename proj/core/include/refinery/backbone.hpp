#pragma once

#include <array>
#include <string>
#include <vector>

#include "refinery/blocks.hpp"

namespace refinery {

struct BackboneBlockSpec {
  int channels = 0;
  int units = 1;
  int stride = 2;
};

// Miniature residual feature extractor with four resolution stages. The stem
// (two 3x3 stride-2 convs) reaches 1/4 scale; block 1 keeps it and blocks 2-4
// halve it, so block m outputs at 1/2^(m+1).
struct BackboneSpec {
  int in_channels = 3;
  int stem_channels = 16;
  std::array<BackboneBlockSpec, 4> blocks{{{32, 1, 1}, {64, 1, 2}, {128, 1, 2}, {256, 1, 2}}};

  // Downsampling factor of block m (1-based) output.
  static int scale_of(int m) { return 1 << (m + 1); }
  void validate() const;
};

// Pre-activation basic unit: shortcut(x) + conv2(relu(conv1(relu(x)))).
// The shortcut is a 1x1 projection when stride or width changes.
struct ResidualUnit {
  ConvLayer conv1;
  ConvLayer conv2;
  bool has_projection = false;
  ConvLayer projection;
};

struct Backbone {
  BackboneSpec spec;
  ConvLayer stem1;
  ConvLayer stem2;
  std::array<std::vector<ResidualUnit>, 4> blocks;
};

Backbone make_backbone(ParamRegistry& reg, const std::string& prefix, const BackboneSpec& spec,
                       SplitMix64& rng);

Tensor residual_unit_forward(Tape& tape, const Tensor& x, const ResidualUnit& unit);

// Returns (f1, f2, f3, f4). Input height and width must be multiples of 32.
std::array<Tensor, 4> backbone_forward(Tape& tape, const Tensor& image, const Backbone& net);

}  // namespace refinery
