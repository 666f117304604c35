#pragma once

#include <span>
#include <string>
#include <vector>

#include "refinery/params.hpp"

namespace refinery {

// Residual convolution unit: x + conv2(relu(conv1(relu(x)))), both convs
// 3x3 without bias.
struct Rcu {
  int channels = 0;
  ConvLayer conv1;
  ConvLayer conv2;
};

Rcu make_rcu(ParamRegistry& reg, const std::string& prefix, int channels, SplitMix64& rng);
Tensor rcu_forward(Tape& tape, const Tensor& x, const Rcu& p);

// Multi-resolution fusion. One 3x3 adaptation conv per input, all projecting
// to the smallest input channel count; a single input bypasses the block.
struct Fusion {
  int out_channels = 0;
  std::vector<int> in_channels;
  std::vector<ConvLayer> adapt;  // empty for a single input
};

Fusion make_fusion(ParamRegistry& reg, const std::string& prefix,
                   const std::vector<int>& in_channels, SplitMix64& rng);
Tensor fusion_forward(Tape& tape, std::span<const Tensor> inputs, const Fusion& p);

// Chained residual pooling:
//   y0 = relu(x), y_i = conv_i(maxpool(y_{i-1})), out = y0 + y1 + ... + y_k
struct Crp {
  int channels = 0;
  PoolSpec pool;
  std::vector<ConvLayer> convs;  // one per pooling block, 3x3 without bias
};

Crp make_crp(ParamRegistry& reg, const std::string& prefix, int channels,
             int num_pool_blocks, const PoolSpec& pool, SplitMix64& rng);
Tensor crp_forward(Tape& tape, const Tensor& x, const Crp& p);

struct PathSpec {
  int channels = 0;
  int scale = 1;  // downsampling factor w.r.t. the network input (4, 8, 16, 32)
};

struct RefineBlockSpec {
  int index = 1;  // m in refine{m}
  std::vector<PathSpec> inputs;
  int channels = 256;
  int rcus_per_path = 2;
  bool use_crp = true;
  int num_pool_blocks = 2;
  PoolSpec crp_pool{};
  int num_output_rcus = 1;

  // Width of refine{m} relative to a base width: doubled for the coarsest
  // (single 1/32 input) block, matching 512 vs 256 at full scale.
  static int default_channels(int index, int base_width) {
    return index == 4 ? 2 * base_width : base_width;
  }
  void validate() const;
};

struct RefineBlock {
  RefineBlockSpec spec;
  std::vector<ConvLayer> path_adapt;      // input dimensionality adaptation
  std::vector<std::vector<Rcu>> path_rcus;
  Fusion fusion;
  Crp crp;
  std::vector<Rcu> output_rcus;
};

RefineBlock make_refine_block(ParamRegistry& reg, const std::string& prefix,
                              const RefineBlockSpec& spec, SplitMix64& rng);

// Per path: adaptation conv then RCUs; fusion; chained residual pooling;
// output RCUs. Errors carry the block name.
Tensor refine_block_forward(Tape& tape, std::span<const Tensor> inputs,
                            const RefineBlock& block);

}  // namespace refinery
