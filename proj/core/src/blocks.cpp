#include "refinery/blocks.hpp"

#include <algorithm>

#include "refinery/error.hpp"

namespace refinery {
namespace {

void expect_channels(const Tensor& x, int channels, const char* what) {
  if (x.shape().c != channels) {
    throw ShapeError(std::string(what) + ": expected " + std::to_string(channels) +
                     " channels, got " + std::to_string(x.shape().c));
  }
}

}  // namespace

Rcu make_rcu(ParamRegistry& reg, const std::string& prefix, int channels, SplitMix64& rng) {
  Rcu r;
  r.channels = channels;
  r.conv1 = make_conv(reg, prefix + ".conv1", ConvSpec::same3x3(channels, channels, false), rng);
  r.conv2 = make_conv(reg, prefix + ".conv2", ConvSpec::same3x3(channels, channels, false), rng,
                      WeightInit::kZero);
  return r;
}

Tensor rcu_forward(Tape& tape, const Tensor& x, const Rcu& p) {
  expect_channels(x, p.channels, "rcu");
  Tensor branch = ops::relu(tape, x);
  branch = p.conv1(tape, branch);
  branch = ops::relu(tape, branch);
  branch = p.conv2(tape, branch);
  return ops::add(tape, x, branch);
}

Fusion make_fusion(ParamRegistry& reg, const std::string& prefix,
                   const std::vector<int>& in_channels, SplitMix64& rng) {
  if (in_channels.empty()) throw ValidationError(prefix + ": fusion needs at least one input");
  Fusion f;
  f.in_channels = in_channels;
  f.out_channels = *std::min_element(in_channels.begin(), in_channels.end());
  if (in_channels.size() == 1) return f;
  for (std::size_t i = 0; i < in_channels.size(); ++i) {
    f.adapt.push_back(make_conv(reg, prefix + ".adapt" + std::to_string(i + 1),
                                ConvSpec::same3x3(in_channels[i], f.out_channels, true), rng));
  }
  return f;
}

Tensor fusion_forward(Tape& tape, std::span<const Tensor> inputs, const Fusion& p) {
  if (inputs.empty()) throw ValidationError("fusion: empty input list");
  if (inputs.size() != p.in_channels.size()) {
    throw ShapeError("fusion: expected " + std::to_string(p.in_channels.size()) +
                     " inputs, got " + std::to_string(inputs.size()));
  }
  if (inputs.size() == 1) return inputs[0];

  int out_h = 0;
  int out_w = 0;
  for (const Tensor& t : inputs) {
    out_h = std::max(out_h, t.shape().h);
    out_w = std::max(out_w, t.shape().w);
  }
  Tensor sum;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    expect_channels(inputs[i], p.in_channels[i], "fusion input");
    Tensor path = p.adapt[i](tape, inputs[i]);
    if (path.shape().h != out_h || path.shape().w != out_w) {
      path = ops::bilinear_resize(tape, path, out_h, out_w);
    }
    sum = sum.defined() ? ops::add(tape, sum, path) : path;
  }
  return sum;
}

Crp make_crp(ParamRegistry& reg, const std::string& prefix, int channels,
             int num_pool_blocks, const PoolSpec& pool, SplitMix64& rng) {
  if (num_pool_blocks < 0) throw ValidationError(prefix + ": negative pool block count");
  Crp c;
  c.channels = channels;
  c.pool = pool;
  for (int i = 0; i < num_pool_blocks; ++i) {
    c.convs.push_back(make_conv(reg, prefix + ".conv" + std::to_string(i + 1),
                                ConvSpec::same3x3(channels, channels, false), rng,
                                WeightInit::kZero));
  }
  return c;
}

Tensor crp_forward(Tape& tape, const Tensor& x, const Crp& p) {
  expect_channels(x, p.channels, "crp");
  Tensor top = ops::relu(tape, x);
  Tensor acc = top;
  for (const ConvLayer& conv : p.convs) {
    top = ops::maxpool2d(tape, top, p.pool);
    top = conv(tape, top);
    acc = ops::add(tape, acc, top);
  }
  return acc;
}

void RefineBlockSpec::validate() const {
  const std::string name = "refine" + std::to_string(index);
  if (inputs.empty()) throw ValidationError(name + ": needs at least one input path");
  if (channels < 1) throw ValidationError(name + ": channels must be positive");
  for (const auto& p : inputs) {
    if (p.channels < 1 || p.scale < 1) {
      throw ValidationError(name + ": input paths need positive channels and scale");
    }
  }
  if (rcus_per_path < 0 || num_pool_blocks < 0 || num_output_rcus < 0) {
    throw ValidationError(name + ": negative unit counts");
  }
  // PoolSpec::output_size validates the window geometry.
  if (use_crp && num_pool_blocks > 0) crp_pool.output_size({crp_pool.window.h, crp_pool.window.w});
}

RefineBlock make_refine_block(ParamRegistry& reg, const std::string& prefix,
                              const RefineBlockSpec& spec, SplitMix64& rng) {
  spec.validate();
  RefineBlock b;
  b.spec = spec;
  for (std::size_t i = 0; i < spec.inputs.size(); ++i) {
    const std::string path = prefix + ".path" + std::to_string(i + 1);
    b.path_adapt.push_back(make_conv(
        reg, path + ".adapt", ConvSpec::same3x3(spec.inputs[i].channels, spec.channels, true),
        rng));
    std::vector<Rcu> rcus;
    for (int k = 0; k < spec.rcus_per_path; ++k) {
      rcus.push_back(make_rcu(reg, path + ".rcu" + std::to_string(k + 1), spec.channels, rng));
    }
    b.path_rcus.push_back(std::move(rcus));
  }
  b.fusion = make_fusion(reg, prefix + ".fusion",
                         std::vector<int>(spec.inputs.size(), spec.channels), rng);
  if (spec.use_crp) {
    b.crp = make_crp(reg, prefix + ".crp", spec.channels, spec.num_pool_blocks, spec.crp_pool,
                     rng);
  }
  for (int k = 0; k < spec.num_output_rcus; ++k) {
    b.output_rcus.push_back(
        make_rcu(reg, prefix + ".out_rcu" + std::to_string(k + 1), spec.channels, rng));
  }
  return b;
}

Tensor refine_block_forward(Tape& tape, std::span<const Tensor> inputs,
                            const RefineBlock& block) {
  const RefineBlockSpec& spec = block.spec;
  const std::string name = "refine" + std::to_string(spec.index);
  try {
    if (inputs.size() != spec.inputs.size()) {
      throw ShapeError("expected " + std::to_string(spec.inputs.size()) +
                       " input paths, got " + std::to_string(inputs.size()));
    }
    std::vector<Tensor> paths;
    paths.reserve(inputs.size());
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      expect_channels(inputs[i], spec.inputs[i].channels,
                      ("path" + std::to_string(i + 1)).c_str());
      Tensor t = block.path_adapt[i](tape, inputs[i]);
      for (const Rcu& rcu : block.path_rcus[i]) t = rcu_forward(tape, t, rcu);
      paths.push_back(std::move(t));
    }
    Tensor y = fusion_forward(tape, paths, block.fusion);
    if (spec.use_crp) y = crp_forward(tape, y, block.crp);
    for (const Rcu& rcu : block.output_rcus) y = rcu_forward(tape, y, rcu);
    return y;
  } catch (const ShapeError& e) {
    throw ShapeError(name + ": " + e.what());
  }
}

}  // namespace refinery
