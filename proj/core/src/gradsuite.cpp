#include "refinery/gradsuite.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

#include "refinery/backbone.hpp"
#include "refinery/blocks.hpp"
#include "refinery/cascade.hpp"
#include "refinery/error.hpp"
#include "refinery/ops.hpp"
#include "refinery/rng.hpp"

namespace refinery {
namespace {

constexpr double kOpTol = 1e-5;
constexpr double kBlockTol = 1e-5;
constexpr double kModelTol = 1e-4;
constexpr double kModelEps = 1e-6;

Tensor leaf(Shape s, SplitMix64& rng, double scale = 1.0) {
  Tensor t(s);
  for (double& v : t.data()) v = scale * rng.normal();
  t.set_requires_grad(true);
  return t;
}

LabelMap random_labels(int n, int h, int w, int k, SplitMix64& rng) {
  LabelMap m(n, h, w);
  for (auto& v : m.labels) {
    v = rng.uniform() < 0.1 ? kIgnoreLabel : static_cast<std::uint8_t>(rng.range(0, k - 1));
  }
  return m;
}

struct Case {
  std::string target;
  std::function<Tensor(Tape&)> loss;
  std::vector<Tensor> inputs;
  std::vector<std::string> names;
};

GradSuiteResult run_case(const Case& c, double tol, std::uint64_t seed,
                         std::size_t max_coords = 64, double eps = 1e-6) {
  GradCheckOptions opt;
  opt.eps = eps;
  opt.tol = tol;
  opt.seed = seed;
  opt.max_coords_per_tensor = max_coords;
  GradSuiteResult r;
  r.target = c.target;
  r.tol = tol;
  r.report = grad_check(c.loss, c.inputs, c.names, opt);
  return r;
}

Case projected(std::string target, std::vector<Tensor> inputs, std::vector<std::string> names,
               std::function<Tensor(Tape&)> body, std::uint64_t proj_seed) {
  Case c;
  c.target = std::move(target);
  c.inputs = std::move(inputs);
  c.names = std::move(names);
  c.loss = [body = std::move(body), proj_seed](Tape& tape) {
    return random_projection(tape, body(tape), proj_seed);
  };
  return c;
}

std::vector<GradSuiteResult> op_suite(std::uint64_t seed) {
  SplitMix64 rng(seed);
  std::vector<Case> cases;

  struct ConvCase {
    const char* label;
    ConvSpec spec;
    ConvAlgo algo;
    Hw in;
  };
  const ConvCase conv_cases[] = {
      {"conv2d[direct,3x3,bias]", ConvSpec::same3x3(3, 4, true), ConvAlgo::kDirect, {6, 5}},
      {"conv2d[gemm,3x3,bias]", ConvSpec::same3x3(3, 4, true), ConvAlgo::kGemm, {6, 5}},
      {"conv2d[gemm,stride2]", {2, 3, {3, 3}, {2, 2}, {1, 1}, false}, ConvAlgo::kGemm, {7, 6}},
      {"conv2d[direct,1x1]", ConvSpec::pointwise(4, 2, true), ConvAlgo::kDirect, {3, 4}},
      {"conv2d[gemm,2x3,pad0]", {2, 2, {2, 3}, {1, 2}, {0, 1}, true}, ConvAlgo::kGemm, {5, 5}},
  };
  for (const auto& cc : conv_cases) {
    Tensor x = leaf({2, cc.spec.in_channels, cc.in.h, cc.in.w}, rng);
    Tensor w = leaf(cc.spec.weight_shape(), rng, 0.5);
    std::vector<Tensor> in{x, w};
    std::vector<std::string> names{"x", "weight"};
    Tensor b;
    if (cc.spec.has_bias) {
      b = leaf({1, cc.spec.out_channels, 1, 1}, rng);
      in.push_back(b);
      names.push_back("bias");
    }
    const ConvSpec spec = cc.spec;
    const ConvAlgo algo = cc.algo;
    cases.push_back(projected(cc.label, in, names,
                              [=](Tape& t) { return ops::conv2d(t, x, w, b, spec, algo); },
                              rng.next()));
  }

  {
    Tensor x = leaf({2, 2, 7, 6}, rng);
    cases.push_back(projected("maxpool2d[5x5,s1,p2]", {x}, {"x"},
                              [=](Tape& t) { return ops::maxpool2d(t, x, PoolSpec{}); },
                              rng.next()));
    Tensor y = leaf({1, 3, 6, 7}, rng);
    const PoolSpec p{{3, 2}, {2, 2}, {1, 0}};
    cases.push_back(projected("maxpool2d[3x2,s2]", {y}, {"x"},
                              [=](Tape& t) { return ops::maxpool2d(t, y, p); }, rng.next()));
  }
  {
    Tensor x = leaf({2, 3, 4, 4}, rng);
    cases.push_back(projected("relu", {x}, {"x"},
                              [=](Tape& t) { return ops::relu(t, x); }, rng.next()));
  }
  {
    Tensor a = leaf({2, 3, 4, 5}, rng);
    Tensor b = leaf({2, 3, 4, 5}, rng);
    cases.push_back(projected("add", {a, b}, {"a", "b"},
                              [=](Tape& t) { return ops::add(t, a, b); }, rng.next()));
    // Same tensor on both sides: gradients from both uses must accumulate.
    cases.push_back(projected("add[aliased]", {a}, {"a"},
                              [=](Tape& t) { return ops::add(t, a, a); }, rng.next()));
  }
  {
    Tensor up = leaf({1, 2, 3, 4}, rng);
    cases.push_back(projected("bilinear_resize[up]", {up}, {"x"},
                              [=](Tape& t) { return ops::bilinear_resize(t, up, 7, 9); },
                              rng.next()));
    Tensor down = leaf({2, 2, 9, 8}, rng);
    cases.push_back(projected("bilinear_resize[down]", {down}, {"x"},
                              [=](Tape& t) { return ops::bilinear_resize(t, down, 4, 3); },
                              rng.next()));
  }
  {
    Tensor s = leaf({2, 4, 3, 5}, rng);
    const LabelMap target = random_labels(2, 3, 5, 4, rng);
    Case c;
    c.target = "softmax_xent";
    c.inputs = {s};
    c.names = {"scores"};
    c.loss = [=](Tape& t) { return ops::softmax_xent(t, s, target); };
    cases.push_back(c);
  }
  {
    Tensor x = leaf({2, 2, 3, 3}, rng);
    Tensor w(x.shape());
    for (double& v : w.data()) v = rng.normal();
    Case c;
    c.target = "weighted_sum";
    c.inputs = {x};
    c.names = {"x"};
    c.loss = [=](Tape& t) { return ops::weighted_sum(t, x, w); };
    cases.push_back(c);
  }
  {
    Tensor x = leaf({1, 2, 4, 5}, rng);
    cases.push_back(projected("pad_reflect", {x}, {"x"},
                              [=](Tape& t) { return ops::pad_reflect(t, x, 1, 3, 2, 4); },
                              rng.next()));
    cases.push_back(projected("crop", {x}, {"x"},
                              [=](Tape& t) { return ops::crop(t, x, 1, 2, 2, 3); },
                              rng.next()));
  }

  std::vector<GradSuiteResult> out;
  for (const auto& c : cases) out.push_back(run_case(c, kOpTol, rng.next(), 0));
  return out;
}

std::vector<std::string> names_of(const ParamRegistry& reg) {
  std::vector<std::string> n;
  for (const auto& [name, t] : reg.entries()) n.push_back(name);
  return n;
}

std::vector<Tensor> tensors_of(const ParamRegistry& reg) {
  std::vector<Tensor> t;
  for (const auto& [name, v] : reg.entries()) t.push_back(v);
  return t;
}

// Zero-initialised tensors (biases, the last conv of each residual branch)
// get small random values so every gradient path carries signal.
void perturb_zero_params(ParamRegistry& reg, SplitMix64& rng) {
  for (const auto& [name, param] : reg.entries()) {
    Tensor t = param;
    auto d = t.data();
    if (std::any_of(d.begin(), d.end(), [](double v) { return v != 0.0; })) continue;
    const Shape s = t.shape();
    const double fan = static_cast<double>(s.c) * s.h * s.w;
    const double sd = 0.3 / std::sqrt(std::max(1.0, fan));
    for (double& v : d) v = sd * rng.normal();
  }
}

std::vector<GradSuiteResult> block_suite(std::uint64_t seed) {
  SplitMix64 rng(seed);
  std::vector<GradSuiteResult> out;

  auto finish = [&](std::string target, ParamRegistry& reg, std::vector<Tensor> data_inputs,
                    std::vector<std::string> data_names, std::function<Tensor(Tape&)> body) {
    perturb_zero_params(reg, rng);
    auto in = tensors_of(reg);
    auto names = names_of(reg);
    in.insert(in.end(), data_inputs.begin(), data_inputs.end());
    names.insert(names.end(), data_names.begin(), data_names.end());
    out.push_back(run_case(projected(std::move(target), in, names, std::move(body), rng.next()),
                           kBlockTol, rng.next()));
  };

  {
    ParamRegistry reg;
    const Rcu rcu = make_rcu(reg, "rcu", 3, rng);
    Tensor x = leaf({2, 3, 5, 6}, rng);
    finish("rcu", reg, {x}, {"x"}, [=](Tape& t) { return rcu_forward(t, x, rcu); });
  }
  {
    ParamRegistry reg;
    const Fusion f = make_fusion(reg, "fusion", {4, 3}, rng);
    Tensor hi = leaf({1, 4, 6, 6}, rng);
    Tensor lo = leaf({1, 3, 3, 3}, rng);
    finish("fusion", reg, {hi, lo}, {"x_hi", "x_lo"}, [=](Tape& t) {
      const Tensor ins[] = {hi, lo};
      return fusion_forward(t, ins, f);
    });
  }
  {
    ParamRegistry reg;
    const Crp crp = make_crp(reg, "crp", 3, 2, PoolSpec{}, rng);
    Tensor x = leaf({1, 3, 6, 7}, rng);
    finish("crp", reg, {x}, {"x"}, [=](Tape& t) { return crp_forward(t, x, crp); });
  }
  {
    ParamRegistry reg;
    RefineBlockSpec spec;
    spec.index = 2;
    spec.inputs = {{5, 8}, {3, 4}};
    spec.channels = 3;
    const RefineBlock block = make_refine_block(reg, "refine2", spec, rng);
    Tensor lo = leaf({1, 5, 3, 3}, rng);
    Tensor hi = leaf({1, 3, 6, 6}, rng);
    finish("refine_block", reg, {lo, hi}, {"x_lo", "x_hi"}, [=](Tape& t) {
      const Tensor ins[] = {lo, hi};
      return refine_block_forward(t, ins, block);
    });
  }
  {
    ParamRegistry reg;
    BackboneSpec spec;
    spec.stem_channels = 3;
    spec.blocks = {{{3, 1, 1}, {4, 1, 2}, {4, 1, 2}, {5, 1, 2}}};
    const Backbone net = make_backbone(reg, "backbone", spec, rng);
    Tensor x = leaf({1, 3, 5, 6}, rng);
    const ResidualUnit unit = net.blocks[1].front();
    ParamRegistry unit_reg;
    for (const auto& [name, t] : reg.entries()) {
      if (name.rfind("backbone.block2.", 0) == 0) unit_reg.add(name, t);
    }
    finish("residual_unit[proj]", unit_reg, {x}, {"x"},
           [=](Tape& t) { return residual_unit_forward(t, x, unit); });
  }
  return out;
}

CascadeSpec tiny_spec(Variant v) {
  BackboneSpec bb;
  bb.stem_channels = 4;
  bb.blocks = {{{4, 1, 1}, {6, 1, 2}, {6, 1, 2}, {8, 1, 2}}};
  return CascadeSpec::make(v, 3, bb, 4, true);
}

GradSuiteResult model_case(Variant v, std::uint64_t seed) {
  SplitMix64 rng(seed);
  auto model = std::make_shared<RefineNet>(tiny_spec(v), rng.next());
  perturb_zero_params(model->params(), rng);
  Tensor image = leaf({1, 3, 32, 32}, rng);
  const LabelMap target = random_labels(1, 32, 32, 3, rng);
  Case c;
  c.target = "model[" + variant_name(v) + "]";
  c.inputs = tensors_of(model->params());
  c.names = names_of(model->params());
  c.inputs.push_back(image);
  c.names.push_back("image");
  c.loss = [model, image, target](Tape& t) {
    return ops::softmax_xent(t, model->forward(t, image), target);
  };
  return run_case(c, kModelTol, rng.next(), 8, kModelEps);
}

}  // namespace

GradScope parse_grad_scope(const std::string& name) {
  if (name == "op") return GradScope::kOp;
  if (name == "block") return GradScope::kBlock;
  if (name == "model") return GradScope::kModel;
  throw ValidationError("unknown gradcheck scope '" + name + "' (expected op, block or model)");
}

std::string grad_scope_name(GradScope scope) {
  switch (scope) {
    case GradScope::kOp: return "op";
    case GradScope::kBlock: return "block";
    case GradScope::kModel: return "model";
  }
  return "?";
}

GradSuiteResult grad_check_cascade4_model(std::uint64_t seed) {
  return model_case(Variant::kFourCascaded, seed);
}

std::vector<GradSuiteResult> run_grad_suite(GradScope scope, std::uint64_t seed) {
  switch (scope) {
    case GradScope::kOp: return op_suite(seed);
    case GradScope::kBlock: return block_suite(seed);
    case GradScope::kModel: {
      std::vector<GradSuiteResult> out;
      for (Variant v : {Variant::kSingle, Variant::kTwoCascaded, Variant::kFourCascaded,
                        Variant::kFourCascadedTwoScale}) {
        out.push_back(model_case(v, seed));
      }
      return out;
    }
  }
  return {};
}

}  // namespace refinery
