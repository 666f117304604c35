#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "refinery/backbone.hpp"
#include "refinery/cascade.hpp"
#include "refinery/error.hpp"
#include "refinery/gradcheck.hpp"
#include "test_util.hpp"

namespace refinery {
namespace {

using testing::bitwise_equal;
using testing::random_tensor;
using testing::sum_sq;

constexpr Variant kAllVariants[] = {Variant::kSingle, Variant::kTwoCascaded,
                                    Variant::kFourCascaded, Variant::kFourCascadedTwoScale};

BackboneSpec tiny_backbone() {
  BackboneSpec b;
  b.stem_channels = 4;
  b.blocks = {{{4, 1, 1}, {6, 1, 2}, {6, 1, 2}, {8, 1, 2}}};
  return b;
}

CascadeSpec tiny_spec(Variant v, int k = 3, bool crp = true) {
  return CascadeSpec::make(v, k, tiny_backbone(), 4, crp);
}

LabelMap random_labels(int n, int h, int w, int k, SplitMix64& rng) {
  LabelMap m(n, h, w);
  for (auto& l : m.labels) l = static_cast<std::uint8_t>(rng.range(0, k - 1));
  return m;
}

// ---------------------------------------------------------------- backbone

TEST(Backbone, StageResolutionsFor64) {
  SplitMix64 rng(1);
  ParamRegistry reg;
  const Backbone net = make_backbone(reg, "backbone", tiny_backbone(), rng);
  Tape tape(Tape::Mode::kInference);
  const auto f = backbone_forward(tape, random_tensor({2, 3, 64, 64}, rng), net);
  const int sides[] = {16, 8, 4, 2};
  const int chans[] = {4, 6, 6, 8};
  for (int m = 0; m < 4; ++m) {
    EXPECT_EQ(f[m].shape(), (Shape{2, chans[m], sides[m], sides[m]})) << "f" << m + 1;
    EXPECT_EQ(64 / BackboneSpec::scale_of(m + 1), sides[m]);
  }
}

TEST(Backbone, CoarsestStageOf224IsSeven) {
  SplitMix64 rng(2);
  ParamRegistry reg;
  BackboneSpec spec = tiny_backbone();
  spec.stem_channels = 2;
  spec.blocks = {{{2, 1, 1}, {2, 1, 2}, {2, 1, 2}, {2, 1, 2}}};
  const Backbone net = make_backbone(reg, "backbone", spec, rng);
  Tape tape(Tape::Mode::kInference);
  const auto f = backbone_forward(tape, Tensor(Shape{1, 3, 224, 224}, 0.2), net);
  EXPECT_EQ(f[0].shape().h, 56);
  EXPECT_EQ(f[3].shape(), (Shape{1, 2, 7, 7}));
}

TEST(Backbone, RejectsSidesThatAreNotMultiplesOf32) {
  SplitMix64 rng(3);
  ParamRegistry reg;
  const Backbone net = make_backbone(reg, "backbone", tiny_backbone(), rng);
  Tape tape(Tape::Mode::kInference);
  for (auto [h, w] : {std::pair{48, 64}, {64, 40}, {31, 32}}) {
    try {
      backbone_forward(tape, Tensor(Shape{1, 3, h, w}), net);
      FAIL() << h << "x" << w;
    } catch (const ShapeError& e) {
      EXPECT_NE(std::string(e.what()).find("multiple of 32"), std::string::npos);
    }
  }
  EXPECT_THROW(backbone_forward(tape, Tensor(Shape{1, 2, 32, 32}), net), ShapeError);
}

TEST(Backbone, SpecValidation) {
  BackboneSpec s = tiny_backbone();
  s.blocks[1].stride = 1;
  EXPECT_THROW(s.validate(), ValidationError);
  s = tiny_backbone();
  s.blocks[2].channels = 5;
  EXPECT_THROW(s.validate(), ValidationError);
  s = tiny_backbone();
  s.blocks[0].units = 0;
  EXPECT_THROW(s.validate(), ValidationError);
  EXPECT_NO_THROW(tiny_backbone().validate());
}

TEST(Backbone, UnitWithZeroBranchIsItsShortcut) {
  SplitMix64 rng(4);
  ParamRegistry reg;
  BackboneSpec spec = tiny_backbone();
  spec.blocks = {{{4, 2, 1}, {6, 1, 2}, {6, 1, 2}, {8, 1, 2}}};
  const Backbone net = make_backbone(reg, "backbone", spec, rng);
  const ResidualUnit& same = net.blocks[0][1];
  ASSERT_FALSE(same.has_projection);
  const Tensor x = random_tensor({1, 4, 8, 8}, rng);
  Tape tape(Tape::Mode::kInference);
  EXPECT_TRUE(bitwise_equal(residual_unit_forward(tape, x, same), x));

  const ResidualUnit& down = net.blocks[1][0];
  ASSERT_TRUE(down.has_projection);
  const Tensor x2 = random_tensor({1, 4, 8, 8}, rng);
  EXPECT_TRUE(bitwise_equal(residual_unit_forward(tape, x2, down), down.projection(tape, x2)));
}

TEST(Backbone, StemReceivesGradient) {
  SplitMix64 rng(5);
  ParamRegistry reg;
  const Backbone net = make_backbone(reg, "backbone", tiny_backbone(), rng);
  Tape tape;
  const auto f = backbone_forward(tape, random_tensor({1, 3, 32, 32}, rng), net);
  tape.backward(random_projection(tape, f[3], 9));
  ASSERT_TRUE(net.stem1.weight.has_grad());
  EXPECT_GT(sum_sq(net.stem1.weight.grad()), 0.0);
}

// ----------------------------------------------------------------- wiring

std::vector<std::string> sources_of(const BlockWiring& b) {
  std::vector<std::string> out;
  for (const auto& s : b.sources) out.push_back(s.str());
  return out;
}

TEST(Cascade, WiringOfEachVariant) {
  using V = std::vector<std::string>;
  const CascadeSpec single = tiny_spec(Variant::kSingle);
  ASSERT_EQ(single.blocks.size(), 1u);
  EXPECT_EQ(sources_of(single.blocks[0]),
            (V{"backbone.f4", "backbone.f3", "backbone.f2", "backbone.f1"}));

  const CascadeSpec two = tiny_spec(Variant::kTwoCascaded);
  ASSERT_EQ(two.blocks.size(), 2u);
  EXPECT_EQ(sources_of(two.blocks[0]), (V{"backbone.f4", "backbone.f3"}));
  EXPECT_EQ(sources_of(two.blocks[1]), (V{"refine2", "backbone.f2", "backbone.f1"}));

  const CascadeSpec four = tiny_spec(Variant::kFourCascaded);
  ASSERT_EQ(four.blocks.size(), 4u);
  EXPECT_EQ(sources_of(four.blocks[0]), (V{"backbone.f4"}));
  EXPECT_EQ(sources_of(four.blocks[1]), (V{"refine4", "backbone.f3"}));
  EXPECT_EQ(sources_of(four.blocks[2]), (V{"refine3", "backbone.f2"}));
  EXPECT_EQ(sources_of(four.blocks[3]), (V{"refine2", "backbone.f1"}));
  EXPECT_EQ(four.blocks[0].spec.channels, 8);
  for (int i = 1; i < 4; ++i) EXPECT_EQ(four.blocks[i].spec.channels, 4);
  EXPECT_EQ(four.blocks[3].spec.num_output_rcus, 3);

  const CascadeSpec two_scale = tiny_spec(Variant::kFourCascadedTwoScale);
  EXPECT_EQ(two_scale.blocks.back().spec.num_output_rcus, 1);
}

TEST(Cascade, VariantNames) {
  for (Variant v : kAllVariants) EXPECT_EQ(parse_variant(variant_name(v)), v);
  EXPECT_EQ(parse_variant("four_cascaded"), Variant::kFourCascaded);
  EXPECT_EQ(parse_variant("four_cascaded_two_scale"), Variant::kFourCascadedTwoScale);
  EXPECT_THROW(parse_variant("cascade3"), ValidationError);
}

TEST(Cascade, BrokenWiringIsRejected) {
  CascadeSpec s = tiny_spec(Variant::kFourCascaded);
  std::swap(s.blocks[0], s.blocks[1]);
  EXPECT_THROW(s.validate(), ValidationError);
  s = tiny_spec(Variant::kFourCascaded);
  s.blocks[1].sources[1].index = 2;  // f2 is 1/8, refine3 expects 1/16
  EXPECT_THROW(s.validate(), ValidationError);
  s = tiny_spec(Variant::kFourCascaded);
  s.blocks.pop_back();
  EXPECT_THROW(s.validate(), ValidationError);
}

TEST(Cascade, DescribeRoundTrip) {
  for (Variant v : kAllVariants) {
    for (bool crp : {true, false}) {
      RefineNet net(tiny_spec(v, 5, crp), 3);
      const ConfigSection d = net.describe();
      const CascadeSpec back = CascadeSpec::read(d);
      RefineNet again(back, 3);
      EXPECT_EQ(again.describe().items(), d.items()) << variant_name(v);
      EXPECT_EQ(back.blocks.size(), net.spec().blocks.size());
    }
  }
}

TEST(Cascade, UnknownModelKeyIsRejected) {
  ConfigSection s;
  s.set("variant", "single");
  s.set("widht", "3");
  EXPECT_THROW(CascadeSpec::read(s), ValidationError);
}

// ------------------------------------------------------------------ forward

TEST(Cascade, OutputAndIntermediateShapes) {
  SplitMix64 rng(6);
  const Tensor img = random_tensor({1, 3, 64, 64}, rng);
  for (Variant v : kAllVariants) {
    RefineNet net(tiny_spec(v), 11);
    Tape tape(Tape::Mode::kInference);
    ForwardTrace trace;
    const Tensor y = net.forward(tape, img, &trace);
    EXPECT_EQ(y.shape(), (Shape{1, 3, 64, 64})) << variant_name(v);
    // Two scales fuse at the larger path: round(64 * 1.2) = 77, ceil(77 / 4) = 20.
    const int side = v == Variant::kFourCascadedTwoScale ? 20 : 16;
    EXPECT_EQ(trace.head_input.h, side) << variant_name(v);
    EXPECT_EQ(trace.head_input.w, side) << variant_name(v);
    EXPECT_EQ(trace.head_input.c, 4);
  }
  RefineNet four(tiny_spec(Variant::kFourCascaded), 11);
  Tape tape(Tape::Mode::kInference);
  ForwardTrace trace;
  four.forward(tape, img, &trace);
  ASSERT_EQ(trace.blocks.size(), 4u);
  EXPECT_EQ(trace.blocks[0], (std::pair<std::string, Shape>{"refine4", {1, 8, 2, 2}}));
  EXPECT_EQ(trace.blocks[1], (std::pair<std::string, Shape>{"refine3", {1, 4, 4, 4}}));
  EXPECT_EQ(trace.blocks[2], (std::pair<std::string, Shape>{"refine2", {1, 4, 8, 8}}));
  EXPECT_EQ(trace.blocks[3], (std::pair<std::string, Shape>{"refine1", {1, 4, 16, 16}}));
}

TEST(Cascade, ArbitraryImageSizesKeepTheirResolution) {
  SplitMix64 rng(7);
  for (Variant v : kAllVariants) {
    RefineNet net(tiny_spec(v), 1);
    Tape tape(Tape::Mode::kInference);
    for (auto [h, w] : {std::pair{50, 70}, {33, 32}, {64, 20}}) {
      const Tensor y = net.forward(tape, random_tensor({1, 3, h, w}, rng));
      EXPECT_EQ(y.shape(), (Shape{1, 3, h, w})) << variant_name(v) << " " << h << "x" << w;
      for (double s : y.data()) ASSERT_TRUE(std::isfinite(s));
    }
  }
}

// Random init, one backward pass: the stem (farthest from the loss) must
// receive a nonzero gradient in every variant.
TEST(Cascade, StemGradientIsNonzeroForEveryVariantAndSeed) {
  for (Variant v : kAllVariants) {
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
      RefineNet net(tiny_spec(v, 4), seed);
      SplitMix64 rng(1000 + seed);
      const Tensor img = random_tensor({1, 3, 32, 32}, rng);
      const LabelMap labels = random_labels(1, 32, 32, 4, rng);
      net.params().zero_grad();
      Tape tape;
      tape.backward(ops::softmax_xent(tape, net.forward(tape, img), labels));
      const std::vector<std::string> stems =
          v == Variant::kFourCascadedTwoScale
              ? std::vector<std::string>{"scale1.backbone.stem.conv1.weight",
                                         "scale2.backbone.stem.conv1.weight"}
              : std::vector<std::string>{"backbone.stem.conv1.weight"};
      for (const auto& name : stems) {
        const Tensor w = net.params().find(name);
        ASSERT_TRUE(w.has_grad()) << name;
        EXPECT_GT(std::sqrt(sum_sq(w.grad())), 0.0) << variant_name(v) << " seed " << seed;
      }
    }
  }
}

TEST(Cascade, EveryParameterReceivesGradientAfterPerturbation) {
  SplitMix64 rng(8);
  for (Variant v : kAllVariants) {
    RefineNet net(tiny_spec(v), 2);
    for (const auto& [name, t] : net.params().entries()) {
      Tensor h = t;
      for (double& x : h.data()) x += 0.05 * rng.normal();
    }
    Tape tape;
    const Tensor img = random_tensor({2, 3, 64, 64}, rng);
    tape.backward(ops::softmax_xent(tape, net.forward(tape, img), random_labels(2, 64, 64, 3, rng)));
    for (const auto& [name, t] : net.params().entries()) {
      ASSERT_TRUE(t.has_grad()) << name;
      EXPECT_GT(sum_sq(t.grad()), 0.0) << variant_name(v) << " " << name;
    }
  }
}

TEST(Cascade, InitialisationIsDeterministic) {
  SplitMix64 rng(9);
  const Tensor img = random_tensor({1, 3, 32, 32}, rng);
  RefineNet a(tiny_spec(Variant::kFourCascaded), 42);
  RefineNet b(tiny_spec(Variant::kFourCascaded), 42);
  RefineNet c(tiny_spec(Variant::kFourCascaded), 43);
  ASSERT_EQ(a.params().size(), b.params().size());
  bool any_diff = false;
  for (std::size_t i = 0; i < a.params().size(); ++i) {
    EXPECT_EQ(a.params().entries()[i].first, b.params().entries()[i].first);
    EXPECT_TRUE(bitwise_equal(a.params().entries()[i].second, b.params().entries()[i].second));
    any_diff |= !bitwise_equal(a.params().entries()[i].second, c.params().entries()[i].second);
  }
  EXPECT_TRUE(any_diff);
  Tape tape(Tape::Mode::kInference);
  EXPECT_TRUE(bitwise_equal(a.forward(tape, img), b.forward(tape, img)));
}

// ----------------------------------------------------------- param counts

TEST(ParamCount, RcuHasTwoThreeByThreeKernels) {
  for (int c : {1, 4, 16, 256}) {
    SplitMix64 rng(1);
    ParamRegistry reg;
    make_rcu(reg, "rcu", c, rng);
    EXPECT_EQ(reg.total_count(), static_cast<std::size_t>(2 * 9 * c * c));
  }
}

TEST(ParamCount, CascadesGrowAndTwoScaleDuplicatesTheBackbone) {
  std::map<Variant, std::size_t> total;
  std::map<Variant, std::map<std::string, std::size_t>> groups;
  for (Variant v : kAllVariants) {
    RefineNet net(tiny_spec(v), 1);
    groups[v] = count_params(net);
    std::size_t sum = 0;
    for (const auto& [k, n] : groups[v]) sum += n;
    total[v] = sum;
    EXPECT_EQ(sum, net.params().total_count());
  }
  EXPECT_GT(total[Variant::kFourCascaded], total[Variant::kTwoCascaded]);
  EXPECT_GT(total[Variant::kTwoCascaded], total[Variant::kSingle]);

  const std::size_t backbone = groups[Variant::kFourCascaded].at("backbone");
  const auto& two = groups[Variant::kFourCascadedTwoScale];
  EXPECT_EQ(two.at("scale1.backbone"), backbone);
  EXPECT_EQ(two.at("scale2.backbone"), backbone);
  EXPECT_TRUE(two.contains("scale_fusion"));
  EXPECT_EQ(groups[Variant::kFourCascaded].size(), 6u);  // backbone, refine1..4, head
}

TEST(ParamCount, CrpOffRemovesOnlyCrpConvs) {
  RefineNet on(tiny_spec(Variant::kFourCascaded, 3, true), 1);
  RefineNet off(tiny_spec(Variant::kFourCascaded, 3, false), 1);
  std::size_t crp = 0;
  for (const auto& [name, t] : on.params().entries()) {
    if (name.find(".crp.") != std::string::npos) crp += t.numel();
  }
  // Four blocks, two 3x3 convs each: refine4 at width 8, the rest at 4.
  EXPECT_EQ(crp, 2u * 9 * (64 + 3 * 16));
  EXPECT_EQ(on.params().total_count() - off.params().total_count(), crp);
}

// ------------------------------------------------------------ checkpoints

TEST(Checkpoint, RoundTripIsBitExact) {
  SplitMix64 rng(10);
  for (Variant v : kAllVariants) {
    RefineNet net(tiny_spec(v), 5);
    for (const auto& [name, t] : net.params().entries()) {
      Tensor h = t;
      for (double& x : h.data()) x = rng.normal();
    }
    BlobArchive ar;
    write_model_entries(net, ar);
    const auto bytes = ar.serialize();
    const BlobArchive back = BlobArchive::deserialize(bytes);
    EXPECT_EQ(back.serialize(), bytes);
    const auto loaded = load_model(back);
    ASSERT_EQ(loaded->params().size(), net.params().size());
    for (std::size_t i = 0; i < net.params().size(); ++i) {
      EXPECT_TRUE(bitwise_equal(loaded->params().entries()[i].second,
                                net.params().entries()[i].second));
    }
    const Tensor img = random_tensor({1, 3, 32, 32}, rng);
    Tape tape(Tape::Mode::kInference);
    EXPECT_TRUE(bitwise_equal(loaded->forward(tape, img), net.forward(tape, img)));
  }
}

TEST(Checkpoint, FileRoundTrip) {
  RefineNet net(tiny_spec(Variant::kTwoCascaded), 5);
  BlobArchive ar;
  write_model_entries(net, ar);
  const std::string path = ::testing::TempDir() + "/ckpt_roundtrip.rntb";
  ar.save(path);
  EXPECT_EQ(BlobArchive::load(path).serialize(), ar.serialize());
  std::remove(path.c_str());
}

TEST(Checkpoint, DifferentArchitectureIsRejected) {
  RefineNet four(tiny_spec(Variant::kFourCascaded), 1);
  RefineNet single(tiny_spec(Variant::kSingle), 1);
  BlobArchive ar;
  write_model_entries(four, ar);
  try {
    read_model_entries(single, ar);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("variant = cascade4"), std::string::npos) << e.what();
  }
}

TEST(Checkpoint, MissingExtraAndMisshapenEntriesAreAllListed) {
  RefineNet net(tiny_spec(Variant::kSingle), 1);
  BlobArchive full;
  write_model_entries(net, full);
  BlobArchive tampered;
  const std::string dropped = "param.head.classifier.bias";
  const std::string reshaped = "param.refine1.crp.conv1.weight";
  for (const auto& [name, blob] : full.entries()) {
    if (name == dropped) continue;
    if (name == reshaped) {
      tampered.put(name, Blob::from_tensor(Tensor(Shape{1, 1, 3, 3})));
      continue;
    }
    tampered.put(name, blob);
  }
  tampered.put("param.refine9.weight", Blob::from_tensor(Tensor(Shape{1, 1, 1, 1})));
  RefineNet target(tiny_spec(Variant::kSingle), 2);
  const Tensor before = target.params().entries()[0].second.clone();
  try {
    read_model_entries(target, tampered);
    FAIL();
  } catch (const ValidationError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("missing " + dropped), std::string::npos) << msg;
    EXPECT_NE(msg.find("shape of " + reshaped), std::string::npos) << msg;
    EXPECT_NE(msg.find("unexpected param.refine9.weight"), std::string::npos) << msg;
  }
  EXPECT_TRUE(bitwise_equal(target.params().entries()[0].second, before));
}

TEST(Checkpoint, PixelLinearModel) {
  PixelLinearClassifier lin(3, 4, 9);
  BlobArchive ar;
  write_model_entries(lin, ar);
  const auto loaded = load_model(ar);
  EXPECT_EQ(loaded->num_classes(), 4);
  EXPECT_EQ(loaded->params().total_count(), 3u * 4 + 4);
  EXPECT_TRUE(bitwise_equal(loaded->params().entries()[0].second, lin.params().entries()[0].second));
}

// ----------------------------------------------------------------- padding

TEST(PadToMultiple, ReflectsBottomAndRight) {
  Tensor x(Shape{1, 1, 2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
  Tape tape(Tape::Mode::kInference);
  const Tensor y = pad_to_multiple(tape, x, 4);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 4, 4}));
  EXPECT_EQ(y.at(0, 0, 0, 3), 2.0);
  EXPECT_EQ(y.at(0, 0, 2, 0), 1.0);
  EXPECT_EQ(y.at(0, 0, 3, 3), 5.0);
  EXPECT_EQ(pad_to_multiple(tape, y, 4).id(), y.id());
}

}  // namespace
}  // namespace refinery
