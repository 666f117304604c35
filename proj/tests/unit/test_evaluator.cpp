#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "refinery/error.hpp"
#include "refinery/evaluator.hpp"
#include "test_util.hpp"

namespace refinery {
namespace {

LabelMap labels_of(int h, int w, std::initializer_list<int> values) {
  LabelMap m(1, h, w);
  std::size_t i = 0;
  for (int v : values) m.labels[i++] = static_cast<std::uint8_t>(v);
  return m;
}

LabelMap random_mask(int h, int w, int k, double ignore_rate, SplitMix64& rng) {
  LabelMap m(1, h, w);
  for (auto& l : m.labels) {
    l = rng.uniform() < ignore_rate ? kIgnoreLabel : static_cast<std::uint8_t>(rng.range(0, k - 1));
  }
  return m;
}

// ------------------------------------------------------------ confusion

// Truth          Prediction      Errors
//  0 0 1 1        0 1 1 1         (0,1): truth 0, predicted 1
//  0 0 1 1        0 0 0 1         (1,2): truth 1, predicted 0
//  0 0 1 1        0 0 1 1         (3,3): truth 0, predicted 1
//  0 0 0 0        0 0 0 1
// Truth has ten 0s and six 1s, so M = [[8, 2], [1, 5]].
TEST(Confusion, HandTalliedFourByFour) {
  const LabelMap truth = labels_of(4, 4, {0, 0, 1, 1, 0, 0, 1, 1, 0, 0, 1, 1, 0, 0, 0, 0});
  const LabelMap pred = labels_of(4, 4, {0, 1, 1, 1, 0, 0, 0, 1, 0, 0, 1, 1, 0, 0, 0, 1});
  ConfusionMatrix cm(2);
  cm.accumulate(pred, truth);
  EXPECT_EQ(cm.at(0, 0), 8u);
  EXPECT_EQ(cm.at(0, 1), 2u);
  EXPECT_EQ(cm.at(1, 0), 1u);
  EXPECT_EQ(cm.at(1, 1), 5u);
  EXPECT_EQ(cm.total(), 16u);

  const EvalReport r = report(cm);
  EXPECT_EQ(*r.iou[0], 8.0 / 11.0);
  EXPECT_EQ(*r.iou[1], 5.0 / 8.0);
  EXPECT_EQ(r.pixel_acc, 13.0 / 16.0);
  EXPECT_EQ(r.mean_acc, (8.0 / 10.0 + 5.0 / 6.0) / 2.0);
}

TEST(Confusion, PerfectPredictionIsDiagonal) {
  SplitMix64 rng(1);
  const LabelMap truth = random_mask(9, 7, 5, 0.1, rng);
  LabelMap pred = truth;
  for (auto& l : pred.labels) {
    if (l == kIgnoreLabel) l = 3;
  }
  ConfusionMatrix cm(5);
  cm.accumulate(pred, truth);
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 5; ++j)
      if (i != j) EXPECT_EQ(cm.at(i, j), 0u);
  const EvalReport r = report(cm);
  EXPECT_EQ(r.mean_iou, 1.0);
  EXPECT_EQ(r.pixel_acc, 1.0);
  EXPECT_EQ(r.mean_acc, 1.0);
}

TEST(Confusion, IgnoredPixelsAreSkipped) {
  const LabelMap truth = labels_of(1, 4, {255, 1, 255, 0});
  const LabelMap pred = labels_of(1, 4, {1, 1, 0, 1});
  ConfusionMatrix cm(2);
  cm.accumulate(pred, truth);
  EXPECT_EQ(cm.total(), 2u);
  EXPECT_EQ(cm.at(1, 1), 1u);
  EXPECT_EQ(cm.at(0, 1), 1u);
}

TEST(Confusion, AllIgnoredTruthLeavesMatrixUnchanged) {
  SplitMix64 rng(2);
  ConfusionMatrix cm(3);
  cm.accumulate(random_mask(4, 4, 3, 0.0, rng), random_mask(4, 4, 3, 0.0, rng));
  const ConfusionMatrix before = cm;
  cm.accumulate(random_mask(5, 6, 3, 0.0, rng), LabelMap(1, 5, 6, kIgnoreLabel));
  EXPECT_EQ(cm, before);
}

TEST(Confusion, ShapeAndLabelViolationsThrowWithoutCounting) {
  ConfusionMatrix cm(3);
  EXPECT_THROW(cm.accumulate(LabelMap(1, 2, 2), LabelMap(1, 2, 3)), ShapeError);
  const LabelMap truth = labels_of(1, 3, {0, 1, 3});
  try {
    cm.accumulate(LabelMap(1, 1, 3), truth);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("3"), std::string::npos);
  }
  EXPECT_THROW(cm.accumulate(labels_of(1, 3, {0, 7, 0}), labels_of(1, 3, {0, 1, 2})),
               ValidationError);
  EXPECT_EQ(cm.total(), 0u);
  EXPECT_THROW(ConfusionMatrix(0), ValidationError);
  EXPECT_THROW(cm.merge(ConfusionMatrix(2)), ShapeError);
}

// ---------------------------------------------------------------- report

TEST(Report, HandExampleThreeOneTwoTwo) {
  const ConfusionMatrix cm = ConfusionMatrix::from_counts(2, {3, 1, 2, 2});
  const EvalReport r = report(cm);
  ASSERT_FALSE(r.empty);
  EXPECT_EQ(*r.iou[0], 3.0 / 6.0);
  EXPECT_EQ(*r.iou[1], 2.0 / 5.0);
  EXPECT_EQ(r.mean_iou, (3.0 / 6.0 + 2.0 / 5.0) / 2.0);
  EXPECT_EQ(r.pixel_acc, 5.0 / 8.0);
  EXPECT_EQ(r.mean_acc, (3.0 / 4.0 + 2.0 / 4.0) / 2.0);
  EXPECT_TRUE(r.excluded.empty());
}

TEST(Report, DisjointPredictionGivesZeroIou) {
  const ConfusionMatrix cm = ConfusionMatrix::from_counts(3, {4, 0, 0, 0, 0, 3, 0, 0, 2});
  const EvalReport r = report(cm);
  EXPECT_EQ(*r.iou[1], 0.0);
  EXPECT_EQ(*r.acc[1], 0.0);
  EXPECT_EQ(*r.iou[0], 1.0);
}

TEST(Report, EmptyTruthRowsAreExcludedAndListed) {
  const ConfusionMatrix cm = ConfusionMatrix::from_counts(3, {2, 0, 1, 0, 0, 0, 0, 0, 3});
  const EvalReport r = report(cm);
  EXPECT_EQ(r.excluded, (std::vector<int>{1}));
  EXPECT_FALSE(r.acc[1].has_value());
  EXPECT_FALSE(r.iou[1].has_value());
  EXPECT_EQ(r.mean_iou, (2.0 / 3.0 + 3.0 / 4.0) / 2.0);
  EXPECT_EQ(r.mean_acc, (2.0 / 3.0 + 1.0) / 2.0);

  // Predicted but never true: IoU is defined (zero) yet the class stays out of the means.
  const EvalReport q = report(ConfusionMatrix::from_counts(2, {1, 1, 0, 0}));
  EXPECT_EQ(q.excluded, (std::vector<int>{1}));
  EXPECT_EQ(*q.iou[1], 0.0);
  EXPECT_EQ(q.mean_iou, 0.5);
}

TEST(Report, ZeroScoredPixelsGiveEmptyReport) {
  const EvalReport r = report(ConfusionMatrix(4));
  EXPECT_TRUE(r.empty);
  EXPECT_EQ(r.excluded.size(), 4u);
  EXPECT_NE(format_report_table(r).find("empty report"), std::string::npos);
  EXPECT_NE(format_report_csv(r).find("empty,1"), std::string::npos);
}

TEST(Report, MetricsStayInUnitInterval) {
  SplitMix64 rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const int k = rng.range(1, 6);
    ConfusionMatrix cm(k);
    cm.accumulate(random_mask(6, 6, k, 0.0, rng), random_mask(6, 6, k, 0.2, rng));
    const EvalReport r = report(cm);
    for (double v : {r.mean_iou, r.pixel_acc, r.mean_acc}) {
      ASSERT_GE(v, 0.0);
      ASSERT_LE(v, 1.0);
    }
    for (const auto& v : r.iou) {
      if (v) ASSERT_TRUE(*v >= 0.0 && *v <= 1.0);
    }
  }
}

TEST(Report, CsvLayout) {
  const EvalReport r = report(ConfusionMatrix::from_counts(2, {3, 1, 2, 2}));
  EXPECT_EQ(format_report_csv(r),
            "class,iou,acc\n0,0.500000,0.750000\n1,0.400000,0.500000\n"
            "mean_iou,0.450000\npixel_acc,0.625000\nmean_acc,0.625000\n");
  const std::string table = format_report_table(r);
  EXPECT_NE(table.find("mean IoU       0.450000"), std::string::npos) << table;
}

// ------------------------------------------------------------- invariance

TEST(Invariance, ClassRelabelingPermutesPerClassMetrics) {
  SplitMix64 rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const int k = rng.range(2, 6);
    const LabelMap truth = random_mask(8, 8, k, 0.1, rng);
    LabelMap pred = truth;
    for (auto& l : pred.labels) {
      if (l == kIgnoreLabel || rng.uniform() < 0.4) l = static_cast<std::uint8_t>(rng.range(0, k - 1));
    }
    std::vector<int> perm(k);
    std::iota(perm.begin(), perm.end(), 0);
    for (int i = k - 1; i > 0; --i) std::swap(perm[i], perm[rng.range(0, i)]);
    auto apply = [&](LabelMap m) {
      for (auto& l : m.labels) {
        if (l != kIgnoreLabel) l = static_cast<std::uint8_t>(perm[l]);
      }
      return m;
    };
    ConfusionMatrix a(k), b(k);
    a.accumulate(pred, truth);
    b.accumulate(apply(pred), apply(truth));
    const EvalReport ra = report(a), rb = report(b);
    for (int c = 0; c < k; ++c) {
      EXPECT_EQ(ra.iou[c], rb.iou[perm[c]]);
      EXPECT_EQ(ra.acc[c], rb.acc[perm[c]]);
    }
    EXPECT_DOUBLE_EQ(ra.mean_iou, rb.mean_iou);
    EXPECT_DOUBLE_EQ(ra.mean_acc, rb.mean_acc);
    EXPECT_EQ(ra.pixel_acc, rb.pixel_acc);
  }
}

TEST(Invariance, AccumulationOrderDoesNotMatter) {
  SplitMix64 rng(5);
  const int k = 4;
  std::vector<std::pair<LabelMap, LabelMap>> items;
  for (int i = 0; i < 30; ++i) {
    const int h = rng.range(1, 10), w = rng.range(1, 10);
    items.emplace_back(random_mask(h, w, k, 0.0, rng), random_mask(h, w, k, 0.15, rng));
  }
  ConfusionMatrix forward(k);
  for (const auto& [p, t] : items) forward.accumulate(p, t);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::size_t> order(items.size());
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = order.size() - 1; i > 0; --i) {
      std::swap(order[i], order[rng.range(0, static_cast<int>(i))]);
    }
    // Split into two partial matrices merged at the end.
    ConfusionMatrix left(k), right(k);
    for (std::size_t i = 0; i < order.size(); ++i) {
      (i % 2 ? left : right).accumulate(items[order[i]].first, items[order[i]].second);
    }
    right.merge(left);
    EXPECT_EQ(right, forward);
  }
}

// ------------------------------------------------------------ prediction

TEST(Argmax, LowestIndexWinsTies) {
  Tensor p(Shape{1, 3, 1, 3}, std::vector<double>{0.5, 0.2, 0.3, 0.5, 0.4, 0.3, 0.0, 0.4, 0.3});
  const LabelMap m = argmax_labels(p);
  EXPECT_EQ(m.labels, (std::vector<std::uint8_t>{0, 1, 0}));
}

// Returns fixed logits whose choice depends on the input height, repeated in
// blocks so any bilinear resize back to 2x2 reads them unchanged.
class TwoMapModel : public SegmentationModel {
 public:
  TwoMapModel(std::vector<double> p0_small, std::vector<double> p0_large)
      : small_(std::move(p0_small)), large_(std::move(p0_large)) {}
  int num_classes() const override { return 2; }
  Tensor forward(Tape&, const Tensor& image) const override {
    const Shape s = image.shape();
    const auto& p0 = s.h == 2 ? small_ : large_;
    const int block = s.h / 2;
    Tensor out(Shape{1, 2, s.h, s.w});
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x) {
        const double a = p0[(y / block) * 2 + x / block];
        out.at(0, 0, y, x) = std::log(a);
        out.at(0, 1, y, x) = std::log(1.0 - a);
      }
    return out;
  }
  ParamRegistry& params() override { return reg_; }
  const ParamRegistry& params() const override { return reg_; }
  ConfigSection describe() const override { return {}; }

 private:
  std::vector<double> small_, large_;
  ParamRegistry reg_;
};

// p (scale 1) and q (scale 2) for class 0 on a 2x2 image:
//   p = [0.9 0.2; 0.6 0.5], q = [0.4 0.1; 0.3 0.5]
//   (p + q) / 2 = [0.65 0.15; 0.45 0.5] -> labels [0 1; 1 0] (tie -> 0)
TEST(Multiscale, AveragesTwoKnownProbabilityMaps) {
  TwoMapModel model({0.9, 0.2, 0.6, 0.5}, {0.4, 0.1, 0.3, 0.5});
  const Tensor image(Shape{1, 3, 2, 2}, 0.5);
  const Tensor avg = multiscale_probs(model, image, {1.0, 2.0});
  const double expected[] = {0.65, 0.15, 0.45, 0.5};
  for (int i = 0; i < 4; ++i) {
    EXPECT_NEAR(avg.at(0, 0, i / 2, i % 2), expected[i], 1e-12);
    EXPECT_NEAR(avg.at(0, 1, i / 2, i % 2), 1.0 - expected[i], 1e-12);
  }
  const LabelMap m = multiscale_predict(model, image, {1.0, 2.0});
  EXPECT_EQ(m.labels, (std::vector<std::uint8_t>{0, 1, 1, 0}));
}

RefineNet small_net(std::uint64_t seed) {
  BackboneSpec b;
  b.stem_channels = 4;
  b.blocks = {{{4, 1, 1}, {6, 1, 2}, {6, 1, 2}, {8, 1, 2}}};
  return RefineNet(CascadeSpec::make(Variant::kFourCascaded, 4, b, 4, true), seed);
}

TEST(Multiscale, SingleUnitScaleEqualsPlainPrediction) {
  RefineNet net = small_net(3);
  for (const auto& [name, t] : net.params().entries()) {
    Tensor h = t;
    SplitMix64 rng(name.size());
    for (double& v : h.data()) v += 0.2 * rng.normal();
  }
  const Dataset ds = gen_synthetic(3, 40, 48, 4, 1);
  for (const auto& s : ds.samples) {
    const Tensor plain = predict_probs(net, s.image);
    EXPECT_TRUE(testing::bitwise_equal(multiscale_probs(net, s.image, {1.0}), plain));
    EXPECT_EQ(multiscale_predict(net, s.image, {1.0}), argmax_labels(plain));
  }
}

TEST(Multiscale, AveragedProbabilitiesStayNormalised) {
  RefineNet net = small_net(4);
  const Dataset ds = gen_synthetic(2, 50, 37, 4, 2);
  for (const auto& s : ds.samples) {
    const Tensor p = multiscale_probs(net, s.image, {0.8, 1.0, 1.2});
    ASSERT_EQ(p.shape(), (Shape{1, 4, 50, 37}));
    for (int y = 0; y < 50; ++y)
      for (int x = 0; x < 37; ++x) {
        double sum = 0.0;
        for (int k = 0; k < 4; ++k) {
          ASSERT_GE(p.at(0, k, y, x), 0.0);
          sum += p.at(0, k, y, x);
        }
        ASSERT_NEAR(sum, 1.0, 1e-6);
      }
  }
}

TEST(Multiscale, InvalidScalesAreRejected) {
  RefineNet net = small_net(1);
  const Tensor img(Shape{1, 3, 32, 32}, 0.3);
  EXPECT_THROW(multiscale_probs(net, img, {}), ValidationError);
  EXPECT_THROW(multiscale_probs(net, img, {1.0, 0.0}), ValidationError);
  EXPECT_THROW(multiscale_probs(net, img, {-1.0}), ValidationError);
}

TEST(Evaluate, DatasetOrderGivesTheSameMatrix) {
  RefineNet net = small_net(5);
  Dataset ds = gen_synthetic(5, 32, 32, 4, 3);
  const ConfusionMatrix a = evaluate(net, ds, {1.0});
  std::reverse(ds.samples.begin(), ds.samples.end());
  EXPECT_EQ(evaluate(net, ds, {1.0}), a);
  std::uint64_t scored = 0;
  for (const auto& s : ds.samples) {
    scored += std::count_if(s.mask.labels.begin(), s.mask.labels.end(),
                            [](std::uint8_t l) { return l != kIgnoreLabel; });
  }
  EXPECT_EQ(a.total(), scored);
}

}  // namespace
}  // namespace refinery
