#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "refinery/cascade.hpp"
#include "refinery/dataio.hpp"

namespace refinery {

// K x K pixel counts; row = ground truth, column = prediction.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes);

  int num_classes() const { return k_; }
  std::uint64_t at(int truth, int pred) const { return counts_[truth * k_ + pred]; }
  std::uint64_t total() const;

  // Adds every pixel whose truth is not the ignore label.
  void accumulate(const LabelMap& predicted, const LabelMap& truth,
                  std::uint8_t ignore_label = kIgnoreLabel);
  void merge(const ConfusionMatrix& other);

  static ConfusionMatrix from_counts(int num_classes, const std::vector<std::uint64_t>& counts);
  bool operator==(const ConfusionMatrix&) const = default;

 private:
  int k_;
  std::vector<std::uint64_t> counts_;
};

struct EvalReport {
  bool empty = true;  // no scored pixels: every metric below is meaningless
  std::vector<std::optional<double>> iou;  // nullopt for classes absent from truth and prediction
  std::vector<std::optional<double>> acc;  // nullopt for classes absent from truth
  std::vector<int> excluded;               // classes with an empty truth row
  double mean_iou = 0.0;
  double pixel_acc = 0.0;
  double mean_acc = 0.0;
};

// IoU_k = M[k,k] / (row_k + col_k - M[k,k]); pixel acc = trace / total;
// mean acc = mean of M[k,k] / row_k. Classes with an empty truth row are left
// out of both means.
EvalReport report(const ConfusionMatrix& cm);

std::string format_report_table(const EvalReport& r);
// `class,iou,acc` rows (empty field for undefined values) followed by
// `mean_iou,<v>`, `pixel_acc,<v>`, `mean_acc,<v>` summary lines.
std::string format_report_csv(const EvalReport& r);

// Per-pixel argmax over channels; the lowest class index wins ties.
LabelMap argmax_labels(const Tensor& probs);

// Softmax probabilities of one forward pass, at the image resolution.
Tensor predict_probs(const SegmentationModel& model, const Tensor& image);

// Averages class probabilities over resized copies of the image (bilinear
// down/up sampling, probabilities resized back to the original size), then
// takes the argmax. scales = {1.0} equals plain prediction.
Tensor multiscale_probs(const SegmentationModel& model, const Tensor& image,
                        const std::vector<double>& scales);
LabelMap multiscale_predict(const SegmentationModel& model, const Tensor& image,
                            const std::vector<double>& scales);

ConfusionMatrix evaluate(const SegmentationModel& model, const Dataset& data,
                         const std::vector<double>& scales);

}  // namespace refinery
