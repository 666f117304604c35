#include "refinery/evaluator.hpp"

#include <cstdio>
#include <sstream>

#include "refinery/error.hpp"
#include "refinery/ops.hpp"

namespace refinery {

ConfusionMatrix::ConfusionMatrix(int num_classes)
    : k_(num_classes), counts_(static_cast<std::size_t>(num_classes) * num_classes, 0) {
  if (num_classes < 1) throw ValidationError("confusion matrix needs at least one class");
}

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t t = 0;
  for (auto c : counts_) t += c;
  return t;
}

void ConfusionMatrix::accumulate(const LabelMap& predicted, const LabelMap& truth,
                                 std::uint8_t ignore_label) {
  if (predicted.n != truth.n || predicted.h != truth.h || predicted.w != truth.w) {
    throw ShapeError("accumulate: prediction and truth sizes differ");
  }
  // Validate first so a bad label leaves the matrix untouched.
  for (std::size_t i = 0; i < truth.labels.size(); ++i) {
    const auto t = truth.labels[i];
    if (t == ignore_label) continue;
    if (t >= k_ || predicted.labels[i] >= k_) {
      throw ValidationError("accumulate: label outside [0," + std::to_string(k_) +
                            ") at flat index " + std::to_string(i));
    }
  }
  for (std::size_t i = 0; i < truth.labels.size(); ++i) {
    const auto t = truth.labels[i];
    if (t == ignore_label) continue;
    ++counts_[static_cast<std::size_t>(t) * k_ + predicted.labels[i]];
  }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.k_ != k_) throw ShapeError("merge: class counts differ");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

ConfusionMatrix ConfusionMatrix::from_counts(int num_classes,
                                             const std::vector<std::uint64_t>& counts) {
  ConfusionMatrix cm(num_classes);
  if (counts.size() != cm.counts_.size()) throw ShapeError("from_counts: need K*K entries");
  cm.counts_ = counts;
  return cm;
}

EvalReport report(const ConfusionMatrix& cm) {
  const int k = cm.num_classes();
  EvalReport r;
  r.iou.assign(k, std::nullopt);
  r.acc.assign(k, std::nullopt);
  const std::uint64_t total = cm.total();
  r.empty = total == 0;
  std::uint64_t trace = 0;
  double iou_sum = 0.0, acc_sum = 0.0;
  int counted = 0;
  for (int c = 0; c < k; ++c) {
    std::uint64_t row = 0, col = 0;
    for (int j = 0; j < k; ++j) {
      row += cm.at(c, j);
      col += cm.at(j, c);
    }
    const std::uint64_t tp = cm.at(c, c);
    trace += tp;
    const std::uint64_t uni = row + col - tp;
    if (uni > 0) r.iou[c] = static_cast<double>(tp) / static_cast<double>(uni);
    if (row == 0) {
      r.excluded.push_back(c);
      continue;
    }
    r.acc[c] = static_cast<double>(tp) / static_cast<double>(row);
    iou_sum += *r.iou[c];
    acc_sum += *r.acc[c];
    ++counted;
  }
  if (!r.empty) {
    r.pixel_acc = static_cast<double>(trace) / static_cast<double>(total);
    r.mean_iou = iou_sum / counted;
    r.mean_acc = acc_sum / counted;
  }
  return r;
}

namespace {
std::string fmt(const std::optional<double>& v, const char* missing) {
  if (!v) return missing;
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6f", *v);
  return buf;
}
}  // namespace

std::string format_report_table(const EvalReport& r) {
  std::ostringstream os;
  if (r.empty) {
    os << "(empty report: no scored pixels)\n";
    return os.str();
  }
  char line[128];
  std::snprintf(line, sizeof(line), "%-8s %10s %10s\n", "class", "IoU", "acc");
  os << line;
  for (std::size_t c = 0; c < r.iou.size(); ++c) {
    std::snprintf(line, sizeof(line), "%-8zu %10s %10s\n", c, fmt(r.iou[c], "-").c_str(),
                  fmt(r.acc[c], "-").c_str());
    os << line;
  }
  std::snprintf(line, sizeof(line), "mean IoU       %.6f\npixel accuracy %.6f\nmean accuracy  %.6f\n",
                r.mean_iou, r.pixel_acc, r.mean_acc);
  os << line;
  if (!r.excluded.empty()) {
    os << "excluded (no ground truth):";
    for (int c : r.excluded) os << " " << c;
    os << "\n";
  }
  return os.str();
}

std::string format_report_csv(const EvalReport& r) {
  std::ostringstream os;
  os << "class,iou,acc\n";
  for (std::size_t c = 0; c < r.iou.size(); ++c) {
    os << c << "," << fmt(r.iou[c], "") << "," << fmt(r.acc[c], "") << "\n";
  }
  if (r.empty) {
    os << "empty,1\n";
  } else {
    os << "mean_iou," << fmt(r.mean_iou, "") << "\n";
    os << "pixel_acc," << fmt(r.pixel_acc, "") << "\n";
    os << "mean_acc," << fmt(r.mean_acc, "") << "\n";
  }
  return os.str();
}

LabelMap argmax_labels(const Tensor& probs) {
  const Shape s = probs.shape();
  if (s.c > 255) throw ShapeError("argmax_labels: too many classes");
  LabelMap out(s.n, s.h, s.w);
  for (int n = 0; n < s.n; ++n) {
    for (int y = 0; y < s.h; ++y) {
      for (int x = 0; x < s.w; ++x) {
        int best = 0;
        double best_v = probs.at(n, 0, y, x);
        for (int k = 1; k < s.c; ++k) {
          const double v = probs.at(n, k, y, x);
          if (v > best_v) {
            best_v = v;
            best = k;
          }
        }
        out.at(n, y, x) = static_cast<std::uint8_t>(best);
      }
    }
  }
  return out;
}

Tensor predict_probs(const SegmentationModel& model, const Tensor& image) {
  Tape tape(Tape::Mode::kInference);
  return ops::softmax_channels(model.forward(tape, image));
}

Tensor multiscale_probs(const SegmentationModel& model, const Tensor& image,
                        const std::vector<double>& scales) {
  if (scales.empty()) throw ValidationError("multiscale: no scales given");
  for (double s : scales) {
    if (!(s > 0.0)) throw ValidationError("multiscale: scales must be positive");
  }
  const Shape s = image.shape();
  Tape tape(Tape::Mode::kInference);
  Tensor acc;
  for (double f : scales) {
    const int h = scaled_extent(s.h, f);
    const int w = scaled_extent(s.w, f);
    const Tensor scaled = (h == s.h && w == s.w) ? image : ops::bilinear_resize(tape, image, h, w);
    Tensor p = ops::softmax_channels(model.forward(tape, scaled));
    if (h != s.h || w != s.w) p = ops::bilinear_resize(tape, p, s.h, s.w);
    if (!acc.defined()) {
      acc = p;
    } else {
      acc = ops::add(tape, acc, p);
    }
  }
  const double inv = 1.0 / static_cast<double>(scales.size());
  for (double& v : acc.data()) v *= inv;
  return acc;
}

LabelMap multiscale_predict(const SegmentationModel& model, const Tensor& image,
                            const std::vector<double>& scales) {
  return argmax_labels(multiscale_probs(model, image, scales));
}

ConfusionMatrix evaluate(const SegmentationModel& model, const Dataset& data,
                         const std::vector<double>& scales) {
  ConfusionMatrix cm(model.num_classes());
  for (const auto& s : data.samples) {
    cm.accumulate(multiscale_predict(model, s.image, scales), s.mask);
  }
  return cm;
}

}  // namespace refinery
