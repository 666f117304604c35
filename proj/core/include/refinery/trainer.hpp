#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "refinery/blob.hpp"
#include "refinery/cascade.hpp"
#include "refinery/config.hpp"
#include "refinery/dataio.hpp"

namespace refinery {

enum class LrSchedule { kConstant, kPoly };

struct TrainConfig {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double clip_norm = 0.0;  // global gradient L2 norm cap; 0 disables
  int batch_size = 8;
  int iterations = 1000;
  LrSchedule schedule = LrSchedule::kPoly;
  double poly_power = 0.9;
  int warmup = 0;  // steps of linear lr ramp from lr/warmup up to the schedule value
  std::uint64_t seed = 1;
  int checkpoint_period = 0;  // 0: only the final checkpoint
  std::string checkpoint_path;  // empty: no checkpoints
  std::string log_path;         // empty: no CSV log
  bool augment = true;
  AugmentSpec augment_spec{};
  bool audit_grad_flow = false;

  void validate() const;
  double lr_at(int iteration) const;

  void write(ConfigSection& section) const;
  static TrainConfig read(const ConfigSection& section);
};

struct LogRow {
  int iteration = 0;  // 1-based step index
  double loss = 0.0;
  double lr = 0.0;
};

struct TrainResult {
  std::vector<LogRow> log;
  // Per-module gradient norms of the first step, when auditing.
  std::vector<std::pair<std::string, double>> first_step_grad_norms;
  int iterations_done = 0;
};

// Pads every sample to the largest height/width in the batch (image zeros,
// mask ignore) and stacks them.
SegSample assemble_batch(const std::vector<SegSample>& samples);

// Per-module L2 gradient norms, grouped as count_params() groups them but one
// level finer ("backbone.stem", "backbone.block1", "refine3", ...).
std::vector<std::pair<std::string, double>> grad_norms_by_module(const ParamRegistry& params);

// SGD with momentum and L2 decay:
//   v <- momentum * v + g + weight_decay * w
//   w <- w - lr * v
// where g is first rescaled to norm clip_norm when its global norm exceeds it.
class Trainer {
 public:
  Trainer(SegmentationModel& model, const Dataset& data, TrainConfig config);

  // Restores parameters, momentum buffers and the sampling/augmentation
  // stream position. Rejects archives built for a different model.
  void resume(const BlobArchive& checkpoint);

  // Runs until config.iterations steps are done, or stop_after more steps.
  // Throws NumericError on a non-finite loss; the last written checkpoint
  // stays untouched.
  TrainResult run(std::optional<int> stop_after = std::nullopt);

  // Loss of one step; exposed for tests that drive the loop manually.
  double step();

  int iteration() const { return iteration_; }
  BlobArchive checkpoint() const;
  void save_checkpoint(const std::string& path) const;
  const std::vector<Tensor>& momentum() const { return velocity_; }

 private:
  std::vector<std::size_t> epoch_order(std::uint64_t epoch) const;
  SegSample next_batch();

  SegmentationModel& model_;
  const Dataset& data_;
  TrainConfig cfg_;
  std::vector<Tensor> velocity_;
  int iteration_ = 0;
  std::uint64_t cursor_ = 0;  // samples consumed so far
  SplitMix64 aug_rng_;
};

}  // namespace refinery
