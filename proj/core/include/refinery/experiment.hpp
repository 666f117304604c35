#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "refinery/config.hpp"
#include "refinery/dataio.hpp"
#include "refinery/trainer.hpp"

namespace refinery {

// One trained-and-evaluated configuration.
struct CellResult {
  std::string model;  // variant name or "pixel_linear"
  bool use_crp = true;
  std::uint64_t seed = 0;
  double miou = 0.0;        // single-scale validation mean IoU
  double miou_msc = 0.0;    // multi-scale validation mean IoU (0 if not requested)
  double first_loss = 0.0;  // mean loss of the first logged window
  double last_loss = 0.0;   // mean loss of the last logged window
  double seconds = 0.0;
};

// Trains `model_section` from scratch with `train.seed` as both the
// initialisation and the sampling seed, then evaluates on `val`.
CellResult run_cell(const ConfigSection& model_section, const TrainConfig& train,
                    const Dataset& train_data, const Dataset& val_data,
                    const std::vector<double>& msc_scales);

struct AblationPlan {
  ConfigSection base_model;  // [model] section; variant and use_crp are overridden per cell
  TrainConfig train;         // seed is overridden per cell
  std::vector<std::string> variants{"single", "cascade2", "cascade4"};
  std::vector<bool> crp{true, false};
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::vector<double> msc_scales{0.8, 1.0, 1.2};
};

// Runs every (variant, crp, seed) cell, up to `threads` at a time. The result
// order follows the plan's nesting (variant, crp, seed) regardless of
// scheduling.
std::vector<CellResult> run_ablation(const AblationPlan& plan, const Dataset& train_data,
                                     const Dataset& val_data, int threads);

struct AblationRow {
  std::string variant;
  bool use_crp = true;
  double miou = 0.0;
  double miou_msc = 0.0;
  int seeds = 0;
};

// Seed-averaged rows in plan order.
std::vector<AblationRow> summarize_ablation(const std::vector<CellResult>& cells);

std::string format_ablation_table(const std::vector<AblationRow>& rows);
std::string format_ablation_csv(const std::vector<CellResult>& cells);

// Worker count from REFINERY_THREADS, else the hardware concurrency.
int default_thread_count();

}  // namespace refinery
