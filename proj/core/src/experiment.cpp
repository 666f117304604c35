#include "refinery/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <sstream>
#include <thread>

#include "refinery/cascade.hpp"
#include "refinery/error.hpp"
#include "refinery/evaluator.hpp"

namespace refinery {
namespace {

double window_mean(const std::vector<LogRow>& log, bool head) {
  if (log.empty()) return 0.0;
  const std::size_t n = std::max<std::size_t>(1, log.size() / 10);
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += log[head ? i : log.size() - n + i].loss;
  return s / static_cast<double>(n);
}

}  // namespace

CellResult run_cell(const ConfigSection& model_section, const TrainConfig& train,
                    const Dataset& train_data, const Dataset& val_data,
                    const std::vector<double>& msc_scales) {
  const auto t0 = std::chrono::steady_clock::now();
  auto model = build_model(model_section, train.seed);
  Trainer trainer(*model, train_data, train);
  const TrainResult tr = trainer.run();

  CellResult r;
  const std::string* kind = model_section.find("model");
  const std::string* variant = model_section.find("variant");
  r.model = kind && *kind == "pixel_linear" ? "pixel_linear" : (variant ? *variant : "cascade4");
  const std::string* crp = model_section.find("use_crp");
  r.use_crp = !crp || *crp == "true";
  r.seed = train.seed;
  r.first_loss = window_mean(tr.log, true);
  r.last_loss = window_mean(tr.log, false);
  r.miou = report(evaluate(*model, val_data, {1.0})).mean_iou;
  if (!msc_scales.empty()) r.miou_msc = report(evaluate(*model, val_data, msc_scales)).mean_iou;
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

std::vector<CellResult> run_ablation(const AblationPlan& plan, const Dataset& train_data,
                                     const Dataset& val_data, int threads) {
  struct Job {
    ConfigSection model;
    TrainConfig train;
  };
  std::vector<Job> jobs;
  for (const auto& v : plan.variants) {
    parse_variant(v);
    for (bool crp : plan.crp) {
      for (std::uint64_t seed : plan.seeds) {
        Job j{plan.base_model, plan.train};
        j.model.set("model", "refinenet");
        j.model.set("variant", v);
        j.model.set("use_crp", crp ? "true" : "false");
        j.train.seed = seed;
        j.train.checkpoint_path.clear();
        j.train.log_path.clear();
        jobs.push_back(std::move(j));
      }
    }
  }

  std::vector<CellResult> results(jobs.size());
  std::vector<std::exception_ptr> errors(jobs.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      try {
        results[i] = run_cell(jobs[i].model, jobs[i].train, train_data, val_data, plan.msc_scales);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const int n = std::clamp(threads, 1, static_cast<int>(std::max<std::size_t>(1, jobs.size())));
  if (n == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int i = 0; i < n; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return results;
}

std::vector<AblationRow> summarize_ablation(const std::vector<CellResult>& cells) {
  std::vector<AblationRow> rows;
  for (const auto& c : cells) {
    auto it = std::find_if(rows.begin(), rows.end(), [&](const AblationRow& r) {
      return r.variant == c.model && r.use_crp == c.use_crp;
    });
    if (it == rows.end()) {
      rows.push_back({c.model, c.use_crp, 0.0, 0.0, 0});
      it = rows.end() - 1;
    }
    it->miou += c.miou;
    it->miou_msc += c.miou_msc;
    ++it->seeds;
  }
  for (auto& r : rows) {
    r.miou /= r.seeds;
    r.miou_msc /= r.seeds;
  }
  return rows;
}

std::string format_ablation_table(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  char line[160];
  std::snprintf(line, sizeof(line), "%-16s %-8s %6s %12s %12s\n", "variant", "crp", "seeds",
                "mIoU", "mIoU(msc)");
  os << line;
  for (const auto& r : rows) {
    std::snprintf(line, sizeof(line), "%-16s %-8s %6d %12.4f %12.4f\n", r.variant.c_str(),
                  r.use_crp ? "on" : "off", r.seeds, r.miou, r.miou_msc);
    os << line;
  }
  return os.str();
}

std::string format_ablation_csv(const std::vector<CellResult>& cells) {
  std::ostringstream os;
  os << "variant,crp,seed,miou,miou_msc,first_loss,last_loss,seconds\n";
  char line[200];
  for (const auto& c : cells) {
    std::snprintf(line, sizeof(line), "%s,%s,%llu,%.6f,%.6f,%.6f,%.6f,%.1f\n", c.model.c_str(),
                  c.use_crp ? "on" : "off", static_cast<unsigned long long>(c.seed), c.miou,
                  c.miou_msc, c.first_loss, c.last_loss, c.seconds);
    os << line;
  }
  return os.str();
}

int default_thread_count() {
  if (const char* env = std::getenv("REFINERY_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v < 1) {
      throw ValidationError("REFINERY_THREADS must be a positive integer, got '" +
                            std::string(env) + "'");
    }
    return static_cast<int>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

}  // namespace refinery
