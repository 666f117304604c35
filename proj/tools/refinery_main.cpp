// refinery: command-line front end for data generation, training,
// evaluation, prediction, gradient checks and the variant ablation.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "refinery/blob.hpp"
#include "refinery/cascade.hpp"
#include "refinery/config.hpp"
#include "refinery/dataio.hpp"
#include "refinery/error.hpp"
#include "refinery/evaluator.hpp"
#include "refinery/experiment.hpp"
#include "refinery/gradsuite.hpp"
#include "refinery/trainer.hpp"

namespace fs = std::filesystem;
using namespace refinery;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;

std::string resolve(const std::string& path, const fs::path& base) {
  if (path.empty() || fs::path(path).is_absolute()) return path;
  return (base / path).lexically_normal().string();
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out << text;
  if (!out) throw IoError("write failed: " + path);
}

std::vector<double> parse_scales(const std::string& text) {
  ConfigSection s;
  s.set("scales", text);
  SectionReader r(s, "eval");
  auto v = r.get_doubles("scales", {});
  if (v.empty()) throw ValidationError("--scales needs at least one value");
  return v;
}

// ---- gen-data -------------------------------------------------------------

struct GenDataArgs {
  std::string out;
  int samples = 0;
  std::vector<int> size{64, 64};
  int classes = 4;
  std::uint64_t seed = 1;
};

int cmd_gen_data(const GenDataArgs& a) {
  if (a.samples < 0) throw ValidationError("--samples must be >= 0");
  const Dataset ds = gen_synthetic(a.samples, a.size[0], a.size[1], a.classes, a.seed);
  write_dataset(ds, a.out);
  std::cout << "wrote " << a.samples << " samples to " << a.out << "\n";
  return kExitOk;
}

// ---- train ----------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::string variant;
  std::string resume;
  std::vector<std::string> overrides;
};

struct DataSection {
  std::string train;
  std::string val;
};

DataSection read_data_section(const ConfigSection& s, const fs::path& base) {
  SectionReader r(s, "data");
  DataSection d;
  d.train = resolve(r.get_string("train", ""), base);
  d.val = resolve(r.get_string("val", ""), base);
  r.finish();
  if (d.train.empty()) throw ValidationError("[data] train manifest is required");
  return d;
}

struct EvalSection {
  std::vector<double> scales{1.0};
  std::string csv;
};

EvalSection read_eval_section(const ConfigSection& s, const fs::path& base) {
  SectionReader r(s, "eval");
  EvalSection e;
  e.scales = r.get_doubles("scales", e.scales);
  e.csv = resolve(r.get_string("csv", ""), base);
  r.finish();
  if (e.scales.empty()) throw ValidationError("[eval] scales needs at least one value");
  return e;
}

void reject_unknown_sections(const RunConfig& cfg) {
  for (const auto& name : cfg.section_names()) {
    if (name != "model" && name != "train" && name != "data" && name != "eval") {
      throw ValidationError("unknown config section [" + name + "]");
    }
  }
}

int cmd_train(const TrainArgs& a) {
  RunConfig cfg = RunConfig::load(a.config);
  for (const auto& o : a.overrides) cfg.apply_override(o);
  if (!a.variant.empty()) {
    parse_variant(a.variant);
    cfg.set("model", "variant", a.variant);
  }
  reject_unknown_sections(cfg);
  const fs::path base = fs::path(a.config).parent_path();

  TrainConfig train = TrainConfig::read(cfg.section("train"));
  train.checkpoint_path = resolve(train.checkpoint_path, base);
  train.log_path = resolve(train.log_path, base);
  train.validate();
  const DataSection data = read_data_section(cfg.section("data"), base);
  const EvalSection eval = read_eval_section(cfg.section("eval"), base);
  auto model = build_model(cfg.section("model"), train.seed);

  // Echo every effective value, defaults included.
  RunConfig echo;
  echo.mutable_section("model") = model->describe();
  train.write(echo.mutable_section("train"));
  echo.set("data", "train", data.train);
  if (!data.val.empty()) echo.set("data", "val", data.val);
  echo.set("eval", "scales", join_doubles(eval.scales));
  if (!eval.csv.empty()) echo.set("eval", "csv", eval.csv);
  std::cout << "# effective configuration\n" << echo.to_text() << std::flush;

  const Dataset train_data = read_dataset(data.train, model->num_classes());
  std::cout << "# " << train_data.samples.size() << " training samples, "
            << model->params().total_count() << " parameters\n";
  for (const auto& [group, n] : count_params(*model)) {
    std::cout << "#   " << group << ": " << n << "\n";
  }

  Trainer trainer(*model, train_data, train);
  if (!a.resume.empty()) {
    trainer.resume(BlobArchive::load(a.resume));
    std::cout << "# resumed at iteration " << trainer.iteration() << "\n";
  }
  const auto t0 = std::chrono::steady_clock::now();
  const int report_every = std::max(1, train.iterations / 20);
  while (trainer.iteration() < train.iterations) {
    const TrainResult r = trainer.run(report_every);
    if (r.log.empty()) break;
    double mean = 0.0;
    for (const auto& row : r.log) mean += row.loss;
    mean /= static_cast<double>(r.log.size());
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cout << "iter " << r.log.back().iteration << "/" << train.iterations << "  loss "
              << mean << "  lr " << r.log.back().lr << "  " << secs << "s\n"
              << std::flush;
  }
  if (train.iterations == 0 && !train.checkpoint_path.empty()) {
    trainer.save_checkpoint(train.checkpoint_path);
  }

  if (!data.val.empty()) {
    const Dataset val = read_dataset(data.val, model->num_classes());
    const EvalReport rep = report(evaluate(*model, val, eval.scales));
    std::cout << format_report_table(rep);
    if (!eval.csv.empty()) write_text(eval.csv, format_report_csv(rep));
  }
  return kExitOk;
}

// ---- eval / predict -------------------------------------------------------

struct EvalArgs {
  std::string ckpt;
  std::string data;
  std::string scales = "1.0";
  std::string csv;
};

int cmd_eval(const EvalArgs& a) {
  const std::vector<double> scales = parse_scales(a.scales);
  auto model = load_model(BlobArchive::load(a.ckpt));
  const Dataset data = read_dataset(a.data, model->num_classes());
  const EvalReport rep = report(evaluate(*model, data, scales));
  std::cout << format_report_table(rep);
  const std::string csv = format_report_csv(rep);
  if (a.csv.empty()) {
    std::cout << "\n" << csv;
  } else {
    write_text(a.csv, csv);
  }
  return kExitOk;
}

struct PredictArgs {
  std::string ckpt;
  std::string image;
  std::string out;
  std::string probs;
  std::string scales = "1.0";
};

int cmd_predict(const PredictArgs& a) {
  const std::vector<double> scales = parse_scales(a.scales);
  auto model = load_model(BlobArchive::load(a.ckpt));
  const Tensor image = from_rgb(decode_ppm(read_file_bytes(a.image)));
  const Tensor probs = multiscale_probs(*model, image, scales);
  const auto mask = encode_pgm(to_gray(argmax_labels(probs)));
  write_file_bytes(a.out, mask);
  if (!a.probs.empty()) write_file_bytes(a.probs, encode_blob(Blob::from_tensor(probs)));
  std::cout << "wrote " << a.out << " (" << image.shape().h << "x" << image.shape().w << ")\n";
  return kExitOk;
}

// ---- gradcheck ------------------------------------------------------------

struct GradcheckArgs {
  std::string scope;  // empty: all scopes
  std::uint64_t seed = 7;
};

int cmd_gradcheck(const GradcheckArgs& a) {
  std::vector<GradScope> scopes;
  if (a.scope.empty()) {
    scopes = {GradScope::kOp, GradScope::kBlock, GradScope::kModel};
  } else {
    scopes = {parse_grad_scope(a.scope)};
  }
  bool ok = true;
  std::printf("%-6s %-32s %12s %9s %8s %6s  %s\n", "scope", "target", "max_rel_err", "tol",
              "checked", "kinks", "result");
  for (GradScope s : scopes) {
    for (const auto& r : run_grad_suite(s, a.seed)) {
      ok = ok && r.report.passed;
      std::printf("%-6s %-32s %12.3e %9.1e %8zu %6zu  %s\n", grad_scope_name(s).c_str(),
                  r.target.c_str(), r.report.max_rel_err, r.tol, r.report.checked,
                  r.report.nonsmooth, r.report.passed ? "PASS" : "FAIL");
      if (!r.report.passed) {
        std::printf("         worst: %s\n", r.report.worst.c_str());
        if (!r.report.failure.empty()) std::printf("         %s\n", r.report.failure.c_str());
      }
      std::fflush(stdout);
    }
  }
  return ok ? kExitOk : kExitValidation;
}

// ---- ablate ---------------------------------------------------------------

struct AblateArgs {
  std::string data;
  int seeds = 3;
  std::string config;
  std::vector<std::string> overrides;
  std::string csv;
  int threads = 0;
};

int cmd_ablate(const AblateArgs& a) {
  if (a.seeds < 1) throw ValidationError("--seeds must be >= 1");
  RunConfig cfg;
  if (!a.config.empty()) cfg = RunConfig::load(a.config);
  for (const auto& o : a.overrides) cfg.apply_override(o);
  reject_unknown_sections(cfg);

  AblationPlan plan;
  plan.base_model = cfg.section("model");
  plan.train = TrainConfig::read(cfg.section("train"));
  plan.train.validate();
  const EvalSection eval = read_eval_section(cfg.section("eval"), ".");
  if (cfg.section("eval").has("scales")) plan.msc_scales = eval.scales;
  plan.seeds.clear();
  for (int s = 1; s <= a.seeds; ++s) plan.seeds.push_back(static_cast<std::uint64_t>(s));

  // Only needed for the class count; the variant is set per cell.
  ConfigSection probe = plan.base_model;
  const int k = build_model(probe, 0)->num_classes();
  const fs::path dir(a.data);
  const Dataset train = read_dataset((dir / "train" / "manifest.tsv").string(), k);
  const Dataset val = read_dataset((dir / "val" / "manifest.tsv").string(), k);

  RunConfig echo;
  echo.mutable_section("model") = plan.base_model;
  plan.train.write(echo.mutable_section("train"));
  echo.set("eval", "scales", join_doubles(plan.msc_scales));
  std::cout << "# effective configuration\n" << echo.to_text() << std::flush;

  const int threads = a.threads > 0 ? a.threads : default_thread_count();
  const auto cells = run_ablation(plan, train, val, threads);
  std::cout << format_ablation_table(summarize_ablation(cells));
  const std::string csv = format_ablation_csv(cells);
  if (a.csv.empty()) {
    std::cout << "\n" << csv;
  } else {
    write_text(a.csv, csv);
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"refinery: multi-path refinement networks for semantic segmentation"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* c_gen = app.add_subcommand("gen-data", "Write a synthetic shapes dataset (PPM/PGM + manifest)");
  c_gen->add_option("--out", gen.out, "Output directory")->required();
  c_gen->add_option("--samples", gen.samples, "Number of samples")->required();
  c_gen->add_option("--size", gen.size, "Height and width")->expected(2)->capture_default_str();
  c_gen->add_option("--classes", gen.classes, "Number of classes incl. background")
      ->capture_default_str();
  c_gen->add_option("--seed", gen.seed, "Generator seed")->capture_default_str();

  TrainArgs train;
  auto* c_train = app.add_subcommand("train", "Train a model from a config file");
  c_train->add_option("--config", train.config, "Config file")->required()->check(CLI::ExistingFile);
  c_train->add_option("--variant", train.variant, "single, cascade2, cascade4 or cascade4-2scale");
  c_train->add_option("--resume", train.resume, "Checkpoint to resume from");
  c_train->add_option("--set", train.overrides, "Override: section.key=value (repeatable)");

  EvalArgs ev;
  auto* c_eval = app.add_subcommand("eval", "Evaluate a checkpoint on a manifest");
  c_eval->add_option("--ckpt", ev.ckpt, "Checkpoint")->required();
  c_eval->add_option("--data", ev.data, "Manifest file")->required();
  c_eval->add_option("--scales", ev.scales, "Comma-separated test scales")->capture_default_str();
  c_eval->add_option("--csv", ev.csv, "Write the CSV report here instead of stdout");

  PredictArgs pr;
  auto* c_pred = app.add_subcommand("predict", "Predict a label mask for one PPM image");
  c_pred->add_option("--ckpt", pr.ckpt, "Checkpoint")->required();
  c_pred->add_option("--image", pr.image, "Input PPM")->required();
  c_pred->add_option("--out", pr.out, "Output PGM mask")->required();
  c_pred->add_option("--probs", pr.probs, "Also dump class probabilities (RNTB)");
  c_pred->add_option("--scales", pr.scales, "Comma-separated test scales")->capture_default_str();

  GradcheckArgs gc;
  auto* c_gc = app.add_subcommand("gradcheck", "Run finite-difference gradient suites");
  c_gc->add_option("--scope", gc.scope, "op, block or model (default: all)")
      ->check(CLI::IsMember({"op", "block", "model"}));
  c_gc->add_option("--seed", gc.seed, "Suite seed")->capture_default_str();

  AblateArgs ab;
  auto* c_ab = app.add_subcommand("ablate", "Train the variant x CRP grid and tabulate mean IoU");
  c_ab->add_option("--data", ab.data, "Directory holding train/ and val/ datasets")->required();
  c_ab->add_option("--seeds", ab.seeds, "Seeds per cell")->capture_default_str();
  c_ab->add_option("--config", ab.config, "Base config ([model], [train], [eval])")
      ->check(CLI::ExistingFile);
  c_ab->add_option("--set", ab.overrides, "Override: section.key=value (repeatable)");
  c_ab->add_option("--csv", ab.csv, "Write per-cell CSV here instead of stdout");
  c_ab->add_option("--threads", ab.threads, "Parallel cells (default: REFINERY_THREADS or cores)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitValidation;
  }

  try {
    if (c_gen->parsed()) return cmd_gen_data(gen);
    if (c_train->parsed()) return cmd_train(train);
    if (c_eval->parsed()) return cmd_eval(ev);
    if (c_pred->parsed()) return cmd_predict(pr);
    if (c_gc->parsed()) return cmd_gradcheck(gc);
    if (c_ab->parsed()) return cmd_ablate(ab);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitValidation;
}
