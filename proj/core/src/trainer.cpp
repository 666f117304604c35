#include "refinery/trainer.hpp"

#include <cmath>
#include <fstream>
#include <numeric>

#include "refinery/error.hpp"

namespace refinery {
namespace {

constexpr std::uint64_t kAugmentStream = 0xA0A0;

std::string module_of(const std::string& name) {
  std::string prefix;
  std::string rest = name;
  if (rest.rfind("scale", 0) == 0 && rest.rfind("scale_fusion", 0) != 0) {
    const auto dot = rest.find('.');
    prefix = rest.substr(0, dot + 1);
    rest = rest.substr(dot + 1);
  }
  const auto first = rest.find('.');
  std::string head = rest.substr(0, first);
  if (head == "backbone" && first != std::string::npos) {
    head = rest.substr(0, rest.find('.', first + 1));
  }
  return prefix + head;
}

}  // namespace

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw ValidationError("[train] " + m); };
  if (!(lr >= 0.0) || !std::isfinite(lr)) fail("lr must be a finite non-negative number");
  if (!(momentum >= 0.0 && momentum < 1.0)) fail("momentum must be in [0, 1)");
  if (!(weight_decay >= 0.0)) fail("weight_decay must be >= 0");
  if (!(clip_norm >= 0.0)) fail("clip_norm must be >= 0");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (iterations < 0) fail("iterations must be >= 0");
  if (!(poly_power > 0.0)) fail("poly_power must be > 0");
  if (warmup < 0) fail("warmup must be >= 0");
  if (checkpoint_period < 0) fail("checkpoint_period must be >= 0");
  if (!(augment_spec.min_scale > 0.0 && augment_spec.min_scale <= augment_spec.max_scale)) {
    fail("scale range must satisfy 0 < min_scale <= max_scale");
  }
  if (augment_spec.crop_h < 1 || augment_spec.crop_w < 1) fail("crop must be positive");
  if (!(augment_spec.flip_probability >= 0.0 && augment_spec.flip_probability <= 1.0)) {
    fail("flip_probability must be in [0, 1]");
  }
}

double TrainConfig::lr_at(int iteration) const {
  double base = lr;
  if (schedule == LrSchedule::kPoly && iterations > 0) {
    const double progress = static_cast<double>(iteration) / static_cast<double>(iterations);
    base = lr * std::pow(std::max(0.0, 1.0 - progress), poly_power);
  }
  if (iteration < warmup) base *= static_cast<double>(iteration + 1) / static_cast<double>(warmup);
  return base;
}

void TrainConfig::write(ConfigSection& s) const {
  s.set("lr", format_double(lr));
  s.set("momentum", format_double(momentum));
  s.set("weight_decay", format_double(weight_decay));
  s.set("clip_norm", format_double(clip_norm));
  s.set("batch_size", std::to_string(batch_size));
  s.set("iterations", std::to_string(iterations));
  s.set("schedule", schedule == LrSchedule::kPoly ? "poly" : "constant");
  s.set("poly_power", format_double(poly_power));
  s.set("warmup", std::to_string(warmup));
  s.set("seed", std::to_string(seed));
  s.set("checkpoint_period", std::to_string(checkpoint_period));
  s.set("checkpoint", checkpoint_path);
  s.set("log", log_path);
  s.set("augment", augment ? "true" : "false");
  s.set("min_scale", format_double(augment_spec.min_scale));
  s.set("max_scale", format_double(augment_spec.max_scale));
  s.set("crop", join_ints({augment_spec.crop_h, augment_spec.crop_w}));
  s.set("flip_probability", format_double(augment_spec.flip_probability));
  s.set("audit_grad_flow", audit_grad_flow ? "true" : "false");
}

TrainConfig TrainConfig::read(const ConfigSection& section) {
  SectionReader r(section, "train");
  TrainConfig c;
  c.lr = r.get_double("lr", c.lr);
  c.momentum = r.get_double("momentum", c.momentum);
  c.weight_decay = r.get_double("weight_decay", c.weight_decay);
  c.clip_norm = r.get_double("clip_norm", c.clip_norm);
  c.batch_size = r.get_int("batch_size", c.batch_size);
  c.iterations = r.get_int("iterations", c.iterations);
  const std::string sched = r.get_string("schedule", "poly");
  if (sched == "poly") {
    c.schedule = LrSchedule::kPoly;
  } else if (sched == "constant") {
    c.schedule = LrSchedule::kConstant;
  } else {
    throw ValidationError("[train] schedule must be constant or poly, got '" + sched + "'");
  }
  c.poly_power = r.get_double("poly_power", c.poly_power);
  c.warmup = r.get_int("warmup", c.warmup);
  c.seed = r.get_u64("seed", c.seed);
  c.checkpoint_period = r.get_int("checkpoint_period", c.checkpoint_period);
  c.checkpoint_path = r.get_string("checkpoint", c.checkpoint_path);
  c.log_path = r.get_string("log", c.log_path);
  c.augment = r.get_bool("augment", c.augment);
  c.augment_spec.min_scale = r.get_double("min_scale", c.augment_spec.min_scale);
  c.augment_spec.max_scale = r.get_double("max_scale", c.augment_spec.max_scale);
  const auto crop = r.get_ints("crop", {c.augment_spec.crop_h, c.augment_spec.crop_w});
  if (crop.size() != 2) throw ValidationError("[train] crop needs two values: h,w");
  c.augment_spec.crop_h = crop[0];
  c.augment_spec.crop_w = crop[1];
  c.augment_spec.flip_probability =
      r.get_double("flip_probability", c.augment_spec.flip_probability);
  c.audit_grad_flow = r.get_bool("audit_grad_flow", c.audit_grad_flow);
  r.finish();
  c.validate();
  return c;
}

SegSample assemble_batch(const std::vector<SegSample>& samples) {
  if (samples.empty()) throw ValidationError("empty batch");
  int h = 0, w = 0;
  const int c = samples.front().image.shape().c;
  for (const auto& s : samples) {
    if (s.image.shape().n != 1 || s.image.shape().c != c) {
      throw ShapeError("batch samples must be single images with equal channel counts");
    }
    h = std::max(h, s.image.shape().h);
    w = std::max(w, s.image.shape().w);
  }
  const int n = static_cast<int>(samples.size());
  SegSample batch{Tensor(Shape{n, c, h, w}), LabelMap(n, h, w, kIgnoreLabel)};
  for (int b = 0; b < n; ++b) {
    const auto& s = samples[b];
    const Shape ss = s.image.shape();
    for (int ch = 0; ch < c; ++ch) {
      for (int y = 0; y < ss.h; ++y) {
        for (int x = 0; x < ss.w; ++x) batch.image.at(b, ch, y, x) = s.image.at(0, ch, y, x);
      }
    }
    for (int y = 0; y < ss.h; ++y) {
      for (int x = 0; x < ss.w; ++x) batch.mask.at(b, y, x) = s.mask.at(0, y, x);
    }
  }
  return batch;
}

std::vector<std::pair<std::string, double>> grad_norms_by_module(const ParamRegistry& params) {
  std::vector<std::pair<std::string, double>> out;
  for (const auto& [name, t] : params.entries()) {
    const std::string key = module_of(name);
    if (out.empty() || out.back().first != key) out.emplace_back(key, 0.0);
    if (t.has_grad()) {
      for (double g : t.grad()) out.back().second += g * g;
    }
  }
  for (auto& e : out) e.second = std::sqrt(e.second);
  return out;
}

Trainer::Trainer(SegmentationModel& model, const Dataset& data, TrainConfig config)
    : model_(model), data_(data), cfg_(std::move(config)),
      aug_rng_(mix_seed(cfg_.seed, kAugmentStream)) {
  cfg_.validate();
  if (model_.num_classes() != data_.num_classes) {
    throw ValidationError("model predicts " + std::to_string(model_.num_classes()) +
                          " classes but the dataset has " + std::to_string(data_.num_classes));
  }
  if (data_.samples.empty()) throw ValidationError("training set is empty");
  for (const auto& [name, t] : model_.params().entries()) velocity_.emplace_back(t.shape());
}

std::vector<std::size_t> Trainer::epoch_order(std::uint64_t epoch) const {
  std::vector<std::size_t> order(data_.samples.size());
  std::iota(order.begin(), order.end(), 0);
  SplitMix64 rng(mix_seed(cfg_.seed, epoch + 1));
  for (std::size_t i = order.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.next() % i);
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

SegSample Trainer::next_batch() {
  const std::uint64_t n = data_.samples.size();
  std::vector<SegSample> picked;
  std::uint64_t epoch = cursor_ / n;
  std::vector<std::size_t> order = epoch_order(epoch);
  for (int b = 0; b < cfg_.batch_size; ++b, ++cursor_) {
    if (cursor_ / n != epoch) {
      epoch = cursor_ / n;
      order = epoch_order(epoch);
    }
    const SegSample& s = data_.samples[order[cursor_ % n]];
    picked.push_back(cfg_.augment ? augment(s, cfg_.augment_spec, aug_rng_) : s);
  }
  return assemble_batch(picked);
}

double Trainer::step() {
  const SegSample batch = next_batch();
  ParamRegistry& params = model_.params();
  params.zero_grad();
  Tape tape;
  const Tensor scores = model_.forward(tape, batch.image);
  const Tensor loss = ops::softmax_xent(tape, scores, batch.mask);
  const double value = loss.data()[0];
  if (!std::isfinite(value)) {
    throw NumericError("non-finite loss at iteration " + std::to_string(iteration_ + 1));
  }
  tape.backward(loss);

  const double lr = cfg_.lr_at(iteration_);
  const auto& entries = params.entries();
  double gscale = 1.0;
  if (cfg_.clip_norm > 0.0) {
    double sq = 0.0;
    for (const auto& [name, w] : entries) {
      if (!w.has_grad()) continue;
      for (double g : w.grad()) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (norm > cfg_.clip_norm) gscale = cfg_.clip_norm / norm;
  }
  for (std::size_t i = 0; i < entries.size(); ++i) {
    Tensor w = entries[i].second;
    auto wd = w.data();
    auto v = velocity_[i].data();
    if (!w.has_grad()) {
      // Unreached parameters still decay.
      for (std::size_t k = 0; k < wd.size(); ++k) {
        v[k] = cfg_.momentum * v[k] + cfg_.weight_decay * wd[k];
        wd[k] -= lr * v[k];
      }
      continue;
    }
    auto g = w.grad();
    for (std::size_t k = 0; k < wd.size(); ++k) {
      v[k] = cfg_.momentum * v[k] + gscale * g[k] + cfg_.weight_decay * wd[k];
      wd[k] -= lr * v[k];
    }
  }
  ++iteration_;
  return value;
}

TrainResult Trainer::run(std::optional<int> stop_after) {
  TrainResult result;
  std::ofstream log;
  if (!cfg_.log_path.empty()) {
    const bool fresh = iteration_ == 0;
    log.open(cfg_.log_path, fresh ? std::ios::trunc : std::ios::app);
    if (!log) throw IoError("cannot write training log " + cfg_.log_path);
    if (fresh) log << "iter,loss,lr\n";
    log.precision(17);
  }
  int steps = 0;
  while (iteration_ < cfg_.iterations && (!stop_after || steps < *stop_after)) {
    const double lr = cfg_.lr_at(iteration_);
    const double loss = step();
    ++steps;
    result.log.push_back({iteration_, loss, lr});
    if (log.is_open()) log << iteration_ << "," << loss << "," << lr << "\n" << std::flush;
    if (cfg_.audit_grad_flow && result.first_step_grad_norms.empty()) {
      result.first_step_grad_norms = grad_norms_by_module(model_.params());
    }
    if (!cfg_.checkpoint_path.empty() && cfg_.checkpoint_period > 0 &&
        iteration_ % cfg_.checkpoint_period == 0) {
      save_checkpoint(cfg_.checkpoint_path);
    }
  }
  if (!cfg_.checkpoint_path.empty()) save_checkpoint(cfg_.checkpoint_path);
  result.iterations_done = steps;
  return result;
}

BlobArchive Trainer::checkpoint() const {
  BlobArchive a;
  write_model_entries(model_, a);
  const auto& entries = model_.params().entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    a.put("optim.momentum." + entries[i].first, Blob::from_tensor(velocity_[i], DType::kF64));
  }
  const std::uint64_t state[] = {static_cast<std::uint64_t>(iteration_), cursor_,
                                 aug_rng_.state(), cfg_.seed};
  a.put("train.state", Blob::from_u64(state));
  ConfigSection cfg;
  cfg_.write(cfg);
  std::string text;
  for (const auto& [k, v] : cfg.items()) text += k + " = " + v + "\n";
  a.put("train.config", Blob::from_text(text));
  return a;
}

void Trainer::save_checkpoint(const std::string& path) const { checkpoint().save(path); }

void Trainer::resume(const BlobArchive& ckpt) {
  read_model_entries(model_, ckpt);
  std::vector<std::string> problems;
  const auto& entries = model_.params().entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const std::string key = "optim.momentum." + entries[i].first;
    if (!ckpt.contains(key)) {
      problems.push_back("missing " + key);
      continue;
    }
    const Tensor v = ckpt.get(key).to_tensor();
    if (v.shape() != velocity_[i].shape()) {
      problems.push_back("shape of " + key + ": checkpoint " + v.shape().str() + ", model " +
                         velocity_[i].shape().str());
      continue;
    }
    std::copy(v.data().begin(), v.data().end(), velocity_[i].data().begin());
  }
  if (!ckpt.contains("train.state")) problems.push_back("missing train.state");
  if (!problems.empty()) {
    std::string msg = "cannot resume from checkpoint:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ValidationError(msg);
  }
  const auto state = ckpt.get("train.state").to_u64();
  if (state.size() != 4) throw ValidationError("train.state has an unexpected layout");
  if (state[3] != cfg_.seed) {
    throw ValidationError("checkpoint was trained with seed " + std::to_string(state[3]) +
                          ", config says " + std::to_string(cfg_.seed));
  }
  iteration_ = static_cast<int>(state[0]);
  cursor_ = state[1];
  aug_rng_.set_state(state[2]);
}

}  // namespace refinery
