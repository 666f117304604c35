#include "refinery/cascade.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "refinery/error.hpp"

namespace refinery {
namespace {

std::string section_text(const ConfigSection& s) {
  std::string out;
  for (const auto& [k, v] : s.items()) out += k + " = " + v + "\n";
  return out;
}

PathSpec source_path(const PathSource& src, const BackboneSpec& backbone,
                     const std::vector<BlockWiring>& earlier) {
  if (src.kind == PathSource::Kind::kBackbone) {
    return {backbone.blocks[src.index - 1].channels, BackboneSpec::scale_of(src.index)};
  }
  for (const auto& b : earlier) {
    if (b.spec.index == src.index) {
      int scale = b.spec.inputs.front().scale;
      for (const auto& p : b.spec.inputs) scale = std::min(scale, p.scale);
      return {b.spec.channels, scale};
    }
  }
  throw ValidationError("wiring: " + src.str() + " is used before it is produced");
}

}  // namespace

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::kSingle: return "single";
    case Variant::kTwoCascaded: return "cascade2";
    case Variant::kFourCascaded: return "cascade4";
    case Variant::kFourCascadedTwoScale: return "cascade4-2scale";
  }
  return "?";
}

Variant parse_variant(const std::string& name) {
  if (name == "single") return Variant::kSingle;
  if (name == "cascade2" || name == "two_cascaded") return Variant::kTwoCascaded;
  if (name == "cascade4" || name == "four_cascaded") return Variant::kFourCascaded;
  if (name == "cascade4-2scale" || name == "four_cascaded_two_scale") {
    return Variant::kFourCascadedTwoScale;
  }
  throw ValidationError("unknown variant '" + name +
                        "' (expected single, cascade2, cascade4 or cascade4-2scale)");
}

std::string PathSource::str() const {
  return kind == Kind::kBackbone ? "backbone.f" + std::to_string(index)
                                 : "refine" + std::to_string(index);
}

CascadeSpec CascadeSpec::make(Variant variant, int num_classes, const BackboneSpec& backbone,
                              int base_width, bool use_crp) {
  CascadeSpec s;
  s.variant = variant;
  s.num_classes = num_classes;
  s.backbone = backbone;
  s.base_width = base_width;
  s.use_crp = use_crp;
  s.rewire();
  return s;
}

void CascadeSpec::rewire() {
  using K = PathSource::Kind;
  const PathSource f1{K::kBackbone, 1}, f2{K::kBackbone, 2}, f3{K::kBackbone, 3},
      f4{K::kBackbone, 4};
  std::vector<std::pair<int, std::vector<PathSource>>> plan;
  switch (variant) {
    case Variant::kSingle:
      plan = {{1, {f4, f3, f2, f1}}};
      break;
    case Variant::kTwoCascaded:
      plan = {{2, {f4, f3}}, {1, {{K::kRefine, 2}, f2, f1}}};
      break;
    case Variant::kFourCascaded:
    case Variant::kFourCascadedTwoScale:
      plan = {{4, {f4}},
              {3, {{K::kRefine, 4}, f3}},
              {2, {{K::kRefine, 3}, f2}},
              {1, {{K::kRefine, 2}, f1}}};
      break;
  }
  blocks.clear();
  for (auto& [index, sources] : plan) {
    BlockWiring b;
    b.sources = sources;
    b.spec.index = index;
    // Only the block that sees nothing but the 1/32 map is widened.
    const bool coarsest_only = sources.size() == 1 && sources[0].kind == K::kBackbone &&
                               sources[0].index == 4;
    b.spec.channels = coarsest_only ? RefineBlockSpec::default_channels(4, base_width)
                                    : base_width;
    for (const auto& src : sources) b.spec.inputs.push_back(source_path(src, backbone, blocks));
    b.spec.use_crp = use_crp;
    b.spec.num_pool_blocks = num_pool_blocks;
    b.spec.crp_pool = crp_pool;
    b.spec.num_output_rcus = 1;
    blocks.push_back(std::move(b));
  }
  // The final block carries the two extra RCUs before prediction; with two
  // scales they move behind the scale fusion instead.
  if (variant != Variant::kFourCascadedTwoScale) blocks.back().spec.num_output_rcus = 3;
}

void CascadeSpec::validate() const {
  if (num_classes < 2 || num_classes > 255) {
    throw ValidationError("num_classes must be in [2, 255], got " + std::to_string(num_classes));
  }
  if (base_width < 1) throw ValidationError("base_width must be positive");
  backbone.validate();
  if (blocks.empty()) throw ValidationError("cascade has no refine blocks");
  for (double f : scale_factors) {
    if (!(f > 0.0)) throw ValidationError("scale factors must be positive");
  }

  std::map<std::string, int> consumed;
  std::set<int> indices;
  for (std::size_t bi = 0; bi < blocks.size(); ++bi) {
    const BlockWiring& b = blocks[bi];
    const std::string name = "refine" + std::to_string(b.spec.index);
    b.spec.validate();
    if (!indices.insert(b.spec.index).second) {
      throw ValidationError("duplicate block " + name);
    }
    if (b.sources.size() != b.spec.inputs.size()) {
      throw ValidationError(name + ": " + std::to_string(b.sources.size()) + " sources for " +
                            std::to_string(b.spec.inputs.size()) + " input paths");
    }
    const std::vector<BlockWiring> earlier(blocks.begin(), blocks.begin() + bi);
    for (std::size_t p = 0; p < b.sources.size(); ++p) {
      const PathSource& src = b.sources[p];
      if (src.kind == PathSource::Kind::kBackbone && (src.index < 1 || src.index > 4)) {
        throw ValidationError(name + ": no backbone output f" + std::to_string(src.index));
      }
      const PathSpec actual = source_path(src, backbone, earlier);
      const PathSpec& want = b.spec.inputs[p];
      const std::string edge = src.str() + " -> " + name + ".path" + std::to_string(p + 1);
      if (actual.channels != want.channels) {
        throw ValidationError("wiring edge " + edge + ": source has " +
                              std::to_string(actual.channels) + " channels, block expects " +
                              std::to_string(want.channels));
      }
      if (actual.scale != want.scale) {
        throw ValidationError("wiring edge " + edge + ": source is at 1/" +
                              std::to_string(actual.scale) + ", block expects 1/" +
                              std::to_string(want.scale));
      }
      ++consumed[src.str()];
    }
  }
  for (int m = 1; m <= 4; ++m) {
    const std::string f = "backbone.f" + std::to_string(m);
    if (consumed[f] != 1) {
      throw ValidationError("wiring: " + f + " must feed exactly one block, feeds " +
                            std::to_string(consumed[f]));
    }
  }
  for (std::size_t bi = 0; bi + 1 < blocks.size(); ++bi) {
    const std::string r = "refine" + std::to_string(blocks[bi].spec.index);
    if (consumed[r] != 1) throw ValidationError("wiring: output of " + r + " is not consumed once");
  }
  const auto& last = blocks.back().spec;
  int last_scale = last.inputs.front().scale;
  for (const auto& p : last.inputs) last_scale = std::min(last_scale, p.scale);
  if (last_scale != 4) {
    throw ValidationError("wiring: final block must produce the 1/4-scale map, got 1/" +
                          std::to_string(last_scale));
  }
}

void CascadeSpec::write(ConfigSection& s) const {
  s.set("model", "refinenet");
  s.set("variant", variant_name(variant));
  s.set("num_classes", std::to_string(num_classes));
  s.set("in_channels", std::to_string(backbone.in_channels));
  s.set("stem_channels", std::to_string(backbone.stem_channels));
  std::vector<int> ch, units;
  for (const auto& b : backbone.blocks) {
    ch.push_back(b.channels);
    units.push_back(b.units);
  }
  s.set("block_channels", join_ints(ch));
  s.set("block_units", join_ints(units));
  s.set("base_width", std::to_string(base_width));
  s.set("use_crp", use_crp ? "true" : "false");
  s.set("num_pool_blocks", std::to_string(num_pool_blocks));
  s.set("pool_window", std::to_string(crp_pool.window.h));
  s.set("scale_factors", join_doubles({scale_factors[0], scale_factors[1]}));
}

CascadeSpec CascadeSpec::read(const ConfigSection& section) {
  SectionReader r(section, "model");
  const std::string kind = r.get_string("model", "refinenet");
  if (kind != "refinenet") throw ValidationError("[model] model = " + kind + " is not refinenet");
  CascadeSpec s;
  s.variant = parse_variant(r.get_string("variant", "cascade4"));
  s.num_classes = r.get_int("num_classes", 4);
  s.backbone.in_channels = r.get_int("in_channels", 3);
  s.backbone.stem_channels = r.get_int("stem_channels", s.backbone.stem_channels);
  const auto ch = r.get_ints("block_channels", {32, 64, 128, 256});
  const auto units = r.get_ints("block_units", {1, 1, 1, 1});
  if (ch.size() != 4 || units.size() != 4) {
    throw ValidationError("[model] block_channels and block_units need exactly 4 values");
  }
  for (int m = 0; m < 4; ++m) {
    s.backbone.blocks[m] = {ch[m], units[m], m == 0 ? 1 : 2};
  }
  s.base_width = r.get_int("base_width", 32);
  s.use_crp = r.get_bool("use_crp", true);
  s.num_pool_blocks = r.get_int("num_pool_blocks", 2);
  const int window = r.get_int("pool_window", 5);
  if (window < 1 || window % 2 == 0) {
    throw ValidationError("[model] pool_window must be a positive odd size");
  }
  s.crp_pool = PoolSpec{{window, window}, {1, 1}, {window / 2, window / 2}};
  const auto factors = r.get_doubles("scale_factors", {1.2, 0.6});
  if (factors.size() != 2) throw ValidationError("[model] scale_factors needs 2 values");
  s.scale_factors = {factors[0], factors[1]};
  r.finish();
  s.rewire();
  s.validate();
  return s;
}

RefineNet::RefineNet(const CascadeSpec& spec, std::uint64_t seed) : spec_(spec) {
  spec_.validate();
  SplitMix64 rng(seed);
  const bool two_scale = spec_.variant == Variant::kFourCascadedTwoScale;
  const int num_paths = two_scale ? 2 : 1;
  for (int s = 0; s < num_paths; ++s) {
    ScalePath path;
    path.prefix = two_scale ? "scale" + std::to_string(s + 1) + "." : "";
    path.backbone = make_backbone(params_, path.prefix + "backbone", spec_.backbone, rng);
    for (const auto& b : spec_.blocks) {
      path.blocks.push_back(make_refine_block(
          params_, path.prefix + "refine" + std::to_string(b.spec.index), b.spec, rng));
    }
    paths_.push_back(std::move(path));
  }
  const int width = spec_.blocks.back().spec.channels;
  if (two_scale) {
    scale_fusion_ = make_fusion(params_, "scale_fusion", {width, width}, rng);
    for (int k = 0; k < 2; ++k) {
      head_rcus_.push_back(make_rcu(params_, "head.rcu" + std::to_string(k + 1), width, rng));
    }
  }
  head_ = make_conv(params_, "head.classifier",
                    ConvSpec::pointwise(width, spec_.num_classes, true), rng);
}

Tensor RefineNet::path_features(Tape& tape, const Tensor& image, const ScalePath& path,
                                ForwardTrace* trace) const {
  const auto feats = backbone_forward(tape, image, path.backbone);
  std::map<int, Tensor> refined;
  Tensor last;
  for (std::size_t i = 0; i < spec_.blocks.size(); ++i) {
    const BlockWiring& w = spec_.blocks[i];
    std::vector<Tensor> inputs;
    for (const PathSource& src : w.sources) {
      inputs.push_back(src.kind == PathSource::Kind::kBackbone ? feats[src.index - 1]
                                                               : refined.at(src.index));
    }
    last = refine_block_forward(tape, inputs, path.blocks[i]);
    refined[w.spec.index] = last;
    if (trace) {
      trace->blocks.emplace_back(path.prefix + "refine" + std::to_string(w.spec.index),
                                 last.shape());
    }
  }
  return last;
}

Tensor RefineNet::predict_head(Tape& tape, const Tensor& features) const {
  return head_(tape, features);
}

Tensor RefineNet::forward(Tape& tape, const Tensor& image) const {
  return forward(tape, image, nullptr);
}

Tensor RefineNet::forward(Tape& tape, const Tensor& image, ForwardTrace* trace) const {
  const Shape s = image.shape();
  if (s.h < 1 || s.w < 1) throw ShapeError("forward: empty image " + s.str());

  if (spec_.variant != Variant::kFourCascadedTwoScale) {
    const Tensor padded = pad_to_multiple(tape, image, 32);
    const Tensor feats = path_features(tape, padded, paths_[0], trace);
    if (trace) trace->head_input = feats.shape();
    Tensor scores = predict_head(tape, feats);
    const Shape ps = padded.shape();
    scores = ops::bilinear_resize(tape, scores, ps.h, ps.w);
    if (ps.h != s.h || ps.w != s.w) scores = ops::crop(tape, scores, 0, 0, s.h, s.w);
    return scores;
  }

  // Two scales: each path sees a resized copy; the 1/4-scale maps are cut to
  // the part covering the unpadded image and fused at the larger resolution.
  std::vector<Tensor> feats;
  for (int p = 0; p < 2; ++p) {
    const double f = spec_.scale_factors[p];
    const int sh = std::max(1, static_cast<int>(std::lround(s.h * f)));
    const int sw = std::max(1, static_cast<int>(std::lround(s.w * f)));
    const Tensor scaled =
        (sh == s.h && sw == s.w) ? image : ops::bilinear_resize(tape, image, sh, sw);
    const Tensor padded = pad_to_multiple(tape, scaled, 32);
    Tensor map = path_features(tape, padded, paths_[p], trace);
    const int vh = (sh + 3) / 4;
    const int vw = (sw + 3) / 4;
    if (vh != map.shape().h || vw != map.shape().w) map = ops::crop(tape, map, 0, 0, vh, vw);
    feats.push_back(map);
  }
  Tensor fused = fusion_forward(tape, feats, scale_fusion_);
  for (const Rcu& rcu : head_rcus_) fused = rcu_forward(tape, fused, rcu);
  if (trace) trace->head_input = fused.shape();
  Tensor scores = predict_head(tape, fused);
  return ops::bilinear_resize(tape, scores, s.h, s.w);
}

ConfigSection RefineNet::describe() const {
  ConfigSection s;
  spec_.write(s);
  return s;
}

PixelLinearClassifier::PixelLinearClassifier(int in_channels, int num_classes,
                                             std::uint64_t seed)
    : in_channels_(in_channels), num_classes_(num_classes) {
  if (num_classes < 2 || num_classes > 255 || in_channels < 1) {
    throw ValidationError("pixel_linear: invalid channel or class count");
  }
  SplitMix64 rng(seed);
  conv_ = make_conv(params_, "linear", ConvSpec::pointwise(in_channels, num_classes, true), rng);
}

Tensor PixelLinearClassifier::forward(Tape& tape, const Tensor& image) const {
  return conv_(tape, image);
}

ConfigSection PixelLinearClassifier::describe() const {
  ConfigSection s;
  s.set("model", "pixel_linear");
  s.set("in_channels", std::to_string(in_channels_));
  s.set("num_classes", std::to_string(num_classes_));
  return s;
}

std::unique_ptr<SegmentationModel> build_model(const ConfigSection& section,
                                               std::uint64_t seed) {
  const std::string* kind = section.find("model");
  if (kind && *kind == "pixel_linear") {
    SectionReader r(section, "model");
    r.get_string("model", "");
    const int in = r.get_int("in_channels", 3);
    const int k = r.get_int("num_classes", 4);
    r.finish();
    return std::make_unique<PixelLinearClassifier>(in, k, seed);
  }
  return std::make_unique<RefineNet>(CascadeSpec::read(section), seed);
}

std::map<std::string, std::size_t> count_params(const SegmentationModel& model) {
  std::map<std::string, std::size_t> out;
  for (const auto& [name, t] : model.params().entries()) {
    std::string key = name.substr(0, name.find('.'));
    if (key.rfind("scale", 0) == 0 && key != "scale_fusion") {
      const auto second = name.find('.', key.size() + 1);
      key = name.substr(0, second);
    }
    out[key] += t.numel();
  }
  return out;
}

Tensor pad_to_multiple(Tape& tape, const Tensor& image, int multiple) {
  const Shape s = image.shape();
  const int ph = (multiple - s.h % multiple) % multiple;
  const int pw = (multiple - s.w % multiple) % multiple;
  if (ph == 0 && pw == 0) return image;
  return ops::pad_reflect(tape, image, 0, ph, 0, pw);
}

void write_model_entries(const SegmentationModel& model, BlobArchive& archive) {
  archive.put(kSpecEntry, Blob::from_text(section_text(model.describe())));
  for (const auto& [name, t] : model.params().entries()) {
    archive.put("param." + name, Blob::from_tensor(t, DType::kF64));
  }
}

void read_model_entries(SegmentationModel& model, const BlobArchive& archive) {
  if (!archive.contains(kSpecEntry)) throw ValidationError("checkpoint has no model description");
  const std::string stored = archive.get(kSpecEntry).to_text();
  const std::string ours = section_text(model.describe());
  if (stored != ours) {
    throw ValidationError("checkpoint model description differs from the requested model:\n"
                          "checkpoint:\n" + stored + "requested:\n" + ours);
  }
  std::vector<std::string> problems;
  std::set<std::string> expected;
  for (auto& [name, t] : model.params().entries()) {
    const std::string key = "param." + name;
    expected.insert(key);
    if (!archive.contains(key)) {
      problems.push_back("missing " + key);
      continue;
    }
    const Tensor stored_t = archive.get(key).to_tensor();
    if (stored_t.shape() != t.shape() || archive.get(key).dims.size() != 4) {
      problems.push_back("shape of " + key + ": checkpoint " + stored_t.shape().str() +
                         ", model " + t.shape().str());
    }
  }
  for (const auto& [key, blob] : archive.entries()) {
    if (key.rfind("param.", 0) == 0 && !expected.contains(key)) {
      problems.push_back("unexpected " + key);
    }
  }
  if (!problems.empty()) {
    std::string msg = "checkpoint does not match the model:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ValidationError(msg);
  }
  for (const auto& [name, param] : model.params().entries()) {
    Tensor t = param;
    const Tensor stored_t = archive.get("param." + name).to_tensor();
    std::copy(stored_t.data().begin(), stored_t.data().end(), t.data().begin());
  }
}

std::unique_ptr<SegmentationModel> load_model(const BlobArchive& archive) {
  if (!archive.contains(kSpecEntry)) throw ValidationError("checkpoint has no model description");
  const RunConfig cfg = RunConfig::parse("[model]\n" + archive.get(kSpecEntry).to_text());
  auto model = build_model(cfg.section("model"), 0);
  read_model_entries(*model, archive);
  return model;
}

}  // namespace refinery
