#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "refinery/backbone.hpp"
#include "refinery/blob.hpp"
#include "refinery/blocks.hpp"
#include "refinery/config.hpp"

namespace refinery {

enum class Variant { kSingle, kTwoCascaded, kFourCascaded, kFourCascadedTwoScale };

// CLI names: single, cascade2, cascade4, cascade4-2scale. The long forms
// (two_cascaded, four_cascaded, four_cascaded_two_scale) are accepted too.
std::string variant_name(Variant v);
Variant parse_variant(const std::string& name);

// Where a refine block input comes from: backbone output f{index} or the
// output of refine{index}.
struct PathSource {
  enum class Kind { kBackbone, kRefine };
  Kind kind = Kind::kBackbone;
  int index = 1;

  std::string str() const;
};

struct BlockWiring {
  RefineBlockSpec spec;
  std::vector<PathSource> sources;  // parallel to spec.inputs
};

struct CascadeSpec {
  Variant variant = Variant::kFourCascaded;
  int num_classes = 4;
  BackboneSpec backbone{};
  int base_width = 32;  // refine width; the single-input 1/32 block gets twice this
  bool use_crp = true;
  int num_pool_blocks = 2;
  PoolSpec crp_pool{};
  std::array<double, 2> scale_factors{1.2, 0.6};
  // Blocks in evaluation order; the last one produces the 1/4-scale map.
  std::vector<BlockWiring> blocks;

  // Builds the wiring graph of a variant from the scalar fields.
  static CascadeSpec make(Variant variant, int num_classes, const BackboneSpec& backbone = {},
                          int base_width = 32, bool use_crp = true);
  void rewire();  // recomputes `blocks` after scalar fields change

  void validate() const;

  // [model] section round trip. The wiring is derived, not stored.
  void write(ConfigSection& section) const;
  static CascadeSpec read(const ConfigSection& section);
};

// Anything that maps an image batch to per-pixel class scores.
class SegmentationModel {
 public:
  virtual ~SegmentationModel() = default;

  virtual int num_classes() const = 0;
  // scores: (n, K, h, w) for an (n, 3, h, w) image.
  virtual Tensor forward(Tape& tape, const Tensor& image) const = 0;
  virtual ParamRegistry& params() = 0;
  virtual const ParamRegistry& params() const = 0;
  // Canonical [model] section describing the architecture.
  virtual ConfigSection describe() const = 0;
};

// Shapes observed during one forward pass, for structural assertions.
struct ForwardTrace {
  std::vector<std::pair<std::string, Shape>> blocks;  // "scale1.refine4" -> output shape
  Shape head_input;
};

class RefineNet : public SegmentationModel {
 public:
  RefineNet(const CascadeSpec& spec, std::uint64_t seed);

  const CascadeSpec& spec() const { return spec_; }
  int num_classes() const override { return spec_.num_classes; }
  Tensor forward(Tape& tape, const Tensor& image) const override;
  Tensor forward(Tape& tape, const Tensor& image, ForwardTrace* trace) const;
  ParamRegistry& params() override { return params_; }
  const ParamRegistry& params() const override { return params_; }
  ConfigSection describe() const override;

 private:
  struct ScalePath {
    std::string prefix;
    Backbone backbone;
    std::vector<RefineBlock> blocks;
  };

  // 1/4-scale feature map of an image whose sides are multiples of 32.
  Tensor path_features(Tape& tape, const Tensor& image, const ScalePath& path,
                       ForwardTrace* trace) const;
  Tensor predict_head(Tape& tape, const Tensor& features) const;

  CascadeSpec spec_;
  ParamRegistry params_;
  std::vector<ScalePath> paths_;
  Fusion scale_fusion_;         // two-scale only
  std::vector<Rcu> head_rcus_;  // two-scale only; single-scale puts them in the final block
  ConvLayer head_;
};

// Per-pixel softmax regression on the raw colour channels (a 1x1 conv).
class PixelLinearClassifier : public SegmentationModel {
 public:
  PixelLinearClassifier(int in_channels, int num_classes, std::uint64_t seed);

  int num_classes() const override { return num_classes_; }
  Tensor forward(Tape& tape, const Tensor& image) const override;
  ParamRegistry& params() override { return params_; }
  const ParamRegistry& params() const override { return params_; }
  ConfigSection describe() const override;

 private:
  int in_channels_;
  int num_classes_;
  ParamRegistry params_;
  ConvLayer conv_;
};

// Builds whichever model a [model] section describes (`model = refinenet`
// or `model = pixel_linear`).
std::unique_ptr<SegmentationModel> build_model(const ConfigSection& model_section,
                                               std::uint64_t seed);

// Parameter counts grouped by module ("backbone", "refine3", "head", ...;
// two-scale models prefix "scale1." / "scale2.").
std::map<std::string, std::size_t> count_params(const SegmentationModel& model);

// Pads bottom/right by reflection up to the next multiple of `multiple`.
Tensor pad_to_multiple(Tape& tape, const Tensor& image, int multiple);

// --- checkpoints ---------------------------------------------------------

inline constexpr const char* kSpecEntry = "meta.model";

// Stores the model description and every parameter (f64).
void write_model_entries(const SegmentationModel& model, BlobArchive& archive);

// Copies parameters from the archive; rejects a differing model description
// and missing, extra or mis-shaped parameter entries, listing every offender.
void read_model_entries(SegmentationModel& model, const BlobArchive& archive);

// Rebuilds the model recorded in a checkpoint and loads its parameters.
std::unique_ptr<SegmentationModel> load_model(const BlobArchive& archive);

}  // namespace refinery
