#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "refinery/rng.hpp"
#include "refinery/tensor.hpp"

namespace refinery {

// One image (1, 3, h, w) with values in [0, 1] and its (1, h, w) label map.
struct SegSample {
  Tensor image;
  LabelMap mask;

  void validate(int num_classes) const;
};

struct Dataset {
  int num_classes = 0;
  std::vector<SegSample> samples;
};

// Shape classes in label order; label 0 is background.
enum class ShapeKind { kDisk = 1, kRectangle, kTriangle, kCross, kRing };
inline constexpr int kMaxSyntheticClasses = 6;

// Deterministic synthetic benchmark. Each image holds 1-4 non-overlapping
// shapes on a noisy background; shape colours are independent of the class
// so labels must be inferred from geometry. Inner boundary pixels of every
// shape are labelled kIgnoreLabel.
SegSample gen_synthetic_sample(int h, int w, int num_classes, std::uint64_t seed,
                               std::uint64_t index);
Dataset gen_synthetic(int n_samples, int h, int w, int num_classes, std::uint64_t seed);

struct AugmentSpec {
  double min_scale = 0.7;
  double max_scale = 1.3;
  int crop_h = 64;
  int crop_w = 64;
  double flip_probability = 0.5;
};

// One realised augmentation. Offsets index the scaled image: output pixel
// (y, x) reads scaled pixel (y + offset_y, x + offset_x); negative offsets or
// reads past the edge hit reflected image / ignore-labelled padding.
struct AugmentDraw {
  double scale = 1.0;
  int offset_y = 0;
  int offset_x = 0;
  bool flip = false;
};

AugmentDraw draw_augment(const AugmentSpec& spec, int h, int w, SplitMix64& rng);
SegSample apply_augment(const SegSample& sample, const AugmentDraw& draw, int crop_h,
                        int crop_w);
// draw_augment followed by apply_augment.
SegSample augment(const SegSample& sample, const AugmentSpec& spec, SplitMix64& rng);

// Scaled size used for a given factor: max(1, round(size * scale)).
int scaled_extent(int size, double scale);
// Nearest-neighbour label resampling (never invents labels).
LabelMap resize_labels_nearest(const LabelMap& labels, int out_h, int out_w);
Tensor resize_image_bilinear(const Tensor& image, int out_h, int out_w);
SegSample hflip(const SegSample& s);

// --- files ----------------------------------------------------------------

struct RgbImage {
  int h = 0;
  int w = 0;
  std::vector<std::uint8_t> rgb;  // interleaved
  bool operator==(const RgbImage&) const = default;
};

struct GrayImage {
  int h = 0;
  int w = 0;
  std::vector<std::uint8_t> pixels;
  bool operator==(const GrayImage&) const = default;
};

std::vector<std::uint8_t> encode_ppm(const RgbImage& img);
RgbImage decode_ppm(const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> encode_pgm(const GrayImage& img);
GrayImage decode_pgm(const std::vector<std::uint8_t>& bytes);

RgbImage to_rgb(const Tensor& image);  // values rounded from [0, 1] to 0..255
Tensor from_rgb(const RgbImage& img);
GrayImage to_gray(const LabelMap& labels);
LabelMap from_gray(const GrayImage& img);

void write_sample(const SegSample& s, const std::string& image_path,
                  const std::string& mask_path);
SegSample read_sample(const std::string& image_path, const std::string& mask_path);

// Manifest: one `image_path<TAB>mask_path` per line. Relative paths resolve
// against the manifest's directory.
struct ManifestEntry {
  std::string image;
  std::string mask;
};
std::vector<ManifestEntry> read_manifest(const std::string& path);
void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries);

// Writes `dir/NNNNN.ppm`, `dir/NNNNN.pgm` and `dir/manifest.tsv`.
void write_dataset(const Dataset& ds, const std::string& dir);
Dataset read_dataset(const std::string& manifest_path, int num_classes);

}  // namespace refinery
