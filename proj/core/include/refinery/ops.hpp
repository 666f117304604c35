#pragma once

#include <cstdint>
#include <span>
#include <utility>

#include "refinery/tape.hpp"
#include "refinery/tensor.hpp"

namespace refinery {

struct Hw {
  int h = 0;
  int w = 0;
  bool operator==(const Hw&) const = default;
};

struct ConvSpec {
  int in_channels = 0;
  int out_channels = 0;
  Hw kernel{3, 3};
  Hw stride{1, 1};
  Hw padding{1, 1};
  bool has_bias = false;

  // floor((in + 2p - k) / s) + 1 per axis; throws ShapeError if < 1.
  Hw output_size(Hw in) const;
  Shape weight_shape() const { return {out_channels, in_channels, kernel.h, kernel.w}; }

  static ConvSpec same3x3(int in, int out, bool bias) {
    return {in, out, {3, 3}, {1, 1}, {1, 1}, bias};
  }
  static ConvSpec pointwise(int in, int out, bool bias) {
    return {in, out, {1, 1}, {1, 1}, {0, 0}, bias};
  }
};

struct PoolSpec {
  Hw window{5, 5};
  Hw stride{1, 1};
  Hw padding{2, 2};

  Hw output_size(Hw in) const;
};

// Direct nested loops are the reference; kGemm lowers to patch-matrix
// products and must agree with kDirect to 1e-6.
enum class ConvAlgo { kDirect, kGemm };

namespace ops {

// Cross-correlation (no kernel flip) with zero padding. bias may be an
// undefined tensor when spec.has_bias is false.
Tensor conv2d(Tape& tape, const Tensor& x, const Tensor& weight, const Tensor& bias,
              const ConvSpec& spec, ConvAlgo algo = ConvAlgo::kGemm);

// Max pooling with -inf padding. Backward routes to the first maximum in
// row-major window order.
Tensor maxpool2d(Tape& tape, const Tensor& x, const PoolSpec& spec);

Tensor relu(Tape& tape, const Tensor& x);

Tensor add(Tape& tape, const Tensor& a, const Tensor& b);

// Bilinear resampling with half-pixel centres: source coordinate
// s = (d + 0.5) * in / out - 0.5, clamped to [0, in - 1].
Tensor bilinear_resize(Tape& tape, const Tensor& x, int out_h, int out_w);

// Mean per-pixel softmax cross-entropy over non-ignored pixels. Returns a
// 1x1x1x1 tensor; zero (with zero gradient) if every pixel is ignored.
Tensor softmax_xent(Tape& tape, const Tensor& scores, const LabelMap& target,
                    std::uint8_t ignore_label = kIgnoreLabel);

// sum_i x_i * weights_i as a 1x1x1x1 tensor. weights is treated as constant.
Tensor weighted_sum(Tape& tape, const Tensor& x, const Tensor& weights);

// Mirror padding without edge repetition (numpy "reflect").
Tensor pad_reflect(Tape& tape, const Tensor& x, int top, int bottom, int left,
                   int right);

Tensor crop(Tape& tape, const Tensor& x, int y0, int x0, int h, int w);

// Channel softmax. Not differentiable; used at prediction time.
Tensor softmax_channels(const Tensor& scores);

// Index into [0, n) after mirror reflection of an out-of-range coordinate.
int reflect_index(int i, int n);

// Interpolation taps shared by the tensor op and the image augmenter.
struct LinearTap {
  int lo = 0;
  int hi = 0;
  double frac = 0.0;
};
std::vector<LinearTap> half_pixel_taps(int in, int out);

}  // namespace ops
}  // namespace refinery
