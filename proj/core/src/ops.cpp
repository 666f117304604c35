#include "refinery/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "refinery/error.hpp"

namespace refinery {
namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMatrix = Eigen::Map<RowMatrix>;
using ConstMapMatrix = Eigen::Map<const RowMatrix>;

std::string dims(Hw v) { return std::to_string(v.h) + "x" + std::to_string(v.w); }

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape().str() + " vs " +
                     b.shape().str());
  }
}

bool is_pointwise(const ConvSpec& s) {
  return s.kernel == Hw{1, 1} && s.stride == Hw{1, 1} && s.padding == Hw{0, 0};
}

// Unfolds one image (C, H, W) into a (C*kh*kw, Ho*Wo) patch matrix.
void im2col(const double* img, int channels, Hw in, const ConvSpec& s, Hw out,
            double* col) {
  const std::size_t cols = static_cast<std::size_t>(out.h) * out.w;
  std::size_t row = 0;
  for (int c = 0; c < channels; ++c) {
    const double* plane = img + static_cast<std::size_t>(c) * in.h * in.w;
    for (int ky = 0; ky < s.kernel.h; ++ky) {
      for (int kx = 0; kx < s.kernel.w; ++kx, ++row) {
        double* dst = col + row * cols;
        for (int oy = 0; oy < out.h; ++oy) {
          const int iy = oy * s.stride.h - s.padding.h + ky;
          for (int ox = 0; ox < out.w; ++ox) {
            const int ix = ox * s.stride.w - s.padding.w + kx;
            *dst++ = (iy >= 0 && iy < in.h && ix >= 0 && ix < in.w)
                         ? plane[static_cast<std::size_t>(iy) * in.w + ix]
                         : 0.0;
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatters patch-matrix gradients back onto the image.
void col2im(const double* col, int channels, Hw in, const ConvSpec& s, Hw out,
            double* img) {
  std::size_t row = 0;
  for (int c = 0; c < channels; ++c) {
    double* plane = img + static_cast<std::size_t>(c) * in.h * in.w;
    for (int ky = 0; ky < s.kernel.h; ++ky) {
      for (int kx = 0; kx < s.kernel.w; ++kx, ++row) {
        const double* src = col + row * static_cast<std::size_t>(out.h) * out.w;
        for (int oy = 0; oy < out.h; ++oy) {
          const int iy = oy * s.stride.h - s.padding.h + ky;
          for (int ox = 0; ox < out.w; ++ox, ++src) {
            const int ix = ox * s.stride.w - s.padding.w + kx;
            if (iy >= 0 && iy < in.h && ix >= 0 && ix < in.w) {
              plane[static_cast<std::size_t>(iy) * in.w + ix] += *src;
            }
          }
        }
      }
    }
  }
}

void conv_direct_forward(const Tensor& x, const Tensor& wt, const Tensor& b,
                         const ConvSpec& s, Tensor& y) {
  const Shape xs = x.shape();
  const Shape ys = y.shape();
  for (int n = 0; n < ys.n; ++n) {
    for (int o = 0; o < ys.c; ++o) {
      const double bias = b.defined() ? b.data()[o] : 0.0;
      for (int oy = 0; oy < ys.h; ++oy) {
        for (int ox = 0; ox < ys.w; ++ox) {
          double acc = bias;
          for (int c = 0; c < xs.c; ++c) {
            for (int ky = 0; ky < s.kernel.h; ++ky) {
              const int iy = oy * s.stride.h - s.padding.h + ky;
              if (iy < 0 || iy >= xs.h) continue;
              for (int kx = 0; kx < s.kernel.w; ++kx) {
                const int ix = ox * s.stride.w - s.padding.w + kx;
                if (ix < 0 || ix >= xs.w) continue;
                acc += x.at(n, c, iy, ix) * wt.at(o, c, ky, kx);
              }
            }
          }
          y.at(n, o, oy, ox) = acc;
        }
      }
    }
  }
}

void conv_direct_backward(const Tensor& x, const Tensor& wt, const ConvSpec& s,
                          Shape ys, std::span<const double> gy, GradSlot gx,
                          GradSlot gw, GradSlot gb) {
  const Shape xs = x.shape();
  std::size_t yi = 0;
  for (int n = 0; n < ys.n; ++n) {
    for (int o = 0; o < ys.c; ++o) {
      for (int oy = 0; oy < ys.h; ++oy) {
        for (int ox = 0; ox < ys.w; ++ox, ++yi) {
          const double g = gy[yi];
          if (!gb.empty()) gb[o] += g;
          for (int c = 0; c < xs.c; ++c) {
            for (int ky = 0; ky < s.kernel.h; ++ky) {
              const int iy = oy * s.stride.h - s.padding.h + ky;
              if (iy < 0 || iy >= xs.h) continue;
              for (int kx = 0; kx < s.kernel.w; ++kx) {
                const int ix = ox * s.stride.w - s.padding.w + kx;
                if (ix < 0 || ix >= xs.w) continue;
                if (!gx.empty()) gx[x.offset(n, c, iy, ix)] += g * wt.at(o, c, ky, kx);
                if (!gw.empty()) gw[wt.offset(o, c, ky, kx)] += g * x.at(n, c, iy, ix);
              }
            }
          }
        }
      }
    }
  }
}

void conv_gemm_forward(const Tensor& x, const Tensor& wt, const Tensor& b,
                       const ConvSpec& s, Tensor& y) {
  const Shape xs = x.shape();
  const Shape ys = y.shape();
  const Hw in{xs.h, xs.w};
  const Hw out{ys.h, ys.w};
  const int k = s.in_channels * s.kernel.h * s.kernel.w;
  const int p = out.h * out.w;
  const bool direct_cols = is_pointwise(s);
  std::vector<double> col(direct_cols ? 0 : static_cast<std::size_t>(k) * p);
  ConstMapMatrix w_mat(wt.data().data(), s.out_channels, k);
  for (int n = 0; n < xs.n; ++n) {
    const double* img = x.data().data() + x.offset(n, 0, 0, 0);
    if (!direct_cols) im2col(img, xs.c, in, s, out, col.data());
    ConstMapMatrix col_mat(direct_cols ? img : col.data(), k, p);
    MapMatrix y_mat(y.data().data() + y.offset(n, 0, 0, 0), s.out_channels, p);
    y_mat.noalias() = w_mat * col_mat;
    if (b.defined()) {
      for (int o = 0; o < s.out_channels; ++o) y_mat.row(o).array() += b.data()[o];
    }
  }
}

void conv_gemm_backward(const Tensor& x, const Tensor& wt, const ConvSpec& s, Shape ys,
                        std::span<const double> gy, GradSlot gx, GradSlot gw,
                        GradSlot gb) {
  const Shape xs = x.shape();
  const Hw in{xs.h, xs.w};
  const Hw out{ys.h, ys.w};
  const int k = s.in_channels * s.kernel.h * s.kernel.w;
  const int p = out.h * out.w;
  const bool direct_cols = is_pointwise(s);
  std::vector<double> col(direct_cols ? 0 : static_cast<std::size_t>(k) * p);
  std::vector<double> gcol(gx.empty() || direct_cols ? 0 : static_cast<std::size_t>(k) * p);
  ConstMapMatrix w_mat(wt.data().data(), s.out_channels, k);
  const std::size_t y_stride = static_cast<std::size_t>(ys.c) * p;
  for (int n = 0; n < xs.n; ++n) {
    ConstMapMatrix gy_mat(gy.data() + n * y_stride, s.out_channels, p);
    if (!gb.empty()) {
      for (int o = 0; o < s.out_channels; ++o) gb[o] += gy_mat.row(o).sum();
    }
    const double* img = x.data().data() + x.offset(n, 0, 0, 0);
    if (!gw.empty()) {
      if (!direct_cols) im2col(img, xs.c, in, s, out, col.data());
      ConstMapMatrix col_mat(direct_cols ? img : col.data(), k, p);
      MapMatrix gw_mat(gw.data(), s.out_channels, k);
      gw_mat.noalias() += gy_mat * col_mat.transpose();
    }
    if (!gx.empty()) {
      double* gimg = gx.data() + x.offset(n, 0, 0, 0);
      if (direct_cols) {
        MapMatrix gx_mat(gimg, k, p);
        gx_mat.noalias() += w_mat.transpose() * gy_mat;
      } else {
        MapMatrix gcol_mat(gcol.data(), k, p);
        gcol_mat.noalias() = w_mat.transpose() * gy_mat;
        col2im(gcol.data(), xs.c, in, s, out, gimg);
      }
    }
  }
}

}  // namespace

Hw ConvSpec::output_size(Hw in) const {
  if (kernel.h < 1 || kernel.w < 1 || stride.h < 1 || stride.w < 1 ||
      padding.h < 0 || padding.w < 0) {
    throw ShapeError("conv2d: invalid kernel " + dims(kernel) + " stride " +
                     dims(stride) + " padding " + dims(padding));
  }
  const int ph = in.h + 2 * padding.h - kernel.h;
  const int pw = in.w + 2 * padding.w - kernel.w;
  if (ph < 0 || pw < 0) {
    throw ShapeError("conv2d: padded input " + dims(in) + " (padding " + dims(padding) +
                     ") smaller than kernel " + dims(kernel));
  }
  return {ph / stride.h + 1, pw / stride.w + 1};
}

Hw PoolSpec::output_size(Hw in) const {
  if (window.h < 1 || window.w < 1 || stride.h < 1 || stride.w < 1) {
    throw ShapeError("maxpool2d: invalid window " + dims(window) + " stride " +
                     dims(stride));
  }
  if (padding.h < 0 || padding.w < 0 || padding.h >= window.h || padding.w >= window.w) {
    throw ShapeError("maxpool2d: padding " + dims(padding) +
                     " must be non-negative and smaller than window " + dims(window));
  }
  const int ph = in.h + 2 * padding.h - window.h;
  const int pw = in.w + 2 * padding.w - window.w;
  if (ph < 0 || pw < 0) {
    throw ShapeError("maxpool2d: padded input " + dims(in) + " smaller than window " +
                     dims(window));
  }
  return {ph / stride.h + 1, pw / stride.w + 1};
}

namespace ops {

Tensor conv2d(Tape& tape, const Tensor& x, const Tensor& weight, const Tensor& bias,
              const ConvSpec& spec, ConvAlgo algo) {
  const Shape xs = x.shape();
  if (xs.c != spec.in_channels) {
    throw ShapeError("conv2d: input channels " + std::to_string(xs.c) +
                     " != spec in_channels " + std::to_string(spec.in_channels));
  }
  if (weight.shape() != spec.weight_shape()) {
    throw ShapeError("conv2d: weight shape " + weight.shape().str() + " != expected " +
                     spec.weight_shape().str());
  }
  if (spec.has_bias != bias.defined()) {
    throw ShapeError(std::string("conv2d: spec ") +
                     (spec.has_bias ? "requires" : "forbids") + " a bias tensor");
  }
  if (bias.defined() && bias.shape() != Shape{1, spec.out_channels, 1, 1}) {
    throw ShapeError("conv2d: bias shape " + bias.shape().str() + " != 1x" +
                     std::to_string(spec.out_channels) + "x1x1");
  }
  const Hw out = spec.output_size({xs.h, xs.w});
  Tensor y(Shape{xs.n, spec.out_channels, out.h, out.w});
  if (algo == ConvAlgo::kDirect) {
    conv_direct_forward(x, weight, bias, spec, y);
  } else {
    conv_gemm_forward(x, weight, bias, spec, y);
  }
  if (tape.wants({&x, &weight, &bias})) {
    const Shape ys = y.shape();
    tape.record("conv2d", {x, weight, bias}, y,
                [x, weight, spec, ys, algo](std::span<const double> gy,
                                            std::span<GradSlot> gin) {
                  if (algo == ConvAlgo::kDirect) {
                    conv_direct_backward(x, weight, spec, ys, gy, gin[0], gin[1], gin[2]);
                  } else {
                    conv_gemm_backward(x, weight, spec, ys, gy, gin[0], gin[1], gin[2]);
                  }
                });
  }
  return y;
}

Tensor maxpool2d(Tape& tape, const Tensor& x, const PoolSpec& spec) {
  const Shape xs = x.shape();
  const Hw out = spec.output_size({xs.h, xs.w});
  Tensor y(Shape{xs.n, xs.c, out.h, out.w});
  const bool record = tape.wants({&x});
  std::vector<std::size_t> argmax(record ? y.numel() : 0);
  std::size_t yi = 0;
  auto xd = x.data();
  for (int n = 0; n < xs.n; ++n) {
    for (int c = 0; c < xs.c; ++c) {
      for (int oy = 0; oy < out.h; ++oy) {
        for (int ox = 0; ox < out.w; ++ox, ++yi) {
          double best = -std::numeric_limits<double>::infinity();
          std::size_t arg = 0;
          for (int ky = 0; ky < spec.window.h; ++ky) {
            const int iy = oy * spec.stride.h - spec.padding.h + ky;
            if (iy < 0 || iy >= xs.h) continue;
            for (int kx = 0; kx < spec.window.w; ++kx) {
              const int ix = ox * spec.stride.w - spec.padding.w + kx;
              if (ix < 0 || ix >= xs.w) continue;
              const std::size_t idx = x.offset(n, c, iy, ix);
              if (xd[idx] > best) {
                best = xd[idx];
                arg = idx;
              }
            }
          }
          y.data()[yi] = best;
          if (record) argmax[yi] = arg;
        }
      }
    }
  }
  if (record) {
    tape.record("maxpool2d", {x}, y,
                [argmax = std::move(argmax)](std::span<const double> gy,
                                             std::span<GradSlot> gin) {
                  for (std::size_t i = 0; i < gy.size(); ++i) gin[0][argmax[i]] += gy[i];
                });
  }
  return y;
}

Tensor relu(Tape& tape, const Tensor& x) {
  Tensor y(x.shape());
  auto xd = x.data();
  auto yd = y.data();
  for (std::size_t i = 0; i < xd.size(); ++i) yd[i] = xd[i] > 0.0 ? xd[i] : 0.0;
  if (tape.wants({&x})) {
    tape.record("relu", {x}, y, [x](std::span<const double> gy, std::span<GradSlot> gin) {
      auto xd = x.data();
      for (std::size_t i = 0; i < gy.size(); ++i) {
        if (xd[i] > 0.0) gin[0][i] += gy[i];
      }
    });
  }
  return y;
}

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  Tensor y(a.shape());
  auto ad = a.data();
  auto bd = b.data();
  auto yd = y.data();
  for (std::size_t i = 0; i < yd.size(); ++i) yd[i] = ad[i] + bd[i];
  if (tape.wants({&a, &b})) {
    tape.record("add", {a, b}, y, [](std::span<const double> gy, std::span<GradSlot> gin) {
      for (GradSlot slot : gin) {
        if (slot.empty()) continue;
        for (std::size_t i = 0; i < gy.size(); ++i) slot[i] += gy[i];
      }
    });
  }
  return y;
}

std::vector<LinearTap> half_pixel_taps(int in, int out) {
  std::vector<LinearTap> taps(out);
  const double scale = static_cast<double>(in) / out;
  for (int d = 0; d < out; ++d) {
    double s = (d + 0.5) * scale - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(in - 1));
    const int lo = static_cast<int>(std::floor(s));
    taps[d] = {lo, std::min(lo + 1, in - 1), s - lo};
  }
  return taps;
}

Tensor bilinear_resize(Tape& tape, const Tensor& x, int out_h, int out_w) {
  const Shape xs = x.shape();
  if (out_h < 1 || out_w < 1) {
    throw ShapeError("bilinear_resize: target size " + std::to_string(out_h) + "x" +
                     std::to_string(out_w) + " must be positive");
  }
  if (xs.h < 1 || xs.w < 1) {
    throw ShapeError("bilinear_resize: empty input " + xs.str());
  }
  const auto ty = half_pixel_taps(xs.h, out_h);
  const auto tx = half_pixel_taps(xs.w, out_w);
  Tensor y(Shape{xs.n, xs.c, out_h, out_w});
  auto xd = x.data();
  auto yd = y.data();
  const std::size_t in_plane = xs.plane();
  const std::size_t out_plane = static_cast<std::size_t>(out_h) * out_w;
  for (int p = 0; p < xs.n * xs.c; ++p) {
    const double* src = xd.data() + p * in_plane;
    double* dst = yd.data() + p * out_plane;
    for (int oy = 0; oy < out_h; ++oy) {
      const LinearTap& r = ty[oy];
      const double* row0 = src + static_cast<std::size_t>(r.lo) * xs.w;
      const double* row1 = src + static_cast<std::size_t>(r.hi) * xs.w;
      for (int ox = 0; ox < out_w; ++ox) {
        const LinearTap& c = tx[ox];
        const double top = row0[c.lo] + c.frac * (row0[c.hi] - row0[c.lo]);
        const double bot = row1[c.lo] + c.frac * (row1[c.hi] - row1[c.lo]);
        dst[static_cast<std::size_t>(oy) * out_w + ox] = top + r.frac * (bot - top);
      }
    }
  }
  if (tape.wants({&x})) {
    tape.record("bilinear_resize", {x}, y,
                [ty, tx, xs, out_h, out_w](std::span<const double> gy,
                                           std::span<GradSlot> gin) {
                  const std::size_t in_plane = xs.plane();
                  const std::size_t out_plane = static_cast<std::size_t>(out_h) * out_w;
                  for (int p = 0; p < xs.n * xs.c; ++p) {
                    double* gsrc = gin[0].data() + p * in_plane;
                    const double* g = gy.data() + p * out_plane;
                    for (int oy = 0; oy < out_h; ++oy) {
                      const LinearTap& r = ty[oy];
                      for (int ox = 0; ox < out_w; ++ox) {
                        const LinearTap& c = tx[ox];
                        const double v = g[static_cast<std::size_t>(oy) * out_w + ox];
                        const double top = v * (1.0 - r.frac);
                        const double bot = v * r.frac;
                        gsrc[r.lo * xs.w + c.lo] += top * (1.0 - c.frac);
                        gsrc[r.lo * xs.w + c.hi] += top * c.frac;
                        gsrc[r.hi * xs.w + c.lo] += bot * (1.0 - c.frac);
                        gsrc[r.hi * xs.w + c.hi] += bot * c.frac;
                      }
                    }
                  }
                });
  }
  return y;
}

Tensor softmax_xent(Tape& tape, const Tensor& scores, const LabelMap& target,
                    std::uint8_t ignore_label) {
  const Shape s = scores.shape();
  if (target.n != s.n || target.h != s.h || target.w != s.w) {
    throw ShapeError("softmax_xent: scores " + s.str() + " vs labels " +
                     std::to_string(target.n) + "x" + std::to_string(target.h) + "x" +
                     std::to_string(target.w));
  }
  const std::size_t plane = s.plane();
  auto sd = scores.data();
  // Probabilities of scored pixels, kept for the backward pass.
  std::vector<double> prob(sd.size(), 0.0);
  std::size_t count = 0;
  double total = 0.0;
  for (int n = 0; n < s.n; ++n) {
    for (int y = 0; y < s.h; ++y) {
      for (int x = 0; x < s.w; ++x) {
        const std::uint8_t t = target.at(n, y, x);
        if (t == ignore_label) continue;
        if (t >= s.c) {
          throw ValidationError("softmax_xent: label " + std::to_string(t) +
                                " out of range [0," + std::to_string(s.c) +
                                ") at pixel (n=" + std::to_string(n) +
                                ", y=" + std::to_string(y) + ", x=" + std::to_string(x) +
                                ")");
        }
        const std::size_t base = static_cast<std::size_t>(n) * s.c * plane +
                                 static_cast<std::size_t>(y) * s.w + x;
        double mx = -std::numeric_limits<double>::infinity();
        for (int k = 0; k < s.c; ++k) mx = std::max(mx, sd[base + k * plane]);
        double z = 0.0;
        for (int k = 0; k < s.c; ++k) {
          const double e = std::exp(sd[base + k * plane] - mx);
          prob[base + k * plane] = e;
          z += e;
        }
        for (int k = 0; k < s.c; ++k) prob[base + k * plane] /= z;
        total += (std::log(z) + mx) - sd[base + t * plane];
        ++count;
      }
    }
  }
  Tensor loss(Shape{1, 1, 1, 1}, count ? total / static_cast<double>(count) : 0.0);
  if (tape.wants({&scores})) {
    tape.record("softmax_xent", {scores}, loss,
                [prob = std::move(prob), target, ignore_label, s, count](
                    std::span<const double> gy, std::span<GradSlot> gin) {
                  if (count == 0) return;
                  const double g = gy[0] / static_cast<double>(count);
                  const std::size_t plane = s.plane();
                  for (int n = 0; n < s.n; ++n) {
                    for (int y = 0; y < s.h; ++y) {
                      for (int x = 0; x < s.w; ++x) {
                        const std::uint8_t t = target.at(n, y, x);
                        if (t == ignore_label) continue;
                        const std::size_t base = static_cast<std::size_t>(n) * s.c * plane +
                                                 static_cast<std::size_t>(y) * s.w + x;
                        for (int k = 0; k < s.c; ++k) {
                          const double onehot = k == t ? 1.0 : 0.0;
                          gin[0][base + k * plane] += g * (prob[base + k * plane] - onehot);
                        }
                      }
                    }
                  }
                });
  }
  return loss;
}

Tensor weighted_sum(Tape& tape, const Tensor& x, const Tensor& weights) {
  check_same_shape(x, weights, "weighted_sum");
  double acc = 0.0;
  auto xd = x.data();
  auto wd = weights.data();
  for (std::size_t i = 0; i < xd.size(); ++i) acc += xd[i] * wd[i];
  Tensor y(Shape{1, 1, 1, 1}, acc);
  if (tape.wants({&x})) {
    tape.record("weighted_sum", {x}, y,
                [weights](std::span<const double> gy, std::span<GradSlot> gin) {
                  auto wd = weights.data();
                  for (std::size_t i = 0; i < wd.size(); ++i) gin[0][i] += gy[0] * wd[i];
                });
  }
  return y;
}

int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

Tensor pad_reflect(Tape& tape, const Tensor& x, int top, int bottom, int left,
                   int right) {
  if (top < 0 || bottom < 0 || left < 0 || right < 0) {
    throw ShapeError("pad_reflect: negative padding");
  }
  const Shape xs = x.shape();
  const Shape ys{xs.n, xs.c, xs.h + top + bottom, xs.w + left + right};
  Tensor y(ys);
  std::vector<std::size_t> src(ys.numel());
  std::size_t yi = 0;
  for (int n = 0; n < ys.n; ++n) {
    for (int c = 0; c < ys.c; ++c) {
      for (int oy = 0; oy < ys.h; ++oy) {
        const int iy = reflect_index(oy - top, xs.h);
        for (int ox = 0; ox < ys.w; ++ox, ++yi) {
          src[yi] = x.offset(n, c, iy, reflect_index(ox - left, xs.w));
          y.data()[yi] = x.data()[src[yi]];
        }
      }
    }
  }
  if (tape.wants({&x})) {
    tape.record("pad_reflect", {x}, y,
                [src = std::move(src)](std::span<const double> gy, std::span<GradSlot> gin) {
                  for (std::size_t i = 0; i < gy.size(); ++i) gin[0][src[i]] += gy[i];
                });
  }
  return y;
}

Tensor crop(Tape& tape, const Tensor& x, int y0, int x0, int h, int w) {
  const Shape xs = x.shape();
  if (y0 < 0 || x0 < 0 || h < 1 || w < 1 || y0 + h > xs.h || x0 + w > xs.w) {
    throw ShapeError("crop: window (" + std::to_string(y0) + "," + std::to_string(x0) +
                     ") " + std::to_string(h) + "x" + std::to_string(w) +
                     " outside input " + xs.str());
  }
  Tensor y(Shape{xs.n, xs.c, h, w});
  for (int n = 0; n < xs.n; ++n) {
    for (int c = 0; c < xs.c; ++c) {
      for (int r = 0; r < h; ++r) {
        const double* src = x.data().data() + x.offset(n, c, y0 + r, x0);
        std::copy(src, src + w, y.data().data() + y.offset(n, c, r, 0));
      }
    }
  }
  if (tape.wants({&x})) {
    tape.record("crop", {x}, y,
                [xs, y0, x0, h, w](std::span<const double> gy, std::span<GradSlot> gin) {
                  std::size_t yi = 0;
                  for (int n = 0; n < xs.n; ++n) {
                    for (int c = 0; c < xs.c; ++c) {
                      for (int r = 0; r < h; ++r) {
                        const std::size_t base =
                            ((static_cast<std::size_t>(n) * xs.c + c) * xs.h + y0 + r) * xs.w +
                            x0;
                        for (int q = 0; q < w; ++q, ++yi) gin[0][base + q] += gy[yi];
                      }
                    }
                  }
                });
  }
  return y;
}

Tensor softmax_channels(const Tensor& scores) {
  const Shape s = scores.shape();
  Tensor p(s);
  const std::size_t plane = s.plane();
  auto sd = scores.data();
  auto pd = p.data();
  for (int n = 0; n < s.n; ++n) {
    for (std::size_t i = 0; i < plane; ++i) {
      const std::size_t base = static_cast<std::size_t>(n) * s.c * plane + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (int k = 0; k < s.c; ++k) mx = std::max(mx, sd[base + k * plane]);
      double z = 0.0;
      for (int k = 0; k < s.c; ++k) {
        pd[base + k * plane] = std::exp(sd[base + k * plane] - mx);
        z += pd[base + k * plane];
      }
      for (int k = 0; k < s.c; ++k) pd[base + k * plane] /= z;
    }
  }
  return p;
}

}  // namespace ops
}  // namespace refinery
