#include "refinery/dataio.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "refinery/blob.hpp"
#include "refinery/error.hpp"
#include "refinery/ops.hpp"

namespace refinery {
namespace {

namespace fs = std::filesystem;

// Shape geometry in doubled pixel units: pixel (x, y) has centre
// (2x + 1, 2y + 1), so every inside test is exact integer arithmetic.
struct ShapeInstance {
  ShapeKind kind;
  int cx2 = 0;  // doubled centre
  int cy2 = 0;
  int r = 0;    // half extent in pixels
  int ry = 0;   // rectangle vertical half extent
  bool flip = false;  // triangle pointing down
  std::uint8_t color[3] = {0, 0, 0};

  bool inside(int x, int y) const {
    const long dx = 2L * x + 1 - cx2;
    const long dy = 2L * y + 1 - cy2;
    const long R = 2L * r;
    switch (kind) {
      case ShapeKind::kDisk: return dx * dx + dy * dy <= R * R;
      case ShapeKind::kRectangle: return std::labs(dx) <= R && std::labs(dy) <= 2L * ry;
      case ShapeKind::kTriangle: {
        // Apex at (0, -R), base from (-R, R) to (R, R); flipped vertically on demand.
        const long v = flip ? -dy : dy;
        if (v > R) return false;
        // Two slanted edges: |dx| <= (v + R) / 2
        return 2 * std::labs(dx) <= v + R;
      }
      case ShapeKind::kCross: {
        const long ax = std::labs(dx), ay = std::labs(dy);
        return (ax <= R && 3 * ay <= R) || (ay <= R && 3 * ax <= R);
      }
      case ShapeKind::kRing: {
        const long d = dx * dx + dy * dy;
        return d <= R * R && 4 * d > R * R;
      }
    }
    return false;
  }
};

std::uint8_t clamp_u8(int v) { return static_cast<std::uint8_t>(std::clamp(v, 0, 255)); }

int color_distance2(const std::uint8_t* a, const int* b) {
  int d = 0;
  for (int c = 0; c < 3; ++c) d += (a[c] - b[c]) * (a[c] - b[c]);
  return d;
}

std::string read_token(const std::vector<std::uint8_t>& bytes, std::size_t& pos) {
  for (;;) {
    while (pos < bytes.size() && std::isspace(bytes[pos])) ++pos;
    if (pos < bytes.size() && bytes[pos] == '#') {
      while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      continue;
    }
    break;
  }
  std::string tok;
  while (pos < bytes.size() && !std::isspace(bytes[pos]) && bytes[pos] != '#') {
    tok.push_back(static_cast<char>(bytes[pos++]));
  }
  return tok;
}

int header_int(const std::vector<std::uint8_t>& bytes, std::size_t& pos, const char* what) {
  const std::string tok = read_token(bytes, pos);
  if (tok.empty() || !std::all_of(tok.begin(), tok.end(), ::isdigit) || tok.size() > 9) {
    throw IoError(std::string("malformed netpbm header: bad ") + what + " '" + tok + "'");
  }
  return std::stoi(tok);
}

// Parses "P?\n w h\n maxval<ws>" and returns the payload offset.
std::size_t parse_netpbm_header(const std::vector<std::uint8_t>& bytes, const char* magic,
                                int& w, int& h) {
  std::size_t pos = 0;
  if (read_token(bytes, pos) != magic) {
    throw IoError(std::string("malformed netpbm header: expected ") + magic);
  }
  w = header_int(bytes, pos, "width");
  h = header_int(bytes, pos, "height");
  const int maxval = header_int(bytes, pos, "maxval");
  if (w < 1 || h < 1) throw IoError("malformed netpbm header: empty image");
  if (maxval != 255) throw IoError("unsupported netpbm maxval " + std::to_string(maxval));
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) {
    throw IoError("malformed netpbm header: missing separator before pixel data");
  }
  return pos + 1;
}

fs::path resolve(const fs::path& base, const std::string& p) {
  fs::path path(p);
  return path.is_absolute() ? path : base / path;
}

}  // namespace

void SegSample::validate(int num_classes) const {
  const Shape s = image.shape();
  if (s.n != 1 || s.c != 3) throw ValidationError("sample image must be 1x3xHxW, got " + s.str());
  if (mask.n != 1 || mask.h != s.h || mask.w != s.w) {
    throw ValidationError("sample mask " + std::to_string(mask.h) + "x" +
                          std::to_string(mask.w) + " does not match image " +
                          std::to_string(s.h) + "x" + std::to_string(s.w));
  }
  for (std::uint8_t v : mask.labels) {
    if (v != kIgnoreLabel && v >= num_classes) {
      throw ValidationError("mask label " + std::to_string(v) + " outside [0," +
                            std::to_string(num_classes) + ")");
    }
  }
}

SegSample gen_synthetic_sample(int h, int w, int num_classes, std::uint64_t seed,
                               std::uint64_t index) {
  if (num_classes < 2 || num_classes > kMaxSyntheticClasses) {
    throw ValidationError("synthetic data supports 2.." + std::to_string(kMaxSyntheticClasses) +
                          " classes (background + " +
                          std::to_string(kMaxSyntheticClasses - 1) + " shape types), got " +
                          std::to_string(num_classes));
  }
  if (h < 8 || w < 8) throw ValidationError("synthetic images must be at least 8x8");
  SplitMix64 rng(mix_seed(seed, index));

  int bg[3];
  for (int& c : bg) c = rng.range(40, 215);

  const int side = std::min(h, w);
  // Centres are drawn from [r + 1, side - r - 2], so r may not exceed fit.
  const int fit = (side - 3) / 2;
  const int r_min = std::min(std::max(3, side / 10), fit);
  const int r_max = std::min(std::max(r_min, side / 5), fit);
  const int wanted = rng.range(1, 4);
  std::vector<ShapeInstance> shapes;
  std::vector<std::array<int, 4>> boxes;  // x0, y0, x1, y1 inclusive, with margin
  for (int s = 0; s < wanted; ++s) {
    for (int attempt = 0; attempt < 40; ++attempt) {
      ShapeInstance inst;
      inst.kind = static_cast<ShapeKind>(rng.range(1, num_classes - 1));
      inst.r = rng.range(r_min, r_max);
      inst.ry = std::max(2, inst.r * rng.range(6, 10) / 10);
      inst.flip = rng.range(0, 1) == 1;
      const int cx = rng.range(inst.r + 1, w - inst.r - 2);
      const int cy = rng.range(inst.r + 1, h - inst.r - 2);
      inst.cx2 = 2 * cx + 1;
      inst.cy2 = 2 * cy + 1;
      const std::array<int, 4> box{cx - inst.r - 2, cy - inst.r - 2, cx + inst.r + 2,
                                   cy + inst.r + 2};
      bool overlap = false;
      for (const auto& b : boxes) {
        if (box[0] <= b[2] && b[0] <= box[2] && box[1] <= b[3] && b[1] <= box[3]) {
          overlap = true;
          break;
        }
      }
      // Colour draws happen regardless of placement so the stream stays simple.
      do {
        for (auto& c : inst.color) c = static_cast<std::uint8_t>(rng.range(0, 255));
      } while (color_distance2(inst.color, bg) < 100 * 100);
      if (overlap) continue;
      shapes.push_back(inst);
      boxes.push_back(box);
      break;
    }
  }

  SegSample out;
  out.image = Tensor(Shape{1, 3, h, w});
  out.mask = LabelMap(1, h, w, 0);
  std::vector<std::uint8_t> rgb(static_cast<std::size_t>(h) * w * 3);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) rgb[(static_cast<std::size_t>(y) * w + x) * 3 + c] = bg[c];
    }
  }
  for (const auto& s : shapes) {
    const int cx = (s.cx2 - 1) / 2;
    const int cy = (s.cy2 - 1) / 2;
    for (int y = std::max(0, cy - s.r - 1); y <= std::min(h - 1, cy + s.r + 1); ++y) {
      for (int x = std::max(0, cx - s.r - 1); x <= std::min(w - 1, cx + s.r + 1); ++x) {
        if (!s.inside(x, y)) continue;
        for (int c = 0; c < 3; ++c) rgb[(static_cast<std::size_t>(y) * w + x) * 3 + c] = s.color[c];
        const bool edge = x == 0 || y == 0 || x == w - 1 || y == h - 1 || !s.inside(x - 1, y) ||
                          !s.inside(x + 1, y) || !s.inside(x, y - 1) || !s.inside(x, y + 1);
        out.mask.at(0, y, x) = edge ? kIgnoreLabel : static_cast<std::uint8_t>(s.kind);
      }
    }
  }
  // Integer noise: sum of four uniform draws in [-6, 6].
  for (auto& v : rgb) {
    int noise = 0;
    for (int k = 0; k < 4; ++k) noise += rng.range(-6, 6);
    v = clamp_u8(v + noise);
  }
  out.image = from_rgb(RgbImage{h, w, std::move(rgb)});
  return out;
}

Dataset gen_synthetic(int n_samples, int h, int w, int num_classes, std::uint64_t seed) {
  if (n_samples < 0) throw ValidationError("sample count must be non-negative");
  Dataset ds;
  ds.num_classes = num_classes;
  if (num_classes < 2 || num_classes > kMaxSyntheticClasses) {
    gen_synthetic_sample(h, w, num_classes, seed, 0);  // throws the descriptive error
  }
  ds.samples.reserve(n_samples);
  for (int i = 0; i < n_samples; ++i) {
    ds.samples.push_back(gen_synthetic_sample(h, w, num_classes, seed, i));
  }
  return ds;
}

int scaled_extent(int size, double scale) {
  return std::max(1, static_cast<int>(std::lround(size * scale)));
}

LabelMap resize_labels_nearest(const LabelMap& labels, int out_h, int out_w) {
  LabelMap out(labels.n, out_h, out_w);
  for (int b = 0; b < labels.n; ++b) {
    for (int y = 0; y < out_h; ++y) {
      const int sy = std::min(labels.h - 1, static_cast<int>(((2L * y + 1) * labels.h) / (2L * out_h)));
      for (int x = 0; x < out_w; ++x) {
        const int sx =
            std::min(labels.w - 1, static_cast<int>(((2L * x + 1) * labels.w) / (2L * out_w)));
        out.at(b, y, x) = labels.at(b, sy, sx);
      }
    }
  }
  return out;
}

Tensor resize_image_bilinear(const Tensor& image, int out_h, int out_w) {
  if (image.shape().h == out_h && image.shape().w == out_w) return image.clone();
  Tape tape(Tape::Mode::kInference);
  return ops::bilinear_resize(tape, image, out_h, out_w);
}

SegSample hflip(const SegSample& s) {
  SegSample out{s.image.clone(), s.mask};
  const Shape sh = s.image.shape();
  for (int n = 0; n < sh.n; ++n) {
    for (int c = 0; c < sh.c; ++c) {
      for (int y = 0; y < sh.h; ++y) {
        for (int x = 0; x < sh.w; ++x) out.image.at(n, c, y, x) = s.image.at(n, c, y, sh.w - 1 - x);
      }
    }
  }
  for (int b = 0; b < s.mask.n; ++b) {
    for (int y = 0; y < s.mask.h; ++y) {
      for (int x = 0; x < s.mask.w; ++x) out.mask.at(b, y, x) = s.mask.at(b, y, s.mask.w - 1 - x);
    }
  }
  return out;
}

AugmentDraw draw_augment(const AugmentSpec& spec, int h, int w, SplitMix64& rng) {
  AugmentDraw d;
  d.scale = rng.uniform(spec.min_scale, spec.max_scale);
  const int sh = scaled_extent(h, d.scale);
  const int sw = scaled_extent(w, d.scale);
  d.offset_y = rng.range(std::min(0, sh - spec.crop_h), std::max(0, sh - spec.crop_h));
  d.offset_x = rng.range(std::min(0, sw - spec.crop_w), std::max(0, sw - spec.crop_w));
  d.flip = rng.uniform() < spec.flip_probability;
  return d;
}

SegSample apply_augment(const SegSample& sample, const AugmentDraw& draw, int crop_h,
                        int crop_w) {
  const Shape s = sample.image.shape();
  const int sh = scaled_extent(s.h, draw.scale);
  const int sw = scaled_extent(s.w, draw.scale);
  const Tensor img = resize_image_bilinear(sample.image, sh, sw);
  const LabelMap lab = (sh == s.h && sw == s.w) ? sample.mask
                                                : resize_labels_nearest(sample.mask, sh, sw);
  SegSample out;
  out.image = Tensor(Shape{s.n, s.c, crop_h, crop_w});
  out.mask = LabelMap(s.n, crop_h, crop_w, kIgnoreLabel);
  for (int y = 0; y < crop_h; ++y) {
    const int sy = y + draw.offset_y;
    const bool in_y = sy >= 0 && sy < sh;
    const int ry = ops::reflect_index(sy, sh);
    for (int x = 0; x < crop_w; ++x) {
      const int sx = x + draw.offset_x;
      const bool in_x = sx >= 0 && sx < sw;
      const int rx = ops::reflect_index(sx, sw);
      for (int n = 0; n < s.n; ++n) {
        for (int c = 0; c < s.c; ++c) out.image.at(n, c, y, x) = img.at(n, c, ry, rx);
        if (in_y && in_x) out.mask.at(n, y, x) = lab.at(n, sy, sx);
      }
    }
  }
  return draw.flip ? hflip(out) : out;
}

SegSample augment(const SegSample& sample, const AugmentSpec& spec, SplitMix64& rng) {
  const Shape s = sample.image.shape();
  return apply_augment(sample, draw_augment(spec, s.h, s.w, rng), spec.crop_h, spec.crop_w);
}

std::vector<std::uint8_t> encode_ppm(const RgbImage& img) {
  const std::string header =
      "P6\n" + std::to_string(img.w) + " " + std::to_string(img.h) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), img.rgb.begin(), img.rgb.end());
  return out;
}

RgbImage decode_ppm(const std::vector<std::uint8_t>& bytes) {
  RgbImage img;
  const std::size_t pos = parse_netpbm_header(bytes, "P6", img.w, img.h);
  const std::size_t len = static_cast<std::size_t>(img.w) * img.h * 3;
  if (bytes.size() - pos < len) throw IoError("truncated PPM pixel data");
  img.rgb.assign(bytes.begin() + pos, bytes.begin() + pos + len);
  return img;
}

std::vector<std::uint8_t> encode_pgm(const GrayImage& img) {
  const std::string header =
      "P5\n" + std::to_string(img.w) + " " + std::to_string(img.h) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), img.pixels.begin(), img.pixels.end());
  return out;
}

GrayImage decode_pgm(const std::vector<std::uint8_t>& bytes) {
  GrayImage img;
  const std::size_t pos = parse_netpbm_header(bytes, "P5", img.w, img.h);
  const std::size_t len = static_cast<std::size_t>(img.w) * img.h;
  if (bytes.size() - pos < len) throw IoError("truncated PGM pixel data");
  img.pixels.assign(bytes.begin() + pos, bytes.begin() + pos + len);
  return img;
}

RgbImage to_rgb(const Tensor& image) {
  const Shape s = image.shape();
  if (s.n != 1 || s.c != 3) throw ShapeError("to_rgb needs a 1x3xHxW tensor, got " + s.str());
  RgbImage img{s.h, s.w, std::vector<std::uint8_t>(static_cast<std::size_t>(s.h) * s.w * 3)};
  for (int y = 0; y < s.h; ++y) {
    for (int x = 0; x < s.w; ++x) {
      for (int c = 0; c < 3; ++c) {
        const double v = std::clamp(image.at(0, c, y, x), 0.0, 1.0) * 255.0;
        img.rgb[(static_cast<std::size_t>(y) * s.w + x) * 3 + c] =
            static_cast<std::uint8_t>(std::lround(v));
      }
    }
  }
  return img;
}

Tensor from_rgb(const RgbImage& img) {
  Tensor t(Shape{1, 3, img.h, img.w});
  for (int y = 0; y < img.h; ++y) {
    for (int x = 0; x < img.w; ++x) {
      for (int c = 0; c < 3; ++c) {
        t.at(0, c, y, x) = img.rgb[(static_cast<std::size_t>(y) * img.w + x) * 3 + c] / 255.0;
      }
    }
  }
  return t;
}

GrayImage to_gray(const LabelMap& labels) {
  if (labels.n != 1) throw ShapeError("to_gray needs a single label map");
  return GrayImage{labels.h, labels.w, labels.labels};
}

LabelMap from_gray(const GrayImage& img) {
  LabelMap m(1, img.h, img.w);
  m.labels = img.pixels;
  return m;
}

void write_sample(const SegSample& s, const std::string& image_path,
                  const std::string& mask_path) {
  write_file_bytes(image_path, encode_ppm(to_rgb(s.image)));
  write_file_bytes(mask_path, encode_pgm(to_gray(s.mask)));
}

SegSample read_sample(const std::string& image_path, const std::string& mask_path) {
  const RgbImage img = decode_ppm(read_file_bytes(image_path));
  const GrayImage mask = decode_pgm(read_file_bytes(mask_path));
  if (img.h != mask.h || img.w != mask.w) {
    throw IoError("image " + image_path + " is " + std::to_string(img.w) + "x" +
                  std::to_string(img.h) + " but mask " + mask_path + " is " +
                  std::to_string(mask.w) + "x" + std::to_string(mask.h));
  }
  return SegSample{from_rgb(img), from_gray(mask)};
}

std::vector<ManifestEntry> read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path);
  const fs::path base = fs::path(path).parent_path();
  std::vector<ManifestEntry> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || line.find('\t', tab + 1) != std::string::npos) {
      throw IoError(path + ":" + std::to_string(lineno) + ": expected image<TAB>mask");
    }
    out.push_back({resolve(base, line.substr(0, tab)).string(),
                   resolve(base, line.substr(tab + 1)).string()});
  }
  return out;
}

void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write manifest " + path);
  for (const auto& e : entries) out << e.image << '\t' << e.mask << '\n';
  if (!out) throw IoError("write failed for " + path);
}

void write_dataset(const Dataset& ds, const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir + ": " + ec.message());
  std::vector<ManifestEntry> entries;
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    char stem[32];
    std::snprintf(stem, sizeof(stem), "%05zu", i);
    const std::string image = std::string(stem) + ".ppm";
    const std::string mask = std::string(stem) + ".pgm";
    write_sample(ds.samples[i], (fs::path(dir) / image).string(), (fs::path(dir) / mask).string());
    entries.push_back({image, mask});
  }
  write_manifest((fs::path(dir) / "manifest.tsv").string(), entries);
}

Dataset read_dataset(const std::string& manifest_path, int num_classes) {
  Dataset ds;
  ds.num_classes = num_classes;
  for (const auto& e : read_manifest(manifest_path)) {
    SegSample s = read_sample(e.image, e.mask);
    try {
      s.validate(num_classes);
    } catch (const ValidationError& err) {
      throw ValidationError(e.mask + ": " + err.what());
    }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

}  // namespace refinery
