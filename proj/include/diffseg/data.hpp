#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <optional>
#include <string>
#include <vector>

#include "diffseg/common.hpp"
#include "diffseg/rng.hpp"
#include "diffseg/tensor.hpp"

namespace diffseg {

struct SegmentationSample {
  Tensor<float> image;                    // [C,H,W], values in [-1, 1]
  std::optional<Tensor<int32_t>> label;   // [H,W], class indices
  std::string id;
};

// Image-only view: the type under which unlabeled data flows into training,
// so labels are structurally out of reach.
struct ImageView {
  Tensor<float> image;
  std::string id;
};

inline std::vector<ImageView> make_image_views(const std::vector<SegmentationSample>& samples) {
  std::vector<ImageView> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back({s.image, s.id});
  return out;
}

struct ScarcitySplit {
  std::vector<SegmentationSample> labeled;
  std::vector<ImageView> unlabeled;
  double fraction = 0.0;
  uint64_t seed = 0;
};

// Seeded shuffle, first max(1, round(fraction * N)) keep their labels, the
// rest are exposed as image-only views.
inline ScarcitySplit split_label_scarcity(const std::vector<SegmentationSample>& samples,
                                          double fraction, uint64_t seed) {
  require(fraction > 0.0 && fraction <= 1.0,
          "split_label_scarcity: fraction must be in (0, 1]");
  require(!samples.empty(), "split_label_scarcity: empty sample list");
  for (const auto& s : samples)
    require_data(s.label.has_value(),
                 "split_label_scarcity: sample ", s.id, " is unlabeled");
  std::vector<size_t> order(samples.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(Rng::mix(seed, 0x5911ull));
  shuffle_indices(order, rng);

  size_t n_labeled = static_cast<size_t>(
      std::max<int64_t>(1, std::llround(fraction * static_cast<double>(samples.size()))));
  n_labeled = std::min(n_labeled, samples.size());

  ScarcitySplit split;
  split.fraction = fraction;
  split.seed = seed;
  for (size_t i = 0; i < order.size(); ++i) {
    const auto& s = samples[order[i]];
    if (i < n_labeled)
      split.labeled.push_back(s);
    else
      split.unlabeled.push_back({s.image, s.id});
  }
  return split;
}

// ---------------------------------------------------------------------------
// Synthetic shapes benchmark
// ---------------------------------------------------------------------------

struct SynthShape {
  bool is_ellipse = true;
  double cx = 0, cy = 0;    // center, pixels
  double rx = 1, ry = 1;    // semi-axes / half-extents, pixels
  double level = 0.5;       // foreground intensity
};

struct SynthGeometry {
  std::vector<SynthShape> shapes;
  double bg_level = -0.7;
  double grad_x = 0, grad_y = 0;
  double wave_amp = 0, wave_kx = 1, wave_ky = 1, wave_phase = 0;
  double noise_std = 0.08;
};

inline bool synth_shape_contains(const SynthShape& s, int64_t y, int64_t x) {
  double dx = (x + 0.5) - s.cx;
  double dy = (y + 0.5) - s.cy;
  if (s.is_ellipse)
    return (dx * dx) / (s.rx * s.rx) + (dy * dy) / (s.ry * s.ry) <= 1.0;
  return std::abs(dx) <= s.rx && std::abs(dy) <= s.ry;
}

namespace detail {

inline SynthGeometry draw_synth_geometry(Rng& rng, int size) {
  SynthGeometry g;
  g.bg_level = rng.uniform_in(-0.9, -0.45);
  g.grad_x = rng.uniform_in(-0.2, 0.2);
  g.grad_y = rng.uniform_in(-0.2, 0.2);
  g.wave_amp = rng.uniform_in(0.0, 0.1);
  g.wave_kx = rng.uniform_in(1.0, 3.0);
  g.wave_ky = rng.uniform_in(1.0, 3.0);
  g.wave_phase = rng.uniform_in(0.0, 6.283185307179586);
  int count = static_cast<int>(rng.uniform_int(1, 3));
  for (int i = 0; i < count; ++i) {
    SynthShape s;
    s.is_ellipse = rng.uniform() < 0.5;
    s.cx = rng.uniform_in(0.22, 0.78) * size;
    s.cy = rng.uniform_in(0.22, 0.78) * size;
    s.rx = rng.uniform_in(0.10, 0.30) * size;
    s.ry = rng.uniform_in(0.10, 0.30) * size;
    s.level = rng.uniform_in(0.15, 0.9);
    g.shapes.push_back(s);
  }
  return g;
}

inline double synth_foreground_fraction(const SynthGeometry& g, int size) {
  int64_t fg = 0;
  for (int64_t y = 0; y < size; ++y)
    for (int64_t x = 0; x < size; ++x)
      for (const auto& s : g.shapes)
        if (synth_shape_contains(s, y, x)) {
          ++fg;
          break;
        }
  return static_cast<double>(fg) / (static_cast<double>(size) * size);
}

}  // namespace detail

// Geometry for image `index` of the dataset seeded with `seed`. Deterministic;
// re-drawn until the foreground fraction lands inside a sane band.
inline SynthGeometry synth_geometry(uint64_t seed, int index, int size) {
  Rng rng(Rng::mix(seed, static_cast<uint64_t>(index)));
  for (int attempt = 0; attempt < 64; ++attempt) {
    SynthGeometry g = detail::draw_synth_geometry(rng, size);
    double f = detail::synth_foreground_fraction(g, size);
    if (f > 0.03 && f < 0.5) return g;
  }
  throw DataError("synth_geometry: could not hit the foreground band");
}

// Grayscale images of 1-3 ellipses/rectangles over a textured noisy
// background; labels are the exact shape rasterization.
inline std::vector<SegmentationSample> synth_shapes(int n, int size, uint64_t seed) {
  require(n >= 1, "synth_shapes: n must be positive");
  require(size >= 8, "synth_shapes: size too small");
  std::vector<SegmentationSample> out;
  out.reserve(static_cast<size_t>(n));
  for (int idx = 0; idx < n; ++idx) {
    SynthGeometry g = synth_geometry(seed, idx, size);
    Rng noise_rng(Rng::mix(Rng::mix(seed, static_cast<uint64_t>(idx)), 0x9e1));
    Tensor<float> image({1, size, size});
    Tensor<int32_t> label({size, size});
    for (int64_t y = 0; y < size; ++y) {
      for (int64_t x = 0; x < size; ++x) {
        double u = (static_cast<double>(x) + 0.5) / size;
        double v = (static_cast<double>(y) + 0.5) / size;
        double val = g.bg_level + g.grad_x * (u - 0.5) * 2.0 +
                     g.grad_y * (v - 0.5) * 2.0 +
                     g.wave_amp * std::sin(6.283185307179586 *
                                               (g.wave_kx * u + g.wave_ky * v) +
                                           g.wave_phase);
        int32_t lab = 0;
        for (const auto& s : g.shapes)
          if (synth_shape_contains(s, y, x)) {
            val = s.level;
            lab = 1;
          }
        val += g.noise_std * noise_rng.normal();
        image[y * size + x] = static_cast<float>(std::clamp(val, -1.0, 1.0));
        label[y * size + x] = lab;
      }
    }
    SegmentationSample s;
    s.image = std::move(image);
    s.label = std::move(label);
    s.id = "synth-" + std::to_string(seed) + "-" + std::to_string(idx);
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation and resizing
// ---------------------------------------------------------------------------

struct AugmentConfig {
  double p_hflip = 0.5;
  double p_vflip = 0.5;
  double max_rotate_deg = 15.0;
};

// One sampled geometric transform, applied identically to image (bilinear)
// and label (nearest).
struct AugmentTransform {
  bool hflip = false;
  bool vflip = false;
  double angle_rad = 0.0;

  bool is_identity() const { return !hflip && !vflip && angle_rad == 0.0; }

  // Source coordinates (y, x) that output pixel (y, x) samples from.
  std::pair<double, double> source_of(double y, double x, int64_t h, int64_t w) const {
    double cy = (static_cast<double>(h) - 1.0) / 2.0;
    double cx = (static_cast<double>(w) - 1.0) / 2.0;
    double dy = y - cy, dx = x - cx;
    double c = std::cos(angle_rad), s = std::sin(angle_rad);
    double sy = c * dy - s * dx + cy;
    double sx = s * dy + c * dx + cx;
    if (hflip) sx = (static_cast<double>(w) - 1.0) - sx;
    if (vflip) sy = (static_cast<double>(h) - 1.0) - sy;
    return {sy, sx};
  }

  SegmentationSample apply(const SegmentationSample& in) const {
    if (is_identity()) return in;
    const auto& img = in.image;
    int64_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
    SegmentationSample out;
    out.id = in.id;
    out.image = Tensor<float>({c, h, w});
    if (in.label) out.label = Tensor<int32_t>({h, w});
    for (int64_t y = 0; y < h; ++y) {
      for (int64_t x = 0; x < w; ++x) {
        auto [sy, sx] = source_of(static_cast<double>(y), static_cast<double>(x), h, w);
        double cy = std::clamp(sy, 0.0, static_cast<double>(h) - 1.0);
        double cx = std::clamp(sx, 0.0, static_cast<double>(w) - 1.0);
        int64_t y0 = static_cast<int64_t>(std::floor(cy));
        int64_t x0 = static_cast<int64_t>(std::floor(cx));
        int64_t y1 = std::min(y0 + 1, h - 1);
        int64_t x1 = std::min(x0 + 1, w - 1);
        double fy = cy - y0, fx = cx - x0;
        for (int64_t ch = 0; ch < c; ++ch) {
          const float* p = img.data() + ch * h * w;
          double v = (1 - fy) * ((1 - fx) * p[y0 * w + x0] + fx * p[y0 * w + x1]) +
                     fy * ((1 - fx) * p[y1 * w + x0] + fx * p[y1 * w + x1]);
          out.image[ch * h * w + y * w + x] = static_cast<float>(v);
        }
        if (in.label) {
          int64_t ny = std::clamp<int64_t>(static_cast<int64_t>(std::llround(cy)), 0, h - 1);
          int64_t nx = std::clamp<int64_t>(static_cast<int64_t>(std::llround(cx)), 0, w - 1);
          (*out.label)[y * w + x] = (*in.label)[ny * w + nx];
        }
      }
    }
    return out;
  }
};

inline AugmentTransform draw_augment_transform(const AugmentConfig& cfg, Rng& rng) {
  AugmentTransform t;
  t.hflip = rng.uniform() < cfg.p_hflip;
  t.vflip = rng.uniform() < cfg.p_vflip;
  if (cfg.max_rotate_deg > 0.0) {
    double deg = rng.uniform_in(-cfg.max_rotate_deg, cfg.max_rotate_deg);
    t.angle_rad = deg * 3.14159265358979323846 / 180.0;
  }
  return t;
}

inline SegmentationSample augment(const SegmentationSample& in, const AugmentConfig& cfg,
                                  Rng& rng) {
  return draw_augment_transform(cfg, rng).apply(in);
}

// Bilinear for the image, nearest for the label.
inline SegmentationSample resize(const SegmentationSample& in, int64_t th, int64_t tw) {
  require(th >= 1 && tw >= 1, "resize: target must be positive");
  const auto& img = in.image;
  int64_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  SegmentationSample out;
  out.id = in.id;
  out.image = Tensor<float>({c, th, tw});
  if (in.label) out.label = Tensor<int32_t>({th, tw});
  double sy = static_cast<double>(h) / static_cast<double>(th);
  double sx = static_cast<double>(w) / static_cast<double>(tw);
  for (int64_t y = 0; y < th; ++y) {
    for (int64_t x = 0; x < tw; ++x) {
      double cy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(h) - 1.0);
      double cx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(w) - 1.0);
      int64_t y0 = static_cast<int64_t>(std::floor(cy));
      int64_t x0 = static_cast<int64_t>(std::floor(cx));
      int64_t y1 = std::min(y0 + 1, h - 1);
      int64_t x1 = std::min(x0 + 1, w - 1);
      double fy = cy - y0, fx = cx - x0;
      for (int64_t ch = 0; ch < c; ++ch) {
        const float* p = img.data() + ch * h * w;
        double v = (1 - fy) * ((1 - fx) * p[y0 * w + x0] + fx * p[y0 * w + x1]) +
                   fy * ((1 - fx) * p[y1 * w + x0] + fx * p[y1 * w + x1]);
        out.image[ch * th * tw + y * tw + x] = static_cast<float>(v);
      }
      if (in.label) {
        int64_t ny = std::clamp<int64_t>(static_cast<int64_t>(std::llround(cy)), 0, h - 1);
        int64_t nx = std::clamp<int64_t>(static_cast<int64_t>(std::llround(cx)), 0, w - 1);
        (*out.label)[y * tw + x] = (*in.label)[ny * w + nx];
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batch assembly
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> stack_images(const std::vector<const Tensor<float>*>& images) {
  require(!images.empty(), "stack_images: empty batch");
  const auto& first = *images[0];
  require(first.rank() == 3, "stack_images: expects [C,H,W] images");
  int64_t n = static_cast<int64_t>(images.size());
  Tensor<T> out({n, first.dim(0), first.dim(1), first.dim(2)});
  int64_t m = first.numel();
  for (int64_t i = 0; i < n; ++i) {
    require(images[static_cast<size_t>(i)]->same_shape(first),
            "stack_images: inconsistent shapes in batch");
    const float* src = images[static_cast<size_t>(i)]->data();
    T* dst = out.data() + i * m;
    for (int64_t j = 0; j < m; ++j) dst[j] = static_cast<T>(src[j]);
  }
  return out;
}

inline Tensor<int32_t> stack_labels(const std::vector<const Tensor<int32_t>*>& labels) {
  require(!labels.empty(), "stack_labels: empty batch");
  const auto& first = *labels[0];
  require(first.rank() == 2, "stack_labels: expects [H,W] labels");
  int64_t n = static_cast<int64_t>(labels.size());
  Tensor<int32_t> out({n, first.dim(0), first.dim(1)});
  int64_t m = first.numel();
  for (int64_t i = 0; i < n; ++i) {
    require(labels[static_cast<size_t>(i)]->same_shape(first),
            "stack_labels: inconsistent shapes in batch");
    std::memcpy(out.data() + i * m, labels[static_cast<size_t>(i)]->data(),
                sizeof(int32_t) * static_cast<size_t>(m));
  }
  return out;
}

}  // namespace diffseg
