#pragma once

#include <cmath>
#include <concepts>
#include <cstring>
#include <vector>

#include "diffseg/denoiser.hpp"
#include "diffseg/nn_ops.hpp"
#include "diffseg/rng.hpp"
#include "diffseg/schedule.hpp"
#include "diffseg/tensor.hpp"

namespace diffseg {

// Anything with class_probs(image, rng) -> per-class probabilities of the
// same spatial shape works as a segmenter; the diffusion model, fake models
// in tests, and the sliding-window stitcher all meet it.
template <typename S, typename T>
concept Segmenter = requires(S s, const Tensor<T>& img, Rng& rng) {
  { s.class_probs(img, rng) } -> std::same_as<Tensor<T>>;
};

// Mask generation for a trained dual-pathway model: averages the softmax of
// the mask pathway fed with pure noise at t = T over `ensemble` independent
// draws. Single-pass by design; training only ever exercises one mask-pathway
// pass from pure noise.
template <typename T>
class DiffusionSegmenter {
 public:
  DiffusionSegmenter(DualPathwayDenoiser<T>& model, const NoiseSchedule& schedule,
                     int ensemble)
      : model_(model), schedule_(schedule), ensemble_(ensemble) {
    require(ensemble_ >= 1, "segmenter: ensemble must be >= 1");
  }

  // image: [C,H,W] -> probabilities [num_classes,H,W]
  Tensor<T> class_probs(const Tensor<T>& image, Rng& rng) const {
    require(image.rank() == 3, "segmenter: expects [C,H,W]");
    int64_t h = image.dim(1), w = image.dim(2);
    int k = model_.config().num_classes;
    auto batch = image.reshaped({1, image.dim(0), h, w});
    Tensor<T> acc({k, h, w});
    std::vector<int> ts = {schedule_.steps};
    for (int e = 0; e < ensemble_; ++e) {
      auto noise = pure_noise_batch<T>({1, k, h, w}, ts, schedule_, rng);
      auto logits = model_.forward_mask_pathway(batch, noise, ts);
      auto probs = softmax_channels_tensor(logits);
      for (int64_t i = 0; i < acc.numel(); ++i) acc[i] += probs[i];
    }
    for (int64_t i = 0; i < acc.numel(); ++i) acc[i] /= static_cast<T>(ensemble_);
    return acc;
  }

 private:
  DualPathwayDenoiser<T>& model_;
  const NoiseSchedule& schedule_;
  int ensemble_;
};

template <typename T, Segmenter<T> S>
Tensor<int32_t> generate_mask(const S& segmenter, const Tensor<T>& image, Rng& rng) {
  return argmax_classes(segmenter.class_probs(image, rng));
}

template <typename T>
Tensor<int32_t> generate_mask(DualPathwayDenoiser<T>& model, const Tensor<T>& image,
                              const NoiseSchedule& schedule, int ensemble, Rng& rng) {
  DiffusionSegmenter<T> seg(model, schedule, ensemble);
  return generate_mask<T>(seg, image, rng);
}

// ---------------------------------------------------------------------------
// Sliding-window volumetric inference
// ---------------------------------------------------------------------------

struct SlidingWindowSpec {
  int64_t patch_d = 80, patch_h = 96, patch_w = 96;
  double overlap_fraction = 0.5;

  void validate() const {
    require(patch_d >= 1 && patch_h >= 1 && patch_w >= 1,
            "sliding window: patch sizes must be positive");
    require(overlap_fraction >= 0.0 && overlap_fraction < 1.0,
            "sliding window: overlap must be in [0, 1)");
  }
};

// Window starts along one axis: a stride grid with the last window clamped
// flush to the end so every voxel is covered.
inline std::vector<int64_t> window_starts(int64_t dim, int64_t patch, int64_t stride) {
  require(dim >= patch, "sliding window: volume smaller than patch");
  std::vector<int64_t> starts;
  for (int64_t s = 0;; s += stride) {
    if (s + patch >= dim) {
      starts.push_back(dim - patch);
      break;
    }
    starts.push_back(s);
  }
  return starts;
}

template <typename T>
struct SlidingWindowResult {
  Tensor<int32_t> labels;        // [D,H,W]
  Tensor<int32_t> contributions; // [D,H,W] patch count per voxel
};

// Tiles the volume on the stride grid implied by the overlap, averages
// per-class probabilities uniformly in overlaps, then takes the argmax.
// patch_probs: [C, pd, ph, pw] -> [K, pd, ph, pw].
template <typename T, Segmenter<T> S>
SlidingWindowResult<T> sliding_window_predict_full(const S& segmenter,
                                                   const Tensor<T>& volume,
                                                   const SlidingWindowSpec& spec,
                                                   Rng& rng) {
  spec.validate();
  require(volume.rank() == 4, "sliding window: expects [C,D,H,W]");
  int64_t d = volume.dim(1), h = volume.dim(2), w = volume.dim(3);
  int64_t c = volume.dim(0);
  auto stride_of = [&](int64_t patch) {
    int64_t s = static_cast<int64_t>(std::llround(patch * (1.0 - spec.overlap_fraction)));
    return std::max<int64_t>(1, s);
  };
  auto zs = window_starts(d, spec.patch_d, stride_of(spec.patch_d));
  auto ys = window_starts(h, spec.patch_h, stride_of(spec.patch_h));
  auto xs = window_starts(w, spec.patch_w, stride_of(spec.patch_w));

  Tensor<double> acc;  // [K,D,H,W], allocated after the first patch
  Tensor<int32_t> counts({d, h, w});
  int64_t k = 0;
  Tensor<T> patch({c, spec.patch_d, spec.patch_h, spec.patch_w});
  for (int64_t z0 : zs)
    for (int64_t y0 : ys)
      for (int64_t x0 : xs) {
        for (int64_t cc = 0; cc < c; ++cc)
          for (int64_t z = 0; z < spec.patch_d; ++z)
            for (int64_t y = 0; y < spec.patch_h; ++y) {
              const T* src = volume.data() +
                             ((cc * d + z0 + z) * h + y0 + y) * w + x0;
              T* dst = patch.data() +
                       ((cc * spec.patch_d + z) * spec.patch_h + y) * spec.patch_w;
              std::memcpy(dst, src, sizeof(T) * static_cast<size_t>(spec.patch_w));
            }
        Tensor<T> probs = segmenter.class_probs(patch, rng);
        if (!acc.defined()) {
          k = probs.dim(0);
          acc = Tensor<double>({k, d, h, w});
        }
        require(probs.dim(0) == k, "sliding window: class count changed between patches");
        for (int64_t cc = 0; cc < k; ++cc)
          for (int64_t z = 0; z < spec.patch_d; ++z)
            for (int64_t y = 0; y < spec.patch_h; ++y) {
              double* dst = acc.data() + ((cc * d + z0 + z) * h + y0 + y) * w + x0;
              const T* src = probs.data() +
                             ((cc * spec.patch_d + z) * spec.patch_h + y) * spec.patch_w;
              for (int64_t x = 0; x < spec.patch_w; ++x) dst[x] += src[x];
            }
        for (int64_t z = 0; z < spec.patch_d; ++z)
          for (int64_t y = 0; y < spec.patch_h; ++y) {
            int32_t* dst = counts.data() + ((z0 + z) * h + y0 + y) * w + x0;
            for (int64_t x = 0; x < spec.patch_w; ++x) dst[x] += 1;
          }
      }

  SlidingWindowResult<T> out{Tensor<int32_t>({d, h, w}), counts};
  for (int64_t v = 0; v < d * h * w; ++v) {
    double best = -1.0;
    int32_t arg = 0;
    for (int64_t cc = 0; cc < k; ++cc) {
      double p = acc[cc * d * h * w + v] / counts[v];
      if (p > best) {
        best = p;
        arg = static_cast<int32_t>(cc);
      }
    }
    out.labels[v] = arg;
  }
  return out;
}

template <typename T, Segmenter<T> S>
Tensor<int32_t> sliding_window_predict(const S& segmenter, const Tensor<T>& volume,
                                       const SlidingWindowSpec& spec, Rng& rng) {
  return sliding_window_predict_full<T>(segmenter, volume, spec, rng).labels;
}

}  // namespace diffseg
