#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "diffseg/data.hpp"
#include "diffseg/inference.hpp"
#include "diffseg/metrics.hpp"

using namespace diffseg;

namespace {

DenoiserConfig tiny_config() {
  DenoiserConfig cfg;
  cfg.image_channels = 1;
  cfg.num_classes = 2;
  cfg.base_width = 4;
  cfg.depth = 2;
  cfg.time_embed_dim = 8;
  return cfg;
}

// Deterministic position-dependent fake segmenter for volumes [C,pd,ph,pw].
struct WaveSegmenter {
  Tensor<float> class_probs(const Tensor<float>& patch, Rng&) const {
    int64_t d = patch.dim(1), h = patch.dim(2), w = patch.dim(3);
    Tensor<float> out({2, d, h, w});
    for (int64_t i = 0; i < d * h * w; ++i) {
      float p1 = 0.5f + 0.4f * std::sin(0.01f * patch[i]);
      out[i] = 1.0f - p1;
      out[d * h * w + i] = p1;
    }
    return out;
  }
};

// Consumes the rng so stream pass-through is observable.
struct NoisySegmenter {
  Tensor<float> class_probs(const Tensor<float>& patch, Rng& rng) const {
    int64_t m = patch.numel() / patch.dim(0);
    Tensor<float> out({2, patch.dim(1), patch.dim(2), patch.dim(3)});
    for (int64_t i = 0; i < m; ++i) {
      float p1 = static_cast<float>(rng.uniform());
      out[i] = 1.0f - p1;
      out[m + i] = p1;
    }
    return out;
  }
};

struct ConstantSegmenter {
  Tensor<float> class_probs(const Tensor<float>& patch, Rng&) const {
    Tensor<float> out({3, patch.dim(1), patch.dim(2), patch.dim(3)});
    int64_t m = patch.numel() / patch.dim(0);
    for (int64_t i = 0; i < m; ++i) {
      out[i] = 0.2f;
      out[m + i] = 0.7f;
      out[2 * m + i] = 0.1f;
    }
    return out;
  }
};

}  // namespace

TEST_CASE("generate_mask shape, range, determinism", "[inference]") {
  auto s = build_linear_schedule(1000, 0.0001, 0.02);
  Rng init(1);
  auto model = init_parameters<float>(tiny_config(), init);
  Rng data_rng(2);
  auto image = normal_tensor<float>({1, 16, 16}, data_rng);

  Rng r1(5);
  auto mask = generate_mask(model, image, s, 2, r1);
  REQUIRE(mask.shape() == std::vector<int64_t>({16, 16}));
  for (int64_t i = 0; i < mask.numel(); ++i) {
    REQUIRE(mask[i] >= 0);
    REQUIRE(mask[i] < 2);
  }

  Rng r2(5), r3(5);
  auto m1 = generate_mask(model, image, s, 1, r2);
  auto m2 = generate_mask(model, image, s, 1, r3);
  REQUIRE(tensors_equal(m1, m2));
}

TEST_CASE("ensembling reduces DC variance across noise seeds", "[inference][heavy]") {
  auto s = build_linear_schedule(1000, 0.0001, 0.02);
  Rng init(7);
  auto model = init_parameters<float>(tiny_config(), init);
  auto samples = synth_shapes(20, 32, 404);

  auto var_for = [&](int ensemble) {
    double mean_var = 0;
    for (const auto& smp : samples) {
      std::vector<double> dcs;
      for (uint64_t seed = 1; seed <= 10; ++seed) {
        Rng rng(seed * 31);
        auto pred = generate_mask(model, smp.image, s, ensemble, rng);
        dcs.push_back(dice(pred, *smp.label, 1));
      }
      double v = sample_stddev(dcs);
      mean_var += v * v;
    }
    return mean_var / static_cast<double>(samples.size());
  };

  double v1 = var_for(1);
  double v8 = var_for(8);
  REQUIRE(v8 <= v1 + 1e-9);
}

TEST_CASE("window starts cover the axis and clamp flush", "[inference]") {
  auto st = window_starts(100, 96, 48);
  REQUIRE(st == std::vector<int64_t>({0, 4}));
  auto st2 = window_starts(96, 96, 48);
  REQUIRE(st2 == std::vector<int64_t>({0}));
  auto st3 = window_starts(200, 96, 48);
  REQUIRE(st3 == std::vector<int64_t>({0, 48, 96, 104}));
  REQUIRE_THROWS_AS(window_starts(50, 96, 48), ConfigError);
}

TEST_CASE("sliding window equals generate_mask on a single-patch volume", "[inference]") {
  Tensor<float> volume({1, 8, 10, 12});
  Rng fill(3);
  fill_normal(volume, fill);

  SlidingWindowSpec spec;
  spec.patch_d = 8;
  spec.patch_h = 10;
  spec.patch_w = 12;

  NoisySegmenter seg;
  Rng r1(9), r2(9);
  auto via_window = sliding_window_predict<float>(seg, volume, spec, r1);
  auto direct = generate_mask<float>(seg, volume, r2);
  REQUIRE(tensors_equal(via_window, direct));
}

TEST_CASE("sliding window coverage matches the brute-force tiling oracle",
          "[inference]") {
  // 100x100x90 dummy volume, paper-sized patches, 50% overlap
  Tensor<float> volume({1, 100, 100, 90});
  Rng fill(4);
  fill_normal(volume, fill);

  SlidingWindowSpec spec;
  spec.patch_d = 96;
  spec.patch_h = 96;
  spec.patch_w = 80;
  spec.overlap_fraction = 0.5;

  WaveSegmenter seg;
  Rng rng(1);
  auto res = sliding_window_predict_full<float>(seg, volume, spec, rng);

  // oracle: enumerate starts by a separate while-loop formulation and count
  auto oracle_starts = [](int64_t dim, int64_t patch, int64_t stride) {
    std::vector<int64_t> out;
    int64_t s = 0;
    while (true) {
      if (s + patch >= dim) {
        out.push_back(dim - patch);
        break;
      }
      out.push_back(s);
      s += stride;
    }
    return out;
  };
  auto zs = oracle_starts(100, 96, 48);
  auto ys = oracle_starts(100, 96, 48);
  auto xs = oracle_starts(90, 80, 40);
  Tensor<int32_t> want({100, 100, 90});
  for (int64_t z0 : zs)
    for (int64_t y0 : ys)
      for (int64_t x0 : xs)
        for (int64_t z = 0; z < 96; ++z)
          for (int64_t y = 0; y < 96; ++y)
            for (int64_t x = 0; x < 80; ++x)
              want[((z0 + z) * 100 + y0 + y) * 90 + x0 + x] += 1;

  REQUIRE(tensors_equal(res.contributions, want));
  int32_t mn = want[0], mx = want[0];
  for (int64_t i = 0; i < want.numel(); ++i) {
    mn = std::min(mn, want[i]);
    mx = std::max(mx, want[i]);
  }
  REQUIRE(mn >= 1);        // full coverage
  REQUIRE(mx >= 2);        // overlap regions exist in every axis pair
}

TEST_CASE("constant-probability model yields a constant label map", "[inference]") {
  Tensor<float> volume({2, 10, 12, 14});
  Rng fill(5);
  fill_normal(volume, fill);
  SlidingWindowSpec spec;
  spec.patch_d = 6;
  spec.patch_h = 8;
  spec.patch_w = 8;
  ConstantSegmenter seg;
  Rng rng(2);
  auto labels = sliding_window_predict<float>(seg, volume, spec, rng);
  for (int64_t i = 0; i < labels.numel(); ++i) REQUIRE(labels[i] == 1);
}

TEST_CASE("volume smaller than patch is rejected", "[inference]") {
  Tensor<float> volume({1, 4, 4, 4});
  SlidingWindowSpec spec;
  spec.patch_d = 8;
  spec.patch_h = 8;
  spec.patch_w = 8;
  ConstantSegmenter seg;
  Rng rng(1);
  REQUIRE_THROWS_AS(sliding_window_predict<float>(seg, volume, spec, rng), ConfigError);
}
