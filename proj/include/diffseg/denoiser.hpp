#pragma once

#include <cmath>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "diffseg/adam.hpp"
#include "diffseg/autodiff.hpp"
#include "diffseg/nn_ops.hpp"
#include "diffseg/rng.hpp"
#include "diffseg/tensor.hpp"

namespace diffseg {

struct DenoiserConfig {
  int image_channels = 1;
  int num_classes = 2;
  int base_width = 16;   // channels at the first level
  int depth = 3;         // number of down/up levels
  int time_embed_dim = 32;

  void validate() const {
    require(image_channels >= 1, "denoiser: image_channels must be positive");
    require(num_classes >= 2, "denoiser: num_classes must be >= 2");
    require(base_width >= 1, "denoiser: base_width must be positive");
    require(depth >= 1, "denoiser: depth must be >= 1");
    require(time_embed_dim >= 2 && time_embed_dim % 2 == 0,
            "denoiser: time_embed_dim must be even and >= 2");
  }

  bool operator==(const DenoiserConfig&) const = default;
};

// One-hot label encoding rescaled to [-1, 1] for the diffusion input;
// decoding is a channel argmax.
struct MaskEncoding {
  int num_classes = 2;

  template <typename T>
  Tensor<T> encode(const Tensor<int32_t>& labels) const {
    require(labels.rank() == 3, "mask encode: expects [N,H,W]");
    int64_t n = labels.dim(0), h = labels.dim(1), w = labels.dim(2);
    int64_t hw = h * w;
    Tensor<T> out({n, num_classes, h, w});
    out.fill(T(-1));
    for (int64_t i = 0; i < n; ++i) {
      const int32_t* ls = labels.data() + i * hw;
      T* os = out.data() + i * num_classes * hw;
      for (int64_t j = 0; j < hw; ++j) {
        require(ls[j] >= 0 && ls[j] < num_classes, "mask encode: label out of range");
        os[ls[j] * hw + j] = T(1);
      }
    }
    return out;
  }

  template <typename T>
  Tensor<int32_t> decode(const Tensor<T>& logits) const {
    require(logits.rank() == 4 && logits.dim(1) == num_classes,
            "mask decode: expects [N,num_classes,H,W]");
    return argmax_channels(logits);
  }
};

// Softmax probabilities rescaled to [-1, 1]; the conditioning form for
// generated masks, keeping their channel statistics comparable to encoded
// ground-truth masks while letting gradients pass through.
template <typename T>
Value<T> soft_mask_conditioning(const Value<T>& logits) {
  return affine(softmax_channels(logits), 2.0, -1.0);
}

// Sinusoidal timestep features, [N, dim].
template <typename T>
Tensor<T> sinusoid_time_features(const std::vector<int>& ts, int dim) {
  int64_t n = static_cast<int64_t>(ts.size());
  int half = dim / 2;
  Tensor<T> out({n, dim});
  for (int64_t i = 0; i < n; ++i) {
    double t = static_cast<double>(ts[static_cast<size_t>(i)]);
    for (int k = 0; k < half; ++k) {
      double freq = std::exp(-std::log(10000.0) * k / half);
      out[i * dim + 2 * k] = static_cast<T>(std::sin(t * freq));
      out[i * dim + 2 * k + 1] = static_cast<T>(std::cos(t * freq));
    }
  }
  return out;
}

// Conditional UNet with a shared trunk and two 1x1 output heads: the mask
// pathway (image + noisy mask -> mask logits) and the image pathway
// (noisy image + mask -> predicted noise). The trunk input is always
// concat(image channels, mask channels); a time embedding is broadcast into
// every resolution level.
template <typename T>
class DualPathwayDenoiser {
 public:
  DualPathwayDenoiser(const DenoiserConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    const int e = cfg_.time_embed_dim;
    temb_w1_ = add_dense("temb.w1", e, e, rng);
    temb_b1_ = add_bias("temb.b1", e);
    temb_w2_ = add_dense("temb.w2", e, e, rng);
    temb_b2_ = add_bias("temb.b2", e);

    int in_ch = cfg_.image_channels + cfg_.num_classes;
    stem_ = add_block("stem", in_ch, width(0), rng, /*temb=*/true);
    for (int l = 0; l < cfg_.depth; ++l)
      down_.push_back(add_block("down" + std::to_string(l), width(l), width(l + 1),
                                rng, true));
    bott_ = add_block("bott", width(cfg_.depth), width(cfg_.depth), rng, true);
    for (int l = cfg_.depth - 1; l >= 0; --l) {
      up_.push_back(add_block("up" + std::to_string(l), width(l + 1), width(l), rng, true));
      fuse_.push_back(add_block("fuse" + std::to_string(l), 2 * width(l), width(l),
                                rng, false));
    }
    mask_head_w_ = add_conv("mask_head.w", cfg_.num_classes, width(0), 1, rng);
    mask_head_b_ = add_bias("mask_head.b", cfg_.num_classes);
    noise_head_w_ = add_conv("noise_head.w", cfg_.image_channels, width(0), 1, rng);
    noise_head_b_ = add_bias("noise_head.b", cfg_.image_channels);
  }

  const DenoiserConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }
  MaskEncoding mask_encoding() const { return MaskEncoding{cfg_.num_classes}; }

  // m_hat = f_m(image, noisy_mask, t): per-pixel per-class scores.
  Value<T> mask_pathway(const Value<T>& image, const Value<T>& noisy_mask,
                        const std::vector<int>& ts) {
    check_inputs(image.val(), noisy_mask.val(), ts);
    auto h = trunk(image, noisy_mask, ts);
    return conv2d(h, mask_head_w_->leaf(), mask_head_b_->leaf(), 1, 0);
  }

  // nu_hat = f_i(noisy_image, mask, t): predicted noise in image channels.
  Value<T> image_pathway(const Value<T>& noisy_image, const Value<T>& mask,
                         const std::vector<int>& ts) {
    check_inputs(noisy_image.val(), mask.val(), ts);
    auto h = trunk(noisy_image, mask, ts);
    return conv2d(h, noise_head_w_->leaf(), noise_head_b_->leaf(), 1, 0);
  }

  // Tensor-level conveniences (no gradient graph kept).
  Tensor<T> forward_mask_pathway(const Tensor<T>& image, const Tensor<T>& noisy_mask,
                                 const std::vector<int>& ts) {
    return mask_pathway(Value<T>::constant(image), Value<T>::constant(noisy_mask), ts).val();
  }
  Tensor<T> forward_image_pathway(const Tensor<T>& noisy_image, const Tensor<T>& mask,
                                  const std::vector<int>& ts) {
    return image_pathway(Value<T>::constant(noisy_image), Value<T>::constant(mask), ts).val();
  }

  int width(int level) const { return cfg_.base_width << level; }

 private:
  // Conv blocks carry no conv bias: group normalization follows immediately
  // and would cancel a per-channel shift, leaving a dead parameter. The
  // norm's beta provides the offset instead.
  struct Block {
    std::shared_ptr<Parameter<T>> w, gn_g, gn_b, tw, tb;
    int64_t groups = 1;
    bool has_temb = true;
  };

  static int64_t gn_groups(int channels) { return std::gcd<int64_t>(channels, 8); }

  std::shared_ptr<Parameter<T>> add_conv(const std::string& name, int cout, int cin,
                                         int k, Rng& rng) {
    Tensor<T> w({cout, cin, k, k});
    double std = std::sqrt(2.0 / (static_cast<double>(cin) * k * k));
    fill_normal(w, rng, std);
    return params_.add(name, std::move(w));
  }

  std::shared_ptr<Parameter<T>> add_dense(const std::string& name, int fout, int fin,
                                          Rng& rng) {
    Tensor<T> w({fout, fin});
    fill_normal(w, rng, std::sqrt(2.0 / fin));
    return params_.add(name, std::move(w));
  }

  std::shared_ptr<Parameter<T>> add_bias(const std::string& name, int n) {
    return params_.add(name, Tensor<T>::zeros({n}));
  }

  Block add_block(const std::string& name, int cin, int cout, Rng& rng, bool temb) {
    Block blk;
    blk.w = add_conv(name + ".w", cout, cin, 3, rng);
    blk.gn_g = params_.add(name + ".gn.g", Tensor<T>::full({cout}, T(1)));
    blk.gn_b = add_bias(name + ".gn.b", cout);
    blk.groups = gn_groups(cout);
    blk.has_temb = temb;
    if (temb) {
      blk.tw = add_dense(name + ".temb.w", cout, cfg_.time_embed_dim, rng);
      blk.tb = add_bias(name + ".temb.b", cout);
    }
    return blk;
  }

  // conv -> group norm -> (+ time bias) -> silu
  Value<T> block_forward(const Block& blk, const Value<T>& x, const Value<T>& temb,
                         int stride) {
    auto h = conv2d(x, blk.w->leaf(), stride, 1);
    h = group_norm(h, blk.gn_g->leaf(), blk.gn_b->leaf(), blk.groups);
    if (blk.has_temb)
      h = add_channel_bias(h, linear(temb, blk.tw->leaf(), blk.tb->leaf()));
    return silu(h);
  }

  Value<T> time_embedding(const std::vector<int>& ts) {
    auto feats = Value<T>::constant(
        sinusoid_time_features<T>(ts, cfg_.time_embed_dim));
    auto e = silu(linear(feats, temb_w1_->leaf(), temb_b1_->leaf()));
    return linear(e, temb_w2_->leaf(), temb_b2_->leaf());
  }

  void check_inputs(const Tensor<T>& image_like, const Tensor<T>& mask_like,
                    const std::vector<int>& ts) const {
    require(image_like.rank() == 4 && mask_like.rank() == 4,
            "denoiser: inputs must be [N,C,H,W]");
    require(image_like.dim(1) == cfg_.image_channels,
            "denoiser: image input has ", image_like.dim(1), " channels, expected ",
            cfg_.image_channels);
    require(mask_like.dim(1) == cfg_.num_classes,
            "denoiser: mask input has ", mask_like.dim(1), " channels, expected ",
            cfg_.num_classes);
    require(image_like.dim(0) == mask_like.dim(0) &&
                image_like.dim(2) == mask_like.dim(2) &&
                image_like.dim(3) == mask_like.dim(3),
            "denoiser: image/mask spatial shapes differ");
    require(image_like.dim(0) == static_cast<int64_t>(ts.size()),
            "denoiser: timestep count must match batch");
    int64_t div = int64_t(1) << cfg_.depth;
    require(image_like.dim(2) % div == 0 && image_like.dim(3) % div == 0,
            "denoiser: spatial size must be divisible by 2^depth = ", div);
  }

  Value<T> trunk(const Value<T>& image_like, const Value<T>& mask_like,
                 const std::vector<int>& ts) {
    auto temb = time_embedding(ts);
    auto h = block_forward(stem_, concat_channels(image_like, mask_like), temb, 1);
    std::vector<Value<T>> skips;
    for (int l = 0; l < cfg_.depth; ++l) {
      skips.push_back(h);
      h = block_forward(down_[static_cast<size_t>(l)], h, temb, 2);
    }
    h = block_forward(bott_, h, temb, 1);
    for (int l = cfg_.depth - 1; l >= 0; --l) {
      size_t idx = static_cast<size_t>(cfg_.depth - 1 - l);
      h = block_forward(up_[idx], upsample_nearest2(h), temb, 1);
      h = concat_channels(h, skips[static_cast<size_t>(l)]);
      h = block_forward(fuse_[idx], h, temb, 1);
    }
    return h;
  }

  DenoiserConfig cfg_;
  ParamStore<T> params_;
  std::shared_ptr<Parameter<T>> temb_w1_, temb_b1_, temb_w2_, temb_b2_;
  Block stem_, bott_;
  std::vector<Block> down_, up_, fuse_;
  std::shared_ptr<Parameter<T>> mask_head_w_, mask_head_b_;
  std::shared_ptr<Parameter<T>> noise_head_w_, noise_head_b_;
};

// Fan-in-scaled random initialization; identical seeds produce identical
// parameters.
template <typename T>
DualPathwayDenoiser<T> init_parameters(const DenoiserConfig& cfg, Rng& rng) {
  return DualPathwayDenoiser<T>(cfg, rng);
}

}  // namespace diffseg
