#pragma once

#include <chrono>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "diffseg/adam.hpp"
#include "diffseg/checkpoint.hpp"
#include "diffseg/csv.hpp"
#include "diffseg/data.hpp"
#include "diffseg/denoiser.hpp"
#include "diffseg/losses.hpp"
#include "diffseg/schedule.hpp"

namespace diffseg {

struct PretrainConfig {
  int epochs = 200;
  int batch_size = 8;
  double learning_rate = 0.01;
  int lr_decay_every = 50;      // epochs between x lr_decay_factor steps
  double lr_decay_factor = 0.1;
  double weight_decay = 5e-5;
  uint64_t seed = 0;
  bool use_augment = true;
  AugmentConfig augment;
  int checkpoint_every = 0;       // epochs; 0 = final checkpoint only
  std::string checkpoint_dir;     // empty = no checkpoints
  std::string csv_log;            // empty = no CSV

  void validate() const {
    require(epochs >= 1, "pretrain: epochs must be positive");
    require(batch_size >= 1, "pretrain: batch_size must be positive");
    require(learning_rate > 0.0, "pretrain: learning rate must be positive");
    require(lr_decay_every >= 1, "pretrain: lr_decay_every must be positive");
    require(lr_decay_factor > 0.0, "pretrain: lr_decay_factor must be positive");
    require(weight_decay >= 0.0, "pretrain: weight decay must be >= 0");
  }
};

struct TrainingHistory {
  std::vector<double> epoch_loss;
  std::vector<double> epoch_seconds;
};

struct CycleDiagnostics {
  double loss = 0.0;
  bool finite = true;
  double image_norm = 0.0;
  std::vector<int> t_mask;   // t of Eq. 5
  std::vector<int> t_image;  // t' of Eq. 6
};

inline double decayed_lr(double base, int epoch, int every, double factor) {
  return base * std::pow(factor, static_cast<double>(epoch / every));
}

// Two-pass cycle-consistency loss: generate a mask from pure noise
// conditioned on the image, feed its soft form back through the image
// pathway (whose image input is again pure noise, at an independently drawn
// t'), reconstruct, and penalize the squared reconstruction error.
template <typename T>
struct CycleGraph {
  Value<T> loss;
  std::vector<int> t_mask, t_image;
};

template <typename T>
CycleGraph<T> cycle_loss_graph(DualPathwayDenoiser<T>& teacher, const Tensor<T>& images,
                               const NoiseSchedule& s, Rng& rng) {
  require(images.rank() == 4, "cycle: images must be [N,C,H,W]");
  int64_t n = images.dim(0), h = images.dim(2), w = images.dim(3);
  int k = teacher.config().num_classes;

  auto t_mask = sample_timesteps(rng, s.steps, static_cast<size_t>(n));
  auto mask_noise = pure_noise_batch<T>({n, k, h, w}, t_mask, s, rng);
  auto mask_logits = teacher.mask_pathway(Value<T>::constant(images),
                                          Value<T>::constant(mask_noise), t_mask);
  auto cond = soft_mask_conditioning(mask_logits);

  auto t_image = sample_timesteps(rng, s.steps, static_cast<size_t>(n));
  auto image_noise = pure_noise_batch<T>(images.shape(), t_image, s, rng);
  auto eps_pred = teacher.image_pathway(Value<T>::constant(image_noise), cond, t_image);
  auto recon = reconstruct_x0_graph(image_noise, eps_pred, t_image, s);

  auto loss = mean_of(mse_per_sample(recon, images));
  return {loss, std::move(t_mask), std::move(t_image)};
}

// One unsupervised step: loss + gradients (left in the teacher's parameter
// store). A non-finite loss aborts the step (no gradients) and surfaces
// diagnostics; the caller decides whether to keep going.
template <typename T>
CycleDiagnostics cycle_step(DualPathwayDenoiser<T>& teacher, const Tensor<T>& images,
                            const NoiseSchedule& s, Rng& rng) {
  teacher.params().zero_grad();
  auto graph = cycle_loss_graph(teacher, images, s, rng);
  CycleDiagnostics diag;
  diag.loss = graph.loss.scalar();
  diag.finite = std::isfinite(diag.loss);
  diag.t_mask = graph.t_mask;
  diag.t_image = graph.t_image;
  if (!diag.finite) diag.image_norm = std::sqrt(images.sq_norm());
  if (diag.finite) backward(graph.loss);
  return diag;
}

namespace detail {

inline std::string format_diag(const CycleDiagnostics& d) {
  std::string msg = detail::cat("loss=", d.loss, " image_norm=", d.image_norm, " t=[");
  for (size_t i = 0; i < d.t_mask.size(); ++i)
    msg += (i ? "," : "") + std::to_string(d.t_mask[i]);
  msg += "] t'=[";
  for (size_t i = 0; i < d.t_image.size(); ++i)
    msg += (i ? "," : "") + std::to_string(d.t_image[i]);
  return msg + "]";
}

}  // namespace detail

// Unsupervised teacher pretraining. Consumes image-only views, so labels are
// structurally invisible here.
template <typename T>
TrainingHistory pretrain(DualPathwayDenoiser<T>& teacher,
                         const std::vector<ImageView>& unlabeled,
                         const NoiseSchedule& s, const PretrainConfig& cfg) {
  cfg.validate();
  require(!unlabeled.empty(), "pretrain: empty dataset");

  Rng rng(Rng::mix(cfg.seed, 0x7e71ull));
  AdamOptimizer<T> opt(cfg.learning_rate, 0.9, 0.99, cfg.weight_decay);
  CsvLogger csv(cfg.csv_log, "epoch,loss,lr,seconds");

  TrainingHistory history;
  std::vector<size_t> order(unlabeled.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  int nonfinite_streak = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto t0 = std::chrono::steady_clock::now();
    opt.set_learning_rate(
        decayed_lr(cfg.learning_rate, epoch, cfg.lr_decay_every, cfg.lr_decay_factor));
    shuffle_indices(order, rng);

    double loss_sum = 0.0;
    int64_t sample_count = 0;
    for (size_t pos = 0; pos < order.size(); pos += static_cast<size_t>(cfg.batch_size)) {
      size_t count = std::min(static_cast<size_t>(cfg.batch_size), order.size() - pos);
      std::vector<SegmentationSample> staged;
      std::vector<const Tensor<float>*> images;
      staged.reserve(count);
      for (size_t i = 0; i < count; ++i) {
        const auto& view = unlabeled[order[pos + i]];
        if (cfg.use_augment) {
          SegmentationSample tmp{view.image, std::nullopt, view.id};
          staged.push_back(augment(tmp, cfg.augment, rng));
        } else {
          staged.push_back({view.image, std::nullopt, view.id});
        }
      }
      for (const auto& smp : staged) images.push_back(&smp.image);
      auto batch = stack_images<T>(images);

      auto diag = cycle_step(teacher, batch, s, rng);
      if (!diag.finite) {
        if (++nonfinite_streak > 10)
          throw TrainingError("pretrain: >10 consecutive non-finite losses; " +
                              detail::format_diag(diag));
        continue;  // step aborted, no update
      }
      nonfinite_streak = 0;
      opt.step(teacher.params());
      loss_sum += diag.loss * static_cast<double>(count);
      sample_count += static_cast<int64_t>(count);
    }

    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    double epoch_loss = sample_count ? loss_sum / static_cast<double>(sample_count)
                                     : std::numeric_limits<double>::quiet_NaN();
    history.epoch_loss.push_back(epoch_loss);
    history.epoch_seconds.push_back(secs);
    csv.row({std::to_string(epoch + 1), csv_num(epoch_loss), csv_num(opt.learning_rate(), 8),
             csv_num(secs, 3)});

    if (!cfg.checkpoint_dir.empty()) {
      bool periodic = cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0;
      bool last = epoch + 1 == cfg.epochs;
      if (periodic)
        save_checkpoint(teacher,
                        std::filesystem::path(cfg.checkpoint_dir) /
                            ("epoch-" + std::to_string(epoch + 1)),
                        opt.step_count(), rng.state_string());
      if (last)
        save_checkpoint(teacher, std::filesystem::path(cfg.checkpoint_dir) / "final",
                        opt.step_count(), rng.state_string());
    }
  }
  return history;
}

}  // namespace diffseg
