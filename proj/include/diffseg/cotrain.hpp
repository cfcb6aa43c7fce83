#pragma once

#include <chrono>
#include <cmath>
#include <iostream>
#include <limits>
#include <string>
#include <vector>

#include "diffseg/adam.hpp"
#include "diffseg/checkpoint.hpp"
#include "diffseg/csv.hpp"
#include "diffseg/data.hpp"
#include "diffseg/denoiser.hpp"
#include "diffseg/inference.hpp"
#include "diffseg/losses.hpp"
#include "diffseg/metrics.hpp"
#include "diffseg/pretrain.hpp"
#include "diffseg/schedule.hpp"

namespace diffseg {

// ---------------------------------------------------------------------------
// Multi-round diffusion
// ---------------------------------------------------------------------------

template <typename T>
struct MultiRoundGraph {
  std::vector<Value<T>> align_per;     // R entries of per-sample [N] values
  std::vector<Value<T>> reconstr_per;  // R entries of per-sample [N] values
};

// Iterated regenerate-image / regenerate-mask loop on the teacher. Round r
// reconstructs the image from a freshly noised copy conditioned on the
// previous round's mask (round 1 uses the base mask logits), then generates a
// new mask from that reconstruction and a fresh pure-noise input. Targets are
// gradient-detached; only teacher parameters appear in these losses.
template <typename T>
MultiRoundGraph<T> multi_round_graph(DualPathwayDenoiser<T>& teacher,
                                     const Tensor<T>& images,
                                     const Value<T>& base_mask_logits,
                                     const Tensor<int32_t>& targets, int rounds,
                                     const NoiseSchedule& s, Rng& rng) {
  require(rounds >= 1, "multi_round: R must be >= 1");
  require(images.rank() == 4, "multi_round: images must be [N,C,H,W]");
  int64_t n = images.dim(0), h = images.dim(2), w = images.dim(3);
  int k = teacher.config().num_classes;

  MultiRoundGraph<T> out;
  auto cond = soft_mask_conditioning(base_mask_logits);
  for (int r = 0; r < rounds; ++r) {
    auto t_img = sample_timesteps(rng, s.steps, static_cast<size_t>(n));
    auto eps = normal_tensor<T>(images.shape(), rng);
    auto noisy = add_noise_batch(images, eps, t_img, s);
    auto eps_pred = teacher.image_pathway(Value<T>::constant(noisy), cond, t_img);
    auto recon = reconstruct_x0_graph(noisy, eps_pred, t_img, s);

    auto t_mask = sample_timesteps(rng, s.steps, static_cast<size_t>(n));
    auto mask_noise = pure_noise_batch<T>({n, k, h, w}, t_mask, s, rng);
    auto mask_logits = teacher.mask_pathway(recon, Value<T>::constant(mask_noise), t_mask);

    out.align_per.push_back(ce_per_sample(mask_logits, targets));
    out.reconstr_per.push_back(mse_per_sample(recon, images));
    cond = soft_mask_conditioning(mask_logits);
  }
  return out;
}

struct MultiRoundLosses {
  std::vector<double> align;
  std::vector<double> reconstr;
};

// Batch-mean alignment and reconstruction losses per round; target is the
// ground-truth label where available, otherwise the student's argmax.
template <typename T>
MultiRoundLosses multi_round(DualPathwayDenoiser<T>& teacher, const Tensor<T>& image,
                             const Tensor<T>& base_mask_logits,
                             const Tensor<int32_t>& target, int rounds,
                             const NoiseSchedule& s, Rng& rng) {
  auto g = multi_round_graph(teacher, image, Value<T>::constant(base_mask_logits),
                             target, rounds, s, rng);
  MultiRoundLosses out;
  for (int r = 0; r < rounds; ++r) {
    double a = 0, b = 0;
    const auto& av = g.align_per[static_cast<size_t>(r)].val();
    const auto& rv = g.reconstr_per[static_cast<size_t>(r)].val();
    for (int64_t i = 0; i < av.numel(); ++i) a += av[i];
    for (int64_t i = 0; i < rv.numel(); ++i) b += rv[i];
    out.align.push_back(a / static_cast<double>(av.numel()));
    out.reconstr.push_back(b / static_cast<double>(rv.numel()));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Co-training step
// ---------------------------------------------------------------------------

template <typename T>
struct CotrainGraph {
  Value<T> total;
  BatchLossBreakdown parts;
};

// Combined co-training objective over a possibly mixed batch. Both models
// generate masks from fresh pure noise at independent timesteps; CPS couples
// them, the supervised term applies on labeled entries, multi-round losses
// train the teacher. Losses are assembled per sample, the breakdown's sup
// part is averaged over the whole batch so total = sup + lambda*(semi +
// mean align + mean reconstr) holds exactly.
template <typename T>
CotrainGraph<T> cotrain_loss_graph(DualPathwayDenoiser<T>& teacher,
                                   DualPathwayDenoiser<T>& student,
                                   const Tensor<T>& images, const Tensor<int32_t>& labels,
                                   const std::vector<uint8_t>& labeled_flags,
                                   const LossWeights& w, const NoiseSchedule& s,
                                   Rng& rng) {
  w.validate();
  require(images.rank() == 4, "cotrain_step: images must be [N,C,H,W]");
  int64_t n = images.dim(0), h = images.dim(2), w_ = images.dim(3);
  require(static_cast<int64_t>(labeled_flags.size()) == n,
          "cotrain_step: flag count must match batch");
  int k = teacher.config().num_classes;

  auto image_const = Value<T>::constant(images);

  auto t_teacher = sample_timesteps(rng, s.steps, static_cast<size_t>(n));
  auto noise_teacher = pure_noise_batch<T>({n, k, h, w_}, t_teacher, s, rng);
  auto m_teacher = teacher.mask_pathway(image_const, Value<T>::constant(noise_teacher),
                                        t_teacher);

  auto t_student = sample_timesteps(rng, s.steps, static_cast<size_t>(n));
  auto noise_student = pure_noise_batch<T>({n, k, h, w_}, t_student, s, rng);
  auto m_student = student.mask_pathway(image_const, Value<T>::constant(noise_student),
                                        t_student);

  auto semi_per = cps_loss_per_sample(m_student, m_teacher);
  auto sup_per = supervised_loss_per_sample(m_teacher, m_student, labels);

  // pseudo-label rule: ground truth where available, student argmax otherwise
  Tensor<int32_t> targets = labels.clone();
  auto student_argmax = argmax_channels(m_student.val());
  int64_t hw = h * w_;
  for (int64_t i = 0; i < n; ++i)
    if (!labeled_flags[static_cast<size_t>(i)])
      std::memcpy(targets.data() + i * hw, student_argmax.data() + i * hw,
                  sizeof(int32_t) * static_cast<size_t>(hw));

  auto mr = multi_round_graph(teacher, images, m_teacher, targets, w.rounds, s, rng);

  std::vector<double> uniform(static_cast<size_t>(n), 1.0 / static_cast<double>(n));
  std::vector<double> labeled_w(static_cast<size_t>(n), 0.0);
  for (int64_t i = 0; i < n; ++i)
    if (labeled_flags[static_cast<size_t>(i)])
      labeled_w[static_cast<size_t>(i)] = 1.0 / static_cast<double>(n);

  auto sup_v = weighted_sum(sup_per, labeled_w);
  auto semi_v = weighted_sum(semi_per, uniform);
  std::vector<Value<T>> align_v, reconstr_v;
  for (int r = 0; r < w.rounds; ++r) {
    align_v.push_back(weighted_sum(mr.align_per[static_cast<size_t>(r)], uniform));
    reconstr_v.push_back(weighted_sum(mr.reconstr_per[static_cast<size_t>(r)], uniform));
  }
  auto sum_scalars = [](const std::vector<Value<T>>& vs) {
    Value<T> acc = vs[0];
    for (size_t i = 1; i < vs.size(); ++i) acc = add(acc, vs[i]);
    return acc;
  };
  auto align_mean_v = scale(sum_scalars(align_v), 1.0 / w.rounds);
  auto reconstr_mean_v = scale(sum_scalars(reconstr_v), 1.0 / w.rounds);
  auto unsup_v = scale(add(semi_v, add(align_mean_v, reconstr_mean_v)), w.lambda);
  auto total_v = add(sup_v, unsup_v);

  BatchLossBreakdown parts;
  parts.sup = sup_v.scalar();
  parts.semi = semi_v.scalar();
  for (int r = 0; r < w.rounds; ++r) {
    parts.align.push_back(align_v[static_cast<size_t>(r)].scalar());
    parts.reconstr.push_back(reconstr_v[static_cast<size_t>(r)].scalar());
  }
  parts.total = total_v.scalar();
  return {total_v, std::move(parts)};
}

// One optimization step for both models. A total of exactly zero (an
// all-unlabeled batch at the lambda ramp's zero point) applies no update; a
// non-finite total aborts with diagnostics.
template <typename T>
BatchLossBreakdown cotrain_step(DualPathwayDenoiser<T>& teacher,
                                DualPathwayDenoiser<T>& student,
                                const Tensor<T>& images, const Tensor<int32_t>& labels,
                                const std::vector<uint8_t>& labeled_flags,
                                const LossWeights& w, const NoiseSchedule& s, Rng& rng,
                                AdamOptimizer<T>& opt_teacher,
                                AdamOptimizer<T>& opt_student) {
  auto graph = cotrain_loss_graph(teacher, student, images, labels, labeled_flags, w, s, rng);
  if (!std::isfinite(graph.parts.total))
    throw TrainingError(detail::cat("cotrain_step: non-finite total loss (sup=",
                                    graph.parts.sup, " semi=", graph.parts.semi,
                                    " lambda=", w.lambda,
                                    " image_norm=", std::sqrt(images.sq_norm()), ")"));
  if (graph.parts.total != 0.0) {
    teacher.params().zero_grad();
    student.params().zero_grad();
    backward(graph.total);
    opt_teacher.step(teacher.params());
    opt_student.step(student.params());
  }
  return graph.parts;
}

// ---------------------------------------------------------------------------
// Co-training loop
// ---------------------------------------------------------------------------

struct CotrainConfig {
  int epochs = 200;
  int batch_size = 8;
  double learning_rate = 0.01;
  int lr_decay_every = 50;
  double lr_decay_factor = 0.1;
  double weight_decay = 5e-5;
  double lambda_max = 5.0;
  int rounds = 5;
  uint64_t seed = 0;
  bool use_augment = true;
  AugmentConfig augment;
  int val_ensemble = 1;
  std::string csv_log;
  std::string checkpoint_dir_teacher;
  std::string checkpoint_dir_student;

  void validate() const {
    require(epochs >= 1, "cotrain: epochs must be positive");
    require(batch_size >= 1, "cotrain: batch_size must be positive");
    require(learning_rate > 0.0, "cotrain: learning rate must be positive");
    require(lr_decay_every >= 1, "cotrain: lr_decay_every must be positive");
    require(lambda_max >= 0.0, "cotrain: lambda_max must be >= 0");
    require(rounds >= 1, "cotrain: rounds must be >= 1");
  }
};

struct CotrainEpochStats {
  double lambda = 0, sup = 0, semi = 0, align_mean = 0, reconstr_mean = 0, total = 0;
  double val_dc = std::numeric_limits<double>::quiet_NaN();
  double val_ji = std::numeric_limits<double>::quiet_NaN();
  double seconds = 0;
};

struct CotrainHistory {
  std::vector<CotrainEpochStats> epochs;

  TrainingHistory history() const {
    TrainingHistory h;
    for (const auto& e : epochs) {
      h.epoch_loss.push_back(e.total);
      h.epoch_seconds.push_back(e.seconds);
    }
    return h;
  }
};

namespace detail {

// Cycles through a seeded reshuffled index stream.
class IndexCycler {
 public:
  IndexCycler(size_t n, Rng& rng) : rng_(&rng), order_(n) {
    for (size_t i = 0; i < n; ++i) order_[i] = i;
    if (n) shuffle_indices(order_, *rng_);
  }
  size_t next() {
    if (pos_ >= order_.size()) {
      pos_ = 0;
      shuffle_indices(order_, *rng_);
    }
    return order_[pos_++];
  }

 private:
  Rng* rng_;
  std::vector<size_t> order_;
  size_t pos_ = 0;
};

}  // namespace detail

// Teacher-student co-training over labeled + unlabeled data. Each step draws
// one labeled batch (when available) and one unlabeled batch; an epoch is one
// pass over the unlabeled set. With no unlabeled data the loop degrades to
// fully supervised co-training over the labeled set (with a warning).
template <typename T>
CotrainHistory cotrain(DualPathwayDenoiser<T>& teacher, DualPathwayDenoiser<T>& student,
                       const std::vector<SegmentationSample>& labeled,
                       const std::vector<ImageView>& unlabeled,
                       const CotrainConfig& cfg, const NoiseSchedule& s,
                       const std::vector<SegmentationSample>* val_set = nullptr) {
  cfg.validate();
  require(!labeled.empty(), "cotrain: labeled set must not be empty");
  for (const auto& smp : labeled)
    require(smp.label.has_value(), "cotrain: labeled sample ", smp.id, " has no label");
  if (unlabeled.empty())
    std::cerr << "[diffseg] cotrain: unlabeled set is empty; degrading to fully "
                 "supervised co-training\n";

  Rng rng(Rng::mix(cfg.seed, 0xc07ull));
  AdamOptimizer<T> opt_teacher(cfg.learning_rate, 0.9, 0.99, cfg.weight_decay);
  AdamOptimizer<T> opt_student(cfg.learning_rate, 0.9, 0.99, cfg.weight_decay);
  CsvLogger csv(cfg.csv_log,
                "epoch,lambda,sup,semi,align_mean,reconstr_mean,total,val_DC,val_JI");

  const size_t epoch_driver = unlabeled.empty() ? labeled.size() : unlabeled.size();
  detail::IndexCycler labeled_cycle(labeled.size(), rng);

  CotrainHistory history;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto t0 = std::chrono::steady_clock::now();
    double lr = decayed_lr(cfg.learning_rate, epoch, cfg.lr_decay_every, cfg.lr_decay_factor);
    opt_teacher.set_learning_rate(lr);
    opt_student.set_learning_rate(lr);

    LossWeights w;
    w.lambda_max = cfg.lambda_max;
    w.lambda = lambda_at(epoch, cfg.epochs, cfg.lambda_max);
    w.rounds = cfg.rounds;

    std::vector<size_t> unlab_order(unlabeled.size());
    for (size_t i = 0; i < unlab_order.size(); ++i) unlab_order[i] = i;
    shuffle_indices(unlab_order, rng);

    CotrainEpochStats stats;
    stats.lambda = w.lambda;
    int64_t samples_seen = 0;

    for (size_t pos = 0; pos < epoch_driver; pos += static_cast<size_t>(cfg.batch_size)) {
      std::vector<SegmentationSample> staged;
      std::vector<uint8_t> flags;

      size_t lab_count = std::min<size_t>(static_cast<size_t>(cfg.batch_size), labeled.size());
      for (size_t i = 0; i < lab_count; ++i) {
        const auto& smp = labeled[labeled_cycle.next()];
        staged.push_back(cfg.use_augment ? augment(smp, cfg.augment, rng) : smp);
        flags.push_back(1);
      }
      if (!unlabeled.empty()) {
        size_t unlab_count =
            std::min<size_t>(static_cast<size_t>(cfg.batch_size), epoch_driver - pos);
        for (size_t i = 0; i < unlab_count; ++i) {
          const auto& view = unlabeled[unlab_order[pos + i]];
          SegmentationSample tmp{view.image, std::nullopt, view.id};
          staged.push_back(cfg.use_augment ? augment(tmp, cfg.augment, rng) : tmp);
          flags.push_back(0);
        }
      }

      std::vector<const Tensor<float>*> images;
      for (const auto& smp : staged) images.push_back(&smp.image);
      auto batch = stack_images<T>(images);
      int64_t hh = batch.dim(2), ww = batch.dim(3);
      Tensor<int32_t> labels({static_cast<int64_t>(staged.size()), hh, ww});
      for (size_t i = 0; i < staged.size(); ++i)
        if (staged[i].label)
          std::memcpy(labels.data() + static_cast<int64_t>(i) * hh * ww,
                      staged[i].label->data(),
                      sizeof(int32_t) * static_cast<size_t>(hh * ww));

      auto parts = cotrain_step(teacher, student, batch, labels, flags, w, s, rng,
                                opt_teacher, opt_student);

      double bs = static_cast<double>(staged.size());
      stats.sup += parts.sup * bs;
      stats.semi += parts.semi * bs;
      stats.align_mean += diffseg::mean_of(parts.align) * bs;
      stats.reconstr_mean += diffseg::mean_of(parts.reconstr) * bs;
      stats.total += parts.total * bs;
      samples_seen += static_cast<int64_t>(staged.size());
    }

    if (samples_seen) {
      stats.sup /= samples_seen;
      stats.semi /= samples_seen;
      stats.align_mean /= samples_seen;
      stats.reconstr_mean /= samples_seen;
      stats.total /= samples_seen;
    }

    if (val_set && !val_set->empty()) {
      Rng eval_rng(Rng::mix(cfg.seed, 0xe5a1ull + static_cast<uint64_t>(epoch)));
      std::vector<double> dcs, jis;
      for (const auto& smp : *val_set) {
        if (!smp.label) continue;
        auto img = smp.image.template cast<T>();
        auto pred = generate_mask(student, img, s, cfg.val_ensemble, eval_rng);
        dcs.push_back(dice(pred, *smp.label, 1));
        jis.push_back(jaccard(pred, *smp.label, 1));
      }
      stats.val_dc = mean(dcs);
      stats.val_ji = mean(jis);
    }

    stats.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    history.epochs.push_back(stats);
    csv.row({std::to_string(epoch + 1), csv_num(stats.lambda, 4), csv_num(stats.sup),
             csv_num(stats.semi), csv_num(stats.align_mean), csv_num(stats.reconstr_mean),
             csv_num(stats.total),
             std::isnan(stats.val_dc) ? "" : csv_num(stats.val_dc, 2),
             std::isnan(stats.val_ji) ? "" : csv_num(stats.val_ji, 2)});
  }

  if (!cfg.checkpoint_dir_teacher.empty())
    save_checkpoint(teacher, std::filesystem::path(cfg.checkpoint_dir_teacher) / "final",
                    opt_teacher.step_count(), rng.state_string());
  if (!cfg.checkpoint_dir_student.empty())
    save_checkpoint(student, std::filesystem::path(cfg.checkpoint_dir_student) / "final",
                    opt_student.step_count(), rng.state_string());
  return history;
}

}  // namespace diffseg
