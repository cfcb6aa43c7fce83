#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "diffseg/data.hpp"
#include "diffseg/pretrain.hpp"

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

NoiseSchedule sched() { return build_linear_schedule(1000, 0.0001, 0.02); }

}  // namespace

TEST_CASE("cycle loss is nonnegative and deterministic", "[pretrain]") {
  auto s = sched();
  Rng init(1);
  auto teacher = init_parameters<float>(tiny_config(), init);
  Rng data_rng(2);
  auto images = normal_tensor<float>({3, 1, 16, 16}, data_rng);

  Rng r1(42), r2(42);
  auto g1 = cycle_loss_graph(teacher, images, s, r1);
  auto g2 = cycle_loss_graph(teacher, images, s, r2);
  REQUIRE(g1.loss.scalar() >= 0.0);
  REQUIRE(g1.loss.scalar() == g2.loss.scalar());
  REQUIRE(g1.t_mask == g2.t_mask);
  REQUIRE(g1.t_image == g2.t_image);
}

TEST_CASE("cycle gradient matches finite differences", "[pretrain][grad]") {
  auto s = sched();
  Rng init(3);
  auto teacher = init_parameters<double>(tiny_config(), init);
  Rng data_rng(4);
  auto images = normal_tensor<double>({2, 1, 16, 16}, data_rng);

  auto loss_value = [&] {
    Rng rng(99);  // frozen stream: the loss is a pure function of parameters
    return cycle_loss_graph(teacher, images, s, rng).loss;
  };

  teacher.params().zero_grad();
  backward(loss_value());

  Rng probe(7);
  const auto& params = teacher.params().all();
  double worst = 0.0;
  for (int checked = 0; checked < 22; ++checked) {
    auto& p = params[probe.below(params.size())];
    int64_t i = probe.uniform_int(0, p->value.numel() - 1);
    double orig = p->value[i];
    double h = 1e-5 * std::max(1.0, std::abs(orig));
    p->value[i] = orig + h;
    double fp = loss_value().scalar();
    p->value[i] = orig - h;
    double fm = loss_value().scalar();
    p->value[i] = orig;
    double fd = (fp - fm) / (2.0 * h);
    double an = p->grad[i];
    double denom = std::max({std::abs(fd), std::abs(an), 1e-10});
    worst = std::max(worst, std::abs(fd - an) / denom);
  }
  REQUIRE(worst < 1e-4);
}

TEST_CASE("cycle gradient flows into the mask pathway", "[pretrain][grad]") {
  auto s = sched();
  Rng init(5);
  auto teacher = init_parameters<float>(tiny_config(), init);
  Rng data_rng(6);
  auto images = normal_tensor<float>({2, 1, 16, 16}, data_rng);

  Rng rng(11);
  auto diag = cycle_step(teacher, images, s, rng);
  REQUIRE(diag.finite);
  // the cycle only trains f_m through the generated mask; nonzero gradients
  // on the mask head prove the path is intact
  for (const auto& p : teacher.params().all()) {
    if (p->name.rfind("mask_head", 0) == 0 || p->name.rfind("stem", 0) == 0)
      REQUIRE(p->grad.sq_norm() > 0.0);
    if (p->name.rfind("noise_head", 0) == 0) REQUIRE(p->grad.sq_norm() > 0.0);
  }
}

TEST_CASE("non-finite input aborts the step without gradients", "[pretrain]") {
  auto s = sched();
  Rng init(8);
  auto teacher = init_parameters<float>(tiny_config(), init);
  auto images = Tensor<float>::full({1, 1, 16, 16},
                                    std::numeric_limits<float>::quiet_NaN());
  Rng rng(1);
  auto diag = cycle_step(teacher, images, s, rng);
  REQUIRE_FALSE(diag.finite);
  for (const auto& p : teacher.params().all()) REQUIRE(p->grad.sq_norm() == 0.0);
}

TEST_CASE("pretrain runs an epoch and records history", "[pretrain]") {
  auto s = sched();
  Rng init(9);
  auto teacher = init_parameters<float>(tiny_config(), init);
  auto samples = synth_shapes(2, 16, 31);
  auto views = make_image_views(samples);

  PretrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 2;
  cfg.seed = 5;
  auto hist = pretrain(teacher, views, s, cfg);
  REQUIRE(hist.epoch_loss.size() == 1);
  REQUIRE(std::isfinite(hist.epoch_loss[0]));
}

TEST_CASE("pretrain rejects an empty dataset", "[pretrain]") {
  auto s = sched();
  Rng init(10);
  auto teacher = init_parameters<float>(tiny_config(), init);
  PretrainConfig cfg;
  REQUIRE_THROWS_AS(pretrain(teacher, std::vector<ImageView>{}, s, cfg), ConfigError);
}

TEST_CASE("pretrain aborts after a non-finite loss streak", "[pretrain]") {
  auto s = sched();
  Rng init(12);
  auto teacher = init_parameters<float>(tiny_config(), init);
  std::vector<ImageView> poisoned;
  for (int i = 0; i < 12; ++i)
    poisoned.push_back({Tensor<float>::full({1, 16, 16},
                                            std::numeric_limits<float>::quiet_NaN()),
                        "bad-" + std::to_string(i)});
  PretrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 1;
  cfg.use_augment = false;
  REQUIRE_THROWS_AS(pretrain(teacher, poisoned, s, cfg), TrainingError);
}

TEST_CASE("pretraining ignores labels entirely", "[pretrain]") {
  auto s = sched();
  auto samples = synth_shapes(4, 16, 77);
  auto stripped = samples;
  for (auto& smp : stripped) smp.label.reset();

  PretrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 2;
  cfg.seed = 3;

  Rng init_a(20), init_b(20);
  auto teacher_a = init_parameters<float>(tiny_config(), init_a);
  auto teacher_b = init_parameters<float>(tiny_config(), init_b);

  auto hist_a = pretrain(teacher_a, make_image_views(samples), s, cfg);
  auto hist_b = pretrain(teacher_b, make_image_views(stripped), s, cfg);

  REQUIRE(hist_a.epoch_loss == hist_b.epoch_loss);
  for (size_t i = 0; i < teacher_a.params().all().size(); ++i)
    REQUIRE(tensors_equal(teacher_a.params().all()[i]->value,
                          teacher_b.params().all()[i]->value));
}

TEST_CASE("pretraining reduces the cycle loss on a small set", "[pretrain][heavy]") {
  auto s = sched();
  DenoiserConfig cfg = tiny_config();
  cfg.base_width = 8;
  Rng init(30);
  auto teacher = init_parameters<float>(cfg, init);
  auto samples = synth_shapes(64, 32, 99);

  PretrainConfig pc;
  pc.epochs = 30;
  pc.batch_size = 8;
  pc.seed = 1;
  pc.learning_rate = 0.003;
  auto hist = pretrain(teacher, make_image_views(samples), s, pc);

  double first = 0, last = 0;
  for (int i = 0; i < 5; ++i) {
    first += hist.epoch_loss[static_cast<size_t>(i)];
    last += hist.epoch_loss[hist.epoch_loss.size() - 1 - static_cast<size_t>(i)];
  }
  REQUIRE(last / 5.0 < first / 5.0);
}
