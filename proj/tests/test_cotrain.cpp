#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "diffseg/cotrain.hpp"
#include "diffseg/data.hpp"

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

template <typename T>
Tensor<int32_t> random_labels(std::vector<int64_t> shape, int classes, Rng& rng) {
  Tensor<int32_t> l(std::move(shape));
  for (int64_t i = 0; i < l.numel(); ++i)
    l[i] = static_cast<int32_t>(rng.uniform_int(0, classes - 1));
  return l;
}

}  // namespace

TEST_CASE("multi_round basic contracts", "[cotrain]") {
  auto s = sched();
  Rng init(1);
  auto teacher = init_parameters<float>(tiny_config(), init);
  Rng rng(2);
  auto images = normal_tensor<float>({2, 1, 16, 16}, rng);
  auto base = normal_tensor<float>({2, 2, 16, 16}, rng);
  auto targets = random_labels<float>({2, 16, 16}, 2, rng);

  SECTION("R = 1 returns arrays of length 1") {
    auto losses = multi_round(teacher, images, base, targets, 1, s, rng);
    REQUIRE(losses.align.size() == 1);
    REQUIRE(losses.reconstr.size() == 1);
  }

  SECTION("all reconstr components nonnegative and finite") {
    auto losses = multi_round(teacher, images, base, targets, 3, s, rng);
    for (double v : losses.reconstr) {
      REQUIRE(v >= 0.0);
      REQUIRE(std::isfinite(v));
    }
    for (double v : losses.align) REQUIRE(std::isfinite(v));
  }

  SECTION("R < 1 rejected") {
    REQUIRE_THROWS_AS(multi_round(teacher, images, base, targets, 0, s, rng), ConfigError);
  }
}

TEST_CASE("reconstruction improves after pretraining on constant images",
          "[cotrain][heavy]") {
  auto s = sched();
  // teacher pretrained on constant-valued images should reconstruct a
  // constant image better than a freshly initialized one, on average
  double pre_sum = 0, fresh_sum = 0;
  for (uint64_t seedv = 1; seedv <= 10; ++seedv) {
    Rng init(100 + seedv);
    auto pre = init_parameters<float>(tiny_config(), init);
    Rng init2(200 + seedv);
    auto fresh = init_parameters<float>(tiny_config(), init2);

    std::vector<ImageView> consts;
    for (int i = 0; i < 8; ++i)
      consts.push_back({Tensor<float>::full({1, 16, 16}, 0.4f), "c" + std::to_string(i)});
    PretrainConfig pc;
    pc.epochs = 12;
    pc.batch_size = 8;
    pc.seed = seedv;
    pc.use_augment = false;
    pc.learning_rate = 0.003;
    pretrain(pre, consts, s, pc);

    auto image = Tensor<float>::full({1, 1, 16, 16}, 0.4f);
    Rng r_pre(900 + seedv), r_fresh(900 + seedv);
    auto base = Tensor<float>::zeros({1, 2, 16, 16});
    auto tgt = Tensor<int32_t>::zeros({1, 16, 16});
    pre_sum += multi_round(pre, image, base, tgt, 1, s, r_pre).reconstr[0];
    fresh_sum += multi_round(fresh, image, base, tgt, 1, s, r_fresh).reconstr[0];
  }
  REQUIRE(pre_sum / 10.0 < fresh_sum / 10.0);
}

TEST_CASE("cotrain_step contracts", "[cotrain]") {
  auto s = sched();
  Rng init_t(3), init_s(4);
  auto teacher = init_parameters<float>(tiny_config(), init_t);
  auto student = init_parameters<float>(tiny_config(), init_s);
  Rng rng(5);
  auto images = normal_tensor<float>({4, 1, 16, 16}, rng);
  auto labels = random_labels<float>({4, 16, 16}, 2, rng);

  LossWeights w;
  w.lambda_max = 5.0;
  w.rounds = 2;

  SECTION("all-unlabeled batch at lambda = 0 leaves parameters untouched") {
    w.lambda = 0.0;
    AdamOptimizer<float> ot(0.01, 0.9, 0.99, 5e-5), os(0.01, 0.9, 0.99, 5e-5);
    std::vector<Tensor<float>> before;
    for (const auto& p : teacher.params().all()) before.push_back(p->value.clone());
    for (const auto& p : student.params().all()) before.push_back(p->value.clone());

    Rng step_rng(6);
    auto parts = cotrain_step(teacher, student, images, labels,
                              std::vector<uint8_t>{0, 0, 0, 0}, w, s, step_rng, ot, os);
    REQUIRE(parts.total == 0.0);

    size_t idx = 0;
    for (const auto& p : teacher.params().all())
      REQUIRE(tensors_equal(p->value, before[idx++]));
    for (const auto& p : student.params().all())
      REQUIRE(tensors_equal(p->value, before[idx++]));
  }

  SECTION("all-labeled batch yields strictly positive supervised loss and updates") {
    w.lambda = 1.0;
    AdamOptimizer<float> ot(0.01, 0.9, 0.99, 5e-5), os(0.01, 0.9, 0.99, 5e-5);
    auto first_before = teacher.params().all()[0]->value.clone();
    Rng step_rng(7);
    auto parts = cotrain_step(teacher, student, images, labels,
                              std::vector<uint8_t>{1, 1, 1, 1}, w, s, step_rng, ot, os);
    REQUIRE(parts.sup > 0.0);
    REQUIRE_FALSE(tensors_equal(teacher.params().all()[0]->value, first_before));
  }

  SECTION("deterministic under a fixed seed") {
    w.lambda = 0.7;
    auto run = [&](DualPathwayDenoiser<float>& t0, DualPathwayDenoiser<float>& s0) {
      AdamOptimizer<float> ot(0.01, 0.9, 0.99, 5e-5), os(0.01, 0.9, 0.99, 5e-5);
      Rng step_rng(8);
      return cotrain_step(t0, s0, images, labels, std::vector<uint8_t>{1, 1, 0, 0}, w,
                          s, step_rng, ot, os);
    };
    Rng ia(3), is(4), ia2(3), is2(4);
    auto t1 = init_parameters<float>(tiny_config(), ia);
    auto s1 = init_parameters<float>(tiny_config(), is);
    auto t2 = init_parameters<float>(tiny_config(), ia2);
    auto s2 = init_parameters<float>(tiny_config(), is2);
    auto p1 = run(t1, s1);
    auto p2 = run(t2, s2);
    REQUIRE(p1.total == p2.total);
    for (size_t i = 0; i < t1.params().all().size(); ++i)
      REQUIRE(tensors_equal(t1.params().all()[i]->value, t2.params().all()[i]->value));
  }

  SECTION("breakdown composes exactly per the total-loss rule") {
    w.lambda = 1.3;
    Rng step_rng(9);
    auto graph = cotrain_loss_graph(teacher, student, images, labels,
                                    std::vector<uint8_t>{1, 0, 1, 0}, w, s, step_rng);
    double recomposed = total_loss(true, graph.parts, w);
    REQUIRE(std::abs(graph.parts.total - recomposed) <=
            1e-6 * std::max(1.0, std::abs(recomposed)));
  }

  SECTION("multi-round losses do not touch student parameters") {
    w.lambda = 2.0;
    Rng step_rng(10);
    // student's only gradient sources are CPS and supervised terms; verify
    // the multi-round subgraph alone leaves the student grad empty
    auto base = normal_tensor<float>({4, 2, 16, 16}, step_rng);
    teacher.params().zero_grad();
    student.params().zero_grad();
    auto mr = multi_round_graph(teacher, images, Value<float>::constant(base), labels,
                                2, s, step_rng);
    std::vector<double> uniform(4, 0.25);
    auto loss = weighted_sum(mr.align_per[0], uniform);
    for (int r = 0; r < 2; ++r) {
      loss = add(loss, weighted_sum(mr.align_per[r], uniform));
      loss = add(loss, weighted_sum(mr.reconstr_per[r], uniform));
    }
    backward(loss);
    for (const auto& p : student.params().all()) REQUIRE(p->grad.sq_norm() == 0.0);
    double teacher_norm = 0;
    for (const auto& p : teacher.params().all()) teacher_norm += p->grad.sq_norm();
    REQUIRE(teacher_norm > 0.0);
  }
}

TEST_CASE("combined CPS + supervised gradient matches finite differences",
          "[cotrain][grad]") {
  auto s = sched();
  Rng init_t(13), init_s(14);
  auto teacher = init_parameters<double>(tiny_config(), init_t);
  auto student = init_parameters<double>(tiny_config(), init_s);
  Rng rng(15);
  auto images = normal_tensor<double>({2, 1, 16, 16}, rng);
  auto labels = random_labels<double>({2, 16, 16}, 2, rng);

  auto loss_value = [&] {
    Rng frozen(55);
    auto ts_t = sample_timesteps(frozen, s.steps, 2);
    auto noise_t = pure_noise_batch<double>({2, 2, 16, 16}, ts_t, s, frozen);
    auto m_t = teacher.mask_pathway(Value<double>::constant(images),
                                    Value<double>::constant(noise_t), ts_t);
    auto ts_s = sample_timesteps(frozen, s.steps, 2);
    auto noise_s = pure_noise_batch<double>({2, 2, 16, 16}, ts_s, s, frozen);
    auto m_s = student.mask_pathway(Value<double>::constant(images),
                                    Value<double>::constant(noise_s), ts_s);
    return add(cps_loss_graph(m_s, m_t), supervised_loss_graph(m_t, m_s, labels));
  };

  teacher.params().zero_grad();
  student.params().zero_grad();
  backward(loss_value());

  Rng probe(77);
  double worst = 0.0;
  auto probe_params = [&](DualPathwayDenoiser<double>& model, int count) {
    const auto& params = model.params().all();
    for (int k = 0; k < count; ++k) {
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
  };
  probe_params(teacher, 11);
  probe_params(student, 11);
  REQUIRE(worst < 1e-4);
}

TEST_CASE("full combined objective gradient matches finite differences (R=2)",
          "[cotrain][grad]") {
  auto s = sched();
  Rng init_t(23), init_s(24);
  auto teacher = init_parameters<double>(tiny_config(), init_t);
  auto student = init_parameters<double>(tiny_config(), init_s);
  Rng rng(25);
  auto images = normal_tensor<double>({2, 1, 16, 16}, rng);
  auto labels = random_labels<double>({2, 16, 16}, 2, rng);
  std::vector<uint8_t> flags = {1, 0};

  LossWeights w;
  w.lambda_max = 5.0;
  w.lambda = 1.5;
  w.rounds = 2;

  auto graph_value = [&] {
    Rng frozen(66);
    return cotrain_loss_graph(teacher, student, images, labels, flags, w, s, frozen);
  };

  teacher.params().zero_grad();
  student.params().zero_grad();
  backward(graph_value().total);

  Rng probe(88);
  double worst = 0.0;
  auto probe_params = [&](DualPathwayDenoiser<double>& model, int count) {
    const auto& params = model.params().all();
    for (int k = 0; k < count; ++k) {
      auto& p = params[probe.below(params.size())];
      int64_t i = probe.uniform_int(0, p->value.numel() - 1);
      double orig = p->value[i];
      double h = 1e-5 * std::max(1.0, std::abs(orig));
      p->value[i] = orig + h;
      double fp = graph_value().parts.total;
      p->value[i] = orig - h;
      double fm = graph_value().parts.total;
      p->value[i] = orig;
      double fd = (fp - fm) / (2.0 * h);
      double an = p->grad[i];
      double denom = std::max({std::abs(fd), std::abs(an), 1e-10});
      worst = std::max(worst, std::abs(fd - an) / denom);
    }
  };
  probe_params(teacher, 11);
  probe_params(student, 11);
  REQUIRE(worst < 1e-4);
}

TEST_CASE("cotrain loop bookkeeping", "[cotrain]") {
  auto s = sched();
  auto samples = synth_shapes(8, 16, 50);
  auto split = split_label_scarcity(samples, 0.5, 1);

  CotrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 2;
  cfg.rounds = 1;
  cfg.seed = 9;
  cfg.use_augment = false;

  Rng it(31), is(32);
  auto teacher = init_parameters<float>(tiny_config(), it);
  auto student = init_parameters<float>(tiny_config(), is);
  auto hist = cotrain(teacher, student, split.labeled, split.unlabeled, cfg, s);
  REQUIRE(hist.epochs.size() == 2);
  REQUIRE(hist.epochs[0].lambda == 0.0);
  for (const auto& e : hist.epochs) REQUIRE(std::isfinite(e.total));
}

TEST_CASE("cotrain degrades to supervised co-training without unlabeled data",
          "[cotrain]") {
  auto s = sched();
  auto samples = synth_shapes(4, 16, 51);

  CotrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 2;
  cfg.rounds = 1;
  cfg.seed = 2;
  cfg.use_augment = false;

  Rng it(41), is(42);
  auto teacher = init_parameters<float>(tiny_config(), it);
  auto student = init_parameters<float>(tiny_config(), is);
  auto hist = cotrain(teacher, student, samples, {}, cfg, s);
  REQUIRE(hist.epochs.size() == 1);
  REQUIRE(hist.epochs[0].sup > 0.0);
}
