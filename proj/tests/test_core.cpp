#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>

#include "diffseg/adam.hpp"
#include "diffseg/autodiff.hpp"
#include "diffseg/nn_ops.hpp"
#include "diffseg/rng.hpp"
#include "diffseg/tensor.hpp"

using namespace diffseg;

namespace {

// Central finite differences over randomly probed entries of each listed
// tensor; the graph is rebuilt per evaluation. Returns the worst relative
// error against the analytic gradient.
double fd_worst_rel_err(const std::function<Value<double>()>& make_loss,
                        std::vector<std::pair<Tensor<double>, Tensor<double>>> params,
                        int probes_per_param, Rng& rng) {
  for (auto& [v, g] : params) g.fill(0.0);
  Value<double> loss = make_loss();
  backward(loss);
  double worst = 0.0;
  for (auto& [v, g] : params) {
    for (int k = 0; k < probes_per_param; ++k) {
      int64_t i = rng.uniform_int(0, v.numel() - 1);
      double orig = v[i];
      double h = 1e-5 * std::max(1.0, std::abs(orig));
      v[i] = orig + h;
      double fp = make_loss().scalar();
      v[i] = orig - h;
      double fm = make_loss().scalar();
      v[i] = orig;
      double fd = (fp - fm) / (2.0 * h);
      double an = g[i];
      double denom = std::max({std::abs(fd), std::abs(an), 1e-8});
      worst = std::max(worst, std::abs(fd - an) / denom);
    }
  }
  return worst;
}

Tensor<double> randn(std::vector<int64_t> shape, Rng& rng) {
  return normal_tensor<double>(std::move(shape), rng);
}

}  // namespace

TEST_CASE("tensor basics", "[core]") {
  auto t = Tensor<float>::from({2, 3}, {1, 2, 3, 4, 5, 6});
  REQUIRE(t.numel() == 6);
  REQUIRE(t.dim(1) == 3);
  auto u = t;  // shallow
  u[0] = 9;
  REQUIRE(t[0] == 9.0f);
  auto c = t.clone();
  c[0] = 1;
  REQUIRE(t[0] == 9.0f);
  REQUIRE_THROWS_AS(t.reshaped({4, 2}), ConfigError);
  auto r = t.reshaped({3, 2});
  REQUIRE(r.dim(0) == 3);
}

TEST_CASE("rng determinism and statistics", "[core]") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) REQUIRE(a.normal() == b.normal());

  Rng r(7);
  double mean = 0, m2 = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    double v = r.normal();
    mean += v;
    m2 += v * v;
  }
  mean /= n;
  m2 /= n;
  REQUIRE(std::abs(mean) < 0.01);
  REQUIRE(std::abs(m2 - 1.0) < 0.02);

  Rng s(3);
  std::string st = s.state_string();
  double v1 = s.normal();
  Rng s2(0);
  s2.set_state(st);
  REQUIRE(s2.normal() == v1);

  // bounded ints unbiased-ish and in range
  Rng q(11);
  int counts[5] = {0};
  for (int i = 0; i < 50000; ++i) {
    int64_t v = q.uniform_int(0, 4);
    REQUIRE(v >= 0);
    REQUIRE(v <= 4);
    counts[v]++;
  }
  for (int c : counts) REQUIRE(std::abs(c - 10000) < 500);
}

TEST_CASE("autodiff elementwise op gradients", "[core][grad]") {
  Rng rng(1);

  SECTION("silu + affine + add") {
    auto x = randn({2, 3}, rng);
    Tensor<double> gx({2, 3});
    auto make = [&] {
      auto xv = Value<double>::leaf(x, gx);
      auto y = silu(affine(xv, 1.7, -0.3));
      auto z = add(y, scale(xv, 0.5));
      return mean_of(mse_per_sample(z, Tensor<double>::zeros(z.val().shape())));
    };
    REQUIRE(fd_worst_rel_err(make, {{x, gx}}, 6, rng) < 1e-6);
  }

  SECTION("scale_per_sample_add_const") {
    auto x = randn({3, 4}, rng);
    auto addend = randn({3, 4}, rng);
    Tensor<double> gx({3, 4});
    auto make = [&] {
      auto xv = Value<double>::leaf(x, gx);
      auto y = scale_per_sample_add_const(xv, {0.5, -1.25, 2.0}, addend);
      return mean_of(mse_per_sample(y, Tensor<double>::zeros({3, 4})));
    };
    REQUIRE(fd_worst_rel_err(make, {{x, gx}}, 8, rng) < 1e-6);
  }

  SECTION("weighted_sum") {
    auto x = randn({4}, rng);
    Tensor<double> gx({4});
    auto make = [&] {
      auto xv = Value<double>::leaf(x, gx);
      return weighted_sum(silu(xv), {0.1, -0.4, 1.0, 2.0});
    };
    REQUIRE(fd_worst_rel_err(make, {{x, gx}}, 4, rng) < 1e-6);
  }
}

TEST_CASE("autodiff structural op gradients", "[core][grad]") {
  Rng rng(2);

  SECTION("concat + upsample") {
    auto a = randn({2, 2, 3, 3}, rng);
    auto b = randn({2, 1, 3, 3}, rng);
    Tensor<double> ga({2, 2, 3, 3}), gb({2, 1, 3, 3});
    auto tgt = randn({2, 3, 6, 6}, rng);
    auto make = [&] {
      auto av = Value<double>::leaf(a, ga);
      auto bv = Value<double>::leaf(b, gb);
      auto y = upsample_nearest2(concat_channels(av, bv));
      return mean_of(mse_per_sample(y, tgt));
    };
    REQUIRE(fd_worst_rel_err(make, {{a, ga}, {b, gb}}, 8, rng) < 1e-6);
  }

  SECTION("add_channel_bias") {
    auto x = randn({2, 3, 4, 4}, rng);
    auto v = randn({2, 3}, rng);
    Tensor<double> gx({2, 3, 4, 4}), gv({2, 3});
    auto tgt = randn({2, 3, 4, 4}, rng);
    auto make = [&] {
      auto xv = Value<double>::leaf(x, gx);
      auto vv = Value<double>::leaf(v, gv);
      return mean_of(mse_per_sample(add_channel_bias(xv, vv), tgt));
    };
    REQUIRE(fd_worst_rel_err(make, {{x, gx}, {v, gv}}, 8, rng) < 1e-6);
  }
}

TEST_CASE("conv2d gradients", "[core][grad]") {
  Rng rng(3);

  SECTION("3x3 stride 1 pad 1") {
    auto x = randn({2, 3, 6, 6}, rng);
    auto w = randn({4, 3, 3, 3}, rng);
    auto b = randn({4}, rng);
    Tensor<double> gx(x.shape()), gw(w.shape()), gb(b.shape());
    auto tgt = randn({2, 4, 6, 6}, rng);
    auto make = [&] {
      auto y = conv2d(Value<double>::leaf(x, gx), Value<double>::leaf(w, gw),
                      Value<double>::leaf(b, gb), 1, 1);
      return mean_of(mse_per_sample(y, tgt));
    };
    REQUIRE(fd_worst_rel_err(make, {{x, gx}, {w, gw}, {b, gb}}, 10, rng) < 1e-6);
  }

  SECTION("3x3 stride 2 pad 1") {
    auto x = randn({1, 2, 8, 8}, rng);
    auto w = randn({3, 2, 3, 3}, rng);
    auto b = randn({3}, rng);
    Tensor<double> gx(x.shape()), gw(w.shape()), gb(b.shape());
    auto tgt = randn({1, 3, 4, 4}, rng);
    auto make = [&] {
      auto y = conv2d(Value<double>::leaf(x, gx), Value<double>::leaf(w, gw),
                      Value<double>::leaf(b, gb), 2, 1);
      return mean_of(mse_per_sample(y, tgt));
    };
    REQUIRE(fd_worst_rel_err(make, {{x, gx}, {w, gw}, {b, gb}}, 10, rng) < 1e-6);
  }

  SECTION("1x1 fast path") {
    auto x = randn({2, 4, 5, 5}, rng);
    auto w = randn({2, 4, 1, 1}, rng);
    auto b = randn({2}, rng);
    Tensor<double> gx(x.shape()), gw(w.shape()), gb(b.shape());
    auto tgt = randn({2, 2, 5, 5}, rng);
    auto make = [&] {
      auto y = conv2d(Value<double>::leaf(x, gx), Value<double>::leaf(w, gw),
                      Value<double>::leaf(b, gb), 1, 0);
      return mean_of(mse_per_sample(y, tgt));
    };
    REQUIRE(fd_worst_rel_err(make, {{x, gx}, {w, gw}, {b, gb}}, 10, rng) < 1e-6);
  }
}

TEST_CASE("linear / group_norm / softmax / ce gradients", "[core][grad]") {
  Rng rng(4);

  SECTION("linear") {
    auto x = randn({3, 5}, rng);
    auto w = randn({4, 5}, rng);
    auto b = randn({4}, rng);
    Tensor<double> gx(x.shape()), gw(w.shape()), gb(b.shape());
    auto tgt = randn({3, 4}, rng);
    auto make = [&] {
      auto y = linear(Value<double>::leaf(x, gx), Value<double>::leaf(w, gw),
                      Value<double>::leaf(b, gb));
      return mean_of(mse_per_sample(silu(y), tgt));
    };
    REQUIRE(fd_worst_rel_err(make, {{x, gx}, {w, gw}, {b, gb}}, 10, rng) < 1e-6);
  }

  SECTION("group_norm") {
    auto x = randn({2, 4, 3, 3}, rng);
    auto ga = randn({4}, rng);
    auto be = randn({4}, rng);
    Tensor<double> gx(x.shape()), gga(ga.shape()), gbe(be.shape());
    auto tgt = randn({2, 4, 3, 3}, rng);
    auto make = [&] {
      auto y = group_norm(Value<double>::leaf(x, gx), Value<double>::leaf(ga, gga),
                          Value<double>::leaf(be, gbe), 2);
      return mean_of(mse_per_sample(y, tgt));
    };
    REQUIRE(fd_worst_rel_err(make, {{x, gx}, {ga, gga}, {be, gbe}}, 10, rng) < 1e-5);
  }

  SECTION("softmax_channels") {
    auto x = randn({1, 3, 2, 2}, rng);
    Tensor<double> gx(x.shape());
    auto tgt = randn({1, 3, 2, 2}, rng);
    auto make = [&] {
      auto y = softmax_channels(Value<double>::leaf(x, gx));
      return mean_of(mse_per_sample(y, tgt));
    };
    REQUIRE(fd_worst_rel_err(make, {{x, gx}}, 8, rng) < 1e-6);
  }

  SECTION("ce_per_sample") {
    auto x = randn({2, 3, 4, 4}, rng);
    Tensor<double> gx(x.shape());
    Tensor<int32_t> labels({2, 4, 4});
    for (int64_t i = 0; i < labels.numel(); ++i)
      labels[i] = static_cast<int32_t>(rng.uniform_int(0, 2));
    auto make = [&] {
      auto y = ce_per_sample(Value<double>::leaf(x, gx), labels);
      return weighted_sum(y, {0.7, 0.3});
    };
    REQUIRE(fd_worst_rel_err(make, {{x, gx}}, 12, rng) < 1e-6);
    REQUIRE_THROWS_AS(
        ce_per_sample(Value<double>::constant(x),
                      Tensor<int32_t>::full({2, 4, 4}, 7)),
        ConfigError);
  }
}

TEST_CASE("argmax tie-break picks first maximum", "[core]") {
  auto logits = Tensor<float>::from({1, 3, 1, 1}, {2.0f, 2.0f, 1.0f});
  auto am = argmax_channels(logits);
  REQUIRE(am[0] == 0);
}

TEST_CASE("adam converges on a quadratic and matches reference step", "[core]") {
  // single param, loss = 0.5*(x-3)^2
  ParamStore<double> ps;
  auto p = ps.add("x", Tensor<double>::from({1}, {0.0}));
  AdamOptimizer<double> opt(0.1, 0.9, 0.99, 0.0);
  for (int i = 0; i < 500; ++i) {
    ps.zero_grad();
    p->grad[0] = p->value[0] - 3.0;
    opt.step(ps);
  }
  REQUIRE(std::abs(p->value[0] - 3.0) < 1e-3);

  // first step magnitude: lr * g/ (sqrt(g^2)+eps) ~ lr
  ParamStore<double> ps2;
  auto q = ps2.add("x", Tensor<double>::from({1}, {1.0}));
  AdamOptimizer<double> opt2(0.01, 0.9, 0.99, 0.0);
  ps2.zero_grad();
  q->grad[0] = 0.5;
  opt2.step(ps2);
  REQUIRE(std::abs((1.0 - q->value[0]) - 0.01) < 1e-6);
}
