#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "diffseg/losses.hpp"
#include "diffseg/rng.hpp"

using namespace diffseg;

TEST_CASE("lambda ramp", "[losses]") {
  REQUIRE(lambda_at(0, 200, 5.0) == 0.0);
  REQUIRE(lambda_at(200, 200, 5.0) == 5.0);
  REQUIRE(lambda_at(100, 200, 5.0) == Catch::Approx(2.5).margin(1e-15));

  double prev = -1.0;
  for (int e = 0; e <= 200; ++e) {
    double l = lambda_at(e, 200, 5.0);
    REQUIRE(l >= prev);
    prev = l;
  }
  REQUIRE_THROWS_AS(lambda_at(-1, 200, 5.0), ConfigError);
  REQUIRE_THROWS_AS(lambda_at(201, 200, 5.0), ConfigError);
  REQUIRE_THROWS_AS(lambda_at(1, 0, 5.0), ConfigError);
}

TEST_CASE("cps loss values and symmetry", "[losses]") {
  SECTION("confident agreement is near zero") {
    // both extremely confident, agreeing per-pixel
    Rng rng(1);
    Tensor<float> a({1, 2, 3, 3}), b({1, 2, 3, 3});
    for (int64_t j = 0; j < 9; ++j) {
      bool cls1 = rng.uniform() < 0.5;
      a[j] = cls1 ? -20.0f : 20.0f;
      a[9 + j] = cls1 ? 20.0f : -20.0f;
      b[j] = cls1 ? -20.0f : 20.0f;
      b[9 + j] = cls1 ? 20.0f : -20.0f;
    }
    REQUIRE(cps_loss(a, b) < 1e-6);
  }

  SECTION("exact symmetry on random logits") {
    Rng rng(2);
    for (int rep = 0; rep < 5; ++rep) {
      auto a = normal_tensor<float>({2, 3, 4, 4}, rng);
      auto b = normal_tensor<float>({2, 3, 4, 4}, rng);
      REQUIRE(cps_loss(a, b) == cps_loss(b, a));
    }
  }

  SECTION("hand-computed single-pixel case") {
    auto student = Tensor<double>::from({1, 2, 1, 1}, {0.0, 0.0});
    auto teacher = Tensor<double>::from({1, 2, 1, 1}, {10.0, -10.0});
    REQUIRE(cps_loss(student, teacher) ==
            Catch::Approx(0.693147182621099).epsilon(1e-12));
  }

  SECTION("channel mismatch rejected") {
    Tensor<float> a({1, 2, 2, 2}), b({1, 3, 2, 2});
    REQUIRE_THROWS_AS(cps_loss(a, b), ConfigError);
  }

  SECTION("pseudo-label targets are insensitive to within-argmax perturbation") {
    Rng rng(3);
    auto a = normal_tensor<float>({1, 2, 4, 4}, rng);
    auto b = normal_tensor<float>({1, 2, 4, 4}, rng);
    auto b2 = b.clone();
    for (int64_t i = 0; i < b2.numel(); ++i) b2[i] += 1e-4f;  // argmax unchanged
    REQUIRE(tensors_equal(argmax_channels(b), argmax_channels(b2)));
    // CE of a against b's pseudo-labels is identical under the perturbation
    auto ce_a_b = ce_per_sample(Value<float>::constant(a), argmax_channels(b)).val();
    auto ce_a_b2 = ce_per_sample(Value<float>::constant(a), argmax_channels(b2)).val();
    REQUIRE(tensors_equal(ce_a_b, ce_a_b2));
  }
}

TEST_CASE("supervised loss values", "[losses]") {
  SECTION("perfectly confident and correct") {
    Tensor<int32_t> label({1, 2, 2});
    label[0] = 0; label[1] = 1; label[2] = 1; label[3] = 0;
    Tensor<float> logits({1, 2, 2, 2});
    for (int64_t j = 0; j < 4; ++j) {
      logits[j] = label[j] == 0 ? 25.0f : -25.0f;
      logits[4 + j] = label[j] == 1 ? 25.0f : -25.0f;
    }
    REQUIRE(supervised_loss(logits, logits, label) < 1e-6);
  }

  SECTION("uniform logits, two classes") {
    Tensor<float> logits({1, 2, 3, 3});
    Tensor<int32_t> label({1, 3, 3});
    REQUIRE(supervised_loss(logits, logits, label) ==
            Catch::Approx(2.0 * std::log(2.0)).epsilon(1e-6));
  }

  SECTION("invariant under identical spatial permutation") {
    Rng rng(7);
    auto t = normal_tensor<double>({1, 2, 2, 3}, rng);
    auto st = normal_tensor<double>({1, 2, 2, 3}, rng);
    Tensor<int32_t> label({1, 2, 3});
    for (int64_t i = 0; i < 6; ++i) label[i] = static_cast<int32_t>(rng.uniform_int(0, 1));

    std::vector<int> perm = {3, 0, 5, 1, 4, 2};
    Tensor<double> tp({1, 2, 2, 3}), sp({1, 2, 2, 3});
    Tensor<int32_t> lp({1, 2, 3});
    for (int64_t p = 0; p < 6; ++p) {
      lp[p] = label[perm[p]];
      for (int64_t c = 0; c < 2; ++c) {
        tp[c * 6 + p] = t[c * 6 + perm[p]];
        sp[c * 6 + p] = st[c * 6 + perm[p]];
      }
    }
    REQUIRE(supervised_loss(t, st, label) ==
            Catch::Approx(supervised_loss(tp, sp, lp)).epsilon(1e-12));
  }

  SECTION("out-of-range label rejected") {
    Tensor<float> logits({1, 2, 2, 2});
    REQUIRE_THROWS_AS(supervised_loss(logits, logits, Tensor<int32_t>::full({1, 2, 2}, 5)),
                      ConfigError);
  }
}

TEST_CASE("total loss composition", "[losses]") {
  LossWeights w;
  w.lambda_max = 5.0;
  w.rounds = 1;

  SECTION("lambda 0") {
    BatchLossBreakdown parts;
    parts.sup = 1.7;
    parts.semi = 0.4;
    parts.align = {0.3};
    parts.reconstr = {0.2};
    w.lambda = 0.0;
    REQUIRE(total_loss(true, parts, w) == 1.7);
    REQUIRE(total_loss(false, parts, w) == 0.0);
  }

  SECTION("hand-composed labeled case") {
    BatchLossBreakdown parts;
    parts.sup = 1.0;
    parts.semi = 0.5;
    parts.align = {0.2};
    parts.reconstr = {0.1};
    w.lambda = 2.0;
    REQUIRE(total_loss(true, parts, w) == Catch::Approx(2.6).margin(1e-12));
  }

  SECTION("linear in lambda") {
    BatchLossBreakdown parts;
    parts.sup = 0.9;
    parts.semi = 0.33;
    parts.align = {0.11};
    parts.reconstr = {0.07};
    w.lambda = 1.0;
    double at1 = total_loss(false, parts, w) ;
    w.lambda = 3.0;
    double at3 = total_loss(false, parts, w);
    REQUIRE(at3 == Catch::Approx(3.0 * at1).epsilon(1e-12));
  }

  SECTION("random parts, R in {1,3,5}") {
    Rng rng(11);
    for (int r : {1, 3, 5}) {
      for (int rep = 0; rep < 20; ++rep) {
        BatchLossBreakdown parts;
        parts.sup = rng.uniform_in(0, 3);
        parts.semi = rng.uniform_in(0, 3);
        for (int i = 0; i < r; ++i) {
          parts.align.push_back(rng.uniform_in(0, 2));
          parts.reconstr.push_back(rng.uniform_in(0, 2));
        }
        LossWeights wr;
        wr.lambda_max = 5.0;
        wr.lambda = rng.uniform_in(0, 5);
        wr.rounds = r;

        double am = 0, rm = 0;
        for (int i = 0; i < r; ++i) {
          am += parts.align[i];
          rm += parts.reconstr[i];
        }
        am /= r;
        rm /= r;
        double want_l = parts.sup + wr.lambda * (parts.semi + am + rm);
        double want_u = wr.lambda * (parts.semi + am + rm);
        REQUIRE(std::abs(total_loss(true, parts, wr) - want_l) <=
                1e-6 * std::max(1.0, std::abs(want_l)));
        REQUIRE(std::abs(total_loss(false, parts, wr) - want_u) <=
                1e-6 * std::max(1.0, std::abs(want_u)));
      }
    }
  }

  SECTION("R mismatch rejected") {
    BatchLossBreakdown parts;
    parts.align = {0.1, 0.2};
    parts.reconstr = {0.1, 0.2};
    w.lambda = 1.0;
    w.rounds = 3;
    REQUIRE_THROWS_AS(total_loss(false, parts, w), ConfigError);
  }
}
