#pragma once

#include <boost/math/distributions/students_t.hpp>
#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "diffseg/common.hpp"
#include "diffseg/tensor.hpp"

namespace diffseg {

// Dice coefficient as a percentage: 100 * 2|P∩T| / (|P|+|T|) over the
// positive class. Two empty sets count as perfect agreement (100).
inline double dice(const Tensor<int32_t>& pred, const Tensor<int32_t>& target,
                   int32_t positive_class) {
  require(pred.same_shape(target), "dice: shape mismatch");
  int64_t inter = 0, p = 0, t = 0;
  for (int64_t i = 0; i < pred.numel(); ++i) {
    bool a = pred[i] == positive_class;
    bool b = target[i] == positive_class;
    p += a;
    t += b;
    inter += a && b;
  }
  if (p + t == 0) return 100.0;
  return 100.0 * 2.0 * static_cast<double>(inter) / static_cast<double>(p + t);
}

// Jaccard index as a percentage: 100 * |P∩T| / |P∪T|; empty-empty is 100.
inline double jaccard(const Tensor<int32_t>& pred, const Tensor<int32_t>& target,
                      int32_t positive_class) {
  require(pred.same_shape(target), "jaccard: shape mismatch");
  int64_t inter = 0, uni = 0;
  for (int64_t i = 0; i < pred.numel(); ++i) {
    bool a = pred[i] == positive_class;
    bool b = target[i] == positive_class;
    inter += a && b;
    uni += a || b;
  }
  if (uni == 0) return 100.0;
  return 100.0 * static_cast<double>(inter) / static_cast<double>(uni);
}

struct EvalResult {
  double dice_mean = 0.0;
  double jaccard_mean = 0.0;
  std::vector<double> dice_per_sample;
  std::vector<double> jaccard_per_sample;
};

// Sample mean and t-distribution confidence halfwidth.
inline std::pair<double, double> mean_ci(const std::vector<double>& values,
                                         double confidence) {
  require(values.size() >= 2, "mean_ci: need at least 2 values");
  require(confidence > 0.0 && confidence < 1.0, "mean_ci: confidence must be in (0,1)");
  double n = static_cast<double>(values.size());
  double mean = 0;
  for (double v : values) mean += v;
  mean /= n;
  double ss = 0;
  for (double v : values) ss += (v - mean) * (v - mean);
  double s = std::sqrt(ss / (n - 1.0));
  boost::math::students_t dist(n - 1.0);
  double tcrit = boost::math::quantile(dist, 0.5 + confidence / 2.0);
  return {mean, tcrit * s / std::sqrt(n)};
}

inline double mean(const std::vector<double>& v) {
  double acc = 0;
  for (double x : v) acc += x;
  return v.empty() ? 0.0 : acc / static_cast<double>(v.size());
}

inline double sample_stddev(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  double m = mean(v);
  double ss = 0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / (static_cast<double>(v.size()) - 1.0));
}

}  // namespace diffseg
