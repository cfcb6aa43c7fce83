#pragma once

#include <cmath>
#include <vector>

#include "diffseg/autodiff.hpp"
#include "diffseg/common.hpp"
#include "diffseg/nn_ops.hpp"
#include "diffseg/rng.hpp"
#include "diffseg/tensor.hpp"

namespace diffseg {

// Coefficient tables for a T-step diffusion process. All arithmetic is kept
// in 64-bit; the cumulative product underflows float32 near t = T.
// Indexing: beta/alpha are 1-based over [1, T]; abar is defined on [0, T]
// with abar[0] = 1 (t = 0 is the no-noise identity).
struct NoiseSchedule {
  int steps = 0;                 // T
  std::vector<double> beta;      // beta[t], t in [1, T]; beta[0] unused
  std::vector<double> alpha;     // 1 - beta[t]
  std::vector<double> abar;      // prod_{i<=t} alpha[i]

  double abar_at(int t) const {
    require(t >= 0 && t <= steps, "schedule: timestep ", t, " outside [0, ", steps, "]");
    return abar[static_cast<size_t>(t)];
  }
};

inline NoiseSchedule build_linear_schedule(int steps, double beta_start, double beta_end) {
  require(steps >= 1, "build_linear_schedule: T must be positive, got ", steps);
  require(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end,
          "build_linear_schedule: need 0 < beta_start <= beta_end < 1");
  NoiseSchedule s;
  s.steps = steps;
  s.beta.assign(static_cast<size_t>(steps) + 1, 0.0);
  s.alpha.assign(static_cast<size_t>(steps) + 1, 0.0);
  s.abar.assign(static_cast<size_t>(steps) + 1, 1.0);
  for (int t = 1; t <= steps; ++t) {
    double frac = steps == 1 ? 0.0 : static_cast<double>(t - 1) / (steps - 1);
    s.beta[t] = beta_start + (beta_end - beta_start) * frac;
    s.alpha[t] = 1.0 - s.beta[t];
    s.abar[t] = s.abar[t - 1] * s.alpha[t];
  }
  return s;
}

// Forward noising: sqrt(abar_t) x + sqrt(1 - abar_t) eps.
template <typename T>
Tensor<T> add_noise(const Tensor<T>& x, const Tensor<T>& eps, int t,
                    const NoiseSchedule& s) {
  require(x.same_shape(eps), "add_noise: shape mismatch");
  double a = s.abar_at(t);
  double ca = std::sqrt(a), cb = std::sqrt(1.0 - a);
  Tensor<T> out(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i)
    out[i] = static_cast<T>(ca * static_cast<double>(x[i]) +
                            cb * static_cast<double>(eps[i]));
  return out;
}

// Per-sample timesteps over the leading dimension.
template <typename T>
Tensor<T> add_noise_batch(const Tensor<T>& x, const Tensor<T>& eps,
                          const std::vector<int>& ts, const NoiseSchedule& s) {
  require(x.same_shape(eps), "add_noise_batch: shape mismatch");
  require(x.rank() >= 1 && x.dim(0) == static_cast<int64_t>(ts.size()),
          "add_noise_batch: timestep count");
  int64_t n = x.dim(0), m = x.numel() / std::max<int64_t>(n, 1);
  Tensor<T> out(x.shape());
  for (int64_t i = 0; i < n; ++i) {
    double a = s.abar_at(ts[static_cast<size_t>(i)]);
    double ca = std::sqrt(a), cb = std::sqrt(1.0 - a);
    for (int64_t j = 0; j < m; ++j)
      out[i * m + j] = static_cast<T>(ca * static_cast<double>(x[i * m + j]) +
                                      cb * static_cast<double>(eps[i * m + j]));
  }
  return out;
}

// Noising a zero tensor: sqrt(1 - abar_t) eps with eps ~ N(0, I). Rejects
// t = 0, which would produce the zero tensor rather than noise.
template <typename T>
Tensor<T> pure_noise_input(std::vector<int64_t> shape, int t,
                           const NoiseSchedule& s, Rng& rng) {
  require(t >= 1 && t <= s.steps, "pure_noise_input: t must be in [1, T]");
  double cb = std::sqrt(1.0 - s.abar_at(t));
  Tensor<T> out(std::move(shape));
  for (int64_t i = 0; i < out.numel(); ++i)
    out[i] = static_cast<T>(cb * rng.normal());
  return out;
}

template <typename T>
Tensor<T> pure_noise_batch(std::vector<int64_t> shape, const std::vector<int>& ts,
                           const NoiseSchedule& s, Rng& rng) {
  require(!shape.empty() && shape[0] == static_cast<int64_t>(ts.size()),
          "pure_noise_batch: timestep count");
  Tensor<T> out(std::move(shape));
  int64_t n = out.dim(0), m = out.numel() / std::max<int64_t>(n, 1);
  for (int64_t i = 0; i < n; ++i) {
    int t = ts[static_cast<size_t>(i)];
    require(t >= 1 && t <= s.steps, "pure_noise_batch: t must be in [1, T]");
    double cb = std::sqrt(1.0 - s.abar_at(t));
    for (int64_t j = 0; j < m; ++j) out[i * m + j] = static_cast<T>(cb * rng.normal());
  }
  return out;
}

// Inversion of the forward noising given predicted noise:
// sqrt(1/abar_t) x_noisy - sqrt(1/abar_t - 1) eps_pred.
template <typename T>
Tensor<T> reconstruct_x0(const Tensor<T>& x_noisy, const Tensor<T>& eps_pred,
                         int t, const NoiseSchedule& s) {
  require(x_noisy.same_shape(eps_pred), "reconstruct_x0: shape mismatch");
  require(t >= 1 && t <= s.steps, "reconstruct_x0: t must be in [1, T]");
  double inv = 1.0 / s.abar_at(t);
  double ca = std::sqrt(inv), cb = std::sqrt(inv - 1.0);
  Tensor<T> out(x_noisy.shape());
  for (int64_t i = 0; i < out.numel(); ++i)
    out[i] = static_cast<T>(ca * static_cast<double>(x_noisy[i]) -
                            cb * static_cast<double>(eps_pred[i]));
  return out;
}

// Graph version: eps_pred is a live node, x_noisy a constant; per-sample t.
template <typename T>
Value<T> reconstruct_x0_graph(const Tensor<T>& x_noisy, const Value<T>& eps_pred,
                              const std::vector<int>& ts, const NoiseSchedule& s) {
  const auto& ev = eps_pred.val();
  require(ev.same_shape(x_noisy), "reconstruct_x0_graph: shape mismatch");
  int64_t n = ev.dim(0);
  require(n == static_cast<int64_t>(ts.size()), "reconstruct_x0_graph: timestep count");
  std::vector<double> neg_cb(ts.size());
  Tensor<T> scaled_noisy(x_noisy.shape());
  int64_t m = ev.numel() / std::max<int64_t>(n, 1);
  for (int64_t i = 0; i < n; ++i) {
    int t = ts[static_cast<size_t>(i)];
    require(t >= 1 && t <= s.steps, "reconstruct_x0_graph: t must be in [1, T]");
    double inv = 1.0 / s.abar_at(t);
    neg_cb[static_cast<size_t>(i)] = -std::sqrt(inv - 1.0);
    double ca = std::sqrt(inv);
    for (int64_t j = 0; j < m; ++j)
      scaled_noisy[i * m + j] = static_cast<T>(ca * static_cast<double>(x_noisy[i * m + j]));
  }
  return scale_per_sample_add_const(eps_pred, std::move(neg_cb), scaled_noisy);
}

// Discrete uniform timestep on [1, T]; t = 0 is excluded because it adds no
// noise and makes the denoising task vacuous.
inline int sample_timestep(Rng& rng, int steps) {
  require(steps >= 1, "sample_timestep: T must be positive");
  return static_cast<int>(rng.uniform_int(1, steps));
}

inline std::vector<int> sample_timesteps(Rng& rng, int steps, size_t count) {
  std::vector<int> ts(count);
  for (size_t i = 0; i < count; ++i) ts[i] = sample_timestep(rng, steps);
  return ts;
}

}  // namespace diffseg
