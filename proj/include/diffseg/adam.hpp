#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "diffseg/autodiff.hpp"
#include "diffseg/tensor.hpp"

namespace diffseg {

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  Tensor<T> adam_m;
  Tensor<T> adam_v;

  Parameter(std::string n, Tensor<T> v)
      : name(std::move(n)),
        value(std::move(v)),
        grad(Tensor<T>::zeros(value.shape())),
        adam_m(Tensor<T>::zeros(value.shape())),
        adam_v(Tensor<T>::zeros(value.shape())) {}

  // Graph leaf whose gradient accumulates into this parameter.
  Value<T> leaf() const { return Value<T>::leaf(value, grad); }
};

template <typename T>
class ParamStore {
 public:
  std::shared_ptr<Parameter<T>> add(std::string name, Tensor<T> init) {
    params_.push_back(std::make_shared<Parameter<T>>(std::move(name), std::move(init)));
    return params_.back();
  }

  const std::vector<std::shared_ptr<Parameter<T>>>& all() const { return params_; }

  std::shared_ptr<Parameter<T>> find(const std::string& name) const {
    for (const auto& p : params_)
      if (p->name == name) return p;
    return nullptr;
  }

  int64_t total_size() const {
    int64_t n = 0;
    for (const auto& p : params_) n += p->value.numel();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p->grad.fill(T(0));
  }

 private:
  std::vector<std::shared_ptr<Parameter<T>>> params_;
};

// Adam with L2 weight decay folded into the gradient.
template <typename T>
class AdamOptimizer {
 public:
  AdamOptimizer(double lr, double beta1 = 0.9, double beta2 = 0.99,
                double weight_decay = 0.0, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), wd_(weight_decay), eps_(eps) {}

  double learning_rate() const { return lr_; }
  void set_learning_rate(double lr) { lr_ = lr; }
  int64_t step_count() const { return step_; }

  void step(ParamStore<T>& params) {
    ++step_;
    double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
    double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
    for (auto& p : params.all()) {
      T* v = p->value.data();
      T* g = p->grad.data();
      T* m = p->adam_m.data();
      T* s = p->adam_v.data();
      for (int64_t i = 0; i < p->value.numel(); ++i) {
        double gi = static_cast<double>(g[i]) + wd_ * static_cast<double>(v[i]);
        double mi = beta1_ * m[i] + (1.0 - beta1_) * gi;
        double si = beta2_ * s[i] + (1.0 - beta2_) * gi * gi;
        m[i] = static_cast<T>(mi);
        s[i] = static_cast<T>(si);
        double mhat = mi / bc1;
        double shat = si / bc2;
        v[i] = static_cast<T>(v[i] - lr_ * mhat / (std::sqrt(shat) + eps_));
      }
    }
  }

 private:
  double lr_, beta1_, beta2_, wd_, eps_;
  int64_t step_ = 0;
};

}  // namespace diffseg
