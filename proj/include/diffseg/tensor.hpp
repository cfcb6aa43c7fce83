#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <memory>
#include <new>
#include <numeric>
#include <vector>

#include "diffseg/common.hpp"

namespace diffseg {

// 64-byte-aligned zeroed storage. Fixed alignment keeps every vectorized
// kernel on one code path, so results are bit-reproducible regardless of
// where the allocator places a buffer.
template <typename T>
class AlignedBuf {
 public:
  explicit AlignedBuf(size_t n, bool zero = true) : n_(n) {
    if (n_) {
      size_t bytes = (n_ * sizeof(T) + 63) / 64 * 64;
      p_ = static_cast<T*>(::operator new(bytes, std::align_val_t(64)));
      if (zero) std::memset(p_, 0, bytes);
    }
  }
  AlignedBuf(const AlignedBuf&) = delete;
  AlignedBuf& operator=(const AlignedBuf&) = delete;
  ~AlignedBuf() {
    if (p_) ::operator delete(p_, std::align_val_t(64));
  }
  T* data() { return p_; }
  const T* data() const { return p_; }
  size_t size() const { return n_; }

 private:
  T* p_ = nullptr;
  size_t n_ = 0;
};

// Dense row-major tensor. Copies are shallow (shared storage); ops always
// allocate fresh outputs, use clone() before mutating a shared tensor.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int64_t> shape)
      : shape_(std::move(shape)),
        data_(std::make_shared<AlignedBuf<T>>(static_cast<size_t>(count(shape_)))) {}

  static Tensor zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape)); }

  // Uninitialized storage for outputs that are fully overwritten.
  static Tensor uninit(std::vector<int64_t> shape) {
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::make_shared<AlignedBuf<T>>(static_cast<size_t>(count(t.shape_)),
                                              /*zero=*/false);
    return t;
  }

  static Tensor full(std::vector<int64_t> shape, T value) {
    Tensor t(std::move(shape));
    std::fill(t.begin(), t.end(), value);
    return t;
  }

  static Tensor from(std::vector<int64_t> shape, const std::vector<T>& values) {
    require(count(shape) == static_cast<int64_t>(values.size()),
            "tensor: value count does not match shape");
    Tensor t(std::move(shape));
    std::memcpy(t.data(), values.data(), sizeof(T) * values.size());
    return t;
  }

  bool defined() const { return static_cast<bool>(data_); }
  const std::vector<int64_t>& shape() const { return shape_; }
  int64_t rank() const { return static_cast<int64_t>(shape_.size()); }
  int64_t dim(int i) const { return shape_.at(i); }
  int64_t numel() const { return data_ ? static_cast<int64_t>(data_->size()) : 0; }

  T* data() { return data_->data(); }
  const T* data() const { return data_->data(); }
  T* begin() { return data(); }
  T* end() { return data() + numel(); }
  const T* begin() const { return data(); }
  const T* end() const { return data() + numel(); }

  T& operator[](int64_t i) { return data()[i]; }
  const T& operator[](int64_t i) const { return data()[i]; }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  Tensor clone() const {
    Tensor t = uninit(shape_);
    std::memcpy(t.data(), data(), sizeof(T) * static_cast<size_t>(numel()));
    return t;
  }

  // Shares storage; element count must match.
  Tensor reshaped(std::vector<int64_t> shape) const {
    require(count(shape) == numel(), "tensor: reshape must preserve element count");
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = data_;
    return t;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    const T* src = data();
    U* dst = out.data();
    for (int64_t i = 0; i < numel(); ++i) dst[i] = static_cast<U>(src[i]);
    return out;
  }

  void fill(T value) { std::fill(begin(), end(), value); }

  bool all_finite() const {
    const T* p = data();
    for (int64_t i = 0; i < numel(); ++i)
      if (!std::isfinite(static_cast<double>(p[i]))) return false;
    return true;
  }

  double sum() const {
    double s = 0;
    const T* p = data();
    for (int64_t i = 0; i < numel(); ++i) s += static_cast<double>(p[i]);
    return s;
  }

  double sq_norm() const {
    double s = 0;
    const T* p = data();
    for (int64_t i = 0; i < numel(); ++i)
      s += static_cast<double>(p[i]) * static_cast<double>(p[i]);
    return s;
  }

  static int64_t count(const std::vector<int64_t>& shape) {
    int64_t n = 1;
    for (int64_t d : shape) {
      require(d >= 0, "tensor: negative dimension");
      n *= d;
    }
    return n;
  }

 private:
  std::vector<int64_t> shape_;
  std::shared_ptr<AlignedBuf<T>> data_;
};

template <typename T>
bool tensors_equal(const Tensor<T>& a, const Tensor<T>& b) {
  if (!a.same_shape(b)) return false;
  for (int64_t i = 0; i < a.numel(); ++i)
    if (a[i] != b[i]) return false;
  return true;
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  double m = 0;
  for (int64_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

}  // namespace diffseg
