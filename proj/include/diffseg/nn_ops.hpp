#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include "diffseg/autodiff.hpp"
#include "diffseg/tensor.hpp"

namespace diffseg {

namespace detail {

template <typename T>
using MatCM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor>;
template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Patch matrix laid out [pixels x K] column-major: each column is one
// (channel, ky, kx) offset plane, contiguous over output pixels. This keeps
// the conv GEMM vectorized along the long pixel dimension.
template <typename T>
void im2row(const T* x, T* col, int64_t cin, int64_t h, int64_t w, int64_t kh,
            int64_t kw, int stride, int pad, int64_t hout, int64_t wout) {
  const int64_t p = hout * wout;
  int64_t k = 0;
  for (int64_t c = 0; c < cin; ++c) {
    const T* xc = x + c * h * w;
    for (int64_t dy = 0; dy < kh; ++dy) {
      for (int64_t dx = 0; dx < kw; ++dx, ++k) {
        T* dst = col + k * p;
        for (int64_t oy = 0; oy < hout; ++oy) {
          int64_t iy = oy * stride - pad + dy;
          T* drow = dst + oy * wout;
          if (iy < 0 || iy >= h) {
            std::fill(drow, drow + wout, T(0));
            continue;
          }
          const T* xrow = xc + iy * w;
          if (stride == 1) {
            int64_t ix0 = dx - pad;
            int64_t lo = std::max<int64_t>(0, -ix0);
            int64_t hi = std::min<int64_t>(wout, w - ix0);
            for (int64_t ox = 0; ox < lo; ++ox) drow[ox] = T(0);
            if (hi > lo) std::memcpy(drow + lo, xrow + ix0 + lo, sizeof(T) * (hi - lo));
            for (int64_t ox = std::max(lo, hi); ox < wout; ++ox) drow[ox] = T(0);
          } else {
            for (int64_t ox = 0; ox < wout; ++ox) {
              int64_t ix = ox * stride - pad + dx;
              drow[ox] = (ix >= 0 && ix < w) ? xrow[ix] : T(0);
            }
          }
        }
      }
    }
  }
}

template <typename T>
void row2im_add(const T* col, T* dx, int64_t cin, int64_t h, int64_t w,
                int64_t kh, int64_t kw, int stride, int pad, int64_t hout,
                int64_t wout) {
  const int64_t p = hout * wout;
  int64_t k = 0;
  for (int64_t c = 0; c < cin; ++c) {
    T* xc = dx + c * h * w;
    for (int64_t dy = 0; dy < kh; ++dy) {
      for (int64_t dx_ = 0; dx_ < kw; ++dx_, ++k) {
        const T* src = col + k * p;
        for (int64_t oy = 0; oy < hout; ++oy) {
          int64_t iy = oy * stride - pad + dy;
          if (iy < 0 || iy >= h) continue;
          T* xrow = xc + iy * w;
          const T* srow = src + oy * wout;
          if (stride == 1) {
            int64_t ix0 = dx_ - pad;
            int64_t lo = std::max<int64_t>(0, -ix0);
            int64_t hi = std::min<int64_t>(wout, w - ix0);
            for (int64_t ox = lo; ox < hi; ++ox) xrow[ix0 + ox] += srow[ox];
          } else {
            for (int64_t ox = 0; ox < wout; ++ox) {
              int64_t ix = ox * stride - pad + dx_;
              if (ix >= 0 && ix < w) xrow[ix] += srow[ox];
            }
          }
        }
      }
    }
  }
}

// Grow-only aligned scratch, one per thread.
template <typename T>
class Scratch {
 public:
  T* ensure(size_t n) {
    if (!buf_ || buf_->size() < n) buf_ = std::make_unique<AlignedBuf<T>>(n);
    return buf_->data();
  }

 private:
  std::unique_ptr<AlignedBuf<T>> buf_;
};

template <typename T>
Scratch<T>& conv_scratch() {
  static thread_local Scratch<T> s;
  return s;
}

template <typename T>
Scratch<T>& conv_scratch2() {
  static thread_local Scratch<T> s;
  return s;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise / structural ops
// ---------------------------------------------------------------------------

template <typename T>
Value<T> add(const Value<T>& a, const Value<T>& b) {
  require(a.val().same_shape(b.val()), "add: shape mismatch");
  Tensor<T> out = Tensor<T>::uninit(a.val().shape());
  const T* pa = a.val().data();
  const T* pb = b.val().data();
  T* po = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] + pb[i];
  return make_op<T>(std::move(out), {a, b}, [a, b](Node<T>& self) {
    const T* g = self.grad.data();
    int64_t n = self.grad.numel();
    for (const Value<T>& p : {a, b}) {
      if (!p.requires_grad()) continue;
      T* pg = p.node()->ensure_grad().data();
      for (int64_t i = 0; i < n; ++i) pg[i] += g[i];
    }
  });
}

// a * x + c, scalars.
template <typename T>
Value<T> affine(const Value<T>& x, double a, double c) {
  Tensor<T> out = Tensor<T>::uninit(x.val().shape());
  const T* px = x.val().data();
  T* po = out.data();
  for (int64_t i = 0; i < out.numel(); ++i)
    po[i] = static_cast<T>(a) * px[i] + static_cast<T>(c);
  return make_op<T>(std::move(out), {x}, [x, a](Node<T>& self) {
    if (!x.requires_grad()) return;
    const T* g = self.grad.data();
    T* pg = x.node()->ensure_grad().data();
    for (int64_t i = 0; i < self.grad.numel(); ++i)
      pg[i] += static_cast<T>(a) * g[i];
  });
}

template <typename T>
Value<T> scale(const Value<T>& x, double a) {
  return affine(x, a, 0.0);
}

// out[n] = s[n] * x[n] + addend[n]; per-sample scalar coefficients over the
// leading dimension, addend is a constant tensor of x's shape.
template <typename T>
Value<T> scale_per_sample_add_const(const Value<T>& x, std::vector<double> s,
                                    const Tensor<T>& addend) {
  const auto& xv = x.val();
  require(xv.same_shape(addend), "scale_per_sample_add_const: shape mismatch");
  require(xv.rank() >= 1 && xv.dim(0) == static_cast<int64_t>(s.size()),
          "scale_per_sample_add_const: coefficient count");
  int64_t n = xv.dim(0);
  int64_t m = xv.numel() / std::max<int64_t>(n, 1);
  Tensor<T> out = Tensor<T>::uninit(xv.shape());
  for (int64_t i = 0; i < n; ++i) {
    const T* px = xv.data() + i * m;
    const T* pa = addend.data() + i * m;
    T* po = out.data() + i * m;
    T si = static_cast<T>(s[i]);
    for (int64_t j = 0; j < m; ++j) po[j] = si * px[j] + pa[j];
  }
  return make_op<T>(std::move(out), {x}, [x, s = std::move(s), n, m](Node<T>& self) {
    if (!x.requires_grad()) return;
    T* pg = x.node()->ensure_grad().data();
    const T* g = self.grad.data();
    for (int64_t i = 0; i < n; ++i) {
      T si = static_cast<T>(s[i]);
      for (int64_t j = 0; j < m; ++j) pg[i * m + j] += si * g[i * m + j];
    }
  });
}

template <typename T>
Value<T> silu(const Value<T>& x) {
  using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
  int64_t n = x.val().numel();
  Tensor<T> out = Tensor<T>::uninit(x.val().shape());
  Eigen::Map<const Arr> xm(x.val().data(), n);
  Eigen::Map<Arr> om(out.data(), n);
  om = xm / (T(1) + (-xm).exp());
  return make_op<T>(std::move(out), {x}, [x, n](Node<T>& self) {
    if (!x.requires_grad()) return;
    Eigen::Map<const Arr> g(self.grad.data(), n);
    Eigen::Map<const Arr> xm(x.val().data(), n);
    Eigen::Map<Arr> pg(x.node()->ensure_grad().data(), n);
    Arr s = T(1) / (T(1) + (-xm).exp());
    pg += g * s * (T(1) + xm * (T(1) - s));
  });
}

template <typename T>
Value<T> concat_channels(const Value<T>& a, const Value<T>& b) {
  const auto& av = a.val();
  const auto& bv = b.val();
  require(av.rank() == 4 && bv.rank() == 4 && av.dim(0) == bv.dim(0) &&
              av.dim(2) == bv.dim(2) && av.dim(3) == bv.dim(3),
          "concat_channels: incompatible shapes");
  int64_t n = av.dim(0), ca = av.dim(1), cb = bv.dim(1);
  int64_t hw = av.dim(2) * av.dim(3);
  Tensor<T> out = Tensor<T>::uninit({n, ca + cb, av.dim(2), av.dim(3)});
  for (int64_t i = 0; i < n; ++i) {
    std::memcpy(out.data() + i * (ca + cb) * hw, av.data() + i * ca * hw,
                sizeof(T) * ca * hw);
    std::memcpy(out.data() + (i * (ca + cb) + ca) * hw, bv.data() + i * cb * hw,
                sizeof(T) * cb * hw);
  }
  return make_op<T>(std::move(out), {a, b}, [a, b, n, ca, cb, hw](Node<T>& self) {
    const T* g = self.grad.data();
    if (a.requires_grad()) {
      T* pg = a.node()->ensure_grad().data();
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < ca * hw; ++j)
          pg[i * ca * hw + j] += g[i * (ca + cb) * hw + j];
    }
    if (b.requires_grad()) {
      T* pg = b.node()->ensure_grad().data();
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < cb * hw; ++j)
          pg[i * cb * hw + j] += g[(i * (ca + cb) + ca) * hw + j];
    }
  });
}

template <typename T>
Value<T> upsample_nearest2(const Value<T>& x) {
  const auto& xv = x.val();
  require(xv.rank() == 4, "upsample_nearest2: expects [N,C,H,W]");
  int64_t n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  Tensor<T> out = Tensor<T>::uninit({n, c, 2 * h, 2 * w});
  for (int64_t nc = 0; nc < n * c; ++nc) {
    const T* src = xv.data() + nc * h * w;
    T* dst = out.data() + nc * 4 * h * w;
    for (int64_t y = 0; y < h; ++y)
      for (int64_t xx = 0; xx < w; ++xx) {
        T v = src[y * w + xx];
        T* d = dst + (2 * y) * (2 * w) + 2 * xx;
        d[0] = v;
        d[1] = v;
        d[2 * w] = v;
        d[2 * w + 1] = v;
      }
  }
  return make_op<T>(std::move(out), {x}, [x, n, c, h, w](Node<T>& self) {
    if (!x.requires_grad()) return;
    const T* g = self.grad.data();
    T* pg = x.node()->ensure_grad().data();
    for (int64_t nc = 0; nc < n * c; ++nc) {
      const T* gs = g + nc * 4 * h * w;
      T* pd = pg + nc * h * w;
      for (int64_t y = 0; y < h; ++y)
        for (int64_t xx = 0; xx < w; ++xx) {
          const T* s = gs + (2 * y) * (2 * w) + 2 * xx;
          pd[y * w + xx] += s[0] + s[1] + s[2 * w] + s[2 * w + 1];
        }
    }
  });
}

// ---------------------------------------------------------------------------
// Dense / convolutional layers
// ---------------------------------------------------------------------------

// x: [N, Cin, H, W], w: [Cout, Cin, kh, kw], b: [Cout] or an undefined
// value for bias-free convolutions (blocks followed by normalization).
template <typename T>
Value<T> conv2d(const Value<T>& x, const Value<T>& w, const Value<T>& b,
                int stride, int pad) {
  const auto& xv = x.val();
  const auto& wv = w.val();
  require(xv.rank() == 4 && wv.rank() == 4, "conv2d: rank mismatch");
  require(xv.dim(1) == wv.dim(1), "conv2d: input channels mismatch");
  const int64_t n = xv.dim(0), cin = xv.dim(1), h = xv.dim(2), wd = xv.dim(3);
  const int64_t cout = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
  const bool has_bias = b.defined();
  require(!has_bias || b.val().numel() == cout, "conv2d: bias size mismatch");
  const int64_t hout = (h + 2 * pad - kh) / stride + 1;
  const int64_t wout = (wd + 2 * pad - kw) / stride + 1;
  require(hout >= 1 && wout >= 1, "conv2d: output collapses to zero size");
  const int64_t p = hout * wout;
  const int64_t k = cin * kh * kw;
  const bool direct = (kh == 1 && kw == 1 && stride == 1 && pad == 0);

  Tensor<T> out = Tensor<T>::uninit({n, cout, hout, wout});
  {
    T* col = direct ? nullptr : detail::conv_scratch<T>().ensure(static_cast<size_t>(p * k));
    Eigen::Map<const detail::MatCM<T>> wm(wv.data(), k, cout);
    for (int64_t i = 0; i < n; ++i) {
      const T* xs = xv.data() + i * cin * h * wd;
      const T* cdata = direct ? xs : col;
      if (!direct)
        detail::im2row(xs, col, cin, h, wd, kh, kw, stride, pad, hout, wout);
      Eigen::Map<const detail::MatCM<T>> cm(cdata, p, k);
      Eigen::Map<detail::MatCM<T>> om(out.data() + i * cout * p, p, cout);
      om.noalias() = cm * wm;
    }
    if (has_bias) {
      const T* bp = b.val().data();
      for (int64_t i = 0; i < n; ++i)
        for (int64_t co = 0; co < cout; ++co) {
          T* plane = out.data() + (i * cout + co) * p;
          T bias = bp[co];
          for (int64_t j = 0; j < p; ++j) plane[j] += bias;
        }
    }
  }

  auto bp_fn = [x, w, b, n, cin, h, wd, cout, kh, kw, stride, pad, hout, wout, p,
                k, direct](Node<T>& self) {
    const bool need_dx = x.requires_grad();
    const bool need_dw = w.requires_grad();
    const bool need_db = b.defined() && b.requires_grad();
    T* col = (need_dw && !direct)
                 ? detail::conv_scratch<T>().ensure(static_cast<size_t>(p * k))
                 : nullptr;
    T* dcol = (need_dx && !direct)
                  ? detail::conv_scratch2<T>().ensure(static_cast<size_t>(p * k))
                  : nullptr;
    Eigen::Map<const detail::MatCM<T>> wm(w.val().data(), k, cout);
    T* dbp = need_db ? b.node()->ensure_grad().data() : nullptr;
    for (int64_t i = 0; i < n; ++i) {
      const T* gplane = self.grad.data() + i * cout * p;
      Eigen::Map<const detail::MatCM<T>> gm(gplane, p, cout);
      if (need_db) {
        for (int64_t co = 0; co < cout; ++co) {
          double acc = 0;
          const T* gc = gplane + co * p;
          for (int64_t j = 0; j < p; ++j) acc += static_cast<double>(gc[j]);
          dbp[co] += static_cast<T>(acc);
        }
      }
      if (need_dw) {
        Eigen::Map<detail::MatCM<T>> dwm(w.node()->ensure_grad().data(), k, cout);
        const T* xs = x.val().data() + i * cin * h * wd;
        const T* cdata = direct ? xs : col;
        if (!direct)
          detail::im2row(xs, col, cin, h, wd, kh, kw, stride, pad, hout, wout);
        Eigen::Map<const detail::MatCM<T>> cm(cdata, p, k);
        dwm.noalias() += cm.transpose() * gm;
      }
      if (need_dx) {
        T* dxs = x.node()->ensure_grad().data() + i * cin * h * wd;
        if (direct) {
          Eigen::Map<detail::MatCM<T>> dxm(dxs, p, k);
          dxm.noalias() += gm * wm.transpose();
        } else {
          Eigen::Map<detail::MatCM<T>> dcm(dcol, p, k);
          dcm.noalias() = gm * wm.transpose();
          detail::row2im_add(dcol, dxs, cin, h, wd, kh, kw, stride, pad, hout, wout);
        }
      }
    }
  };
  std::vector<Value<T>> parents = {x, w};
  if (has_bias) parents.push_back(b);
  return make_op<T>(std::move(out), std::move(parents), std::move(bp_fn));
}

template <typename T>
Value<T> conv2d(const Value<T>& x, const Value<T>& w, int stride, int pad) {
  return conv2d(x, w, Value<T>{}, stride, pad);
}

// x: [N, Fin], w: [Fout, Fin], b: [Fout].
template <typename T>
Value<T> linear(const Value<T>& x, const Value<T>& w, const Value<T>& b) {
  const auto& xv = x.val();
  const auto& wv = w.val();
  require(xv.rank() == 2 && wv.rank() == 2 && xv.dim(1) == wv.dim(1),
          "linear: shape mismatch");
  int64_t n = xv.dim(0), fin = xv.dim(1), fout = wv.dim(0);
  require(b.val().numel() == fout, "linear: bias size mismatch");
  Tensor<T> out = Tensor<T>::uninit({n, fout});
  Eigen::Map<const detail::MatRM<T>> xm(xv.data(), n, fin);
  Eigen::Map<const detail::MatRM<T>> wm(wv.data(), fout, fin);
  Eigen::Map<detail::MatRM<T>> om(out.data(), n, fout);
  om.noalias() = xm * wm.transpose();
  const T* bp = b.val().data();
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < fout; ++j) out[i * fout + j] += bp[j];
  return make_op<T>(std::move(out), {x, w, b}, [x, w, b, n, fin, fout](Node<T>& self) {
    Eigen::Map<const detail::MatRM<T>> gm(self.grad.data(), n, fout);
    if (x.requires_grad()) {
      Eigen::Map<detail::MatRM<T>> dxm(x.node()->ensure_grad().data(), n, fin);
      Eigen::Map<const detail::MatRM<T>> wm(w.val().data(), fout, fin);
      dxm.noalias() += gm * wm;
    }
    if (w.requires_grad()) {
      Eigen::Map<detail::MatRM<T>> dwm(w.node()->ensure_grad().data(), fout, fin);
      Eigen::Map<const detail::MatRM<T>> xm(x.val().data(), n, fin);
      dwm.noalias() += gm.transpose() * xm;
    }
    if (b.requires_grad()) {
      T* dbp = b.node()->ensure_grad().data();
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < fout; ++j) dbp[j] += self.grad[i * fout + j];
    }
  });
}

// x: [N, C, H, W] plus per-sample per-channel bias v: [N, C].
template <typename T>
Value<T> add_channel_bias(const Value<T>& x, const Value<T>& v) {
  const auto& xv = x.val();
  const auto& vv = v.val();
  require(xv.rank() == 4 && vv.rank() == 2 && xv.dim(0) == vv.dim(0) &&
              xv.dim(1) == vv.dim(1),
          "add_channel_bias: shape mismatch");
  int64_t nc = xv.dim(0) * xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  Tensor<T> out = Tensor<T>::uninit(xv.shape());
  for (int64_t i = 0; i < nc; ++i) {
    const T* src = xv.data() + i * hw;
    T* dst = out.data() + i * hw;
    T bias = vv[i];
    for (int64_t j = 0; j < hw; ++j) dst[j] = src[j] + bias;
  }
  return make_op<T>(std::move(out), {x, v}, [x, v, nc, hw](Node<T>& self) {
    const T* g = self.grad.data();
    if (x.requires_grad()) {
      T* pg = x.node()->ensure_grad().data();
      for (int64_t i = 0; i < nc * hw; ++i) pg[i] += g[i];
    }
    if (v.requires_grad()) {
      T* pg = v.node()->ensure_grad().data();
      for (int64_t i = 0; i < nc; ++i) {
        T s = T(0);
        const T* gs = g + i * hw;
        for (int64_t j = 0; j < hw; ++j) s += gs[j];
        pg[i] += s;
      }
    }
  });
}

// Per-(sample, group) normalization with per-channel affine.
template <typename T>
Value<T> group_norm(const Value<T>& x, const Value<T>& gamma,
                    const Value<T>& beta, int64_t groups, double eps = 1e-5) {
  const auto& xv = x.val();
  require(xv.rank() == 4, "group_norm: expects [N,C,H,W]");
  int64_t n = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  require(groups >= 1 && c % groups == 0, "group_norm: channels % groups != 0");
  require(gamma.val().numel() == c && beta.val().numel() == c,
          "group_norm: affine size mismatch");
  int64_t cg = c / groups;          // channels per group
  int64_t m = cg * hw;              // elements per group
  std::vector<double> means(n * groups), invstds(n * groups);
  Tensor<T> out = Tensor<T>::uninit(xv.shape());
  const T* gp = gamma.val().data();
  const T* bp = beta.val().data();
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t g = 0; g < groups; ++g) {
      const T* src = xv.data() + (i * c + g * cg) * hw;
      double mean = 0;
      for (int64_t j = 0; j < m; ++j) mean += src[j];
      mean /= m;
      double var = 0;
      for (int64_t j = 0; j < m; ++j) {
        double d = src[j] - mean;
        var += d * d;
      }
      var /= m;
      double inv = 1.0 / std::sqrt(var + eps);
      means[i * groups + g] = mean;
      invstds[i * groups + g] = inv;
      T* dst = out.data() + (i * c + g * cg) * hw;
      for (int64_t cc = 0; cc < cg; ++cc) {
        T ga = gp[g * cg + cc];
        T be = bp[g * cg + cc];
        const T* s = src + cc * hw;
        T* d = dst + cc * hw;
        for (int64_t j = 0; j < hw; ++j)
          d[j] = ga * static_cast<T>((s[j] - mean) * inv) + be;
      }
    }
  }
  auto bp_fn = [x, gamma, beta, n, c, hw, groups, cg, m, means = std::move(means),
                invstds = std::move(invstds)](Node<T>& self) {
    const T* g = self.grad.data();
    const T* xp = x.val().data();
    const T* gp = gamma.val().data();
    T* dx = x.requires_grad() ? x.node()->ensure_grad().data() : nullptr;
    T* dgamma = gamma.requires_grad() ? gamma.node()->ensure_grad().data() : nullptr;
    T* dbeta = beta.requires_grad() ? beta.node()->ensure_grad().data() : nullptr;
    for (int64_t i = 0; i < n; ++i) {
      for (int64_t gr = 0; gr < groups; ++gr) {
        double mean = means[i * groups + gr];
        double inv = invstds[i * groups + gr];
        int64_t base = (i * c + gr * cg) * hw;
        double sum1 = 0, sum2 = 0;
        for (int64_t cc = 0; cc < cg; ++cc) {
          double ga = gp[gr * cg + cc];
          const T* gs = g + base + cc * hw;
          const T* xs = xp + base + cc * hw;
          double s1 = 0, s2 = 0, sb = 0;
          for (int64_t j = 0; j < hw; ++j) {
            double xhat = (xs[j] - mean) * inv;
            double gd = gs[j];
            s1 += gd * ga;
            s2 += gd * ga * xhat;
            sb += gd;
            if (dgamma) dgamma[gr * cg + cc] += static_cast<T>(gd * xhat);
          }
          if (dbeta) dbeta[gr * cg + cc] += static_cast<T>(sb);
          sum1 += s1;
          sum2 += s2;
        }
        if (!dx) continue;
        for (int64_t cc = 0; cc < cg; ++cc) {
          double ga = gp[gr * cg + cc];
          const T* gs = g + base + cc * hw;
          const T* xs = xp + base + cc * hw;
          T* ds = dx + base + cc * hw;
          for (int64_t j = 0; j < hw; ++j) {
            double xhat = (xs[j] - mean) * inv;
            double val = inv * (gs[j] * ga - (sum1 + xhat * sum2) / m);
            ds[j] += static_cast<T>(val);
          }
        }
      }
    }
  };
  return make_op<T>(std::move(out), {x, gamma, beta}, std::move(bp_fn));
}

// ---------------------------------------------------------------------------
// Softmax / losses
// ---------------------------------------------------------------------------

template <typename T>
Value<T> softmax_channels(const Value<T>& x) {
  const auto& xv = x.val();
  require(xv.rank() == 4, "softmax_channels: expects [N,C,H,W]");
  int64_t n = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  Tensor<T> out = Tensor<T>::uninit(xv.shape());
  for (int64_t i = 0; i < n; ++i) {
    const T* xs = xv.data() + i * c * hw;
    T* os = out.data() + i * c * hw;
    for (int64_t j = 0; j < hw; ++j) {
      T mx = xs[j];
      for (int64_t cc = 1; cc < c; ++cc) mx = std::max(mx, xs[cc * hw + j]);
      T denom = T(0);
      for (int64_t cc = 0; cc < c; ++cc) {
        T e = std::exp(xs[cc * hw + j] - mx);
        os[cc * hw + j] = e;
        denom += e;
      }
      for (int64_t cc = 0; cc < c; ++cc) os[cc * hw + j] /= denom;
    }
  }
  Tensor<T> probs = out;  // shared storage, used in backward
  return make_op<T>(std::move(out), {x}, [x, probs, n, c, hw](Node<T>& self) {
    if (!x.requires_grad()) return;
    const T* g = self.grad.data();
    const T* pr = probs.data();
    T* dx = x.node()->ensure_grad().data();
    for (int64_t i = 0; i < n; ++i) {
      int64_t base = i * c * hw;
      for (int64_t j = 0; j < hw; ++j) {
        T dot = T(0);
        for (int64_t cc = 0; cc < c; ++cc)
          dot += g[base + cc * hw + j] * pr[base + cc * hw + j];
        for (int64_t cc = 0; cc < c; ++cc)
          dx[base + cc * hw + j] +=
              pr[base + cc * hw + j] * (g[base + cc * hw + j] - dot);
      }
    }
  });
}

// Pixel-wise softmax cross-entropy against integer labels, averaged over
// pixels; returns one scalar per sample as a length-N value.
template <typename T>
Value<T> ce_per_sample(const Value<T>& logits, const Tensor<int32_t>& labels) {
  const auto& lv = logits.val();
  require(lv.rank() == 4, "ce_per_sample: expects [N,C,H,W]");
  int64_t n = lv.dim(0), c = lv.dim(1), hw = lv.dim(2) * lv.dim(3);
  require(labels.rank() == 3 && labels.dim(0) == n &&
              labels.dim(1) == lv.dim(2) && labels.dim(2) == lv.dim(3),
          "ce_per_sample: label shape mismatch");
  for (int64_t i = 0; i < labels.numel(); ++i)
    require(labels[i] >= 0 && labels[i] < c, "ce_per_sample: label out of range");
  Tensor<T> out = Tensor<T>::uninit({n});
  for (int64_t i = 0; i < n; ++i) {
    const T* xs = lv.data() + i * c * hw;
    const int32_t* ls = labels.data() + i * hw;
    double acc = 0;
    for (int64_t j = 0; j < hw; ++j) {
      T mx = xs[j];
      for (int64_t cc = 1; cc < c; ++cc) mx = std::max(mx, xs[cc * hw + j]);
      double denom = 0;
      for (int64_t cc = 0; cc < c; ++cc)
        denom += std::exp(static_cast<double>(xs[cc * hw + j] - mx));
      double lse = static_cast<double>(mx) + std::log(denom);
      acc += lse - static_cast<double>(xs[ls[j] * hw + j]);
    }
    out[i] = static_cast<T>(acc / hw);
  }
  return make_op<T>(std::move(out), {logits}, [logits, labels, n, c, hw](Node<T>& self) {
    if (!logits.requires_grad()) return;
    const T* g = self.grad.data();
    const T* xp = logits.val().data();
    T* dx = logits.node()->ensure_grad().data();
    for (int64_t i = 0; i < n; ++i) {
      if (g[i] == T(0)) continue;
      const T* xs = xp + i * c * hw;
      T* ds = dx + i * c * hw;
      const int32_t* ls = labels.data() + i * hw;
      T w = g[i] / static_cast<T>(hw);
      for (int64_t j = 0; j < hw; ++j) {
        T mx = xs[j];
        for (int64_t cc = 1; cc < c; ++cc) mx = std::max(mx, xs[cc * hw + j]);
        T denom = T(0);
        for (int64_t cc = 0; cc < c; ++cc) denom += std::exp(xs[cc * hw + j] - mx);
        for (int64_t cc = 0; cc < c; ++cc) {
          T p = std::exp(xs[cc * hw + j] - mx) / denom;
          ds[cc * hw + j] += w * (p - (ls[j] == cc ? T(1) : T(0)));
        }
      }
    }
  });
}

// Mean squared error against a constant target, one scalar per sample.
template <typename T>
Value<T> mse_per_sample(const Value<T>& x, const Tensor<T>& target) {
  const auto& xv = x.val();
  require(xv.same_shape(target), "mse_per_sample: shape mismatch");
  require(xv.rank() >= 1, "mse_per_sample: rank");
  int64_t n = xv.dim(0), m = xv.numel() / std::max<int64_t>(n, 1);
  Tensor<T> out = Tensor<T>::uninit({n});
  for (int64_t i = 0; i < n; ++i) {
    const T* xs = xv.data() + i * m;
    const T* ts = target.data() + i * m;
    double acc = 0;
    for (int64_t j = 0; j < m; ++j) {
      double d = static_cast<double>(xs[j]) - static_cast<double>(ts[j]);
      acc += d * d;
    }
    out[i] = static_cast<T>(acc / m);
  }
  return make_op<T>(std::move(out), {x}, [x, target, n, m](Node<T>& self) {
    if (!x.requires_grad()) return;
    const T* g = self.grad.data();
    const T* xp = x.val().data();
    const T* tp = target.data();
    T* dx = x.node()->ensure_grad().data();
    for (int64_t i = 0; i < n; ++i) {
      if (g[i] == T(0)) continue;
      T w = T(2) * g[i] / static_cast<T>(m);
      for (int64_t j = 0; j < m; ++j)
        dx[i * m + j] += w * (xp[i * m + j] - tp[i * m + j]);
    }
  });
}

// Weighted sum of a length-N vector value with constant weights -> scalar.
template <typename T>
Value<T> weighted_sum(const Value<T>& vec, std::vector<double> weights) {
  const auto& v = vec.val();
  require(v.numel() == static_cast<int64_t>(weights.size()), "weighted_sum: size");
  Tensor<T> out({1});
  double acc = 0;
  for (int64_t i = 0; i < v.numel(); ++i) acc += weights[i] * static_cast<double>(v[i]);
  out[0] = static_cast<T>(acc);
  return make_op<T>(std::move(out), {vec}, [vec, weights = std::move(weights)](Node<T>& self) {
    if (!vec.requires_grad()) return;
    T g = self.grad[0];
    T* dv = vec.node()->ensure_grad().data();
    for (size_t i = 0; i < weights.size(); ++i)
      dv[i] += static_cast<T>(weights[i]) * g;
  });
}

template <typename T>
Value<T> mean_of(const Value<T>& vec) {
  int64_t n = vec.val().numel();
  return weighted_sum(vec, std::vector<double>(n, 1.0 / n));
}

// ---------------------------------------------------------------------------
// Tensor-level (non-graph) helpers
// ---------------------------------------------------------------------------

// Channel argmax with first-max tie-break.
template <typename T>
Tensor<int32_t> argmax_channels(const Tensor<T>& logits) {
  require(logits.rank() == 4, "argmax_channels: expects [N,C,H,W]");
  int64_t n = logits.dim(0), c = logits.dim(1), h = logits.dim(2), w = logits.dim(3);
  int64_t hw = h * w;
  Tensor<int32_t> out({n, h, w});
  for (int64_t i = 0; i < n; ++i) {
    const T* xs = logits.data() + i * c * hw;
    int32_t* os = out.data() + i * hw;
    for (int64_t j = 0; j < hw; ++j) {
      T best = xs[j];
      int32_t arg = 0;
      for (int64_t cc = 1; cc < c; ++cc)
        if (xs[cc * hw + j] > best) {
          best = xs[cc * hw + j];
          arg = static_cast<int32_t>(cc);
        }
      os[j] = arg;
    }
  }
  return out;
}

template <typename T>
Tensor<T> softmax_channels_tensor(const Tensor<T>& logits) {
  return softmax_channels(Value<T>::constant(logits)).val();
}

// Argmax over the leading (class) dimension of a single class-first tensor
// [K, spatial...]; first-max tie-break.
template <typename T>
Tensor<int32_t> argmax_classes(const Tensor<T>& probs) {
  require(probs.rank() >= 2, "argmax_classes: expects [K, spatial...]");
  int64_t k = probs.dim(0);
  int64_t m = probs.numel() / k;
  std::vector<int64_t> shape(probs.shape().begin() + 1, probs.shape().end());
  Tensor<int32_t> out(shape);
  for (int64_t j = 0; j < m; ++j) {
    T best = probs[j];
    int32_t arg = 0;
    for (int64_t c = 1; c < k; ++c)
      if (probs[c * m + j] > best) {
        best = probs[c * m + j];
        arg = static_cast<int32_t>(c);
      }
    out[j] = arg;
  }
  return out;
}

}  // namespace diffseg
