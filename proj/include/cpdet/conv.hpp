#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "cpdet/errors.hpp"
#include "cpdet/ops.hpp"
#include "cpdet/tensor.hpp"

namespace cpdet {

// 2D convolution on CHW layout, no batch dimension. Odd kernels and stride
// 1 or 2 only; zero padding.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, size_t stride, size_t pad) {
  if (x.rank() != 3) throw ShapeError("conv2d input must be [C,H,W]");
  if (w.rank() != 4) throw ShapeError("conv2d weight must be [Cout,Cin,k,k]");
  if (w.dim(2) != w.dim(3)) throw ShapeError("conv2d kernel must be square");
  size_t cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
  size_t cout = w.dim(0), k = w.dim(2);
  if (w.dim(1) != cin)
    throw ShapeError("conv2d channel mismatch " + shape_str(x.shape()) + " vs " + shape_str(w.shape()));
  if (k % 2 == 0) throw ContractError("conv2d kernel size must be odd");
  if (stride != 1 && stride != 2) throw ContractError("conv2d stride must be 1 or 2");
  if (h + 2 * pad < k || wd + 2 * pad < k) throw ShapeError("conv2d kernel larger than padded input");
  size_t ho = (h + 2 * pad - k) / stride + 1;
  size_t wo = (wd + 2 * pad - k) / stride + 1;

  std::vector<T> out(cout * ho * wo, T(0));
  const auto& xv = x.data();
  const auto& wv = w.data();
  for (size_t oc = 0; oc < cout; ++oc)
    for (size_t ic = 0; ic < cin; ++ic) {
      const T* xp = xv.data() + ic * h * wd;
      const T* wp = wv.data() + (oc * cin + ic) * k * k;
      T* op = out.data() + oc * ho * wo;
      for (size_t oy = 0; oy < ho; ++oy)
        for (size_t ox = 0; ox < wo; ++ox) {
          T acc = T(0);
          for (size_t ky = 0; ky < k; ++ky) {
            long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
            if (iy < 0 || iy >= static_cast<long>(h)) continue;
            for (size_t kx = 0; kx < k; ++kx) {
              long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
              if (ix < 0 || ix >= static_cast<long>(wd)) continue;
              acc += xp[iy * wd + ix] * wp[ky * k + kx];
            }
          }
          op[oy * wo + ox] += acc;
        }
    }

  Tensor<T> t = Tensor<T>::from_vector({cout, ho, wo}, std::move(out));
  auto* on = t.node.get();
  auto* px = x.node.get();
  auto* pw = w.node.get();
  attach_backward(t, {x, w}, [on, px, pw, cin, h, wd, cout, k, stride, pad, ho, wo]() {
    bool gx = px->requires_grad, gw = pw->requires_grad;
    if (gx) px->ensure_grad();
    if (gw) pw->ensure_grad();
    for (size_t oc = 0; oc < cout; ++oc)
      for (size_t ic = 0; ic < cin; ++ic) {
        const T* xp = px->value.data() + ic * h * wd;
        T* xg = gx ? px->grad.data() + ic * h * wd : nullptr;
        const T* wp = pw->value.data() + (oc * cin + ic) * k * k;
        T* wg = gw ? pw->grad.data() + (oc * cin + ic) * k * k : nullptr;
        const T* og = on->grad.data() + oc * ho * wo;
        for (size_t oy = 0; oy < ho; ++oy)
          for (size_t ox = 0; ox < wo; ++ox) {
            T g = og[oy * wo + ox];
            if (g == T(0)) continue;
            for (size_t ky = 0; ky < k; ++ky) {
              long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
              if (iy < 0 || iy >= static_cast<long>(h)) continue;
              for (size_t kx = 0; kx < k; ++kx) {
                long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                if (ix < 0 || ix >= static_cast<long>(wd)) continue;
                if (gx) xg[iy * wd + ix] += g * wp[ky * k + kx];
                if (gw) wg[ky * k + kx] += g * xp[iy * wd + ix];
              }
            }
          }
      }
  });
  return t;
}

// Adds a per-channel bias to a CHW map.
template <typename T>
Tensor<T> add_channel_bias(const Tensor<T>& x, const Tensor<T>& b) {
  if (x.rank() != 3 || b.rank() != 1 || b.dim(0) != x.dim(0))
    throw ShapeError("add_channel_bias expects [C,H,W] and [C]");
  size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
  std::vector<T> out(x.numel());
  const auto& xv = x.data();
  const auto& bv = b.data();
  for (size_t i = 0; i < c; ++i)
    for (size_t j = 0; j < hw; ++j) out[i * hw + j] = xv[i * hw + j] + bv[i];
  Tensor<T> t = Tensor<T>::from_vector(x.shape(), std::move(out));
  auto* on = t.node.get();
  auto* px = x.node.get();
  auto* pb = b.node.get();
  attach_backward(t, {x, b}, [on, px, pb, c, hw]() {
    if (px->requires_grad) {
      px->ensure_grad();
      for (size_t i = 0; i < c * hw; ++i) px->grad[i] += on->grad[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (size_t i = 0; i < c; ++i) {
        T acc = T(0);
        for (size_t j = 0; j < hw; ++j) acc += on->grad[i * hw + j];
        pb->grad[i] += acc;
      }
    }
  });
  return t;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, size_t stride, size_t pad) {
  return add_channel_bias(conv2d(x, w, stride, pad), b);
}

template <typename T>
Tensor<T> upsample_nearest2x(const Tensor<T>& x) {
  if (x.rank() != 3) throw ShapeError("upsample_nearest2x expects [C,H,W]");
  size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  std::vector<T> out(c * 4 * h * w);
  const auto& xv = x.data();
  for (size_t ch = 0; ch < c; ++ch)
    for (size_t i = 0; i < h; ++i)
      for (size_t j = 0; j < w; ++j) {
        T v = xv[(ch * h + i) * w + j];
        size_t base = (ch * 2 * h + 2 * i) * 2 * w + 2 * j;
        out[base] = v;
        out[base + 1] = v;
        out[base + 2 * w] = v;
        out[base + 2 * w + 1] = v;
      }
  Tensor<T> t = Tensor<T>::from_vector({c, 2 * h, 2 * w}, std::move(out));
  auto* on = t.node.get();
  auto* px = x.node.get();
  attach_backward(t, {x}, [on, px, c, h, w]() {
    px->ensure_grad();
    for (size_t ch = 0; ch < c; ++ch)
      for (size_t i = 0; i < h; ++i)
        for (size_t j = 0; j < w; ++j) {
          size_t base = (ch * 2 * h + 2 * i) * 2 * w + 2 * j;
          px->grad[(ch * h + i) * w + j] +=
              on->grad[base] + on->grad[base + 1] + on->grad[base + 2 * w] + on->grad[base + 2 * w + 1];
        }
  });
  return t;
}

// Bilinear sampling of a CHW map at continuous pixel coordinates.
// points is [N,2] as (x, y) where integer coordinates hit pixel centers.
// Out-of-range taps contribute zero, so the result fades to the zero vector
// beyond the border and gradients w.r.t. both the map and the coordinates
// stay defined everywhere.
template <typename T>
Tensor<T> bilinear_sample(const Tensor<T>& feat, const Tensor<T>& points) {
  if (feat.rank() != 3) throw ShapeError("bilinear_sample featmap must be [C,H,W]");
  if (points.rank() != 2 || points.dim(1) != 2) throw ShapeError("bilinear_sample points must be [N,2]");
  size_t c = feat.dim(0), h = feat.dim(1), w = feat.dim(2);
  size_t n = points.dim(0);
  const auto& fv = feat.data();
  const auto& pv = points.data();

  auto tap = [&](long y, long x, size_t ch) -> T {
    if (y < 0 || y >= static_cast<long>(h) || x < 0 || x >= static_cast<long>(w)) return T(0);
    return fv[(ch * h + y) * w + x];
  };

  std::vector<T> out(n * c, T(0));
  for (size_t i = 0; i < n; ++i) {
    T x = pv[i * 2], y = pv[i * 2 + 1];
    long x0 = static_cast<long>(std::floor(static_cast<double>(x)));
    long y0 = static_cast<long>(std::floor(static_cast<double>(y)));
    T dx = x - static_cast<T>(x0), dy = y - static_cast<T>(y0);
    for (size_t ch = 0; ch < c; ++ch) {
      T v00 = tap(y0, x0, ch), v01 = tap(y0, x0 + 1, ch);
      T v10 = tap(y0 + 1, x0, ch), v11 = tap(y0 + 1, x0 + 1, ch);
      out[i * c + ch] = (T(1) - dy) * ((T(1) - dx) * v00 + dx * v01) + dy * ((T(1) - dx) * v10 + dx * v11);
    }
  }

  Tensor<T> t = Tensor<T>::from_vector({n, c}, std::move(out));
  auto* on = t.node.get();
  auto* pf = feat.node.get();
  auto* pp = points.node.get();
  attach_backward(t, {feat, points}, [on, pf, pp, c, h, w, n]() {
    bool gf = pf->requires_grad, gp = pp->requires_grad;
    if (gf) pf->ensure_grad();
    if (gp) pp->ensure_grad();
    auto tap2 = [&](long y, long x, size_t ch) -> T {
      if (y < 0 || y >= static_cast<long>(h) || x < 0 || x >= static_cast<long>(w)) return T(0);
      return pf->value[(ch * h + y) * w + x];
    };
    auto scatter = [&](long y, long x, size_t ch, T g) {
      if (y < 0 || y >= static_cast<long>(h) || x < 0 || x >= static_cast<long>(w)) return;
      pf->grad[(ch * h + y) * w + x] += g;
    };
    for (size_t i = 0; i < n; ++i) {
      T x = pp->value[i * 2], y = pp->value[i * 2 + 1];
      long x0 = static_cast<long>(std::floor(static_cast<double>(x)));
      long y0 = static_cast<long>(std::floor(static_cast<double>(y)));
      T dx = x - static_cast<T>(x0), dy = y - static_cast<T>(y0);
      T gx = T(0), gy = T(0);
      for (size_t ch = 0; ch < c; ++ch) {
        T g = on->grad[i * c + ch];
        if (g == T(0)) continue;
        if (gf) {
          scatter(y0, x0, ch, g * (T(1) - dy) * (T(1) - dx));
          scatter(y0, x0 + 1, ch, g * (T(1) - dy) * dx);
          scatter(y0 + 1, x0, ch, g * dy * (T(1) - dx));
          scatter(y0 + 1, x0 + 1, ch, g * dy * dx);
        }
        if (gp) {
          T v00 = tap2(y0, x0, ch), v01 = tap2(y0, x0 + 1, ch);
          T v10 = tap2(y0 + 1, x0, ch), v11 = tap2(y0 + 1, x0 + 1, ch);
          gx += g * ((T(1) - dy) * (v01 - v00) + dy * (v11 - v10));
          gy += g * ((T(1) - dx) * (v10 - v00) + dx * (v11 - v01));
        }
      }
      if (gp) {
        pp->grad[i * 2] += gx;
        pp->grad[i * 2 + 1] += gy;
      }
    }
  });
  return t;
}

}  // namespace cpdet
