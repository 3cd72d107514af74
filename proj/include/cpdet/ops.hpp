#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "cpdet/errors.hpp"
#include "cpdet/tensor.hpp"

namespace cpdet {

namespace detail {

inline bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  for (size_t i = 0; i < small.size(); ++i)
    if (small[small.size() - 1 - i] != big[big.size() - 1 - i]) return false;
  return true;
}

// Broadcast rule: identical shapes, a scalar operand, or the smaller shape a
// suffix of the larger (tiled over leading dims). Nothing else.
inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  if (a == b) return a;
  if (numel_of(b) == 1) return a;
  if (numel_of(a) == 1) return b;
  if (is_suffix(b, a)) return a;
  if (is_suffix(a, b)) return b;
  throw ShapeError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
}

template <typename T>
bool all_finite(const std::vector<T>& v) {
  for (T x : v)
    if (!std::isfinite(static_cast<double>(x))) return false;
  return true;
}

template <typename T>
T stable_sigmoid(T x) {
  if (x >= T(0)) {
    T e = std::exp(-x);
    return T(1) / (T(1) + e);
  }
  T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
T stable_softplus(T x) {
  T ax = std::abs(x);
  return std::max(x, T(0)) + std::log1p(std::exp(-ax));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops with trailing-dimension broadcasting.
// ---------------------------------------------------------------------------

template <typename T, typename Fwd, typename Bwd>
Tensor<T> elementwise_binary(const Tensor<T>& a, const Tensor<T>& b, Fwd fwd, Bwd bwd) {
  Shape os = detail::broadcast_shape(a.shape(), b.shape());
  size_t n = numel_of(os);
  size_t an = a.numel(), bn = b.numel();
  std::vector<T> out(n);
  const auto& av = a.data();
  const auto& bv = b.data();
  for (size_t i = 0; i < n; ++i) out[i] = fwd(av[i % an], bv[i % bn]);
  Tensor<T> t = Tensor<T>::from_vector(std::move(os), std::move(out));
  auto* on = t.node.get();
  auto* pa = a.node.get();
  auto* pb = b.node.get();
  attach_backward(t, {a, b}, [on, pa, pb, n, an, bn, bwd]() {
    bool ga = pa->requires_grad, gb = pb->requires_grad;
    if (ga) pa->ensure_grad();
    if (gb) pb->ensure_grad();
    for (size_t i = 0; i < n; ++i) {
      T g = on->grad[i];
      if (g == T(0)) continue;
      T x = pa->value[i % an];
      T y = pb->value[i % bn];
      auto [da, db] = bwd(x, y, g);
      if (ga) pa->grad[i % an] += da;
      if (gb) pb->grad[i % bn] += db;
    }
  });
  return t;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return elementwise_binary(
      a, b, [](T x, T y) { return x + y; },
      [](T, T, T g) { return std::pair<T, T>(g, g); });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return elementwise_binary(
      a, b, [](T x, T y) { return x - y; },
      [](T, T, T g) { return std::pair<T, T>(g, -g); });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return elementwise_binary(
      a, b, [](T x, T y) { return x * y; },
      [](T x, T y, T g) { return std::pair<T, T>(g * y, g * x); });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return elementwise_binary(
      a, b, [](T x, T y) { return x / y; },
      [](T x, T y, T g) { return std::pair<T, T>(g / y, -g * x / (y * y)); });
}

template <typename T>
Tensor<T> minimum(const Tensor<T>& a, const Tensor<T>& b) {
  return elementwise_binary(
      a, b, [](T x, T y) { return std::min(x, y); },
      [](T x, T y, T g) { return x <= y ? std::pair<T, T>(g, T(0)) : std::pair<T, T>(T(0), g); });
}

template <typename T>
Tensor<T> maximum(const Tensor<T>& a, const Tensor<T>& b) {
  return elementwise_binary(
      a, b, [](T x, T y) { return std::max(x, y); },
      [](T x, T y, T g) { return x >= y ? std::pair<T, T>(g, T(0)) : std::pair<T, T>(T(0), g); });
}

// ---------------------------------------------------------------------------
// Elementwise unary ops.
// ---------------------------------------------------------------------------

template <typename T, typename Fwd, typename Bwd>
Tensor<T> elementwise_unary(const Tensor<T>& a, Fwd fwd, Bwd bwd) {
  size_t n = a.numel();
  std::vector<T> out(n);
  const auto& av = a.data();
  for (size_t i = 0; i < n; ++i) out[i] = fwd(av[i]);
  Tensor<T> t = Tensor<T>::from_vector(a.shape(), std::move(out));
  auto* on = t.node.get();
  auto* pa = a.node.get();
  attach_backward(t, {a}, [on, pa, n, bwd]() {
    pa->ensure_grad();
    for (size_t i = 0; i < n; ++i) pa->grad[i] += bwd(pa->value[i], on->value[i]) * on->grad[i];
  });
  return t;
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
  return elementwise_unary(a, [](T x) { return -x; }, [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return elementwise_unary(
      a, [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return elementwise_unary(
      a, [](T x) { return detail::stable_sigmoid(x); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> exp_t(const Tensor<T>& a) {
  return elementwise_unary(a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log_t(const Tensor<T>& a) {
  for (T x : a.data())
    if (!(x > T(0))) throw NumericError("log of non-positive value");
  return elementwise_unary(a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
Tensor<T> sqrt_t(const Tensor<T>& a) {
  for (T x : a.data())
    if (x < T(0)) throw NumericError("sqrt of negative value");
  return elementwise_unary(a, [](T x) { return std::sqrt(x); }, [](T, T y) { return T(1) / (T(2) * y); });
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& a) {
  return elementwise_unary(
      a, [](T x) { return detail::stable_softplus(x); },
      [](T x, T) { return detail::stable_sigmoid(x); });
}

template <typename T>
Tensor<T> sin_t(const Tensor<T>& a) {
  return elementwise_unary(a, [](T x) { return std::sin(x); }, [](T x, T) { return std::cos(x); });
}

template <typename T>
Tensor<T> cos_t(const Tensor<T>& a) {
  return elementwise_unary(a, [](T x) { return std::cos(x); }, [](T x, T) { return -std::sin(x); });
}

template <typename T>
Tensor<T> abs_t(const Tensor<T>& a) {
  return elementwise_unary(
      a, [](T x) { return std::abs(x); },
      [](T x, T) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
  return elementwise_unary(a, [c](T x) { return x + c; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T c) {
  return elementwise_unary(a, [c](T x) { return x * c; }, [c](T, T) { return c; });
}

template <typename T>
Tensor<T> clamp(const Tensor<T>& a, T lo, T hi) {
  return elementwise_unary(
      a, [lo, hi](T x) { return std::min(std::max(x, lo), hi); },
      [lo, hi](T x, T) { return (x >= lo && x <= hi) ? T(1) : T(0); });
}

// ---------------------------------------------------------------------------
// Matrix ops (rank-2 only; reshape for anything else).
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2) throw ShapeError("matmul expects rank-2 operands");
  size_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2)
    throw ShapeError("matmul inner dims " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::vector<T> out(m * n, T(0));
  const auto& av = a.data();
  const auto& bv = b.data();
  for (size_t i = 0; i < m; ++i)
    for (size_t p = 0; p < k; ++p) {
      T x = av[i * k + p];
      if (x == T(0)) continue;
      const T* brow = bv.data() + p * n;
      T* orow = out.data() + i * n;
      for (size_t j = 0; j < n; ++j) orow[j] += x * brow[j];
    }
  Tensor<T> t = Tensor<T>::from_vector({m, n}, std::move(out));
  auto* on = t.node.get();
  auto* pa = a.node.get();
  auto* pb = b.node.get();
  attach_backward(t, {a, b}, [on, pa, pb, m, k, n]() {
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < n; ++j) {
          T g = on->grad[i * n + j];
          if (g == T(0)) continue;
          for (size_t p = 0; p < k; ++p) pa->grad[i * k + p] += g * pb->value[p * n + j];
        }
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (size_t i = 0; i < m; ++i)
        for (size_t p = 0; p < k; ++p) {
          T x = pa->value[i * k + p];
          if (x == T(0)) continue;
          for (size_t j = 0; j < n; ++j) pb->grad[p * n + j] += x * on->grad[i * n + j];
        }
    }
  });
  return t;
}

template <typename T>
Tensor<T> transpose2d(const Tensor<T>& a) {
  if (a.rank() != 2) throw ShapeError("transpose2d expects rank-2");
  size_t m = a.dim(0), n = a.dim(1);
  std::vector<T> out(m * n);
  const auto& av = a.data();
  for (size_t i = 0; i < m; ++i)
    for (size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
  Tensor<T> t = Tensor<T>::from_vector({n, m}, std::move(out));
  auto* on = t.node.get();
  auto* pa = a.node.get();
  attach_backward(t, {a}, [on, pa, m, n]() {
    pa->ensure_grad();
    for (size_t i = 0; i < m; ++i)
      for (size_t j = 0; j < n; ++j) pa->grad[i * n + j] += on->grad[j * m + i];
  });
  return t;
}

// ---------------------------------------------------------------------------
// Softmax / layer norm over the last dimension.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& a) {
  if (a.rank() < 1 || a.dim(a.rank() - 1) < 1) throw ShapeError("softmax needs a last dimension");
  if (!detail::all_finite(a.data())) throw NumericError("softmax input contains NaN or Inf");
  size_t m = a.dim(a.rank() - 1);
  size_t rows = a.numel() / m;
  std::vector<T> out(a.numel());
  const auto& av = a.data();
  for (size_t r = 0; r < rows; ++r) {
    const T* x = av.data() + r * m;
    T* y = out.data() + r * m;
    T mx = x[0];
    for (size_t j = 1; j < m; ++j) mx = std::max(mx, x[j]);
    T sum = T(0);
    for (size_t j = 0; j < m; ++j) {
      y[j] = std::exp(x[j] - mx);
      sum += y[j];
    }
    for (size_t j = 0; j < m; ++j) y[j] /= sum;
  }
  Tensor<T> t = Tensor<T>::from_vector(a.shape(), std::move(out));
  auto* on = t.node.get();
  auto* pa = a.node.get();
  attach_backward(t, {a}, [on, pa, rows, m]() {
    pa->ensure_grad();
    for (size_t r = 0; r < rows; ++r) {
      const T* y = on->value.data() + r * m;
      const T* g = on->grad.data() + r * m;
      T dot = T(0);
      for (size_t j = 0; j < m; ++j) dot += g[j] * y[j];
      for (size_t j = 0; j < m; ++j) pa->grad[r * m + j] += y[j] * (g[j] - dot);
    }
  });
  return t;
}

// Pure normalization (no affine): y = (x - mean) / sqrt(var + eps) per slice.
template <typename T>
Tensor<T> layer_norm_lastdim(const Tensor<T>& a, T eps = T(1e-6)) {
  if (a.rank() < 1) throw ShapeError("layer_norm needs a last dimension");
  size_t m = a.dim(a.rank() - 1);
  size_t rows = a.numel() / m;
  std::vector<T> out(a.numel());
  std::vector<T> inv_std(rows);
  const auto& av = a.data();
  for (size_t r = 0; r < rows; ++r) {
    const T* x = av.data() + r * m;
    T mean = T(0);
    for (size_t j = 0; j < m; ++j) mean += x[j];
    mean /= T(m);
    T var = T(0);
    for (size_t j = 0; j < m; ++j) var += (x[j] - mean) * (x[j] - mean);
    var /= T(m);
    T s = T(1) / std::sqrt(var + eps);
    inv_std[r] = s;
    for (size_t j = 0; j < m; ++j) out[r * m + j] = (x[j] - mean) * s;
  }
  Tensor<T> t = Tensor<T>::from_vector(a.shape(), std::move(out));
  auto* on = t.node.get();
  auto* pa = a.node.get();
  attach_backward(t, {a}, [on, pa, rows, m, inv_std = std::move(inv_std)]() {
    pa->ensure_grad();
    for (size_t r = 0; r < rows; ++r) {
      const T* y = on->value.data() + r * m;
      const T* g = on->grad.data() + r * m;
      T gm = T(0), gym = T(0);
      for (size_t j = 0; j < m; ++j) {
        gm += g[j];
        gym += g[j] * y[j];
      }
      gm /= T(m);
      gym /= T(m);
      T s = inv_std[r];
      for (size_t j = 0; j < m; ++j) pa->grad[r * m + j] += s * (g[j] - gm - y[j] * gym);
    }
  });
  return t;
}

// ---------------------------------------------------------------------------
// Reductions.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
  T s = T(0);
  for (T x : a.data()) s += x;
  Tensor<T> t = Tensor<T>::from_vector({1}, {s});
  auto* on = t.node.get();
  auto* pa = a.node.get();
  size_t n = a.numel();
  attach_backward(t, {a}, [on, pa, n]() {
    pa->ensure_grad();
    T g = on->grad[0];
    for (size_t i = 0; i < n; ++i) pa->grad[i] += g;
  });
  return t;
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& a) {
  return mul_scalar(sum_all(a), T(1) / T(a.numel()));
}

// Sum over dim0 of a rank-2 tensor: [n, d] -> [d].
template <typename T>
Tensor<T> sum_rows(const Tensor<T>& a) {
  if (a.rank() != 2) throw ShapeError("sum_rows expects rank-2");
  size_t n = a.dim(0), d = a.dim(1);
  std::vector<T> out(d, T(0));
  const auto& av = a.data();
  for (size_t i = 0; i < n; ++i)
    for (size_t j = 0; j < d; ++j) out[j] += av[i * d + j];
  Tensor<T> t = Tensor<T>::from_vector({d}, std::move(out));
  auto* on = t.node.get();
  auto* pa = a.node.get();
  attach_backward(t, {a}, [on, pa, n, d]() {
    pa->ensure_grad();
    for (size_t i = 0; i < n; ++i)
      for (size_t j = 0; j < d; ++j) pa->grad[i * d + j] += on->grad[j];
  });
  return t;
}

template <typename T>
Tensor<T> mean_rows(const Tensor<T>& a) {
  return mul_scalar(sum_rows(a), T(1) / T(a.dim(0)));
}

// Row-wise max of a rank-2 tensor: [n, m] -> [n]. Ties go to the lower index;
// the gradient routes through the argmax entries only.
template <typename T>
Tensor<T> reduce_max_lastdim(const Tensor<T>& a) {
  if (a.rank() != 2) throw ShapeError("reduce_max_lastdim expects rank-2");
  size_t n = a.dim(0), m = a.dim(1);
  if (m < 1) throw ShapeError("reduce_max_lastdim needs a nonempty last dim");
  std::vector<T> out(n);
  std::vector<size_t> arg(n);
  const auto& av = a.data();
  for (size_t i = 0; i < n; ++i) {
    size_t best = 0;
    for (size_t j = 1; j < m; ++j)
      if (av[i * m + j] > av[i * m + best]) best = j;
    arg[i] = best;
    out[i] = av[i * m + best];
  }
  Tensor<T> t = Tensor<T>::from_vector({n}, std::move(out));
  auto* on = t.node.get();
  auto* pa = a.node.get();
  attach_backward(t, {a}, [on, pa, n, m, arg = std::move(arg)]() {
    pa->ensure_grad();
    for (size_t i = 0; i < n; ++i) pa->grad[i * m + arg[i]] += on->grad[i];
  });
  return t;
}

// ---------------------------------------------------------------------------
// Shape surgery: reshape, concat, slice, gather.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel_of(shape) != a.numel())
    throw ShapeError("reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
  Tensor<T> t = Tensor<T>::from_vector(std::move(shape), a.data());
  auto* on = t.node.get();
  auto* pa = a.node.get();
  size_t n = a.numel();
  attach_backward(t, {a}, [on, pa, n]() {
    pa->ensure_grad();
    for (size_t i = 0; i < n; ++i) pa->grad[i] += on->grad[i];
  });
  return t;
}

// Concatenate along dim0; all trailing dims must agree.
template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows of nothing");
  Shape base = parts[0].shape();
  size_t rows = 0;
  for (const auto& p : parts) {
    if (p.rank() != base.size()) throw ShapeError("concat_rows rank mismatch");
    for (size_t i = 1; i < base.size(); ++i)
      if (p.shape()[i] != base[i]) throw ShapeError("concat_rows trailing-dim mismatch");
    rows += p.dim(0);
  }
  Shape os = base;
  os[0] = rows;
  std::vector<T> out;
  out.reserve(numel_of(os));
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  Tensor<T> t = Tensor<T>::from_vector(std::move(os), std::move(out));
  auto* on = t.node.get();
  std::vector<TensorNode<T>*> pn;
  std::vector<size_t> sizes;
  for (const auto& p : parts) {
    pn.push_back(p.node.get());
    sizes.push_back(p.numel());
  }
  attach_backward(t, parts, [on, pn, sizes]() {
    size_t off = 0;
    for (size_t k = 0; k < pn.size(); ++k) {
      if (pn[k]->requires_grad) {
        pn[k]->ensure_grad();
        for (size_t i = 0; i < sizes[k]; ++i) pn[k]->grad[i] += on->grad[off + i];
      }
      off += sizes[k];
    }
  });
  return t;
}

// Concatenate rank-2 tensors along dim1: [n, d_k] -> [n, sum d_k].
template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols of nothing");
  size_t n = parts[0].dim(0);
  size_t dtot = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(0) != n) throw ShapeError("concat_cols expects rank-2 with equal rows");
    dtot += p.dim(1);
  }
  std::vector<T> out(n * dtot);
  size_t off = 0;
  for (const auto& p : parts) {
    size_t d = p.dim(1);
    const auto& pv = p.data();
    for (size_t i = 0; i < n; ++i)
      for (size_t j = 0; j < d; ++j) out[i * dtot + off + j] = pv[i * d + j];
    off += d;
  }
  Tensor<T> t = Tensor<T>::from_vector({n, dtot}, std::move(out));
  auto* on = t.node.get();
  std::vector<TensorNode<T>*> pn;
  std::vector<size_t> widths;
  for (const auto& p : parts) {
    pn.push_back(p.node.get());
    widths.push_back(p.dim(1));
  }
  attach_backward(t, parts, [on, pn, widths, n, dtot]() {
    size_t off2 = 0;
    for (size_t k = 0; k < pn.size(); ++k) {
      size_t d = widths[k];
      if (pn[k]->requires_grad) {
        pn[k]->ensure_grad();
        for (size_t i = 0; i < n; ++i)
          for (size_t j = 0; j < d; ++j) pn[k]->grad[i * d + j] += on->grad[i * dtot + off2 + j];
      }
      off2 += d;
    }
  });
  return t;
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& a, size_t start, size_t len) {
  if (a.rank() < 1 || start + len > a.dim(0)) throw ShapeError("slice_rows out of range");
  size_t inner = a.numel() / a.dim(0);
  Shape os = a.shape();
  os[0] = len;
  std::vector<T> out(len * inner);
  const auto& av = a.data();
  std::copy(av.begin() + start * inner, av.begin() + (start + len) * inner, out.begin());
  Tensor<T> t = Tensor<T>::from_vector(std::move(os), std::move(out));
  auto* on = t.node.get();
  auto* pa = a.node.get();
  attach_backward(t, {a}, [on, pa, start, len, inner]() {
    pa->ensure_grad();
    for (size_t i = 0; i < len * inner; ++i) pa->grad[start * inner + i] += on->grad[i];
  });
  return t;
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& a, size_t start, size_t len) {
  if (a.rank() != 2) throw ShapeError("slice_cols expects rank-2");
  size_t n = a.dim(0), d = a.dim(1);
  if (start + len > d) throw ShapeError("slice_cols out of range");
  std::vector<T> out(n * len);
  const auto& av = a.data();
  for (size_t i = 0; i < n; ++i)
    for (size_t j = 0; j < len; ++j) out[i * len + j] = av[i * d + start + j];
  Tensor<T> t = Tensor<T>::from_vector({n, len}, std::move(out));
  auto* on = t.node.get();
  auto* pa = a.node.get();
  attach_backward(t, {a}, [on, pa, n, d, start, len]() {
    pa->ensure_grad();
    for (size_t i = 0; i < n; ++i)
      for (size_t j = 0; j < len; ++j) pa->grad[i * d + start + j] += on->grad[i * len + j];
  });
  return t;
}

// Select rows by (possibly repeated) constant indices; gradient scatter-adds.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& a, const std::vector<size_t>& idx) {
  if (a.rank() < 1) throw ShapeError("gather_rows needs rank >= 1");
  size_t inner = a.numel() / a.dim(0);
  for (size_t i : idx)
    if (i >= a.dim(0)) throw ShapeError("gather_rows index out of range");
  Shape os = a.shape();
  os[0] = idx.size();
  std::vector<T> out(idx.size() * inner);
  const auto& av = a.data();
  for (size_t k = 0; k < idx.size(); ++k)
    std::copy(av.begin() + idx[k] * inner, av.begin() + (idx[k] + 1) * inner, out.begin() + k * inner);
  Tensor<T> t = Tensor<T>::from_vector(std::move(os), std::move(out));
  auto* on = t.node.get();
  auto* pa = a.node.get();
  attach_backward(t, {a}, [on, pa, idx, inner]() {
    pa->ensure_grad();
    for (size_t k = 0; k < idx.size(); ++k)
      for (size_t j = 0; j < inner; ++j) pa->grad[idx[k] * inner + j] += on->grad[k * inner + j];
  });
  return t;
}

template <typename T>
Tensor<T> gather_cols(const Tensor<T>& a, const std::vector<size_t>& idx) {
  if (a.rank() != 2) throw ShapeError("gather_cols expects rank-2");
  size_t n = a.dim(0), d = a.dim(1);
  for (size_t i : idx)
    if (i >= d) throw ShapeError("gather_cols index out of range");
  std::vector<T> out(n * idx.size());
  const auto& av = a.data();
  for (size_t i = 0; i < n; ++i)
    for (size_t k = 0; k < idx.size(); ++k) out[i * idx.size() + k] = av[i * d + idx[k]];
  Tensor<T> t = Tensor<T>::from_vector({n, idx.size()}, std::move(out));
  auto* on = t.node.get();
  auto* pa = a.node.get();
  attach_backward(t, {a}, [on, pa, idx, n, d]() {
    pa->ensure_grad();
    for (size_t i = 0; i < n; ++i)
      for (size_t k = 0; k < idx.size(); ++k) pa->grad[i * d + idx[k]] += on->grad[i * idx.size() + k];
  });
  return t;
}

// Scale each row of [n, d] by the matching entry of [n].
template <typename T>
Tensor<T> scale_rows(const Tensor<T>& a, const Tensor<T>& s) {
  if (a.rank() != 2 || s.rank() != 1 || s.dim(0) != a.dim(0))
    throw ShapeError("scale_rows expects [n,d] and [n]");
  size_t n = a.dim(0), d = a.dim(1);
  std::vector<T> out(n * d);
  const auto& av = a.data();
  const auto& sv = s.data();
  for (size_t i = 0; i < n; ++i)
    for (size_t j = 0; j < d; ++j) out[i * d + j] = av[i * d + j] * sv[i];
  Tensor<T> t = Tensor<T>::from_vector({n, d}, std::move(out));
  auto* on = t.node.get();
  auto* pa = a.node.get();
  auto* ps = s.node.get();
  attach_backward(t, {a, s}, [on, pa, ps, n, d]() {
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < d; ++j) pa->grad[i * d + j] += on->grad[i * d + j] * ps->value[i];
    }
    if (ps->requires_grad) {
      ps->ensure_grad();
      for (size_t i = 0; i < n; ++i) {
        T acc = T(0);
        for (size_t j = 0; j < d; ++j) acc += on->grad[i * d + j] * pa->value[i * d + j];
        ps->grad[i] += acc;
      }
    }
  });
  return t;
}

// ---------------------------------------------------------------------------
// Fused loss primitives (targets are constants, not graph nodes).
// ---------------------------------------------------------------------------

// Elementwise stable binary cross-entropy on logits.
template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, const std::vector<T>& targets) {
  if (targets.size() != logits.numel()) throw ShapeError("bce_with_logits target size mismatch");
  size_t n = logits.numel();
  std::vector<T> out(n);
  const auto& xv = logits.data();
  for (size_t i = 0; i < n; ++i)
    out[i] = std::max(xv[i], T(0)) - xv[i] * targets[i] + std::log1p(std::exp(-std::abs(xv[i])));
  Tensor<T> t = Tensor<T>::from_vector(logits.shape(), std::move(out));
  auto* on = t.node.get();
  auto* pa = logits.node.get();
  attach_backward(t, {logits}, [on, pa, targets, n]() {
    pa->ensure_grad();
    for (size_t i = 0; i < n; ++i)
      pa->grad[i] += (detail::stable_sigmoid(pa->value[i]) - targets[i]) * on->grad[i];
  });
  return t;
}

// Elementwise sigmoid focal loss on logits, targets in {0,1}.
template <typename T>
Tensor<T> focal_bce_with_logits(const Tensor<T>& logits, const std::vector<T>& targets, T alpha, T gamma) {
  if (targets.size() != logits.numel()) throw ShapeError("focal loss target size mismatch");
  size_t n = logits.numel();
  std::vector<T> out(n);
  const auto& xv = logits.data();
  for (size_t i = 0; i < n; ++i) {
    T x = xv[i];
    T p = detail::stable_sigmoid(x);
    if (targets[i] >= T(0.5)) {
      out[i] = alpha * std::pow(T(1) - p, gamma) * detail::stable_softplus(-x);
    } else {
      out[i] = (T(1) - alpha) * std::pow(p, gamma) * detail::stable_softplus(x);
    }
  }
  Tensor<T> t = Tensor<T>::from_vector(logits.shape(), std::move(out));
  auto* on = t.node.get();
  auto* pa = logits.node.get();
  attach_backward(t, {logits}, [on, pa, targets, n, alpha, gamma]() {
    pa->ensure_grad();
    for (size_t i = 0; i < n; ++i) {
      T x = pa->value[i];
      T p = detail::stable_sigmoid(x);
      T dx;
      if (targets[i] >= T(0.5)) {
        T logp = -detail::stable_softplus(-x);
        dx = alpha * gamma * std::pow(T(1) - p, gamma) * p * logp - alpha * std::pow(T(1) - p, gamma + T(1));
      } else {
        T log1mp = -detail::stable_softplus(x);
        dx = (T(1) - alpha) * (std::pow(p, gamma + T(1)) - gamma * std::pow(p, gamma) * (T(1) - p) * log1mp);
      }
      pa->grad[i] += dx * on->grad[i];
    }
  });
  return t;
}

// Sine-cosine encoding of normalized box coordinates. Each of the 4 coords
// expands to sin/cos at 16 geometric frequencies spanning a 1e4 dynamic range
// below the base frequency 20, giving rows of width 128.
inline constexpr size_t kSincosFreqs = 16;
inline constexpr size_t kSincosWidth = 4 * 2 * kSincosFreqs;

template <typename T>
Tensor<T> sincos_box_encode(const Tensor<T>& boxes) {
  if (boxes.rank() != 2 || boxes.dim(1) != 4) throw ShapeError("sincos_box_encode expects [N,4]");
  for (T c : boxes.data())
    if (c < T(0) || c > T(1)) throw InputError("box coordinate outside [0,1]");
  size_t n = boxes.dim(0);
  std::vector<T> freqs(kSincosFreqs);
  for (size_t i = 0; i < kSincosFreqs; ++i)
    freqs[i] = T(20) * static_cast<T>(std::pow(10000.0, -static_cast<double>(i) / kSincosFreqs));
  std::vector<T> out(n * kSincosWidth);
  const auto& bv = boxes.data();
  for (size_t r = 0; r < n; ++r)
    for (size_t c = 0; c < 4; ++c) {
      T coord = bv[r * 4 + c];
      T* dst = out.data() + r * kSincosWidth + c * 2 * kSincosFreqs;
      for (size_t i = 0; i < kSincosFreqs; ++i) {
        dst[i] = std::sin(freqs[i] * coord);
        dst[kSincosFreqs + i] = std::cos(freqs[i] * coord);
      }
    }
  Tensor<T> t = Tensor<T>::from_vector({n, kSincosWidth}, std::move(out));
  auto* on = t.node.get();
  auto* pa = boxes.node.get();
  attach_backward(t, {boxes}, [on, pa, n, freqs = std::move(freqs)]() {
    pa->ensure_grad();
    for (size_t r = 0; r < n; ++r)
      for (size_t c = 0; c < 4; ++c) {
        T coord = pa->value[r * 4 + c];
        const T* g = on->grad.data() + r * kSincosWidth + c * 2 * kSincosFreqs;
        T acc = T(0);
        for (size_t i = 0; i < kSincosFreqs; ++i) {
          acc += g[i] * freqs[i] * std::cos(freqs[i] * coord);
          acc -= g[kSincosFreqs + i] * freqs[i] * std::sin(freqs[i] * coord);
        }
        pa->grad[r * 4 + c] += acc;
      }
  });
  return t;
}

// logit(clamp(x, eps, 1-eps)), built from primitives.
template <typename T>
Tensor<T> inverse_sigmoid(const Tensor<T>& x, T eps = T(1e-5)) {
  Tensor<T> c = clamp(x, eps, T(1) - eps);
  return sub(log_t(c), log_t(add_scalar(neg(c), T(1))));
}

}  // namespace cpdet
