#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "cpdet/errors.hpp"
#include "cpdet/ops.hpp"
#include "cpdet/rng.hpp"
#include "cpdet/tensor.hpp"

namespace cpdet {

// Hierarchical parameter traversal. Layers report (name, tensor) pairs; the
// visitor carries a dotted prefix so checkpoint names are stable and unique.
template <typename T>
struct ParamVisitor {
  std::function<void(const std::string&, Tensor<T>&)> fn;
  std::string prefix;

  void operator()(const std::string& name, Tensor<T>& t) const { fn(prefix + name, t); }
  ParamVisitor scoped(const std::string& sub) const { return {fn, prefix + sub + "."}; }
};

template <typename T>
Tensor<T> xavier_uniform(Shape shape, size_t fan_in, size_t fan_out, Rng& rng) {
  double s = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  size_t n = numel_of(shape);
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(rng.uniform(-s, s));
  return Tensor<T>::from_vector(std::move(shape), std::move(v)).set_requires_grad();
}

template <typename T>
struct Linear {
  Tensor<T> w;  // [in, out]
  Tensor<T> b;  // [out]

  Linear() = default;
  Linear(size_t in, size_t out, Rng& rng, bool zero_init = false) {
    if (zero_init)
      w = Tensor<T>::zeros({in, out}).set_requires_grad();
    else
      w = xavier_uniform<T>({in, out}, in, out, rng);
    b = Tensor<T>::zeros({out}).set_requires_grad();
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    if (x.rank() != 2 || x.dim(1) != w.dim(0))
      throw ShapeError("linear expects [n," + std::to_string(w.dim(0)) + "], got " + shape_str(x.shape()));
    return add(matmul(x, w), b);
  }

  void params(const ParamVisitor<T>& v) {
    v("w", w);
    v("b", b);
  }
};

template <typename T>
struct LayerNorm {
  Tensor<T> gamma;
  Tensor<T> beta;
  T eps = T(1e-6);

  LayerNorm() = default;
  explicit LayerNorm(size_t d) {
    gamma = Tensor<T>::ones({d}).set_requires_grad();
    beta = Tensor<T>::zeros({d}).set_requires_grad();
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    return add(mul(layer_norm_lastdim(x, eps), gamma), beta);
  }

  void params(const ParamVisitor<T>& v) {
    v("gamma", gamma);
    v("beta", beta);
  }
};

template <typename T>
struct Embedding {
  Tensor<T> table;  // [V, D]

  Embedding() = default;
  Embedding(size_t vocab, size_t d, Rng& rng, T stddev = T(0.02)) {
    table = Tensor<T>::randn({vocab, d}, rng, stddev).set_requires_grad();
  }

  Tensor<T> lookup(const std::vector<size_t>& ids) const { return gather_rows(table, ids); }

  void params(const ParamVisitor<T>& v) { v("table", table); }
};

// Plain feed-forward stack with ReLU between layers.
template <typename T>
struct Mlp {
  std::vector<Linear<T>> layers;

  Mlp() = default;
  Mlp(const std::vector<size_t>& dims, Rng& rng, bool zero_last = false) {
    if (dims.size() < 2) throw ContractError("mlp needs at least one layer");
    for (size_t i = 0; i + 1 < dims.size(); ++i)
      layers.emplace_back(dims[i], dims[i + 1], rng, zero_last && i + 2 == dims.size());
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    Tensor<T> h = x;
    for (size_t i = 0; i < layers.size(); ++i) {
      h = layers[i].forward(h);
      if (i + 1 < layers.size()) h = relu(h);
    }
    return h;
  }

  void params(const ParamVisitor<T>& v) {
    for (size_t i = 0; i < layers.size(); ++i) layers[i].params(v.scoped("l" + std::to_string(i)));
  }
};

// Standard multi-head attention: queries attend over a key/value set. The
// caller adds any positional terms to q_in/k_in beforehand.
template <typename T>
struct MultiHeadAttention {
  Linear<T> wq, wk, wv, wo;
  size_t heads = 1;
  size_t d = 0;

  MultiHeadAttention() = default;
  MultiHeadAttention(size_t d_, size_t heads_, Rng& rng, bool zero_out = false)
      : wq(d_, d_, rng), wk(d_, d_, rng), wv(d_, d_, rng), wo(d_, d_, rng, zero_out), heads(heads_), d(d_) {
    if (d_ % heads_ != 0) throw ContractError("head count must divide width");
  }

  Tensor<T> forward(const Tensor<T>& q_in, const Tensor<T>& k_in, const Tensor<T>& v_in) const {
    size_t dh = d / heads;
    Tensor<T> q = wq.forward(q_in);
    Tensor<T> k = wk.forward(k_in);
    Tensor<T> v = wv.forward(v_in);
    std::vector<Tensor<T>> outs;
    T scale = T(1) / static_cast<T>(std::sqrt(static_cast<double>(dh)));
    for (size_t h = 0; h < heads; ++h) {
      Tensor<T> qh = slice_cols(q, h * dh, dh);
      Tensor<T> kh = slice_cols(k, h * dh, dh);
      Tensor<T> vh = slice_cols(v, h * dh, dh);
      Tensor<T> logits = mul_scalar(matmul(qh, transpose2d(kh)), scale);
      outs.push_back(matmul(softmax_lastdim(logits), vh));
    }
    return wo.forward(concat_cols(outs));
  }

  void params(const ParamVisitor<T>& v) {
    wq.params(v.scoped("wq"));
    wk.params(v.scoped("wk"));
    wv.params(v.scoped("wv"));
    wo.params(v.scoped("wo"));
  }
};

}  // namespace cpdet
