#pragma once

#include <vector>

#include "cpdet/encoders.hpp"
#include "cpdet/errors.hpp"
#include "cpdet/nn.hpp"
#include "cpdet/ops.hpp"
#include "cpdet/tensor.hpp"

namespace cpdet {

// Flattens [D,H,W] maps to scale-major token rows [S,D]; scales in order,
// row-major within a scale. Token order here fixes the token indexing used
// everywhere downstream (anchors, reference points, gathers).
template <typename T>
Tensor<T> flatten_tokens(const MultiScaleFeatures<T>& feats) {
  std::vector<Tensor<T>> parts;
  for (const auto& m : feats.maps) {
    size_t d = m.dim(0), hw = m.dim(1) * m.dim(2);
    parts.push_back(transpose2d(reshape(m, {d, hw})));
  }
  return concat_rows(parts);
}

// Normalized (x, y) centers of every token, same order as flatten_tokens.
template <typename T>
std::vector<double> token_centers(const MultiScaleFeatures<T>& feats) {
  std::vector<double> out;
  for (const auto& m : feats.maps) {
    size_t h = m.dim(1), w = m.dim(2);
    for (size_t r = 0; r < h; ++r)
      for (size_t c = 0; c < w; ++c) {
        out.push_back((c + 0.5) / static_cast<double>(w));
        out.push_back((r + 0.5) / static_cast<double>(h));
      }
  }
  return out;
}

// Multi-scale deformable attention: each query predicts a small set of
// sampling offsets around its reference point at every scale plus softmax
// mixture weights, samples the value maps bilinearly, and mixes per head.
// Offset and weight projections start at zero, so the initial output is the
// scale-averaged value at the reference point itself. Reference points are
// part of the graph; gradients reach them through the sampler.
template <typename T>
struct DeformableAttention {
  size_t d = 0, heads = 0, points = 0;
  Linear<T> value_proj;
  Linear<T> offset_proj;  // D -> heads*scales*points*2, zero-init
  Linear<T> weight_proj;  // D -> heads*scales*points, zero-init
  Linear<T> out_proj;

  DeformableAttention() = default;
  DeformableAttention(size_t d_, size_t heads_, size_t points_, Rng& rng)
      : d(d_), heads(heads_), points(points_) {
    if (d % heads != 0) throw ContractError("deformable attention width must divide into heads");
    value_proj = Linear<T>(d, d, rng);
    offset_proj = Linear<T>(d, heads * 4 * points * 2, rng, /*zero_init=*/true);
    weight_proj = Linear<T>(d, heads * 4 * points, rng, /*zero_init=*/true);
    out_proj = Linear<T>(d, d, rng);
  }

  // queries [N,D], ref [N,2] normalized (x,y), feats: the four value maps.
  Tensor<T> forward(const Tensor<T>& queries, const Tensor<T>& ref,
                    const MultiScaleFeatures<T>& feats) const {
    if (queries.rank() != 2 || queries.dim(1) != d) throw ShapeError("deformable queries must be [N,D]");
    if (ref.rank() != 2 || ref.dim(0) != queries.dim(0) || ref.dim(1) != 2)
      throw ShapeError("deformable reference points must be [N,2]");
    size_t n = queries.dim(0), dh = d / heads, scales = 4;

    // Per-scale value maps as [D,H,W] built from linear rows.
    std::array<Tensor<T>, 4> vmaps;
    std::array<Tensor<T>, 4> base;  // ref in pixel coords of each scale
    for (size_t s = 0; s < scales; ++s) {
      const Tensor<T>& m = feats.maps[s];
      size_t hm = m.dim(1), wm = m.dim(2);
      Tensor<T> rows = value_proj.forward(transpose2d(reshape(m, {d, hm * wm})));
      vmaps[s] = reshape(transpose2d(rows), {d, hm, wm});
      Tensor<T> axes = Tensor<T>::from_vector({2}, {static_cast<T>(wm), static_cast<T>(hm)});
      base[s] = add_scalar(mul(ref, axes), T(-0.5));
    }

    Tensor<T> offs = offset_proj.forward(queries);   // [N, heads*scales*points*2]
    Tensor<T> wlog = weight_proj.forward(queries);   // [N, heads*scales*points]

    std::vector<Tensor<T>> head_outs;
    for (size_t h = 0; h < heads; ++h) {
      Tensor<T> wsoft = softmax_lastdim(slice_cols(wlog, h * scales * points, scales * points));
      Tensor<T> acc;
      for (size_t s = 0; s < scales; ++s) {
        for (size_t p = 0; p < points; ++p) {
          size_t flat = (h * scales + s) * points + p;
          Tensor<T> pts = add(base[s], slice_cols(offs, flat * 2, 2));
          Tensor<T> samp = slice_cols(bilinear_sample(vmaps[s], pts), h * dh, dh);
          Tensor<T> wcol = reshape(slice_cols(wsoft, s * points + p, 1), {n});
          Tensor<T> term = scale_rows(samp, wcol);
          acc = acc.defined() ? add(acc, term) : term;
        }
      }
      head_outs.push_back(acc);
    }
    return out_proj.forward(concat_cols(head_outs));
  }

  void params(const ParamVisitor<T>& v) {
    value_proj.params(v.scoped("value"));
    offset_proj.params(v.scoped("offset"));
    weight_proj.params(v.scoped("weight"));
    out_proj.params(v.scoped("out"));
  }
};

}  // namespace cpdet
