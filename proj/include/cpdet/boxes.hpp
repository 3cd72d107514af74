#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "cpdet/errors.hpp"
#include "cpdet/ops.hpp"
#include "cpdet/tensor.hpp"

namespace cpdet {

// Plain (graph-free) box math in corner form, used by matching costs, anchor
// assignment, and evaluation. Differentiable variants operate on tensors.

struct BoxXyxy {
  double x0, y0, x1, y1;
  double area() const { return std::max(0.0, x1 - x0) * std::max(0.0, y1 - y0); }
};

struct BoxCxcywh {
  double cx, cy, w, h;
  BoxXyxy to_xyxy() const { return {cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2}; }
};

inline double iou_xyxy(const BoxXyxy& a, const BoxXyxy& b) {
  double ix0 = std::max(a.x0, b.x0), iy0 = std::max(a.y0, b.y0);
  double ix1 = std::min(a.x1, b.x1), iy1 = std::min(a.y1, b.y1);
  double inter = std::max(0.0, ix1 - ix0) * std::max(0.0, iy1 - iy0);
  double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

inline double giou_xyxy(const BoxXyxy& a, const BoxXyxy& b) {
  if (a.area() <= 0.0 || b.area() <= 0.0) throw InputError("giou of a degenerate box");
  double ix0 = std::max(a.x0, b.x0), iy0 = std::max(a.y0, b.y0);
  double ix1 = std::min(a.x1, b.x1), iy1 = std::min(a.y1, b.y1);
  double inter = std::max(0.0, ix1 - ix0) * std::max(0.0, iy1 - iy0);
  double uni = a.area() + b.area() - inter;
  double ex0 = std::min(a.x0, b.x0), ey0 = std::min(a.y0, b.y0);
  double ex1 = std::max(a.x1, b.x1), ey1 = std::max(a.y1, b.y1);
  double enc = (ex1 - ex0) * (ey1 - ey0);
  return inter / uni - (enc - uni) / enc;
}

// [N,4] cxcywh -> [N,4] corner form, differentiable.
template <typename T>
Tensor<T> boxes_cxcywh_to_xyxy(const Tensor<T>& b) {
  if (b.rank() != 2 || b.dim(1) != 4) throw ShapeError("expected [N,4] boxes");
  Tensor<T> cx = slice_cols(b, 0, 1);
  Tensor<T> cy = slice_cols(b, 1, 1);
  Tensor<T> hw = mul_scalar(slice_cols(b, 2, 1), T(0.5));
  Tensor<T> hh = mul_scalar(slice_cols(b, 3, 1), T(0.5));
  return concat_cols<T>({sub(cx, hw), sub(cy, hh), add(cx, hw), add(cy, hh)});
}

// Pairwise GIoU of two aligned [N,4] cxcywh tensors -> [N,1]. Composed from
// differentiable min/max/relu so gradients flow to both box sets. Degenerate
// inputs (non-positive width or height) are rejected eagerly.
template <typename T>
Tensor<T> giou_pairwise(const Tensor<T>& a_cxcywh, const Tensor<T>& b_cxcywh) {
  if (a_cxcywh.shape() != b_cxcywh.shape()) throw ShapeError("giou expects matching [N,4] shapes");
  for (const auto* t : {&a_cxcywh, &b_cxcywh})
    for (size_t i = 0; i < t->dim(0); ++i)
      if (t->data()[i * 4 + 2] <= T(0) || t->data()[i * 4 + 3] <= T(0))
        throw InputError("giou of a degenerate box");

  Tensor<T> a = boxes_cxcywh_to_xyxy(a_cxcywh);
  Tensor<T> b = boxes_cxcywh_to_xyxy(b_cxcywh);
  auto col = [](const Tensor<T>& t, size_t i) { return slice_cols(t, i, 1); };

  Tensor<T> iw = relu(sub(minimum(col(a, 2), col(b, 2)), maximum(col(a, 0), col(b, 0))));
  Tensor<T> ih = relu(sub(minimum(col(a, 3), col(b, 3)), maximum(col(a, 1), col(b, 1))));
  Tensor<T> inter = mul(iw, ih);

  Tensor<T> area_a = mul(slice_cols(a_cxcywh, 2, 1), slice_cols(a_cxcywh, 3, 1));
  Tensor<T> area_b = mul(slice_cols(b_cxcywh, 2, 1), slice_cols(b_cxcywh, 3, 1));
  Tensor<T> uni = sub(add(area_a, area_b), inter);
  Tensor<T> iou = div(inter, uni);

  Tensor<T> ew = sub(maximum(col(a, 2), col(b, 2)), minimum(col(a, 0), col(b, 0)));
  Tensor<T> eh = sub(maximum(col(a, 3), col(b, 3)), minimum(col(a, 1), col(b, 1)));
  Tensor<T> enc = mul(ew, eh);

  return sub(iou, div(sub(enc, uni), enc));
}

}  // namespace cpdet
