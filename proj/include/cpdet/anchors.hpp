#pragma once

#include <vector>

#include "cpdet/boxes.hpp"
#include "cpdet/encoders.hpp"
#include "cpdet/errors.hpp"
#include "cpdet/tensor.hpp"

namespace cpdet {

// One anchor per image token: centered on the token, square side of four
// strides, normalized coordinates. Order matches flatten_tokens: scale-major,
// then row, then column.
struct Anchor {
  double cx = 0, cy = 0, w = 0, h = 0;
  size_t scale = 0, row = 0, col = 0, stride = 0;

  BoxCxcywh box() const { return {cx, cy, w, h}; }
};

template <typename T>
std::vector<Anchor> generate_anchors(const MultiScaleFeatures<T>& feats, size_t img_h, size_t img_w) {
  std::vector<Anchor> out;
  for (size_t s = 0; s < 4; ++s) {
    size_t hm = feats.maps[s].dim(1), wm = feats.maps[s].dim(2);
    if (hm == 0 || img_h % hm != 0) throw ShapeError("feature grid does not divide image height");
    size_t stride = img_h / hm;
    for (size_t r = 0; r < hm; ++r)
      for (size_t c = 0; c < wm; ++c) {
        Anchor a;
        a.cx = (c + 0.5) * stride / static_cast<double>(img_w);
        a.cy = (r + 0.5) * stride / static_cast<double>(img_h);
        a.w = 4.0 * stride / static_cast<double>(img_w);
        a.h = 4.0 * stride / static_cast<double>(img_h);
        a.scale = s;
        a.row = r;
        a.col = c;
        a.stride = stride;
        out.push_back(a);
      }
  }
  return out;
}

template <typename T>
Tensor<T> anchors_tensor(const std::vector<Anchor>& anchors) {
  std::vector<T> vals;
  vals.reserve(anchors.size() * 4);
  for (const auto& a : anchors) {
    vals.push_back(static_cast<T>(a.cx));
    vals.push_back(static_cast<T>(a.cy));
    vals.push_back(static_cast<T>(a.w));
    vals.push_back(static_cast<T>(a.h));
  }
  return Tensor<T>::from_vector({anchors.size(), 4}, std::move(vals));
}

}  // namespace cpdet
