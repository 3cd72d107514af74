#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "cpdet/boxes.hpp"
#include "cpdet/errors.hpp"
#include "cpdet/rng.hpp"
#include "cpdet/tensor.hpp"

namespace cpdet {

// ---------------------------------------------------------------------------
// Synthetic colored-shape scenes. Each scene is an antialiased rendering of a
// few circles / squares / triangles on a flat gray background, with analytic
// ground-truth boxes and "<color> <shape>" phrase labels. Generation is fully
// deterministic in the seed, so datasets never need to be stored: a (spec,
// seed list) pair regenerates them bit for bit.
// ---------------------------------------------------------------------------

enum class ShapeKind { kCircle = 0, kSquare = 1, kTriangle = 2 };

inline const char* shape_kind_name(ShapeKind k) {
  switch (k) {
    case ShapeKind::kCircle: return "circle";
    case ShapeKind::kSquare: return "square";
    case ShapeKind::kTriangle: return "triangle";
  }
  return "?";
}

struct ColorDef {
  std::string name;
  double r = 0, g = 0, b = 0;
};

inline std::vector<ColorDef> default_palette() {
  return {{"red", 0.85, 0.15, 0.12},
          {"green", 0.13, 0.72, 0.20},
          {"blue", 0.15, 0.25, 0.90},
          {"yellow", 0.92, 0.86, 0.12}};
}

// A category is a (color, shape) pair; its phrase is "<color> <shape>".
struct CategoryDef {
  size_t color = 0;
  ShapeKind shape = ShapeKind::kCircle;
};

struct SceneSpec {
  size_t height = 64;
  size_t width = 64;
  std::vector<ColorDef> colors = default_palette();
  // Categories objects are drawn from. Empty means every color x shape pair.
  std::vector<CategoryDef> categories;
  size_t min_objects = 1;
  size_t max_objects = 3;
  // Object size parameter, as a fraction of min(height, width).
  double min_radius_frac = 0.07;
  double max_radius_frac = 0.13;
  double max_pair_iou = 0.30;   // overlap budget between ground-truth boxes
  size_t max_attempts = 120;    // placement retries per object before giving up
  double background = 0.12;
};

inline std::vector<ShapeKind> all_shape_kinds() {
  return {ShapeKind::kCircle, ShapeKind::kSquare, ShapeKind::kTriangle};
}

inline std::vector<CategoryDef> all_categories(const SceneSpec& spec) {
  std::vector<CategoryDef> out;
  for (size_t c = 0; c < spec.colors.size(); ++c)
    for (ShapeKind s : all_shape_kinds()) out.push_back({c, s});
  return out;
}

inline std::string category_phrase(const SceneSpec& spec, const CategoryDef& cat) {
  if (cat.color >= spec.colors.size())
    throw InputError("category color index " + std::to_string(cat.color) + " out of range");
  return spec.colors[cat.color].name + " " + shape_kind_name(cat.shape);
}

// One placed object, in pixel coordinates. `radius` is the shape's size
// parameter: circle radius, square half-side, or triangle circumradius.
struct SceneObject {
  CategoryDef cat;
  double cx = 0, cy = 0, radius = 0;
};

namespace detail {

inline constexpr double kHalfSqrt3 = 0.86602540378443864676;

}  // namespace detail

// Tight analytic bounding box of an object, in pixel coordinates.
inline BoxXyxy object_box_px(const SceneObject& o) {
  switch (o.cat.shape) {
    case ShapeKind::kCircle:
    case ShapeKind::kSquare:
      return {o.cx - o.radius, o.cy - o.radius, o.cx + o.radius, o.cy + o.radius};
    case ShapeKind::kTriangle:
      // Upward-pointing equilateral triangle (apex at smaller y), vertices at
      // (cx, cy-r), (cx +- r*sqrt(3)/2, cy + r/2).
      return {o.cx - o.radius * detail::kHalfSqrt3, o.cy - o.radius,
              o.cx + o.radius * detail::kHalfSqrt3, o.cy + o.radius * 0.5};
  }
  throw ContractError("unknown shape kind");
}

namespace detail {

inline bool point_inside_object(const SceneObject& o, double x, double y) {
  double dx = x - o.cx;
  double dy = y - o.cy;
  switch (o.cat.shape) {
    case ShapeKind::kCircle:
      return dx * dx + dy * dy <= o.radius * o.radius;
    case ShapeKind::kSquare:
      return std::abs(dx) <= o.radius && std::abs(dy) <= o.radius;
    case ShapeKind::kTriangle: {
      double ax = o.cx, ay = o.cy - o.radius;
      double bx = o.cx - o.radius * kHalfSqrt3, by = o.cy + o.radius * 0.5;
      double cx2 = o.cx + o.radius * kHalfSqrt3, cy2 = o.cy + o.radius * 0.5;
      auto edge = [x, y](double px, double py, double qx, double qy) {
        return (qx - px) * (y - py) - (qy - py) * (x - px);
      };
      double e0 = edge(ax, ay, bx, by);
      double e1 = edge(bx, by, cx2, cy2);
      double e2 = edge(cx2, cy2, ax, ay);
      return (e0 >= 0 && e1 >= 0 && e2 >= 0) || (e0 <= 0 && e1 <= 0 && e2 <= 0);
    }
  }
  throw ContractError("unknown shape kind");
}

}  // namespace detail

// Render objects onto a flat background, painter's order, with 4x4
// supersampled coverage per pixel. Returns an image tensor [3, H, W] in
// [0, 1] that carries no gradient.
inline TensorD render_objects(const SceneSpec& spec, const std::vector<SceneObject>& objects) {
  const size_t h = spec.height, w = spec.width;
  std::vector<double> img(3 * h * w, spec.background);
  for (const SceneObject& o : objects) {
    if (o.cat.color >= spec.colors.size())
      throw InputError("object color index out of range");
    const ColorDef& col = spec.colors[o.cat.color];
    const double chan[3] = {col.r, col.g, col.b};
    BoxXyxy box = object_box_px(o);
    long px0 = std::max<long>(0, static_cast<long>(std::floor(box.x0)) - 1);
    long py0 = std::max<long>(0, static_cast<long>(std::floor(box.y0)) - 1);
    long px1 = std::min<long>(static_cast<long>(w) - 1, static_cast<long>(std::ceil(box.x1)) + 1);
    long py1 = std::min<long>(static_cast<long>(h) - 1, static_cast<long>(std::ceil(box.y1)) + 1);
    for (long py = py0; py <= py1; ++py) {
      for (long px = px0; px <= px1; ++px) {
        int hits = 0;
        for (int sy = 0; sy < 4; ++sy)
          for (int sx = 0; sx < 4; ++sx) {
            double x = static_cast<double>(px) + (static_cast<double>(sx) + 0.5) / 4.0;
            double y = static_cast<double>(py) + (static_cast<double>(sy) + 0.5) / 4.0;
            if (detail::point_inside_object(o, x, y)) ++hits;
          }
        if (hits == 0) continue;
        double cov = static_cast<double>(hits) / 16.0;
        for (int c = 0; c < 3; ++c) {
          double& v = img[static_cast<size_t>(c) * h * w + static_cast<size_t>(py) * w +
                          static_cast<size_t>(px)];
          v = v * (1.0 - cov) + chan[c] * cov;
        }
      }
    }
  }
  return TensorD::from_vector({3, h, w}, std::move(img));
}

struct SyntheticScene {
  TensorD image;                        // [3, H, W] in [0, 1]
  std::vector<SceneObject> objects;     // placements, pixel coordinates
  std::vector<BoxCxcywh> gt_boxes;      // normalized cxcywh, one per object
  std::vector<size_t> gt_class;         // index into the generating category list
  std::vector<std::string> gt_phrases;  // "<color> <shape>" per object
  uint64_t seed = 0;
};

namespace detail {

inline void validate_scene_spec(const SceneSpec& spec) {
  if (spec.height == 0 || spec.width == 0 || spec.height % 64 != 0 || spec.width % 64 != 0)
    throw InputError("scene size must be a positive multiple of 64, got " +
                     std::to_string(spec.height) + "x" + std::to_string(spec.width));
  if (spec.colors.empty()) throw InputError("scene spec lists no colors");
  if (spec.min_objects > spec.max_objects)
    throw InputError("min_objects exceeds max_objects");
  if (!(spec.min_radius_frac > 0) || spec.min_radius_frac > spec.max_radius_frac)
    throw InputError("bad radius range");
  for (const CategoryDef& cat : spec.categories)
    if (cat.color >= spec.colors.size())
      throw InputError("category color index out of range");
}

}  // namespace detail

// Deterministically generate one scene. Placement rejects candidates whose
// analytic box overlaps an already placed box by more than `max_pair_iou`;
// after `max_attempts` failed draws for any single object the spec is deemed
// infeasible and a GenerationError is thrown.
inline SyntheticScene generate_scene(uint64_t seed, const SceneSpec& spec) {
  detail::validate_scene_spec(spec);
  std::vector<CategoryDef> cats = spec.categories.empty() ? all_categories(spec) : spec.categories;

  Rng rng(seed);
  size_t count = static_cast<size_t>(
      rng.uniform_int(static_cast<int64_t>(spec.min_objects), static_cast<int64_t>(spec.max_objects)));

  double side = static_cast<double>(std::min(spec.height, spec.width));
  std::vector<SceneObject> placed;
  std::vector<BoxXyxy> placed_boxes;
  for (size_t i = 0; i < count; ++i) {
    bool ok = false;
    for (size_t attempt = 0; attempt < spec.max_attempts && !ok; ++attempt) {
      SceneObject o;
      o.cat = cats[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(cats.size()) - 1))];
      o.radius = rng.uniform(spec.min_radius_frac, spec.max_radius_frac) * side;
      // Extents of the analytic box around the center, per shape.
      double left = o.radius, right = o.radius, top = o.radius, bottom = o.radius;
      if (o.cat.shape == ShapeKind::kTriangle) {
        left = right = o.radius * detail::kHalfSqrt3;
        bottom = o.radius * 0.5;
      }
      o.cx = rng.uniform(left + 1.0, static_cast<double>(spec.width) - right - 1.0);
      o.cy = rng.uniform(top + 1.0, static_cast<double>(spec.height) - bottom - 1.0);
      BoxXyxy box = object_box_px(o);
      bool clash = false;
      for (const BoxXyxy& other : placed_boxes)
        if (iou_xyxy(box, other) > spec.max_pair_iou) {
          clash = true;
          break;
        }
      if (!clash) {
        placed.push_back(o);
        placed_boxes.push_back(box);
        ok = true;
      }
    }
    if (!ok)
      throw GenerationError("could not place object " + std::to_string(i + 1) + " of " +
                            std::to_string(count) + " within the overlap budget after " +
                            std::to_string(spec.max_attempts) + " attempts");
  }

  SyntheticScene scene;
  scene.seed = seed;
  scene.objects = placed;
  scene.image = render_objects(spec, placed);
  for (const SceneObject& o : placed) {
    BoxXyxy b = object_box_px(o);
    scene.gt_boxes.push_back({(b.x0 + b.x1) * 0.5 / static_cast<double>(spec.width),
                              (b.y0 + b.y1) * 0.5 / static_cast<double>(spec.height),
                              (b.x1 - b.x0) / static_cast<double>(spec.width),
                              (b.y1 - b.y0) / static_cast<double>(spec.height)});
    size_t cls = 0;
    for (; cls < cats.size(); ++cls)
      if (cats[cls].color == o.cat.color && cats[cls].shape == o.cat.shape) break;
    scene.gt_class.push_back(cls);
    scene.gt_phrases.push_back(category_phrase(spec, o.cat));
  }
  return scene;
}

// ---------------------------------------------------------------------------
// Benchmark splits: a list of scenes over a fixed category dictionary, with
// optional held-out (color, shape) pairs that never appear in the scenes.
// ---------------------------------------------------------------------------

struct BenchmarkSplit {
  SceneSpec spec;                        // spec the scenes were generated from
  std::vector<SyntheticScene> scenes;
  std::vector<std::string> categories;   // phrase per class id
  std::vector<std::string> held_out;     // phrases excluded from generation
};

inline bool same_category(const CategoryDef& a, const CategoryDef& b) {
  return a.color == b.color && a.shape == b.shape;
}

// Build a split of `n_scenes` scenes seeded base_seed, base_seed+1, ...
// Categories in `held_out` are removed from the generating spec, so they can
// never appear; they are recorded on the split for bookkeeping.
inline BenchmarkSplit make_split(const SceneSpec& spec, size_t n_scenes, uint64_t base_seed,
                                 const std::vector<CategoryDef>& held_out = {}) {
  detail::validate_scene_spec(spec);
  BenchmarkSplit split;
  split.spec = spec;
  std::vector<CategoryDef> cats = spec.categories.empty() ? all_categories(spec) : spec.categories;
  std::vector<CategoryDef> kept;
  for (const CategoryDef& c : cats) {
    bool held = false;
    for (const CategoryDef& h : held_out)
      if (same_category(c, h)) held = true;
    if (held)
      split.held_out.push_back(category_phrase(spec, c));
    else
      kept.push_back(c);
  }
  if (kept.empty()) throw InputError("holding out every category leaves nothing to draw");
  split.spec.categories = kept;
  for (const CategoryDef& c : kept) split.categories.push_back(category_phrase(spec, c));
  for (size_t i = 0; i < n_scenes; ++i)
    split.scenes.push_back(generate_scene(base_seed + i, split.spec));
  return split;
}

}  // namespace cpdet
