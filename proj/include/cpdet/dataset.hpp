#pragma once

// Dataset serialization: a benchmark split is written as a JSON-lines index
// (one header object, then one object per scene with its seed, boxes, class
// ids, and phrases) plus a binary tensor container holding the rendered
// images.  The header records the full generating spec and every per-scene
// seed, so the images are redundant: the split can always be regenerated
// bit-for-bit from the index alone.

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "cpdet/checkpoint.hpp"
#include "cpdet/errors.hpp"
#include "cpdet/scene.hpp"

namespace cpdet {

namespace detail {

inline ShapeKind shape_kind_from_name(const std::string& name) {
  if (name == "circle") return ShapeKind::kCircle;
  if (name == "square") return ShapeKind::kSquare;
  if (name == "triangle") return ShapeKind::kTriangle;
  throw InputError("unknown shape kind '" + name + "'");
}

inline std::string scene_tensor_name(size_t i) {
  std::ostringstream ss;
  ss << "scene" << i;
  return ss.str();
}

}  // namespace detail

inline ordered_json scene_spec_to_json(const SceneSpec& spec) {
  ordered_json j;
  j["height"] = spec.height;
  j["width"] = spec.width;
  j["colors"] = ordered_json::array();
  for (const ColorDef& c : spec.colors)
    j["colors"].push_back({{"name", c.name}, {"r", c.r}, {"g", c.g}, {"b", c.b}});
  j["categories"] = ordered_json::array();
  for (const CategoryDef& c : spec.categories)
    j["categories"].push_back({{"color", c.color}, {"shape", shape_kind_name(c.shape)}});
  j["min_objects"] = spec.min_objects;
  j["max_objects"] = spec.max_objects;
  j["min_radius_frac"] = spec.min_radius_frac;
  j["max_radius_frac"] = spec.max_radius_frac;
  j["max_pair_iou"] = spec.max_pair_iou;
  j["max_attempts"] = spec.max_attempts;
  j["background"] = spec.background;
  return j;
}

inline SceneSpec scene_spec_from_json(const ordered_json& j) {
  SceneSpec spec;
  spec.height = j.at("height").get<size_t>();
  spec.width = j.at("width").get<size_t>();
  spec.colors.clear();
  for (const auto& c : j.at("colors"))
    spec.colors.push_back({c.at("name").get<std::string>(), c.at("r").get<double>(),
                           c.at("g").get<double>(), c.at("b").get<double>()});
  spec.categories.clear();
  for (const auto& c : j.at("categories"))
    spec.categories.push_back(
        {c.at("color").get<size_t>(), detail::shape_kind_from_name(c.at("shape").get<std::string>())});
  spec.min_objects = j.at("min_objects").get<size_t>();
  spec.max_objects = j.at("max_objects").get<size_t>();
  spec.min_radius_frac = j.at("min_radius_frac").get<double>();
  spec.max_radius_frac = j.at("max_radius_frac").get<double>();
  spec.max_pair_iou = j.at("max_pair_iou").get<double>();
  spec.max_attempts = j.at("max_attempts").get<size_t>();
  spec.background = j.at("background").get<double>();
  return spec;
}

// Write `<prefix>.jsonl` (index) and `<prefix>.images` (tensor container).
inline void write_dataset(const BenchmarkSplit& split, const std::string& prefix) {
  std::ofstream index(prefix + ".jsonl", std::ios::binary);
  if (!index) throw InputError("cannot open '" + prefix + ".jsonl' for writing");

  ordered_json header;
  header["kind"] = "cpdet-dataset";
  header["scenes"] = split.scenes.size();
  header["categories"] = split.categories;
  header["held_out"] = split.held_out;
  header["spec"] = scene_spec_to_json(split.spec);
  index << header.dump() << "\n";

  Checkpoint images;
  images.meta["kind"] = "cpdet-dataset-images";
  images.meta["scenes"] = split.scenes.size();

  for (size_t i = 0; i < split.scenes.size(); ++i) {
    const SyntheticScene& s = split.scenes[i];
    ordered_json line;
    line["scene"] = i;
    line["seed"] = s.seed;
    line["tensor"] = detail::scene_tensor_name(i);
    line["boxes"] = ordered_json::array();
    for (const BoxCxcywh& b : s.gt_boxes) line["boxes"].push_back({b.cx, b.cy, b.w, b.h});
    line["classes"] = s.gt_class;
    line["phrases"] = s.gt_phrases;
    line["objects"] = ordered_json::array();
    for (const SceneObject& o : s.objects)
      line["objects"].push_back({{"color", o.cat.color},
                                 {"shape", shape_kind_name(o.cat.shape)},
                                 {"cx", o.cx},
                                 {"cy", o.cy},
                                 {"radius", o.radius}});
    index << line.dump() << "\n";
    images.add(detail::scene_tensor_name(i), s.image);
  }
  save_checkpoint(prefix + ".images", images);
}

// Read a dataset back.  Images come from the container; everything else from
// the index.
inline BenchmarkSplit read_dataset(const std::string& prefix) {
  std::ifstream index(prefix + ".jsonl", std::ios::binary);
  if (!index) throw InputError("cannot open '" + prefix + ".jsonl'");
  std::string line;
  if (!std::getline(index, line)) throw InputError("dataset index is empty");
  ordered_json header = ordered_json::parse(line);
  if (header.value("kind", "") != "cpdet-dataset")
    throw InputError("index header is not a dataset header");

  BenchmarkSplit split;
  split.spec = scene_spec_from_json(header.at("spec"));
  split.categories = header.at("categories").get<std::vector<std::string>>();
  split.held_out = header.at("held_out").get<std::vector<std::string>>();

  Checkpoint images = load_checkpoint(prefix + ".images");
  size_t n = header.at("scenes").get<size_t>();
  for (size_t i = 0; i < n; ++i) {
    if (!std::getline(index, line)) throw InputError("dataset index ends early");
    ordered_json j = ordered_json::parse(line);
    SyntheticScene s;
    s.seed = j.at("seed").get<uint64_t>();
    const CheckpointEntry* e = images.find(j.at("tensor").get<std::string>());
    if (!e) throw InputError("image container is missing scene " + std::to_string(i));
    s.image = TensorD::from_vector(e->shape, images.read<double>(*e));
    for (const auto& b : j.at("boxes"))
      s.gt_boxes.push_back({b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(),
                            b.at(3).get<double>()});
    s.gt_class = j.at("classes").get<std::vector<size_t>>();
    s.gt_phrases = j.at("phrases").get<std::vector<std::string>>();
    for (const auto& o : j.at("objects"))
      s.objects.push_back({CategoryDef{o.at("color").get<size_t>(),
                                       detail::shape_kind_from_name(o.at("shape").get<std::string>())},
                           o.at("cx").get<double>(), o.at("cy").get<double>(),
                           o.at("radius").get<double>()});
    split.scenes.push_back(std::move(s));
  }
  return split;
}

// Regenerate every scene from its recorded seed and compare against the
// stored render.  True only when all image bytes match exactly.
inline bool dataset_regenerates(const BenchmarkSplit& split) {
  for (const SyntheticScene& s : split.scenes) {
    SyntheticScene fresh = generate_scene(s.seed, split.spec);
    if (fresh.image.data() != s.image.data()) return false;
    if (fresh.gt_boxes.size() != s.gt_boxes.size()) return false;
  }
  return true;
}

}  // namespace cpdet
