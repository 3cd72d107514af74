#pragma once

#include <array>
#include <string>
#include <vector>

#include "cpdet/boxes.hpp"
#include "cpdet/deform.hpp"
#include "cpdet/encoders.hpp"
#include "cpdet/errors.hpp"
#include "cpdet/nn.hpp"
#include "cpdet/ops.hpp"

namespace cpdet {

enum class PromptSource { kText, kVisual, kOptimized };

// A bundle of prompt rows fed to the detector. With text or visual prompts
// each row is one class; optimized prompts may carry several rows per class,
// declared by row_class.
template <typename T>
struct ConceptPromptSet {
  Tensor<T> rows;                   // [R,D]
  std::vector<size_t> row_class;    // row -> class id
  std::vector<std::string> labels;  // class id -> display name
  PromptSource source = PromptSource::kText;

  size_t num_classes() const { return labels.size(); }
};

// Maps prompt row scores onto class scores by taking, per class, the max
// over the rows that belong to it. Every class must own at least one row.
template <typename T>
Tensor<T> superclass_scores(const Tensor<T>& scores, const std::vector<size_t>& row_class,
                            size_t num_classes) {
  if (scores.rank() != 2 || scores.dim(1) != row_class.size())
    throw ShapeError("one row-class entry per score column required");
  std::vector<std::vector<size_t>> rows_of(num_classes);
  for (size_t r = 0; r < row_class.size(); ++r) {
    if (row_class[r] >= num_classes) throw ContractError("row mapped to a class out of range");
    rows_of[row_class[r]].push_back(r);
  }
  std::vector<Tensor<T>> cols;
  for (size_t c = 0; c < num_classes; ++c) {
    if (rows_of[c].empty()) throw ContractError("class " + std::to_string(c) + " has no prompt rows");
    Tensor<T> sub = gather_cols(scores, rows_of[c]);
    cols.push_back(reshape(reduce_max_lastdim(sub), {scores.dim(0), 1}));
  }
  return concat_cols(cols);
}

// Fresh learnable prompt rows, m per class, small gaussian init.
template <typename T>
ConceptPromptSet<T> init_optimized_prompts(const std::vector<std::string>& labels, size_t d, size_t m,
                                           Rng& rng) {
  if (labels.empty() || m == 0) throw ContractError("need at least one class and one row per class");
  ConceptPromptSet<T> set;
  set.labels = labels;
  set.source = PromptSource::kOptimized;
  std::vector<T> vals(labels.size() * m * d);
  for (auto& v : vals) v = static_cast<T>(rng.normal(0.0, 0.02));
  set.rows = Tensor<T>::from_vector({labels.size() * m, d}, std::move(vals)).set_requires_grad();
  for (size_t c = 0; c < labels.size(); ++c)
    for (size_t j = 0; j < m; ++j) set.row_class.push_back(c);
  return set;
}

// Encodes user boxes into per-class prompt rows: position-encode each box,
// project to content and positional queries, run three deformable
// cross-attention layers over the backbone maps sampling at the box center,
// concatenate the three layer outputs by channel, aggregate back to width D,
// and average rows of the same class.
template <typename T>
struct VisualPromptEncoder {
  size_t d = 0;
  Linear<T> q_proj, qpos_proj;  // box encoding (128) -> D
  struct Layer {
    DeformableAttention<T> attn;
    LayerNorm<T> norm;
  };
  std::array<Layer, 3> layers;
  Linear<T> aggregator;  // 3D -> D
  LayerNorm<T> agg_norm;

  VisualPromptEncoder() = default;
  VisualPromptEncoder(size_t d_, size_t heads, size_t sample_points, Rng& rng) : d(d_) {
    q_proj = Linear<T>(kSincosWidth, d, rng);
    qpos_proj = Linear<T>(kSincosWidth, d, rng);
    for (auto& l : layers) {
      l.attn = DeformableAttention<T>(d, heads, sample_points, rng);
      l.norm = LayerNorm<T>(d);
    }
    aggregator = Linear<T>(3 * d, d, rng);
    agg_norm = LayerNorm<T>(d);
  }

  // boxes: one exemplar per row; box_class: class id per exemplar.
  ConceptPromptSet<T> forward(const std::vector<BoxCxcywh>& boxes,
                              const std::vector<size_t>& box_class,
                              const std::vector<std::string>& labels,
                              const MultiScaleFeatures<T>& feats) const {
    if (boxes.empty()) throw InputError("visual prompting needs at least one box");
    if (box_class.size() != boxes.size()) throw InputError("one class id per box required");
    std::vector<T> box_vals, ctr_vals;
    for (const auto& b : boxes) {
      box_vals.insert(box_vals.end(), {static_cast<T>(b.cx), static_cast<T>(b.cy),
                                       static_cast<T>(b.w), static_cast<T>(b.h)});
      ctr_vals.insert(ctr_vals.end(), {static_cast<T>(b.cx), static_cast<T>(b.cy)});
    }
    Tensor<T> enc = sincos_box_encode(Tensor<T>::from_vector({boxes.size(), 4}, std::move(box_vals)));
    Tensor<T> centers = Tensor<T>::from_vector({boxes.size(), 2}, std::move(ctr_vals));
    Tensor<T> q = q_proj.forward(enc);
    Tensor<T> qpos = qpos_proj.forward(enc);

    std::vector<Tensor<T>> stages;
    for (const auto& l : layers) {
      q = l.norm.forward(add(q, l.attn.forward(add(q, qpos), centers, feats)));
      stages.push_back(q);
    }
    Tensor<T> agg = agg_norm.forward(aggregator.forward(concat_cols(stages)));  // [N,D]

    ConceptPromptSet<T> set;
    set.labels = labels;
    set.source = PromptSource::kVisual;
    std::vector<Tensor<T>> class_rows;
    for (size_t c = 0; c < labels.size(); ++c) {
      std::vector<size_t> mine;
      for (size_t i = 0; i < box_class.size(); ++i)
        if (box_class[i] == c) mine.push_back(i);
      if (mine.empty()) throw InputError("class '" + labels[c] + "' has no exemplar box");
      class_rows.push_back(reshape(mean_rows(gather_rows(agg, mine)), {1, d}));
      set.row_class.push_back(c);
    }
    set.rows = concat_rows(class_rows);
    return set;
  }

  void params(const ParamVisitor<T>& v) {
    q_proj.params(v.scoped("q_proj"));
    qpos_proj.params(v.scoped("qpos_proj"));
    for (size_t i = 0; i < layers.size(); ++i) {
      auto s = v.scoped("layer" + std::to_string(i));
      layers[i].attn.params(s.scoped("attn"));
      layers[i].norm.params(s.scoped("norm"));
    }
    aggregator.params(v.scoped("aggregator"));
    agg_norm.params(v.scoped("agg_norm"));
  }
};

// Mean squared distance between prompt matrices, averaged over rows and
// channels. Used to pull visual prompts toward their text counterparts.
template <typename T>
Tensor<T> prompt_distill_loss(const Tensor<T>& pv, const Tensor<T>& pt) {
  if (pv.shape() != pt.shape() || pv.rank() != 2)
    throw ShapeError("prompt matrices must share a [K,D] shape");
  Tensor<T> diff = sub(pv, pt);
  return mul_scalar(sum_all(mul(diff, diff)), T(1) / static_cast<T>(pv.numel()));
}

}  // namespace cpdet
