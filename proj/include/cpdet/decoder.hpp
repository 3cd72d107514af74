#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "cpdet/anchors.hpp"
#include "cpdet/boxes.hpp"
#include "cpdet/deform.hpp"
#include "cpdet/errors.hpp"
#include "cpdet/fusion.hpp"
#include "cpdet/matching.hpp"
#include "cpdet/nn.hpp"
#include "cpdet/ops.hpp"
#include "cpdet/tensor.hpp"

namespace cpdet {

// Alignment scores between feature rows and prompt rows: scaled dot product
// against a linear view of the prompts plus a shared scalar bias. The bias
// starts strongly negative so untrained scores sit near zero probability.
template <typename T>
struct SimilarityHead {
  Linear<T> proj;
  Tensor<T> bias;
  size_t d = 0;

  SimilarityHead() = default;
  SimilarityHead(size_t d_, Rng& rng, double bias_init = -4.0) : d(d_) {
    proj = Linear<T>(d, d, rng);
    bias = Tensor<T>::full({1}, static_cast<T>(bias_init)).set_requires_grad();
  }

  // feats [N,D], prompts [K,D] -> logits [N,K]
  Tensor<T> forward(const Tensor<T>& feats, const Tensor<T>& prompts) const {
    Tensor<T> logits = matmul(feats, transpose2d(proj.forward(prompts)));
    logits = mul_scalar(logits, T(1) / std::sqrt(static_cast<T>(d)));
    return add(logits, bias);
  }

  void params(const ParamVisitor<T>& v) {
    proj.params(v.scoped("proj"));
    v("bias", bias);
  }
};

// Picks the top-q token indices by best prompt similarity (plain dot
// product), ties to the lower index. Works on raw values; the choice itself
// is not differentiated.
template <typename T>
std::vector<size_t> select_query_tokens(const Tensor<T>& tokens, const Tensor<T>& prompts, size_t q) {
  size_t s = tokens.dim(0), k = prompts.dim(0), d = tokens.dim(1);
  if (q > s) throw ContractError("cannot select more queries than tokens");
  if (prompts.dim(1) != d) throw ShapeError("token and prompt widths differ");
  const auto& tv = tokens.data();
  const auto& pv = prompts.data();
  std::vector<double> score(s, -std::numeric_limits<double>::infinity());
  for (size_t i = 0; i < s; ++i)
    for (size_t j = 0; j < k; ++j) {
      double dot = 0;
      for (size_t c = 0; c < d; ++c) dot += static_cast<double>(tv[i * d + c]) * static_cast<double>(pv[j * d + c]);
      score[i] = std::max(score[i], dot);
    }
  std::vector<size_t> idx(s);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return score[a] > score[b]; });
  idx.resize(q);
  return idx;
}

template <typename T>
struct DecoderOut {
  std::vector<size_t> selected_tokens;
  std::vector<Tensor<T>> layer_boxes;   // per decoder layer, [Q,4] cxcywh in (0,1)
  std::vector<Tensor<T>> layer_scores;  // per decoder layer, [Q,K] logits
  Tensor<T> final_feats;                // [Q,D]
  Tensor<T> init_boxes;                 // [Q,4] before any decoder layer
};

// Query decoder: learnable content queries attached to selected token
// proposals, refined by a stack of layers. Each layer runs query self
// attention, deformable cross attention into the image tokens, standard
// cross attention into the prompts, and a feed-forward block, every one with
// a residual and layer norm. Boxes refine residually in logit space through
// a box head shared by proposal initialization and every layer.
template <typename T>
struct DetrDecoder {
  size_t d = 0, heads = 0, queries = 0, n_layers = 0;

  Embedding<T> content;  // [Q,D] learnable content queries
  Mlp<T> box_head;       // D -> D -> 4, zero-init last layer
  Linear<T> pos_proj;    // box position encoding (128) -> D
  SimilarityHead<T> score_head;

  struct Layer {
    MultiHeadAttention<T> self_attn;
    LayerNorm<T> ln1;
    DeformableAttention<T> cross_image;
    LayerNorm<T> ln2;
    MultiHeadAttention<T> cross_prompt;
    LayerNorm<T> ln3;
    Mlp<T> ffn;
    LayerNorm<T> ln4;
  };
  std::vector<Layer> layers;

  DetrDecoder() = default;
  DetrDecoder(size_t d_, size_t heads_, size_t queries_, size_t n_layers_, size_t sample_points, Rng& rng)
      : d(d_), heads(heads_), queries(queries_), n_layers(n_layers_) {
    content = Embedding<T>(queries, d, rng);
    box_head = Mlp<T>({d, d, 4}, rng, /*zero_last=*/true);
    pos_proj = Linear<T>(kSincosWidth, d, rng);
    score_head = SimilarityHead<T>(d, rng);
    for (size_t i = 0; i < n_layers; ++i) {
      Layer l;
      l.self_attn = MultiHeadAttention<T>(d, heads, rng);
      l.ln1 = LayerNorm<T>(d);
      l.cross_image = DeformableAttention<T>(d, heads, sample_points, rng);
      l.ln2 = LayerNorm<T>(d);
      l.cross_prompt = MultiHeadAttention<T>(d, heads, rng);
      l.ln3 = LayerNorm<T>(d);
      l.ffn = Mlp<T>({d, 2 * d, d}, rng);
      l.ln4 = LayerNorm<T>(d);
      layers.push_back(std::move(l));
    }
  }

  Tensor<T> refine(const Tensor<T>& ref, const Tensor<T>& feats) const {
    return sigmoid(add(inverse_sigmoid(ref), box_head.forward(feats)));
  }

  DecoderOut<T> forward(const Tensor<T>& tokens, const MultiScaleFeatures<T>& maps,
                        const Tensor<T>& p_end, const std::vector<Anchor>& anchors,
                        const std::vector<size_t>* forced_selection = nullptr) const {
    if (tokens.dim(0) != anchors.size()) throw ShapeError("one anchor per token required");
    DecoderOut<T> out;
    out.selected_tokens = forced_selection ? *forced_selection
                                           : select_query_tokens(tokens, p_end, queries);
    if (out.selected_tokens.size() != queries) throw ContractError("selection size must equal query count");

    std::vector<Anchor> sel_anchors;
    for (size_t i : out.selected_tokens) sel_anchors.push_back(anchors.at(i));
    Tensor<T> sel_feats = gather_rows(tokens, out.selected_tokens);
    Tensor<T> ref = refine(anchors_tensor<T>(sel_anchors), sel_feats);
    out.init_boxes = ref;

    std::vector<size_t> all_q(queries);
    std::iota(all_q.begin(), all_q.end(), 0);
    Tensor<T> q = content.lookup(all_q);

    for (const Layer& l : layers) {
      Tensor<T> qpos = pos_proj.forward(sincos_box_encode(ref));
      Tensor<T> qk = add(q, qpos);
      q = l.ln1.forward(add(q, l.self_attn.forward(qk, qk, q)));
      Tensor<T> centers = slice_cols(ref, 0, 2);
      q = l.ln2.forward(add(q, l.cross_image.forward(add(q, qpos), centers, maps)));
      q = l.ln3.forward(add(q, l.cross_prompt.forward(add(q, qpos), p_end, p_end)));
      q = l.ln4.forward(add(q, l.ffn.forward(q)));
      ref = refine(ref, q);
      out.layer_boxes.push_back(ref);
      out.layer_scores.push_back(score_head.forward(q, p_end));
    }
    out.final_feats = q;
    return out;
  }

  void params(const ParamVisitor<T>& v) {
    content.params(v.scoped("content"));
    box_head.params(v.scoped("box_head"));
    pos_proj.params(v.scoped("pos_proj"));
    score_head.params(v.scoped("score_head"));
    for (size_t i = 0; i < layers.size(); ++i) {
      auto s = v.scoped("layer" + std::to_string(i));
      layers[i].self_attn.params(s.scoped("self_attn"));
      layers[i].ln1.params(s.scoped("ln1"));
      layers[i].cross_image.params(s.scoped("cross_image"));
      layers[i].ln2.params(s.scoped("ln2"));
      layers[i].cross_prompt.params(s.scoped("cross_prompt"));
      layers[i].ln3.params(s.scoped("ln3"));
      layers[i].ffn.params(s.scoped("ffn"));
      layers[i].ln4.params(s.scoped("ln4"));
    }
  }
};

struct GroundTruth {
  std::vector<BoxCxcywh> boxes;    // normalized
  std::vector<size_t> class_rows;  // prompt row index per box
};

namespace detail {

inline double focal_align_cost(double logit, double alpha = 0.25, double gamma = 2.0) {
  double p = 1.0 / (1.0 + std::exp(-logit));
  p = std::min(std::max(p, 1e-8), 1.0 - 1e-8);
  double pos = alpha * std::pow(1.0 - p, gamma) * (-std::log(p));
  double neg = (1.0 - alpha) * std::pow(p, gamma) * (-std::log(1.0 - p));
  return pos - neg;
}

}  // namespace detail

// Set-prediction matching cost between final-layer outputs and ground truth:
// 2.0 alignment + 5.0 L1 + 2.0 (1 - overlap). Plain numbers, no graph.
template <typename T>
std::vector<std::vector<double>> match_cost_matrix(const DecoderOut<T>& dec, const GroundTruth& gt) {
  size_t q = dec.layer_boxes.back().dim(0);
  const auto& bv = dec.layer_boxes.back().data();
  const auto& sv = dec.layer_scores.back().data();
  size_t k = dec.layer_scores.back().dim(1);
  std::vector<std::vector<double>> cost(gt.boxes.size(), std::vector<double>(q, 0.0));
  for (size_t g = 0; g < gt.boxes.size(); ++g) {
    if (gt.class_rows[g] >= k) throw ContractError("class row out of prompt range");
    for (size_t j = 0; j < q; ++j) {
      double align = detail::focal_align_cost(static_cast<double>(sv[j * k + gt.class_rows[g]]));
      BoxCxcywh pb{static_cast<double>(bv[j * 4 + 0]), static_cast<double>(bv[j * 4 + 1]),
                   static_cast<double>(bv[j * 4 + 2]), static_cast<double>(bv[j * 4 + 3])};
      double l1 = std::abs(pb.cx - gt.boxes[g].cx) + std::abs(pb.cy - gt.boxes[g].cy) +
                  std::abs(pb.w - gt.boxes[g].w) + std::abs(pb.h - gt.boxes[g].h);
      double ov = giou_xyxy(pb.to_xyxy(), gt.boxes[g].to_xyxy());
      cost[g][j] = 2.0 * align + 5.0 * l1 + 2.0 * (-ov);
    }
  }
  return cost;
}

template <typename T>
struct DecoderLoss {
  Tensor<T> total;
  double focal_sum = 0, l1_sum = 0, giou_sum = 0;  // values, summed over layers
  MatchResult match;
};

// Bipartite match from the final layer applied to every layer's outputs.
// Per layer: focal term over all query/prompt pairs plus L1 and overlap
// terms over matched pairs, weighted 1 / 5 / 2 and normalized by the number
// of targets.
template <typename T>
DecoderLoss<T> decoder_loss(const DecoderOut<T>& dec, const GroundTruth& gt,
                            const std::vector<size_t>* forced_match = nullptr) {
  size_t q = dec.layer_boxes.back().dim(0);
  size_t k = dec.layer_scores.back().dim(1);
  size_t g = gt.boxes.size();
  if (gt.class_rows.size() != g) throw ContractError("one class row per box required");

  DecoderLoss<T> out;
  if (forced_match) {
    out.match.gt_to_query = *forced_match;
  } else if (g > 0) {
    out.match = hungarian_match(match_cost_matrix(dec, gt));
  }

  std::vector<T> targets(q * k, T(0));
  std::vector<size_t> matched_q;
  std::vector<T> gt_vals;
  for (size_t i = 0; i < g; ++i) {
    size_t mq = out.match.gt_to_query.at(i);
    targets[mq * k + gt.class_rows[i]] = T(1);
    matched_q.push_back(mq);
    gt_vals.push_back(static_cast<T>(gt.boxes[i].cx));
    gt_vals.push_back(static_cast<T>(gt.boxes[i].cy));
    gt_vals.push_back(static_cast<T>(gt.boxes[i].w));
    gt_vals.push_back(static_cast<T>(gt.boxes[i].h));
  }
  T norm = static_cast<T>(std::max<size_t>(g, 1));

  Tensor<T> total;
  for (size_t l = 0; l < dec.layer_boxes.size(); ++l) {
    Tensor<T> focal = mul_scalar(
        sum_all(focal_bce_with_logits(dec.layer_scores[l], targets, T(0.25), T(2))), T(1) / norm);
    Tensor<T> layer_total = focal;
    out.focal_sum += focal.item();
    if (g > 0) {
      Tensor<T> pred = gather_rows(dec.layer_boxes[l], matched_q);
      Tensor<T> gt_t = Tensor<T>::from_vector({g, 4}, gt_vals);
      Tensor<T> l1 = mul_scalar(sum_all(abs_t(sub(pred, gt_t))), T(1) / norm);
      Tensor<T> ov = mul_scalar(sum_all(sub(Tensor<T>::ones({g, 1}), giou_pairwise(pred, gt_t))),
                                T(1) / norm);
      out.l1_sum += l1.item();
      out.giou_sum += ov.item();
      layer_total = add(layer_total, add(mul_scalar(l1, T(5)), mul_scalar(ov, T(2))));
    }
    total = total.defined() ? add(total, layer_total) : layer_total;
  }
  out.total = total;
  return out;
}

}  // namespace cpdet
