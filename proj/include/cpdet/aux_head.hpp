#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "cpdet/anchors.hpp"
#include "cpdet/boxes.hpp"
#include "cpdet/conv.hpp"
#include "cpdet/decoder.hpp"
#include "cpdet/encoders.hpp"
#include "cpdet/errors.hpp"
#include "cpdet/nn.hpp"
#include "cpdet/ops.hpp"

namespace cpdet {

struct AtssAssignment {
  std::vector<long> anchor_gt;     // per anchor: ground-truth index or -1
  std::vector<double> centerness;  // per anchor, meaningful for positives
  size_t num_pos = 0;
};

// Adaptive assignment: per target, the top anchors of every scale by center
// distance form a candidate set; the positivity threshold is that set's mean
// IoU plus its standard deviation. Positives must also have their center
// inside the target box. An anchor claimed by several targets keeps the one
// with the highest IoU, ties to the lower target index.
inline AtssAssignment atss_assign(const std::vector<Anchor>& anchors,
                                  const std::vector<BoxCxcywh>& gt, size_t topk = 9) {
  size_t a_n = anchors.size(), g_n = gt.size();
  AtssAssignment out;
  out.anchor_gt.assign(a_n, -1);
  out.centerness.assign(a_n, 0.0);
  std::vector<double> best_iou(a_n, -1.0);

  std::vector<std::vector<size_t>> by_scale(4);
  for (size_t i = 0; i < a_n; ++i) by_scale[anchors[i].scale].push_back(i);

  for (size_t g = 0; g < g_n; ++g) {
    std::vector<size_t> candidates;
    for (const auto& level : by_scale) {
      std::vector<std::pair<double, size_t>> dist;
      for (size_t i : level) {
        double dx = anchors[i].cx - gt[g].cx, dy = anchors[i].cy - gt[g].cy;
        dist.push_back({std::sqrt(dx * dx + dy * dy), i});
      }
      std::stable_sort(dist.begin(), dist.end());
      for (size_t j = 0; j < std::min(topk, dist.size()); ++j) candidates.push_back(dist[j].second);
    }
    if (candidates.empty()) continue;

    std::vector<double> ious;
    for (size_t i : candidates) ious.push_back(iou_xyxy(anchors[i].box().to_xyxy(), gt[g].to_xyxy()));
    double mean = std::accumulate(ious.begin(), ious.end(), 0.0) / ious.size();
    double var = 0;
    for (double v : ious) var += (v - mean) * (v - mean);
    double thr = mean + std::sqrt(var / ious.size());

    for (size_t c = 0; c < candidates.size(); ++c) {
      size_t i = candidates[c];
      bool inside = std::abs(anchors[i].cx - gt[g].cx) <= gt[g].w / 2 &&
                    std::abs(anchors[i].cy - gt[g].cy) <= gt[g].h / 2;
      if (ious[c] < thr || !inside) continue;
      if (ious[c] > best_iou[i]) {  // strict: earlier target wins ties
        best_iou[i] = ious[c];
        out.anchor_gt[i] = static_cast<long>(g);
      }
    }
  }

  for (size_t i = 0; i < a_n; ++i) {
    if (out.anchor_gt[i] < 0) continue;
    ++out.num_pos;
    const BoxCxcywh& b = gt[static_cast<size_t>(out.anchor_gt[i])];
    double l = anchors[i].cx - (b.cx - b.w / 2), r = (b.cx + b.w / 2) - anchors[i].cx;
    double t = anchors[i].cy - (b.cy - b.h / 2), d = (b.cy + b.h / 2) - anchors[i].cy;
    double mx = std::max(l, r), my = std::max(t, d);
    out.centerness[i] = (mx <= 0 || my <= 0)
                            ? 0.0
                            : std::sqrt((std::min(l, r) / mx) * (std::min(t, d) / my));
  }
  return out;
}

// Dense per-token head used only during training: a shared conv trunk, a
// contrastive score against the prompts, and distance-to-border box offsets
// with a centerness channel. Removable at inference without touching the
// detection path.
template <typename T>
struct AuxHead {
  size_t d = 0;
  Tensor<T> trunk_w, trunk_b;
  Tensor<T> box_w, box_b;
  Tensor<T> ctr_w, ctr_b;
  SimilarityHead<T> score_head;

  AuxHead() = default;
  AuxHead(size_t d_, Rng& rng) : d(d_) {
    trunk_w = xavier_uniform<T>({d, d, 3, 3}, d * 9, d * 9, rng);
    trunk_b = Tensor<T>::zeros({d}).set_requires_grad();
    box_w = xavier_uniform<T>({4, d, 3, 3}, d * 9, 4 * 9, rng);
    box_b = Tensor<T>::zeros({4}).set_requires_grad();
    ctr_w = xavier_uniform<T>({1, d, 3, 3}, d * 9, 9, rng);
    ctr_b = Tensor<T>::zeros({1}).set_requires_grad();
    score_head = SimilarityHead<T>(d, rng);
  }

  struct Out {
    Tensor<T> scores;      // [A,K] logits
    Tensor<T> boxes;       // [A,4] decoded cxcywh
    Tensor<T> centerness;  // [A,1] logits
  };

  Out forward(const MultiScaleFeatures<T>& maps, const Tensor<T>& p_end,
              const std::vector<Anchor>& anchors) const {
    std::vector<Tensor<T>> feat_rows, box_rows, ctr_rows;
    for (const auto& m : maps.maps) {
      size_t h = m.dim(1), w = m.dim(2);
      Tensor<T> t = relu(conv2d(m, trunk_w, trunk_b, 1, 1));
      feat_rows.push_back(transpose2d(reshape(t, {d, h * w})));
      box_rows.push_back(transpose2d(reshape(conv2d(t, box_w, box_b, 1, 1), {4, h * w})));
      ctr_rows.push_back(transpose2d(reshape(conv2d(t, ctr_w, ctr_b, 1, 1), {1, h * w})));
    }
    Tensor<T> feats = concat_rows(feat_rows);
    if (feats.dim(0) != anchors.size()) throw ShapeError("one anchor per token required");

    // Border distances in (0,1); box = (cx-l, cy-t) .. (cx+r, cy+d) rebuilt
    // as center/size, always positive.
    Tensor<T> dist = sigmoid(concat_rows(box_rows));
    Tensor<T> dl = slice_cols(dist, 0, 1), dt = slice_cols(dist, 1, 1);
    Tensor<T> dr = slice_cols(dist, 2, 1), dd = slice_cols(dist, 3, 1);
    std::vector<T> cx_v, cy_v;
    for (const auto& a : anchors) {
      cx_v.push_back(static_cast<T>(a.cx));
      cy_v.push_back(static_cast<T>(a.cy));
    }
    Tensor<T> cx = Tensor<T>::from_vector({anchors.size(), 1}, std::move(cx_v));
    Tensor<T> cy = Tensor<T>::from_vector({anchors.size(), 1}, std::move(cy_v));
    Tensor<T> bx = add(cx, mul_scalar(sub(dr, dl), T(0.5)));
    Tensor<T> by = add(cy, mul_scalar(sub(dd, dt), T(0.5)));

    Out out;
    out.scores = score_head.forward(feats, p_end);
    out.boxes = concat_cols(std::vector<Tensor<T>>{bx, by, add(dl, dr), add(dt, dd)});
    out.centerness = concat_rows(ctr_rows);
    return out;
  }

  void params(const ParamVisitor<T>& v) {
    v("trunk_w", trunk_w);
    v("trunk_b", trunk_b);
    v("box_w", box_w);
    v("box_b", box_b);
    v("ctr_w", ctr_w);
    v("ctr_b", ctr_b);
    score_head.params(v.scoped("score_head"));
  }
};

template <typename T>
struct AuxLoss {
  Tensor<T> total;
  double focal_part = 0, centerness_part = 0, giou_part = 0;  // unweighted values
  size_t num_pos = 0;
};

// Dense loss: 6 focal + 6 centerness + 12 (1 - overlap); the box terms run
// over positive anchors only, everything normalized by the positive count.
template <typename T>
AuxLoss<T> aux_loss(const typename AuxHead<T>::Out& head, const AtssAssignment& assign,
                    const GroundTruth& gt) {
  size_t a_n = head.scores.dim(0), k = head.scores.dim(1);
  if (assign.anchor_gt.size() != a_n) throw ContractError("assignment does not cover the anchors");

  std::vector<T> targets(a_n * k, T(0));
  std::vector<size_t> pos_idx;
  std::vector<T> ctr_targets, gt_vals;
  for (size_t i = 0; i < a_n; ++i) {
    if (assign.anchor_gt[i] < 0) continue;
    size_t g = static_cast<size_t>(assign.anchor_gt[i]);
    targets[i * k + gt.class_rows.at(g)] = T(1);
    pos_idx.push_back(i);
    ctr_targets.push_back(static_cast<T>(assign.centerness[i]));
    gt_vals.push_back(static_cast<T>(gt.boxes[g].cx));
    gt_vals.push_back(static_cast<T>(gt.boxes[g].cy));
    gt_vals.push_back(static_cast<T>(gt.boxes[g].w));
    gt_vals.push_back(static_cast<T>(gt.boxes[g].h));
  }
  T norm = static_cast<T>(std::max<size_t>(pos_idx.size(), 1));

  AuxLoss<T> out;
  out.num_pos = pos_idx.size();
  Tensor<T> focal = mul_scalar(
      sum_all(focal_bce_with_logits(head.scores, targets, T(0.25), T(2))), T(1) / norm);
  out.focal_part = focal.item();
  Tensor<T> total = mul_scalar(focal, T(6));
  if (!pos_idx.empty()) {
    Tensor<T> ctr = mul_scalar(
        sum_all(bce_with_logits(gather_rows(head.centerness, pos_idx), ctr_targets)), T(1) / norm);
    Tensor<T> gt_t = Tensor<T>::from_vector({pos_idx.size(), 4}, gt_vals);
    Tensor<T> pred = gather_rows(head.boxes, pos_idx);
    Tensor<T> ov = mul_scalar(
        sum_all(sub(Tensor<T>::ones({pos_idx.size(), 1}), giou_pairwise(pred, gt_t))), T(1) / norm);
    out.centerness_part = ctr.item();
    out.giou_part = ov.item();
    total = add(total, add(mul_scalar(ctr, T(6)), mul_scalar(ov, T(12))));
  }
  out.total = total;
  return out;
}

// Multi-label prompt classifier: a tiny MLP over each prompt row against the
// per-class presence bits, mean binary cross-entropy.
template <typename T>
struct PromptClassifier {
  Mlp<T> mlp;

  PromptClassifier() = default;
  PromptClassifier(size_t d, Rng& rng) : mlp(std::vector<size_t>{d, d, 1}, rng) {}

  Tensor<T> loss(const Tensor<T>& p_end, const std::vector<T>& present) const {
    if (present.size() != p_end.dim(0)) throw ContractError("one presence bit per prompt row required");
    Tensor<T> logits = mlp.forward(p_end);
    return mul_scalar(sum_all(bce_with_logits(logits, present)), T(1) / static_cast<T>(present.size()));
  }

  void params(const ParamVisitor<T>& v) { mlp.params(v.scoped("mlp")); }
};

}  // namespace cpdet
