#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "cpdet/boxes.hpp"
#include "cpdet/errors.hpp"

namespace cpdet {

// ---------------------------------------------------------------------------
// Detection-quality evaluation: greedy IoU matching per threshold, all-point
// interpolated average precision per class, averaged over the standard
// threshold grid 0.50:0.05:0.95.
// ---------------------------------------------------------------------------

struct Detection {
  size_t image = 0;
  size_t class_id = 0;
  double score = 0;
  BoxXyxy box;  // any consistent coordinate frame; IoU is scale invariant
};

struct GroundTruthBox {
  size_t image = 0;
  size_t class_id = 0;
  BoxXyxy box;
};

inline std::vector<double> coco_iou_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * static_cast<double>(i));
  return t;
}

struct ApReport {
  std::vector<double> per_class;  // AP averaged over thresholds; 0 where not evaluated
  std::vector<bool> evaluated;    // class had at least one ground-truth box
  double mean = 0.0;              // mean over evaluated classes (0 if none)
};

namespace detail {

// All-point interpolated AP from a precision/recall sequence listed in
// processing order: integral over recall of the running-maximum-from-the-
// right precision envelope.
inline double interpolated_ap(const std::vector<double>& precision,
                              const std::vector<double>& recall) {
  size_t n = precision.size();
  if (n == 0) return 0.0;
  std::vector<double> envelope(n);
  double run = 0.0;
  for (size_t i = n; i-- > 0;) {
    run = std::max(run, precision[i]);
    envelope[i] = run;
  }
  double ap = 0.0;
  double prev_recall = 0.0;
  for (size_t i = 0; i < n; ++i) {
    if (recall[i] > prev_recall) ap += (recall[i] - prev_recall) * envelope[i];
    prev_recall = recall[i];
  }
  return ap;
}

}  // namespace detail

// Evaluate predictions against ground truth. Per class and IoU threshold,
// detections are processed in descending score order (ties keep insertion
// order); each detection greedily claims the unmatched same-image box with
// the highest IoU at or above the threshold (IoU ties pick the earliest
// box). Classes with no ground truth are excluded from the mean.
inline ApReport evaluate_ap(const std::vector<Detection>& preds,
                            const std::vector<GroundTruthBox>& gts, size_t num_classes,
                            const std::vector<double>& thresholds = coco_iou_thresholds()) {
  if (thresholds.empty()) throw InputError("evaluate_ap needs at least one IoU threshold");
  for (const Detection& d : preds)
    if (d.class_id >= num_classes)
      throw ContractError("prediction class " + std::to_string(d.class_id) + " out of range");
  for (const GroundTruthBox& g : gts)
    if (g.class_id >= num_classes)
      throw ContractError("ground-truth class " + std::to_string(g.class_id) + " out of range");

  // Score-sorted prediction order, stable so tied scores keep insertion order.
  std::vector<size_t> order(preds.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&preds](size_t a, size_t b) { return preds[a].score > preds[b].score; });

  ApReport report;
  report.per_class.assign(num_classes, 0.0);
  report.evaluated.assign(num_classes, false);

  for (size_t cls = 0; cls < num_classes; ++cls) {
    std::vector<size_t> gt_idx;
    for (size_t g = 0; g < gts.size(); ++g)
      if (gts[g].class_id == cls) gt_idx.push_back(g);
    if (gt_idx.empty()) continue;
    report.evaluated[cls] = true;

    std::vector<size_t> det_idx;
    for (size_t i : order)
      if (preds[i].class_id == cls) det_idx.push_back(i);

    double total = static_cast<double>(gt_idx.size());
    double ap_sum = 0.0;
    for (double thr : thresholds) {
      std::vector<bool> taken(gt_idx.size(), false);
      std::vector<double> precision, recall;
      precision.reserve(det_idx.size());
      recall.reserve(det_idx.size());
      double tp = 0, fp = 0;
      for (size_t i : det_idx) {
        long best = -1;
        double best_iou = 0.0;
        for (size_t j = 0; j < gt_idx.size(); ++j) {
          if (taken[j] || gts[gt_idx[j]].image != preds[i].image) continue;
          double v = iou_xyxy(preds[i].box, gts[gt_idx[j]].box);
          if (v >= thr && v > best_iou) {
            best_iou = v;
            best = static_cast<long>(j);
          }
        }
        if (best >= 0) {
          taken[static_cast<size_t>(best)] = true;
          tp += 1;
        } else {
          fp += 1;
        }
        precision.push_back(tp / (tp + fp));
        recall.push_back(tp / total);
      }
      ap_sum += detail::interpolated_ap(precision, recall);
    }
    report.per_class[cls] = ap_sum / static_cast<double>(thresholds.size());
  }

  double sum = 0.0;
  size_t n_eval = 0;
  for (size_t cls = 0; cls < num_classes; ++cls)
    if (report.evaluated[cls]) {
      sum += report.per_class[cls];
      ++n_eval;
    }
  report.mean = n_eval ? sum / static_cast<double>(n_eval) : 0.0;
  return report;
}

}  // namespace cpdet
