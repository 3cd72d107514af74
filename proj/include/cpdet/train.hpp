#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "cpdet/ap.hpp"
#include "cpdet/config.hpp"
#include "cpdet/model.hpp"
#include "cpdet/scene.hpp"

namespace cpdet {

// ---------------------------------------------------------------------------
// Optimizer: adaptive moments with decoupled weight decay. Moment slots are
// keyed by parameter name so optimizer state survives model reconstruction
// and stays deterministic across runs.
// ---------------------------------------------------------------------------

template <typename T>
struct AdamW {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8, weight_decay = 1e-4;

  struct Slot {
    std::vector<double> m, v;
  };
  std::map<std::string, Slot> slots;
  size_t t = 0;

  // One update over every parameter that is currently a gradient leaf.
  void step(std::vector<std::pair<std::string, Tensor<T>>>& params, double lr) {
    ++t;
    double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (auto& [name, p] : params) {
      if (!p.requires_grad()) continue;
      Slot& s = slots[name];
      std::vector<T>& val = p.data();
      std::vector<T>& g = p.grad();
      if (s.m.size() != val.size()) {
        s.m.assign(val.size(), 0.0);
        s.v.assign(val.size(), 0.0);
      }
      for (size_t i = 0; i < val.size(); ++i) {
        double gi = static_cast<double>(g[i]);
        s.m[i] = beta1 * s.m[i] + (1.0 - beta1) * gi;
        s.v[i] = beta2 * s.v[i] + (1.0 - beta2) * gi * gi;
        double mh = s.m[i] / bc1;
        double vh = s.v[i] / bc2;
        double x = static_cast<double>(val[i]);
        val[i] = static_cast<T>(x - lr * (mh / (std::sqrt(vh) + eps) + weight_decay * x));
      }
    }
  }
};

// Piecewise-constant schedule: the base rate is multiplied by `decay` once
// the step count reaches each milestone fraction of the total budget.
inline double lr_at_step(double base, size_t step, size_t total_steps,
                         const std::vector<double>& milestones, double decay) {
  double lr = base;
  for (double f : milestones)
    if (static_cast<double>(step) >= f * static_cast<double>(total_steps)) lr *= decay;
  return lr;
}

// ---------------------------------------------------------------------------
// Trainer state shared across steps of one regime.
// ---------------------------------------------------------------------------

template <typename T>
struct TrainerState {
  TrainConfig cfg;
  AdamW<T> opt;
  MemoryBank bank;
  Rng rng;
  size_t step = 0;
  bool base_loaded = false;  // set when a pre-trained checkpoint was loaded

  explicit TrainerState(const TrainConfig& c) : cfg(c), rng(c.seed) {
    opt.weight_decay = c.weight_decay;
  }
};

// Mark the parameter groups a regime is allowed to move. Freezing is
// structural: frozen tensors never enter the gradient graph.
template <typename T>
void apply_regime(CpDetr<T>& model, const std::string& regime) {
  if (regime == "pretrain") {
    model.set_trainable([](const std::string&) { return true; });
  } else if (regime == "visual-prompt") {
    model.set_trainable([](const std::string& n) { return n.rfind("visual.", 0) == 0; });
  } else if (regime == "tune-prompt") {
    model.set_trainable([](const std::string&) { return false; });
  } else {
    throw InputError("unknown regime '" + regime + "'");
  }
}

// ---------------------------------------------------------------------------
// Pre-training: full objective over text prompts with sampled negatives.
// ---------------------------------------------------------------------------

struct LossBreakdown {
  double total = 0;    // decoder + dense + weighted presence
  double decoder = 0;  // alignment/L1/overlap total (1, 5, 2)
  double aux = 0;      // dense head total (6, 6, 12)
  double prompt = 0;   // unweighted presence loss
};

namespace detail {

// Unique class ids present in a scene, ascending.
inline std::vector<size_t> present_classes(const SyntheticScene& scene) {
  std::vector<size_t> out = scene.gt_class;
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

inline size_t index_of(const std::vector<size_t>& v, size_t x) {
  for (size_t i = 0; i < v.size(); ++i)
    if (v[i] == x) return i;
  throw ContractError("value not present");
}

}  // namespace detail

template <typename T>
LossBreakdown pretrain_step(CpDetr<T>& model, const BenchmarkSplit& split,
                            const std::vector<size_t>& batch, TrainerState<T>& state) {
  if (batch.empty()) throw InputError("pretrain step needs a non-empty batch");
  auto params = model.named_params();
  for (auto& [name, p] : params) p.zero_grad();

  LossBreakdown out;
  Tensor<T> total;
  std::vector<std::string> batch_phrases;
  for (size_t idx : batch) {
    const SyntheticScene& scene = split.scenes.at(idx);
    std::vector<size_t> pos_classes = detail::present_classes(scene);
    std::vector<std::string> positives;
    for (size_t c : pos_classes) positives.push_back(split.categories.at(c));
    std::vector<std::string> phrases = positives;
    for (const std::string& n :
         sample_negatives(state.bank, split.categories, positives, state.cfg.num_negatives, state.rng))
      phrases.push_back(n);
    if (phrases.empty()) throw InputError("scene yields no prompts at all");
    ConceptPromptSet<T> prompts = model.text_prompts(phrases);

    typename CpDetr<T>::ForwardOut fwd = model.forward(scene.image, prompts);

    GroundTruth gt;
    gt.boxes = scene.gt_boxes;
    for (size_t c : scene.gt_class) gt.class_rows.push_back(detail::index_of(pos_classes, c));

    DecoderLoss<T> dl = decoder_loss(fwd.dec, gt);
    Tensor<T> scene_loss = dl.total;
    out.decoder += static_cast<double>(dl.total.item());

    if (state.cfg.use_aux_loss && model.aux) {
      AtssAssignment assign = atss_assign(fwd.anchors, gt.boxes, model.cfg.atss_topk);
      typename AuxHead<T>::Out head = model.aux->forward(fwd.enc.maps, fwd.enc.p_end, fwd.anchors);
      AuxLoss<T> al = aux_loss<T>(head, assign, gt);
      scene_loss = add(scene_loss, al.total);
      out.aux += static_cast<double>(al.total.item());
    }
    if (state.cfg.prompt_loss_weight != 0.0) {
      std::vector<T> bits(phrases.size(), T(0));
      for (size_t i = 0; i < positives.size(); ++i) bits[i] = T(1);
      Tensor<T> pl = model.prompt_cls.loss(fwd.enc.p_end, bits);
      scene_loss = add(scene_loss, mul_scalar(pl, static_cast<T>(state.cfg.prompt_loss_weight)));
      out.prompt += static_cast<double>(pl.item());
    }
    total = total.defined() ? add(total, scene_loss) : scene_loss;
    for (const std::string& p : positives) batch_phrases.push_back(p);
  }

  double inv = 1.0 / static_cast<double>(batch.size());
  total = mul_scalar(total, static_cast<T>(inv));
  out.total = static_cast<double>(total.item());
  out.decoder *= inv;
  out.aux *= inv;
  out.prompt *= inv;

  total.backward();
  state.opt.step(params,
                 lr_at_step(state.cfg.lr, state.step, state.cfg.steps, state.cfg.milestones,
                            state.cfg.decay));
  for (const std::string& p : batch_phrases) state.bank.insert(p);
  ++state.step;
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation.
// ---------------------------------------------------------------------------

inline std::vector<GroundTruthBox> split_ground_truth(const BenchmarkSplit& split) {
  std::vector<GroundTruthBox> gts;
  for (size_t i = 0; i < split.scenes.size(); ++i)
    for (size_t g = 0; g < split.scenes[i].gt_boxes.size(); ++g)
      gts.push_back({i, split.scenes[i].gt_class[g], split.scenes[i].gt_boxes[g].to_xyxy()});
  return gts;
}

// Generic split evaluation: `prompt_of(i)` provides the prompt set for scene
// i in split-category class space.
template <typename T, typename PromptFn>
ApReport evaluate_split(const CpDetr<T>& model, const BenchmarkSplit& split, PromptFn&& prompt_of,
                        const std::vector<double>& thresholds = coco_iou_thresholds()) {
  NoGradGuard ng;
  std::vector<Detection> dets;
  for (size_t i = 0; i < split.scenes.size(); ++i) {
    std::vector<Detection> d = model.detect(split.scenes[i].image, prompt_of(i), i);
    dets.insert(dets.end(), d.begin(), d.end());
  }
  return evaluate_ap(dets, split_ground_truth(split), split.categories.size(), thresholds);
}

template <typename T>
ApReport evaluate_text_prompts(const CpDetr<T>& model, const BenchmarkSplit& split,
                               const std::vector<double>& thresholds = coco_iou_thresholds()) {
  NoGradGuard ng;
  ConceptPromptSet<T> prompts = model.text_prompts(split.categories);
  return evaluate_split(model, split, [&prompts](size_t) { return prompts; }, thresholds);
}

// Interactive protocol: per scene, every category present is prompted by one
// seeded-random ground-truth box through the visual-prompt encoder, the
// remaining categories by text. Scenes without ground truth fall back to
// text for every category.
template <typename T>
ApReport interactive_eval(const CpDetr<T>& model, const BenchmarkSplit& split, uint64_t seed,
                          const std::vector<double>& thresholds = coco_iou_thresholds(),
                          size_t* text_rows_used = nullptr) {
  NoGradGuard ng;
  size_t text_used = 0;
  std::vector<Detection> dets;
  for (size_t i = 0; i < split.scenes.size(); ++i) {
    const SyntheticScene& scene = split.scenes[i];
    Rng pick(seed + 0x9e3779b97f4a7c15ull * (i + 1));
    std::vector<size_t> pos = detail::present_classes(scene);

    ConceptPromptSet<T> prompts;
    if (pos.empty()) {
      prompts = model.text_prompts(split.categories);
      text_used += split.categories.size();
    } else {
      std::vector<BoxCxcywh> ex_boxes;
      std::vector<size_t> ex_class;
      std::vector<std::string> pos_labels;
      for (size_t j = 0; j < pos.size(); ++j) {
        std::vector<size_t> candidates;
        for (size_t g = 0; g < scene.gt_class.size(); ++g)
          if (scene.gt_class[g] == pos[j]) candidates.push_back(g);
        size_t chosen = candidates[static_cast<size_t>(
            pick.uniform_int(0, static_cast<int64_t>(candidates.size()) - 1))];
        ex_boxes.push_back(scene.gt_boxes[chosen]);
        ex_class.push_back(j);
        pos_labels.push_back(split.categories[pos[j]]);
      }
      ConceptPromptSet<T> vis = model.visual_prompts(ex_boxes, ex_class, pos_labels, scene.image);
      std::vector<Tensor<T>> rows;
      for (size_t c = 0; c < split.categories.size(); ++c) {
        auto it = std::find(pos.begin(), pos.end(), c);
        if (it != pos.end()) {
          rows.push_back(slice_rows(vis.rows, static_cast<size_t>(it - pos.begin()), 1));
        } else {
          rows.push_back(model.text.encode(split.categories[c]));
          ++text_used;
        }
      }
      prompts.rows = concat_rows(rows);
      prompts.labels = split.categories;
      for (size_t c = 0; c < split.categories.size(); ++c) prompts.row_class.push_back(c);
      prompts.source = PromptSource::kVisual;
    }
    std::vector<Detection> d = model.detect(scene.image, prompts, i);
    dets.insert(dets.end(), d.begin(), d.end());
  }
  if (text_rows_used) *text_rows_used = text_used;
  return evaluate_ap(dets, split_ground_truth(split), split.categories.size(), thresholds);
}

// Pure exemplar-driven evaluation: every present class is prompted with the
// scene's own ground-truth boxes (exactly the visual-prompt training setup);
// absent classes get no prompt row, and empty scenes contribute no
// detections.  Detected class ids are mapped back to split class ids.
template <typename T>
ApReport visual_eval(const CpDetr<T>& model, const BenchmarkSplit& split,
                     const std::vector<double>& thresholds = coco_iou_thresholds()) {
  NoGradGuard ng;
  std::vector<Detection> dets;
  for (size_t i = 0; i < split.scenes.size(); ++i) {
    const SyntheticScene& scene = split.scenes[i];
    std::vector<size_t> pos = detail::present_classes(scene);
    if (pos.empty()) continue;
    std::vector<std::string> labels;
    for (size_t c : pos) labels.push_back(split.categories[c]);
    std::vector<size_t> box_class;
    for (size_t c : scene.gt_class) box_class.push_back(detail::index_of(pos, c));
    ConceptPromptSet<T> prompts =
        model.visual_prompts(scene.gt_boxes, box_class, labels, scene.image);
    std::vector<Detection> d = model.detect(scene.image, prompts, i);
    for (Detection& det : d) {
      det.class_id = pos[det.class_id];
      dets.push_back(det);
    }
  }
  return evaluate_ap(dets, split_ground_truth(split), split.categories.size(), thresholds);
}

// ---------------------------------------------------------------------------
// Visual-prompt training: frozen base, exemplar boxes in, prompt vectors out,
// trained to mimic the text prompts while still detecting.
// ---------------------------------------------------------------------------

struct VisualStepOut {
  double total = 0, distill = 0, decoder = 0;
};

template <typename T>
VisualStepOut train_visual_prompt_step(CpDetr<T>& model, const BenchmarkSplit& split,
                                       const std::vector<size_t>& batch, TrainerState<T>& state) {
  if (!state.base_loaded)
    throw StateError("visual-prompt training requires a loaded base checkpoint");
  if (batch.empty()) throw InputError("visual-prompt step needs a non-empty batch");
  auto params = model.named_params();
  for (auto& [name, p] : params) p.zero_grad();

  VisualStepOut out;
  Tensor<T> total;
  size_t used = 0;
  for (size_t idx : batch) {
    const SyntheticScene& scene = split.scenes.at(idx);
    std::vector<size_t> pos = detail::present_classes(scene);
    if (pos.empty()) continue;  // nothing to prompt from
    std::vector<std::string> labels;
    for (size_t c : pos) labels.push_back(split.categories.at(c));
    std::vector<size_t> box_class;
    for (size_t c : scene.gt_class) box_class.push_back(detail::index_of(pos, c));

    MultiScaleFeatures<T> feats = model.backbone_features(scene.image);
    ConceptPromptSet<T> pv = model.visual.forward(scene.gt_boxes, box_class, labels, feats);
    Tensor<T> pt;
    {
      // Frozen text target.
      NoGradGuard ng;
      pt = model.text_prompts(labels).rows;
    }
    Tensor<T> distill = prompt_distill_loss(pv.rows, pt);

    typename CpDetr<T>::ForwardOut fwd =
        model.forward_features(feats, scene.image.dim(1), scene.image.dim(2), pv);
    GroundTruth gt;
    gt.boxes = scene.gt_boxes;
    gt.class_rows = box_class;
    DecoderLoss<T> dl = decoder_loss(fwd.dec, gt);

    Tensor<T> loss = add(distill, dl.total);
    out.distill += static_cast<double>(distill.item());
    out.decoder += static_cast<double>(dl.total.item());
    total = total.defined() ? add(total, loss) : loss;
    ++used;
  }
  if (used == 0) throw InputError("batch has no ground truth to prompt from");
  double inv = 1.0 / static_cast<double>(used);
  total = mul_scalar(total, static_cast<T>(inv));
  out.total = static_cast<double>(total.item());
  out.distill *= inv;
  out.decoder *= inv;

  total.backward();
  state.opt.step(params,
                 lr_at_step(state.cfg.lr, state.step, state.cfg.steps, state.cfg.milestones,
                            state.cfg.decay));
  ++state.step;
  return out;
}

// Mean cosine similarity between visual and text prompt rows over the
// split's categories (one seeded exemplar box per category occurrence).
template <typename T>
double mean_prompt_cosine(const CpDetr<T>& model, const BenchmarkSplit& split) {
  NoGradGuard ng;
  double acc = 0;
  size_t n = 0;
  for (const SyntheticScene& scene : split.scenes) {
    std::vector<size_t> pos = detail::present_classes(scene);
    if (pos.empty()) continue;
    std::vector<std::string> labels;
    for (size_t c : pos) labels.push_back(split.categories.at(c));
    std::vector<size_t> box_class;
    for (size_t c : scene.gt_class) box_class.push_back(detail::index_of(pos, c));
    ConceptPromptSet<T> pv =
        model.visual_prompts(scene.gt_boxes, box_class, labels, scene.image);
    Tensor<T> pt = model.text_prompts(labels).rows;
    size_t d = pt.dim(1);
    for (size_t r = 0; r < pt.dim(0); ++r) {
      double dot = 0, na = 0, nb = 0;
      for (size_t j = 0; j < d; ++j) {
        double a = static_cast<double>(pv.rows.data()[r * d + j]);
        double b = static_cast<double>(pt.data()[r * d + j]);
        dot += a * b;
        na += a * a;
        nb += b * b;
      }
      acc += dot / (std::sqrt(na) * std::sqrt(nb) + 1e-12);
      ++n;
    }
  }
  return n ? acc / static_cast<double>(n) : 0.0;
}

// ---------------------------------------------------------------------------
// Optimized-prompt tuning: the whole detector frozen, learnable prompt rows
// (several per class, max-folded) trained with the set-prediction loss only.
// ---------------------------------------------------------------------------

struct TuneReport {
  double ap_before = 0;  // zero-shot text prompts on the split
  double ap_after = 0;   // tuned prompts
  std::vector<std::string> skipped;   // classes with no ground truth
  std::vector<std::string> warnings;
};

template <typename T>
struct TuneResult {
  TuneReport report;
  ConceptPromptSet<T> prompts;
  std::vector<size_t> class_of_label;  // tuned label -> split class id
};

template <typename T>
ApReport evaluate_prompt_set(const CpDetr<T>& model, const BenchmarkSplit& split,
                             const ConceptPromptSet<T>& prompts,
                             const std::vector<size_t>& class_of_label,
                             const std::vector<double>& thresholds = coco_iou_thresholds()) {
  NoGradGuard ng;
  std::vector<Detection> dets;
  for (size_t i = 0; i < split.scenes.size(); ++i) {
    std::vector<Detection> d = model.detect(split.scenes[i].image, prompts, i);
    for (Detection& det : d) det.class_id = class_of_label.at(det.class_id);
    dets.insert(dets.end(), d.begin(), d.end());
  }
  return evaluate_ap(dets, split_ground_truth(split), split.categories.size(), thresholds);
}

template <typename T>
TuneResult<T> tune_optimized_prompt(CpDetr<T>& model, const BenchmarkSplit& split,
                                    const TrainConfig& cfg) {
  apply_regime(model, "tune-prompt");  // freeze everything

  TuneResult<T> res;
  std::vector<bool> has_gt(split.categories.size(), false);
  for (const SyntheticScene& s : split.scenes)
    for (size_t c : s.gt_class) has_gt.at(c) = true;
  std::vector<std::string> labels;
  std::vector<size_t> label_to_class(split.categories.size(), 0);
  for (size_t c = 0; c < split.categories.size(); ++c) {
    if (has_gt[c]) {
      label_to_class[labels.size()] = c;
      labels.push_back(split.categories[c]);
    } else {
      res.report.skipped.push_back(split.categories[c]);
      res.report.warnings.push_back("class '" + split.categories[c] +
                                    "' has no ground truth in the split; skipped");
    }
  }
  if (labels.empty()) throw InputError("no tunable classes: the split has no ground truth");
  label_to_class.resize(labels.size());
  res.class_of_label = label_to_class;

  res.report.ap_before = evaluate_text_prompts(model, split).mean;

  Rng rng(cfg.seed + 0x517cc1b727220a95ull);
  res.prompts = init_optimized_prompts<T>(labels, model.cfg.d, cfg.super_class_m, rng);
  std::vector<std::pair<std::string, Tensor<T>>> pvec = {{"optimized.rows", res.prompts.rows}};

  AdamW<T> opt;
  opt.weight_decay = cfg.weight_decay;
  std::map<size_t, size_t> class_to_label;
  for (size_t l = 0; l < labels.size(); ++l) class_to_label[label_to_class[l]] = l;

  for (size_t step = 0; step < cfg.steps; ++step) {
    for (auto& [name, p] : pvec) p.zero_grad();
    Tensor<T> total;
    size_t used = 0;
    for (size_t b = 0; b < cfg.batch_size; ++b) {
      size_t idx = (step * cfg.batch_size + b) % split.scenes.size();
      const SyntheticScene& scene = split.scenes[idx];
      typename CpDetr<T>::ForwardOut fwd = model.forward(scene.image, res.prompts);
      GroundTruth gt;
      gt.boxes = scene.gt_boxes;
      for (size_t c : scene.gt_class) gt.class_rows.push_back(class_to_label.at(c));
      DecoderLoss<T> dl = decoder_loss(fwd.dec, gt);
      total = total.defined() ? add(total, dl.total) : dl.total;
      ++used;
    }
    total = mul_scalar(total, static_cast<T>(1.0 / static_cast<double>(used)));
    total.backward();
    opt.step(pvec, lr_at_step(cfg.lr_prompt, step, cfg.steps, cfg.milestones, cfg.decay));
  }

  res.report.ap_after = evaluate_prompt_set(model, split, res.prompts, label_to_class).mean;
  return res;
}

// ---------------------------------------------------------------------------
// Split construction from a flat description, and full training drivers.
// ---------------------------------------------------------------------------

struct SplitDescription {
  size_t image_size = 64;
  size_t scenes = 32;
  uint64_t seed = 1000;
  size_t min_objects = 1;
  size_t max_objects = 3;
  double max_pair_iou = 0.30;
  std::vector<std::string> colors;    // palette subset by name; empty = all
  std::vector<std::string> held_out;  // phrases like "red circle"
  std::vector<std::string> rename;    // "old:new" shape or color word renames

  static SplitDescription from_kv(const KvConfig& kv) {
    static const std::vector<std::string> known = {"image_size",  "scenes", "seed",
                                                   "min_objects", "max_objects",
                                                   "max_pair_iou", "colors", "held_out",
                                                   "rename"};
    for (const auto& [key, value] : kv.values) {
      bool ok = false;
      for (const std::string& k : known)
        if (k == key) ok = true;
      if (!ok) throw InputError("unknown split key '" + key + "'");
    }
    SplitDescription d;
    d.image_size = kv.get_size("image_size", d.image_size);
    d.scenes = kv.get_size("scenes", d.scenes);
    d.seed = static_cast<uint64_t>(kv.get_int("seed", static_cast<int64_t>(d.seed)));
    d.min_objects = kv.get_size("min_objects", d.min_objects);
    d.max_objects = kv.get_size("max_objects", d.max_objects);
    d.max_pair_iou = kv.get_double("max_pair_iou", d.max_pair_iou);
    d.colors = kv.get_list("colors", d.colors);
    auto list = [&kv](const std::string& key) {
      std::vector<std::string> out;
      std::istringstream in(kv.get_str(key, ""));
      std::string tok;
      while (std::getline(in, tok, ',')) {
        tok = KvConfig::trim(tok);
        if (!tok.empty()) out.push_back(tok);
      }
      return out;
    };
    d.held_out = list("held_out");
    d.rename = list("rename");
    return d;
  }

  BenchmarkSplit build() const {
    SceneSpec spec;
    spec.height = spec.width = image_size;
    spec.min_objects = min_objects;
    spec.max_objects = max_objects;
    spec.max_pair_iou = max_pair_iou;
    if (!colors.empty()) {
      std::vector<ColorDef> kept;
      for (const std::string& name : colors) {
        bool found = false;
        for (const ColorDef& c : spec.colors)
          if (c.name == name) {
            kept.push_back(c);
            found = true;
          }
        if (!found) throw InputError("color '" + name + "' is not in the palette");
      }
      spec.colors = kept;
    }
    std::vector<CategoryDef> held;
    for (const std::string& phrase : held_out) {
      bool found = false;
      for (const CategoryDef& c : all_categories(spec))
        if (category_phrase(spec, c) == normalize_phrase(phrase)) {
          held.push_back(c);
          found = true;
        }
      if (!found) throw InputError("held-out phrase '" + phrase + "' names no category");
    }
    BenchmarkSplit split = make_split(spec, scenes, seed, held);
    // Downstream label shifts: rename words so text prompts go out of
    // vocabulary while the pixels stay identical.
    for (const std::string& rule : rename) {
      size_t colon = rule.find(':');
      if (colon == std::string::npos || colon == 0 || colon + 1 >= rule.size())
        throw InputError("rename rule must be old:new, got '" + rule + "'");
      std::string from = rule.substr(0, colon), to = rule.substr(colon + 1);
      auto apply = [&from, &to](std::string& phrase) {
        std::string out;
        for (const std::string& t : tokenize(phrase)) {
          if (!out.empty()) out += ' ';
          out += (t == from) ? to : t;
        }
        phrase = out;
      };
      for (std::string& c : split.categories) apply(c);
      for (SyntheticScene& s : split.scenes)
        for (std::string& p : s.gt_phrases) apply(p);
    }
    return split;
  }
};

// Deterministic batch order: round-robin over the split.
inline std::vector<size_t> batch_indices(size_t step, size_t batch_size, size_t n_scenes) {
  std::vector<size_t> out;
  for (size_t b = 0; b < batch_size; ++b) out.push_back((step * batch_size + b) % n_scenes);
  return out;
}

template <typename T>
std::vector<LossBreakdown> run_pretrain(CpDetr<T>& model, const BenchmarkSplit& split,
                                        TrainerState<T>& state) {
  apply_regime(model, "pretrain");
  std::vector<LossBreakdown> history;
  for (size_t s = 0; s < state.cfg.steps; ++s)
    history.push_back(
        pretrain_step(model, split, batch_indices(s, state.cfg.batch_size, split.scenes.size()), state));
  return history;
}

template <typename T>
std::vector<VisualStepOut> run_visual_prompt_training(CpDetr<T>& model, const BenchmarkSplit& split,
                                                      TrainerState<T>& state) {
  apply_regime(model, "visual-prompt");
  std::vector<VisualStepOut> history;
  for (size_t s = 0; s < state.cfg.steps; ++s)
    history.push_back(train_visual_prompt_step(
        model, split, batch_indices(s, state.cfg.batch_size, split.scenes.size()), state));
  return history;
}

// ---------------------------------------------------------------------------
// Ablation harness: repeat the short pre-training run with one component
// switched off and report losses, detection quality, and structural checks.
// ---------------------------------------------------------------------------

struct AblateResult {
  std::string toggle;
  bool completed = false;
  bool structural_ok = false;
  double first_loss = 0, last_loss = 0;
  double ap = 0;
  std::string note;
};

inline ModelConfig model_config_from(const TrainConfig& cfg) {
  ModelConfig mc;
  mc.d = cfg.d;
  mc.heads = cfg.heads;
  mc.queries = cfg.queries;
  mc.decoder_layers = cfg.decoder_layers;
  mc.sample_points = cfg.sample_points;
  mc.seed = cfg.seed + 1;
  mc.use_psf = cfg.use_psf;
  mc.use_mfg = cfg.use_mfg;
  return mc;
}

inline BenchmarkSplit split_from_train_config(const TrainConfig& cfg) {
  SplitDescription d;
  d.image_size = cfg.image_size;
  d.scenes = cfg.train_scenes;
  d.seed = cfg.data_seed;
  d.min_objects = cfg.min_objects;
  d.max_objects = cfg.max_objects;
  d.colors = cfg.colors;
  d.held_out = cfg.held_out;
  return d.build();
}

template <typename T>
AblateResult ablate_run(const std::string& toggle, TrainConfig cfg) {
  AblateResult res;
  res.toggle = toggle;
  bool drop_aux_module = false;
  size_t tune_m = 0;
  if (toggle == "mfg") {
    cfg.use_mfg = false;
  } else if (toggle == "psf") {
    cfg.use_psf = false;
  } else if (toggle == "aux-head") {
    cfg.use_aux_loss = false;
    drop_aux_module = true;
  } else if (toggle == "prompt-loss") {
    cfg.prompt_loss_weight = 0.0;
  } else if (toggle == "super-class") {
    tune_m = 1;  // single prompt row per class downstream
  } else if (toggle != "none") {
    throw InputError("unknown ablation toggle '" + toggle + "'");
  }
  cfg.validate();

  BenchmarkSplit split = split_from_train_config(cfg);
  CpDetr<T> model(model_config_from(cfg), vocabulary_from_phrases(split.categories));
  if (drop_aux_module) model.drop_aux();

  TrainerState<T> state(cfg);
  bool finite = true;
  std::vector<LossBreakdown> history = run_pretrain(model, split, state);
  for (const LossBreakdown& lb : history)
    if (!std::isfinite(lb.total)) finite = false;
  res.first_loss = history.front().total;
  res.last_loss = history.back().total;

  if (tune_m > 0) {
    TrainConfig tune_cfg = cfg;
    tune_cfg.super_class_m = tune_m;
    tune_cfg.steps = std::max<size_t>(1, cfg.steps / 2);
    TuneResult<T> tuned = tune_optimized_prompt(model, split, tune_cfg);
    res.ap = tuned.report.ap_after;
    res.note = "tuned with one prompt row per class";
    apply_regime(model, "pretrain");
  } else {
    res.ap = evaluate_text_prompts(model, split).mean;
  }

  // Structural checks: finite losses throughout, and inference producing at
  // most one detection per query with centers, sizes, and scores in (0, 1).
  bool boxes_ok = true;
  {
    ConceptPromptSet<T> prompts = model.text_prompts(split.categories);
    std::vector<Detection> dets = model.detect(split.scenes.front().image, prompts);
    if (dets.size() > model.cfg.queries) boxes_ok = false;
    for (const Detection& d : dets) {
      double cx = (d.box.x0 + d.box.x1) * 0.5, cy = (d.box.y0 + d.box.y1) * 0.5;
      double w = d.box.x1 - d.box.x0, h = d.box.y1 - d.box.y0;
      if (!(cx > 0 && cx < 1 && cy > 0 && cy < 1 && w > 0 && w < 1 && h > 0 && h < 1 &&
            d.score >= 0.0 && d.score <= 1.0))
        boxes_ok = false;
    }
  }
  res.structural_ok = finite && boxes_ok;
  res.completed = true;
  return res;
}

}  // namespace cpdet
