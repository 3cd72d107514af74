#pragma once

// Finite-difference verification battery.
//
// Every differentiable primitive gets one named case that compares its
// reverse-mode gradients against 64-bit central differences on seeded random
// inputs kept away from the op's kinks.  A final case differentiates the full
// pretraining objective (query decoder + dense auxiliary head + prompt
// presence classifier) end to end through the whole model on a rendered
// two-object scene, with the discrete choices (query selection, assignment)
// baked constant so the probe sees a fixed graph.
//
// The same battery backs both the command-line `grad-check` command and the
// acceptance suite.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "cpdet/boxes.hpp"
#include "cpdet/conv.hpp"
#include "cpdet/grad_check.hpp"
#include "cpdet/model.hpp"
#include "cpdet/ops.hpp"
#include "cpdet/rng.hpp"
#include "cpdet/scene.hpp"
#include "cpdet/tensor.hpp"

namespace cpdet {

struct GradCheckCase {
  std::string name;
  double max_rel_err = 0.0;
  double tolerance = 1e-5;
  bool pass = false;
};

namespace detail {

inline TensorD gc_uniform(Rng& rng, Shape shape, double lo, double hi) {
  TensorD t = TensorD::zeros(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// Random values bounded away from zero: magnitude in [lo, hi], random sign.
inline TensorD gc_signed(Rng& rng, Shape shape, double lo, double hi) {
  TensorD t = TensorD::zeros(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi) * (rng.uniform() < 0.5 ? -1.0 : 1.0);
  return t;
}

// Reduce an arbitrary tensor to a scalar with non-uniform sensitivities, so
// every output element influences the probe differently.
inline TensorD gc_weighted_sum(const TensorD& y, Rng& rng) {
  TensorD w = TensorD::zeros(y.shape());
  for (auto& v : w.data()) v = rng.uniform(0.5, 1.5);
  return sum_all(mul(y, w));
}

inline GradCheckCase gc_run(std::string name, std::vector<TensorD> leaves,
                            std::function<TensorD(const std::vector<TensorD>&)> f,
                            double h = 1e-4, double tol = 1e-5) {
  GradCheckCase c;
  c.name = std::move(name);
  c.tolerance = tol;
  c.max_rel_err = grad_check(f, leaves, h);
  c.pass = c.max_rel_err <= tol;
  return c;
}

}  // namespace detail

// One case per differentiable primitive.
inline std::vector<GradCheckCase> gradcheck_op_battery() {
  using detail::gc_run;
  using detail::gc_signed;
  using detail::gc_uniform;
  using detail::gc_weighted_sum;

  std::vector<GradCheckCase> out;
  Rng rng(8231);

  auto binary = [&](const std::string& name, auto op, TensorD a, TensorD b) {
    Rng wr(rng.uniform_int(0, 1 << 30));
    out.push_back(gc_run(name, {a, b}, [=, &wr](const std::vector<TensorD>&) mutable {
      Rng local = wr;
      return gc_weighted_sum(op(a, b), local);
    }));
  };
  auto unary = [&](const std::string& name, auto op, TensorD a, double h = 1e-4) {
    Rng wr(rng.uniform_int(0, 1 << 30));
    out.push_back(gc_run(
        name, {a},
        [=, &wr](const std::vector<TensorD>&) mutable {
          Rng local = wr;
          return gc_weighted_sum(op(a), local);
        },
        h));
  };

  // ----- elementwise binary -------------------------------------------------
  binary("add", [](const TensorD& a, const TensorD& b) { return add(a, b); },
         gc_uniform(rng, {3, 4}, -1, 1), gc_uniform(rng, {3, 4}, -1, 1));
  binary("sub", [](const TensorD& a, const TensorD& b) { return sub(a, b); },
         gc_uniform(rng, {3, 4}, -1, 1), gc_uniform(rng, {3, 4}, -1, 1));
  binary("mul", [](const TensorD& a, const TensorD& b) { return mul(a, b); },
         gc_uniform(rng, {3, 4}, -1, 1), gc_uniform(rng, {3, 4}, -1, 1));
  binary("div", [](const TensorD& a, const TensorD& b) { return div(a, b); },
         gc_uniform(rng, {3, 4}, -1, 1), gc_signed(rng, {3, 4}, 0.4, 1.5));
  {
    // keep |a - b| away from the tie kink
    TensorD a = gc_uniform(rng, {3, 4}, -1, 1);
    TensorD b = gc_uniform(rng, {3, 4}, -1, 1);
    for (size_t i = 0; i < a.numel(); ++i)
      if (std::abs(a.data()[i] - b.data()[i]) < 0.1) b.data()[i] += 0.3;
    binary("minimum", [](const TensorD& x, const TensorD& y) { return minimum(x, y); }, a, b);
    binary("maximum", [](const TensorD& x, const TensorD& y) { return maximum(x, y); }, a, b);
  }

  // ----- elementwise unary --------------------------------------------------
  unary("neg", [](const TensorD& a) { return neg(a); }, gc_uniform(rng, {2, 5}, -1, 1));
  unary("relu", [](const TensorD& a) { return relu(a); }, gc_signed(rng, {2, 5}, 0.2, 1.0));
  unary("abs", [](const TensorD& a) { return abs_t(a); }, gc_signed(rng, {2, 5}, 0.2, 1.0));
  unary("sigmoid", [](const TensorD& a) { return sigmoid(a); }, gc_uniform(rng, {2, 5}, -2, 2));
  unary("exp", [](const TensorD& a) { return exp_t(a); }, gc_uniform(rng, {2, 5}, -1, 1));
  unary("log", [](const TensorD& a) { return log_t(a); }, gc_uniform(rng, {2, 5}, 0.3, 2.0));
  unary("sqrt", [](const TensorD& a) { return sqrt_t(a); }, gc_uniform(rng, {2, 5}, 0.3, 2.0));
  unary("softplus", [](const TensorD& a) { return softplus(a); }, gc_uniform(rng, {2, 5}, -2, 2));
  unary("sin", [](const TensorD& a) { return sin_t(a); }, gc_uniform(rng, {2, 5}, -2, 2));
  unary("cos", [](const TensorD& a) { return cos_t(a); }, gc_uniform(rng, {2, 5}, -2, 2));
  unary("add_scalar", [](const TensorD& a) { return add_scalar(a, 0.7); },
        gc_uniform(rng, {2, 5}, -1, 1));
  unary("mul_scalar", [](const TensorD& a) { return mul_scalar(a, -1.3); },
        gc_uniform(rng, {2, 5}, -1, 1));
  {
    TensorD a = gc_uniform(rng, {3, 5}, -1, 1);
    for (auto& v : a.data()) {
      if (std::abs(v - 0.5) < 0.06) v = 0.3;
      if (std::abs(v + 0.5) < 0.06) v = -0.3;
    }
    unary("clamp", [](const TensorD& x) { return clamp(x, -0.5, 0.5); }, a);
  }

  // ----- linear algebra and shape -------------------------------------------
  binary("matmul", [](const TensorD& a, const TensorD& b) { return matmul(a, b); },
         gc_uniform(rng, {3, 4}, -1, 1), gc_uniform(rng, {4, 2}, -1, 1));
  unary("transpose2d", [](const TensorD& a) { return transpose2d(a); },
        gc_uniform(rng, {3, 4}, -1, 1));
  unary("softmax_lastdim", [](const TensorD& a) { return softmax_lastdim(a); },
        gc_uniform(rng, {2, 5}, -2, 2));
  unary("layer_norm_lastdim", [](const TensorD& a) { return layer_norm_lastdim(a); },
        gc_uniform(rng, {2, 6}, -1, 1));
  {
    TensorD a = gc_uniform(rng, {3, 4}, -1, 1);
    out.push_back(gc_run("sum_all", {a}, [=](const std::vector<TensorD>&) { return sum_all(a); }));
    TensorD b = gc_uniform(rng, {3, 4}, -1, 1);
    out.push_back(
        gc_run("mean_all", {b}, [=](const std::vector<TensorD>&) { return mean_all(b); }));
  }
  unary("sum_rows", [](const TensorD& a) { return sum_rows(a); }, gc_uniform(rng, {3, 4}, -1, 1));
  unary("mean_rows", [](const TensorD& a) { return mean_rows(a); }, gc_uniform(rng, {3, 4}, -1, 1));
  {
    // one clear winner per row keeps the max kink out of reach
    TensorD a = gc_uniform(rng, {3, 5}, 0, 1);
    for (size_t i = 0; i < 3; ++i) a.data()[i * 5 + (i * 2) % 5] += 2.0;
    unary("reduce_max_lastdim", [](const TensorD& x) { return reduce_max_lastdim(x); }, a);
  }
  unary("reshape", [](const TensorD& a) { return reshape(a, {2, 6}); },
        gc_uniform(rng, {3, 4}, -1, 1));
  binary("concat_rows",
         [](const TensorD& a, const TensorD& b) {
           return concat_rows(std::vector<TensorD>{a, b});
         },
         gc_uniform(rng, {2, 3}, -1, 1), gc_uniform(rng, {1, 3}, -1, 1));
  binary("concat_cols",
         [](const TensorD& a, const TensorD& b) {
           return concat_cols(std::vector<TensorD>{a, b});
         },
         gc_uniform(rng, {2, 2}, -1, 1), gc_uniform(rng, {2, 3}, -1, 1));
  unary("slice_rows", [](const TensorD& a) { return slice_rows(a, 1, 2); },
        gc_uniform(rng, {4, 3}, -1, 1));
  unary("slice_cols", [](const TensorD& a) { return slice_cols(a, 1, 2); },
        gc_uniform(rng, {3, 4}, -1, 1));
  unary("gather_rows",
        [](const TensorD& a) { return gather_rows(a, std::vector<size_t>{2, 0, 1, 2}); },
        gc_uniform(rng, {3, 4}, -1, 1));
  unary("gather_cols",
        [](const TensorD& a) { return gather_cols(a, std::vector<size_t>{1, 3, 1}); },
        gc_uniform(rng, {3, 4}, -1, 1));
  binary("scale_rows", [](const TensorD& a, const TensorD& s) { return scale_rows(a, s); },
         gc_uniform(rng, {3, 4}, -1, 1), gc_signed(rng, {3}, 0.4, 1.5));

  // ----- fused losses and encodings ------------------------------------------
  {
    TensorD logits = gc_uniform(rng, {6}, -2, 2);
    std::vector<double> targets = {1, 0, 1, 1, 0, 0};
    out.push_back(gc_run("bce_with_logits", {logits}, [=](const std::vector<TensorD>&) {
      return sum_all(bce_with_logits(logits, targets));
    }));
    TensorD fl = gc_uniform(rng, {6}, -2, 2);
    out.push_back(gc_run("focal_bce_with_logits", {fl}, [=](const std::vector<TensorD>&) {
      return sum_all(focal_bce_with_logits(fl, targets, 0.25, 2.0));
    }));
  }
  unary("sincos_box_encode", [](const TensorD& a) { return sincos_box_encode(a); },
        gc_uniform(rng, {2, 4}, 0.15, 0.85));
  unary("inverse_sigmoid", [](const TensorD& a) { return inverse_sigmoid(a); },
        gc_uniform(rng, {2, 3}, 0.1, 0.9));
  {
    TensorD a = gc_uniform(rng, {3, 4}, -1, 1);
    // well-formed boxes: centered, strictly positive sides
    for (size_t i = 0; i < 3; ++i) {
      a.data()[i * 4 + 0] = rng.uniform(0.3, 0.7);
      a.data()[i * 4 + 1] = rng.uniform(0.3, 0.7);
      a.data()[i * 4 + 2] = rng.uniform(0.15, 0.3);
      a.data()[i * 4 + 3] = rng.uniform(0.15, 0.3);
    }
    unary("boxes_cxcywh_to_xyxy", [](const TensorD& x) { return boxes_cxcywh_to_xyxy(x); }, a);
    TensorD b = TensorD::zeros({3, 4});
    for (size_t i = 0; i < 3; ++i) {
      b.data()[i * 4 + 0] = rng.uniform(0.3, 0.7);
      b.data()[i * 4 + 1] = rng.uniform(0.3, 0.7);
      b.data()[i * 4 + 2] = rng.uniform(0.15, 0.3);
      b.data()[i * 4 + 3] = rng.uniform(0.15, 0.3);
    }
    binary("giou_pairwise",
           [](const TensorD& x, const TensorD& y) { return giou_pairwise(x, y); }, a, b);
  }

  // ----- spatial ops ----------------------------------------------------------
  {
    TensorD x = gc_uniform(rng, {2, 5, 5}, -1, 1);
    TensorD w = gc_uniform(rng, {3, 2, 3, 3}, -0.5, 0.5);
    TensorD b = gc_uniform(rng, {3}, -0.5, 0.5);
    Rng wr1(rng.uniform_int(0, 1 << 30));
    out.push_back(gc_run("conv2d_stride1", {x, w, b}, [=](const std::vector<TensorD>&) {
      Rng local = wr1;
      return detail::gc_weighted_sum(conv2d(x, w, b, 1, 1), local);
    }));
    Rng wr2(rng.uniform_int(0, 1 << 30));
    out.push_back(gc_run("conv2d_stride2", {x, w, b}, [=](const std::vector<TensorD>&) {
      Rng local = wr2;
      return detail::gc_weighted_sum(conv2d(x, w, b, 2, 1), local);
    }));
  }
  {
    TensorD x = gc_uniform(rng, {2, 3, 3}, -1, 1);
    Rng wr(rng.uniform_int(0, 1 << 30));
    out.push_back(gc_run("upsample_nearest2x", {x}, [=](const std::vector<TensorD>&) {
      Rng local = wr;
      return detail::gc_weighted_sum(upsample_nearest2x(x), local);
    }));
  }
  {
    TensorD feat = gc_uniform(rng, {2, 5, 5}, -1, 1);
    // off-grid points: the sampler is kinked exactly on integer coordinates
    TensorD pts = TensorD::from_vector({4, 2}, {1.3, 2.6, 0.4, 3.7, 2.5, 1.45, 3.65, 0.35});
    Rng wr(rng.uniform_int(0, 1 << 30));
    out.push_back(gc_run("bilinear_sample", {feat, pts}, [=](const std::vector<TensorD>&) {
      Rng local = wr;
      return detail::gc_weighted_sum(bilinear_sample(feat, pts), local);
    }));
  }
  return out;
}

// Differentiate the complete pretraining objective through the full model on
// a rendered two-object scene.  Discrete structure (query selection and the
// assignment) is captured from one forward pass and held fixed; the box head
// bias is nudged off its zero initialization so reference points sit away
// from the bilinear sampling grid.
inline GradCheckCase gradcheck_full_objective() {
  SceneSpec spec;
  spec.colors = {{"red", 0.85, 0.15, 0.12}, {"green", 0.13, 0.72, 0.20}};
  spec.categories = {{0, ShapeKind::kCircle}, {1, ShapeKind::kSquare}};
  spec.min_objects = 2;
  spec.max_objects = 2;
  SyntheticScene scene = generate_scene(11, spec);

  std::vector<std::string> all_phrases = {"red circle", "green square", "red square",
                                          "green circle"};
  ModelConfig mc;
  mc.d = 8;
  mc.heads = 2;
  mc.queries = 6;
  mc.decoder_layers = 1;
  mc.sample_points = 2;
  mc.seed = 3;
  CpDetr<double> model(mc, vocabulary_from_phrases(all_phrases));

  Rng rng(55);
  for (auto& v : model.decoder.box_head.layers.back().b.data()) v = rng.uniform(0.2, 0.4);

  // assemble the prompt list: present classes first, the rest as negatives
  std::vector<size_t> present;
  for (size_t c : scene.gt_class) {
    bool seen = false;
    for (size_t p : present) seen = seen || p == c;
    if (!seen) present.push_back(c);
  }
  std::sort(present.begin(), present.end());
  std::vector<std::string> phrases;
  for (size_t c : present) phrases.push_back(all_phrases[c]);
  for (const std::string& p : all_phrases)
    if (std::find(phrases.begin(), phrases.end(), p) == phrases.end()) phrases.push_back(p);

  GroundTruth gt;
  gt.boxes = scene.gt_boxes;
  for (size_t c : scene.gt_class) {
    size_t row = 0;
    while (phrases[row] != all_phrases[c]) ++row;
    gt.class_rows.push_back(row);
  }
  std::vector<double> bits(phrases.size(), 0.0);
  for (size_t i = 0; i < present.size(); ++i) bits[i] = 1.0;

  // bake the discrete choices
  typename CpDetr<double>::FixedChoices fixed;
  {
    ConceptPromptSet<double> prompts = model.text_prompts(phrases);
    auto fwd = model.forward(scene.image, prompts);
    fixed.selection = fwd.dec.selected_tokens;
    fixed.match = decoder_loss(fwd.dec, gt).match.gt_to_query;
  }

  auto objective = [&]() {
    ConceptPromptSet<double> prompts = model.text_prompts(phrases);
    auto fwd = model.forward(scene.image, prompts, &fixed);
    TensorD total = decoder_loss(fwd.dec, gt, &fixed.match).total;
    AtssAssignment assign = atss_assign(fwd.anchors, gt.boxes, model.cfg.atss_topk);
    typename AuxHead<double>::Out head = model.aux->forward(fwd.enc.maps, fwd.enc.p_end, fwd.anchors);
    total = add(total, aux_loss<double>(head, assign, gt).total);
    total = add(total, mul_scalar(model.prompt_cls.loss(fwd.enc.p_end, bits), 6.0));
    return total;
  };

  // Leaves: a representative low-dimensional slice through every module the
  // objective touches — biases, the text embedding table, the content table.
  std::vector<std::pair<std::string, TensorD>> named = model.named_params();
  std::vector<TensorD> leaves;
  size_t scalars = 0;
  std::vector<std::string> want_prefix = {"backbone.", "text.", "encoder.",
                                          "decoder.", "aux.", "prompt_cls."};
  auto has_prefix = [](const std::string& s, const std::string& p) {
    return s.size() >= p.size() && s.compare(0, p.size(), p) == 0;
  };
  auto is_bias = [](const std::string& s) {
    return s.size() >= 2 && s.compare(s.size() - 2, 2, ".b") == 0;
  };
  std::vector<bool> covered(want_prefix.size(), false);
  for (const auto& [name, t] : named) {
    if (name == "text.table" || name == "decoder.content.table") {
      leaves.push_back(t);
      scalars += t.numel();
      continue;
    }
    if (!is_bias(name) || t.numel() > 16) continue;
    size_t pi = want_prefix.size();
    for (size_t i = 0; i < want_prefix.size(); ++i)
      if (has_prefix(name, want_prefix[i])) pi = i;
    if (pi == want_prefix.size()) continue;
    if (!covered[pi] || scalars < 240) {
      covered[pi] = true;
      leaves.push_back(t);
      scalars += t.numel();
    }
  }
  for (bool c : covered)
    if (!c) throw ContractError("objective probe must touch every module");

  // The probe step is small: the objective is piecewise smooth (relu
  // networks, box intersections), and ~1e-5 beyond the operating point the
  // nearest kink flips a downstream unit.  At 5e-6 the central difference
  // stays on the analytic branch while 64-bit evaluation keeps roundoff
  // three orders of magnitude under the tolerance.
  return detail::gc_run(
      "pretrain-objective", leaves,
      [&](const std::vector<TensorD>&) { return objective(); }, 5e-6);
}

// Full battery, optionally filtered by substring match on the case name.
inline std::vector<GradCheckCase> run_gradcheck(const std::string& filter = "") {
  std::vector<GradCheckCase> cases = gradcheck_op_battery();
  if (filter.empty() || std::string("pretrain-objective").find(filter) != std::string::npos)
    cases.push_back(gradcheck_full_objective());
  if (!filter.empty()) {
    std::vector<GradCheckCase> kept;
    for (auto& c : cases)
      if (c.name.find(filter) != std::string::npos) kept.push_back(std::move(c));
    return kept;
  }
  return cases;
}

}  // namespace cpdet
