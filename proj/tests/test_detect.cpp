#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <vector>

#include "cpdet/aux_head.hpp"
#include "cpdet/decoder.hpp"
#include "cpdet/grad_check.hpp"
#include "cpdet/prompts.hpp"
#include "test_util.hpp"

using namespace cpdet;
using Catch::Approx;
using cpdet_test::random_tensor;

namespace {

TensorD random_image(Rng& rng, size_t h = 64, size_t w = 64) {
  std::vector<double> v(3 * h * w);
  for (auto& x : v) x = rng.uniform(0.0, 1.0);
  return TensorD::from_vector({3, h, w}, std::move(v));
}

// Straight-line re-derivation of the adaptive assignment, structured around
// repeated minimum extraction instead of sorting.
AtssAssignment atss_oracle(const std::vector<Anchor>& anchors, const std::vector<BoxCxcywh>& gt,
                           size_t topk = 9) {
  size_t a_n = anchors.size();
  AtssAssignment out;
  out.anchor_gt.assign(a_n, -1);
  out.centerness.assign(a_n, 0.0);
  std::vector<double> best(a_n, -1.0);

  for (size_t g = 0; g < gt.size(); ++g) {
    std::vector<size_t> cand;
    for (size_t lvl = 0; lvl < 4; ++lvl) {
      std::vector<size_t> pool;
      for (size_t i = 0; i < a_n; ++i)
        if (anchors[i].scale == lvl) pool.push_back(i);
      size_t take = std::min(topk, pool.size());
      std::vector<bool> used(pool.size(), false);
      for (size_t t = 0; t < take; ++t) {
        double bestd = 1e300;
        size_t arg = 0;
        for (size_t p = 0; p < pool.size(); ++p) {
          if (used[p]) continue;
          double dx = anchors[pool[p]].cx - gt[g].cx, dy = anchors[pool[p]].cy - gt[g].cy;
          double dd = std::sqrt(dx * dx + dy * dy);
          if (dd < bestd) {
            bestd = dd;
            arg = p;
          }
        }
        used[arg] = true;
        cand.push_back(pool[arg]);
      }
    }
    if (cand.empty()) continue;
    double mean = 0;
    std::vector<double> ious;
    for (size_t i : cand) {
      ious.push_back(iou_xyxy(anchors[i].box().to_xyxy(), gt[g].to_xyxy()));
      mean += ious.back();
    }
    mean /= ious.size();
    double var = 0;
    for (double v : ious) var += (v - mean) * (v - mean);
    double thr = mean + std::sqrt(var / ious.size());
    for (size_t c = 0; c < cand.size(); ++c) {
      size_t i = cand[c];
      double x0 = gt[g].cx - gt[g].w / 2, x1 = gt[g].cx + gt[g].w / 2;
      double y0 = gt[g].cy - gt[g].h / 2, y1 = gt[g].cy + gt[g].h / 2;
      bool inside = anchors[i].cx >= x0 && anchors[i].cx <= x1 && anchors[i].cy >= y0 &&
                    anchors[i].cy <= y1;
      if (ious[c] >= thr && inside && ious[c] > best[i]) {
        best[i] = ious[c];
        out.anchor_gt[i] = static_cast<long>(g);
      }
    }
  }
  for (size_t i = 0; i < a_n; ++i) {
    if (out.anchor_gt[i] < 0) continue;
    ++out.num_pos;
    const auto& b = gt[static_cast<size_t>(out.anchor_gt[i])];
    double l = anchors[i].cx - (b.cx - b.w / 2), r = (b.cx + b.w / 2) - anchors[i].cx;
    double t = anchors[i].cy - (b.cy - b.h / 2), d = (b.cy + b.h / 2) - anchors[i].cy;
    if (std::max(l, r) > 0 && std::max(t, d) > 0)
      out.centerness[i] =
          std::sqrt((std::min(l, r) / std::max(l, r)) * (std::min(t, d) / std::max(t, d)));
  }
  return out;
}

}  // namespace

TEST_CASE("query selection takes top scores with ties to lower index") {
  auto tokens = TensorD::from_vector({3, 2}, {1, 0, 0, 1, 1, 1});
  auto prompts = TensorD::from_vector({2, 2}, {1, 0, 0, 1});
  auto sel = select_query_tokens(tokens, prompts, 2);  // all scores tie at 1
  CHECK(sel == std::vector<size_t>{0, 1});

  auto tokens2 = TensorD::from_vector({3, 2}, {2, 0, 0, 3, 1, 1});
  auto sel2 = select_query_tokens(tokens2, prompts, 2);
  CHECK(sel2 == std::vector<size_t>{1, 0});

  CHECK_THROWS_AS(select_query_tokens(tokens, prompts, 4), ContractError);
}

TEST_CASE("decoder initializes boxes at the anchors") {
  Rng rng(31);
  ToyBackbone<double> bb(8, rng);
  HybridEncoder<double> enc(8, 2, 2, rng);
  DetrDecoder<double> dec(8, 2, 6, 2, 2, rng);

  auto feats = bb.forward(random_image(rng));
  auto eo = enc.forward(feats, random_tensor(rng, {2, 8}));
  auto anchors = generate_anchors(feats, 64, 64);
  auto out = dec.forward(eo.tokens, eo.maps, eo.p_end, anchors);

  REQUIRE(out.selected_tokens.size() == 6);
  REQUIRE(out.init_boxes.shape() == Shape{6, 4});
  REQUIRE(out.layer_boxes.size() == 2);
  REQUIRE(out.layer_scores.size() == 2);
  REQUIRE(out.layer_boxes[0].shape() == Shape{6, 4});
  REQUIRE(out.layer_scores[1].shape() == Shape{6, 2});

  // the box head starts at zero, so initial boxes equal the selected anchors
  // up to the logit-space clamp (coarse anchors have sides past 1)
  auto clamp01 = [](double v) { return std::min(std::max(v, 1e-5), 1.0 - 1e-5); };
  for (size_t j = 0; j < 6; ++j) {
    const Anchor& a = anchors[out.selected_tokens[j]];
    CHECK(out.init_boxes.data()[j * 4 + 0] == Approx(clamp01(a.cx)).margin(1e-6));
    CHECK(out.init_boxes.data()[j * 4 + 1] == Approx(clamp01(a.cy)).margin(1e-6));
    CHECK(out.init_boxes.data()[j * 4 + 2] == Approx(clamp01(a.w)).margin(1e-6));
    CHECK(out.init_boxes.data()[j * 4 + 3] == Approx(clamp01(a.h)).margin(1e-6));
  }
  for (const auto& lb : out.layer_boxes)
    for (double v : lb.data()) {
      CHECK(v > 0.0);
      CHECK(v < 1.0);
    }

  std::vector<size_t> forced = {4, 3, 2, 1, 0, 5};
  auto out2 = dec.forward(eo.tokens, eo.maps, eo.p_end, anchors, &forced);
  CHECK(out2.selected_tokens == forced);
}

TEST_CASE("match cost follows the documented formula") {
  DecoderOut<double> dec;
  dec.layer_boxes.push_back(TensorD::from_vector({2, 4}, {0.5, 0.5, 0.2, 0.2, 0.3, 0.3, 0.1, 0.1}));
  dec.layer_scores.push_back(TensorD::from_vector({2, 2}, {1.0, -1.0, 0.0, 2.0}));
  GroundTruth gt;
  gt.boxes = {{0.5, 0.5, 0.2, 0.2}};
  gt.class_rows = {0};

  auto cost = match_cost_matrix(dec, gt);
  REQUIRE(cost.size() == 1);
  REQUIRE(cost[0].size() == 2);

  auto align = [](double logit) {
    double p = 1.0 / (1.0 + std::exp(-logit));
    return 0.25 * std::pow(1 - p, 2.0) * (-std::log(p)) -
           0.75 * std::pow(p, 2.0) * (-std::log(1 - p));
  };
  // query 0 sits exactly on the target: no L1, unit overlap
  CHECK(cost[0][0] == Approx(2.0 * align(1.0) + 5.0 * 0.0 + 2.0 * (-1.0)).margin(1e-12));
  double l1 = 0.2 + 0.2 + 0.1 + 0.1;
  double ov = giou_xyxy(BoxCxcywh{0.3, 0.3, 0.1, 0.1}.to_xyxy(), BoxCxcywh{0.5, 0.5, 0.2, 0.2}.to_xyxy());
  CHECK(cost[0][1] == Approx(2.0 * align(0.0) + 5.0 * l1 - 2.0 * ov).margin(1e-12));

  GroundTruth bad;
  bad.boxes = gt.boxes;
  bad.class_rows = {7};
  CHECK_THROWS_AS(match_cost_matrix(dec, bad), ContractError);
}

TEST_CASE("decoder loss composes weighted parts per layer") {
  Rng rng(32);
  ToyBackbone<double> bb(8, rng);
  HybridEncoder<double> enc(8, 2, 2, rng);
  DetrDecoder<double> dec(8, 2, 6, 2, 2, rng);
  auto feats = bb.forward(random_image(rng));
  auto eo = enc.forward(feats, random_tensor(rng, {2, 8}));
  auto anchors = generate_anchors(feats, 64, 64);
  auto out = dec.forward(eo.tokens, eo.maps, eo.p_end, anchors);

  GroundTruth gt;
  gt.boxes = {{0.4, 0.4, 0.3, 0.3}, {0.7, 0.6, 0.2, 0.25}};
  gt.class_rows = {0, 1};
  auto loss = decoder_loss(out, gt);
  REQUIRE(loss.match.gt_to_query.size() == 2);
  CHECK(loss.match.gt_to_query[0] != loss.match.gt_to_query[1]);
  CHECK(loss.total.item() ==
        Approx(loss.focal_sum + 5.0 * loss.l1_sum + 2.0 * loss.giou_sum).epsilon(1e-12));
  CHECK(loss.total.item() > 0);

  GroundTruth empty;
  auto loss0 = decoder_loss(out, empty);
  CHECK(loss0.match.gt_to_query.empty());
  CHECK(loss0.total.item() == Approx(loss0.focal_sum).epsilon(1e-12));
  CHECK(loss0.l1_sum == 0);

  // a forced match short-circuits the assignment
  std::vector<size_t> forced = {3, 0};
  auto lf = decoder_loss(out, gt, &forced);
  CHECK(lf.match.gt_to_query == forced);
}

TEST_CASE("decoder loss gradients agree with finite differences") {
  Rng rng(33);
  ToyBackbone<double> bb(4, rng);
  HybridEncoder<double> enc(4, 2, 2, rng);
  DetrDecoder<double> dec(4, 2, 4, 2, 2, rng);
  auto image = random_image(rng);
  auto prompts = random_tensor(rng, {2, 4}, 0.5);
  auto anchors_ready = [&] {
    auto feats = bb.forward(image);
    return generate_anchors(feats, 64, 64);
  }();

  GroundTruth gt;
  gt.boxes = {{0.4, 0.4, 0.3, 0.3}};
  gt.class_rows = {0};

  // nudge the box head off its zero init so reference points leave the
  // anchor centers; those sit exactly on sampling-grid lines, where the
  // bilinear kink would spoil the finite-difference probe
  for (auto& v : dec.box_head.layers.back().b.data()) v = rng.uniform(0.2, 0.4);

  // bake in the discrete choices so differentiation sees a fixed graph
  std::vector<size_t> sel;
  std::vector<size_t> match;
  {
    auto feats = bb.forward(image);
    auto eo = enc.forward(feats, prompts);
    auto out = dec.forward(eo.tokens, eo.maps, eo.p_end, anchors_ready);
    sel = out.selected_tokens;
    match = decoder_loss(out, gt).match.gt_to_query;
  }

  std::vector<TensorD> leaves = {dec.box_head.layers[0].b, dec.score_head.bias,
                                 dec.layers[0].cross_image.offset_proj.b, dec.content.table,
                                 enc.mfg.gate_b.b};
  auto f = [&](const std::vector<TensorD>&) {
    auto feats = bb.forward(image);
    auto eo = enc.forward(feats, prompts);
    auto out = dec.forward(eo.tokens, eo.maps, eo.p_end, anchors_ready, &sel);
    return decoder_loss(out, gt, &match).total;
  };
  // the composition is deep; a smaller step keeps truncation below the bound
  CHECK(grad_check(f, leaves, 3e-5) < 1e-5);
}

TEST_CASE("adaptive assignment matches the oracle on random scenes") {
  Rng rng(34);
  ToyBackbone<double> bb(4, rng);
  auto feats = bb.forward(random_image(rng));
  auto anchors = generate_anchors(feats, 64, 64);

  for (int scene = 0; scene < 200; ++scene) {
    size_t n = static_cast<size_t>(rng.uniform_int(1, 4));
    std::vector<BoxCxcywh> gt;
    for (size_t i = 0; i < n; ++i) {
      double w = rng.uniform(0.1, 0.6), h = rng.uniform(0.1, 0.6);
      double cx = rng.uniform(w / 2, 1 - w / 2), cy = rng.uniform(h / 2, 1 - h / 2);
      gt.push_back({cx, cy, w, h});
    }
    auto got = atss_assign(anchors, gt);
    auto want = atss_oracle(anchors, gt);
    REQUIRE(got.anchor_gt == want.anchor_gt);
    REQUIRE(got.num_pos == want.num_pos);
    for (size_t i = 0; i < anchors.size(); ++i)
      REQUIRE(got.centerness[i] == Approx(want.centerness[i]).margin(1e-12));
  }
}

TEST_CASE("assignment centerness hits hand values") {
  std::vector<BoxCxcywh> gt = {{0.5, 0.5, 0.5, 0.5}};

  // a single anchor dead on the target center: threshold equals its own
  // IoU, perfect centerness
  Anchor center;
  center.cx = 0.5;
  center.cy = 0.5;
  center.w = 0.5;
  center.h = 0.5;
  center.scale = 0;
  auto solo = atss_assign({center}, gt, 9);
  REQUIRE(solo.anchor_gt[0] == 0);
  CHECK(solo.centerness[0] == Approx(1.0).margin(1e-12));

  // four anchors offset symmetrically: every IoU ties bitwise, so the
  // mean-plus-std threshold keeps all of them
  std::vector<Anchor> ring;
  for (int k = 0; k < 4; ++k) {
    Anchor a = center;
    double off = (k % 2 == 0) ? -0.0625 : 0.0625;
    if (k < 2)
      a.cx += off;
    else
      a.cy += off;
    ring.push_back(a);
  }
  auto got = atss_assign(ring, gt, 9);
  for (int k = 0; k < 4; ++k) {
    REQUIRE(got.anchor_gt[k] == 0);
    // borders at 0.25/0.75: distances 0.1875 and 0.3125, ratio exactly 0.6
    CHECK(got.centerness[k] == Approx(std::sqrt(0.6)).margin(1e-12));
  }
}

TEST_CASE("aux head shapes, decode positivity, and loss composition") {
  Rng rng(35);
  ToyBackbone<double> bb(8, rng);
  HybridEncoder<double> enc(8, 2, 2, rng);
  AuxHead<double> aux(8, rng);
  auto feats = bb.forward(random_image(rng));
  auto eo = enc.forward(feats, random_tensor(rng, {3, 8}));
  auto anchors = generate_anchors(feats, 64, 64);

  auto head = aux.forward(eo.maps, eo.p_end, anchors);
  REQUIRE(head.scores.shape() == Shape{85, 3});
  REQUIRE(head.boxes.shape() == Shape{85, 4});
  REQUIRE(head.centerness.shape() == Shape{85, 1});
  for (size_t i = 0; i < 85; ++i) {
    CHECK(head.boxes.data()[i * 4 + 2] > 0);
    CHECK(head.boxes.data()[i * 4 + 3] > 0);
  }

  GroundTruth gt;
  gt.boxes = {{0.4, 0.4, 0.35, 0.35}, {0.75, 0.7, 0.2, 0.2}};
  gt.class_rows = {0, 2};
  auto assign = atss_assign(anchors, gt.boxes);
  REQUIRE(assign.num_pos > 0);
  auto loss = aux_loss<double>(head, assign, gt);
  CHECK(loss.num_pos == assign.num_pos);
  CHECK(loss.total.item() == Approx(6 * loss.focal_part + 6 * loss.centerness_part +
                                    12 * loss.giou_part)
                                 .epsilon(1e-12));

  AtssAssignment none;
  none.anchor_gt.assign(85, -1);
  none.centerness.assign(85, 0.0);
  auto loss0 = aux_loss<double>(head, none, gt);
  CHECK(loss0.total.item() == Approx(6 * loss0.focal_part).epsilon(1e-12));
  CHECK(loss0.giou_part == 0);
}

TEST_CASE("aux loss gradients agree with finite differences") {
  Rng rng(36);
  ToyBackbone<double> bb(4, rng);
  HybridEncoder<double> enc(4, 2, 2, rng);
  AuxHead<double> aux(4, rng);
  auto image = random_image(rng);
  auto prompts = random_tensor(rng, {2, 4}, 0.5);

  GroundTruth gt;
  gt.boxes = {{0.45, 0.5, 0.4, 0.35}};
  gt.class_rows = {1};

  std::vector<TensorD> leaves = {aux.trunk_b, aux.box_b, aux.ctr_b, aux.score_head.bias};
  auto f = [&](const std::vector<TensorD>&) {
    auto feats = bb.forward(image);
    auto eo = enc.forward(feats, prompts);
    auto anchors = generate_anchors(feats, 64, 64);
    auto head = aux.forward(eo.maps, eo.p_end, anchors);
    auto assign = atss_assign(anchors, gt.boxes);
    return aux_loss<double>(head, assign, gt).total;
  };
  CHECK(grad_check(f, leaves) < 1e-5);
}

TEST_CASE("prompt presence classifier averages binary terms") {
  Rng rng(37);
  PromptClassifier<double> cls(8, rng);
  auto p_end = random_tensor(rng, {3, 8});
  std::vector<double> bits = {1, 0, 1};
  auto loss = cls.loss(p_end, bits);

  NoGradGuard ng;
  auto logits = cls.mlp.forward(p_end);
  double want = 0;
  for (size_t k = 0; k < 3; ++k) {
    double x = logits.data()[k];
    want += std::max(x, 0.0) - x * bits[k] + std::log1p(std::exp(-std::abs(x)));
  }
  CHECK(loss.item() == Approx(want / 3).epsilon(1e-12));
  CHECK_THROWS_AS(cls.loss(p_end, std::vector<double>{1, 0}), ContractError);
}

TEST_CASE("superclass collapse is a per-class max") {
  auto scores = TensorD::from_vector({2, 4}, {1, 3, 2, 0, -1, -5, -2, -3});
  std::vector<size_t> row_class = {0, 0, 1, 1};
  auto got = superclass_scores(scores, row_class, 2);
  REQUIRE(got.shape() == Shape{2, 2});
  CHECK(got.data()[0] == 3);
  CHECK(got.data()[1] == 2);
  CHECK(got.data()[2] == -1);
  CHECK(got.data()[3] == -2);

  // single row per class is the identity
  std::vector<size_t> ident = {0, 1, 2, 3};
  auto same = superclass_scores(scores, ident, 4);
  for (size_t i = 0; i < scores.numel(); ++i) CHECK(same.data()[i] == scores.data()[i]);

  // idempotent: collapsing a collapsed matrix with identity mapping
  auto twice = superclass_scores(got, std::vector<size_t>{0, 1}, 2);
  for (size_t i = 0; i < got.numel(); ++i) CHECK(twice.data()[i] == got.data()[i]);

  // monotone: bumping any entry never lowers its class score
  Rng rng(38);
  for (int trial = 0; trial < 50; ++trial) {
    auto s = cpdet_test::random_tensor(rng, {3, 4});
    auto base = superclass_scores(s, row_class, 2);
    size_t r = static_cast<size_t>(rng.uniform_int(0, 2));
    size_t c = static_cast<size_t>(rng.uniform_int(0, 3));
    auto bumped_vals = s.data();
    bumped_vals[r * 4 + c] += rng.uniform(0.0, 2.0);
    auto bumped = superclass_scores(TensorD::from_vector({3, 4}, bumped_vals), row_class, 2);
    size_t cls = row_class[c];
    CHECK(bumped.data()[r * 2 + cls] >= base.data()[r * 2 + cls]);
  }

  CHECK_THROWS_AS(superclass_scores(scores, row_class, 3), ContractError);  // class 2 unmapped
  std::vector<size_t> bad = {0, 0, 1, 5};
  CHECK_THROWS_AS(superclass_scores(scores, bad, 2), ContractError);
}

TEST_CASE("optimized prompt initialization lays out class rows") {
  Rng rng(39);
  auto set = init_optimized_prompts<double>({"red circle", "blue square"}, 8, 3, rng);
  REQUIRE(set.rows.shape() == Shape{6, 8});
  CHECK(set.rows.requires_grad());
  CHECK(set.row_class == std::vector<size_t>{0, 0, 0, 1, 1, 1});
  CHECK(set.source == PromptSource::kOptimized);
  double mx = 0;
  for (double v : set.rows.data()) mx = std::max(mx, std::abs(v));
  CHECK(mx < 0.2);  // small init
  CHECK_THROWS_AS(init_optimized_prompts<double>({}, 8, 3, rng), ContractError);
}

TEST_CASE("visual prompts average per class and reject empty input") {
  Rng rng(40);
  ToyBackbone<double> bb(8, rng);
  VisualPromptEncoder<double> vpe(8, 2, 2, rng);
  auto feats = bb.forward(random_image(rng));

  std::vector<BoxCxcywh> boxes = {{0.3, 0.3, 0.2, 0.2}, {0.6, 0.6, 0.25, 0.3}, {0.5, 0.4, 0.15, 0.2}};
  std::vector<size_t> cls = {0, 0, 1};
  auto set = vpe.forward(boxes, cls, {"thing a", "thing b"}, feats);
  REQUIRE(set.rows.shape() == Shape{2, 8});
  CHECK(set.row_class == std::vector<size_t>{0, 1});

  // rows are per-box encodings averaged within a class
  auto single0 = vpe.forward({boxes[0]}, {0}, {"thing a"}, feats);
  auto single1 = vpe.forward({boxes[1]}, {0}, {"thing a"}, feats);
  auto single2 = vpe.forward({boxes[2]}, {0}, {"thing a"}, feats);
  for (size_t c = 0; c < 8; ++c) {
    double want0 = 0.5 * (single0.rows.data()[c] + single1.rows.data()[c]);
    CHECK(set.rows.data()[c] == Approx(want0).margin(1e-9));
    CHECK(set.rows.data()[8 + c] == Approx(single2.rows.data()[c]).margin(1e-9));
  }

  CHECK_THROWS_AS(vpe.forward({}, {}, {"thing a"}, feats), InputError);
  CHECK_THROWS_AS(vpe.forward(boxes, {0, 0}, {"thing a"}, feats), InputError);
  CHECK_THROWS_AS(vpe.forward(boxes, cls, {"thing a", "thing b", "ghost"}, feats), InputError);
}

TEST_CASE("prompt distillation is a mean squared gap") {
  auto pt = TensorD::zeros({1, 8});
  std::vector<double> v(8, 0.0);
  v[3] = 1.0;  // unit residual in one channel
  auto pv = TensorD::from_vector({1, 8}, v);
  auto loss = prompt_distill_loss(pv, pt);
  CHECK(loss.item() == Approx(1.0 / 8).epsilon(1e-12));

  CHECK_THROWS_AS(prompt_distill_loss(pv, TensorD::zeros({2, 8})), ShapeError);

  Rng rng(41);
  auto a = random_tensor(rng, {3, 8});
  auto b = random_tensor(rng, {3, 8});
  double want = 0;
  for (size_t i = 0; i < a.numel(); ++i) {
    double d = a.data()[i] - b.data()[i];
    want += d * d;
  }
  CHECK(prompt_distill_loss(a, b).item() == Approx(want / 24).epsilon(1e-10));
}
