#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "cpdet/anchors.hpp"
#include "cpdet/aux_head.hpp"
#include "cpdet/ap.hpp"
#include "cpdet/checkpoint.hpp"
#include "cpdet/decoder.hpp"
#include "cpdet/encoders.hpp"
#include "cpdet/errors.hpp"
#include "cpdet/fusion.hpp"
#include "cpdet/nn.hpp"
#include "cpdet/prompts.hpp"
#include "cpdet/rng.hpp"
#include "cpdet/tensor.hpp"

namespace cpdet {

// ---------------------------------------------------------------------------
// The full prompt-conditioned detector: backbone and prompt generators feed
// the hybrid fusion encoder, whose tokens and final prompts drive a query
// decoder. The dense auxiliary head and the prompt presence classifier exist
// only for training; inference never evaluates them, and the auxiliary head
// can be deleted outright without changing a single inference bit.
// ---------------------------------------------------------------------------

struct ModelConfig {
  size_t d = 32;
  size_t heads = 2;
  size_t queries = 20;
  size_t decoder_layers = 2;
  size_t sample_points = 4;
  size_t atss_topk = 9;
  uint64_t seed = 1;
  // Structural ablation switches. With PSF off, the raw backbone pyramid
  // feeds the gating stage directly; with MFG off, the pyramid-fused maps and
  // prompts are used as-is.
  bool use_psf = true;
  bool use_mfg = true;
};

template <typename T>
class CpDetr {
 public:
  ModelConfig cfg;
  TextVocabulary vocab;

  ToyBackbone<T> backbone;
  ToyTextEncoder<T> text;
  VisualPromptEncoder<T> visual;
  HybridEncoder<T> encoder;
  DetrDecoder<T> decoder;
  PromptClassifier<T> prompt_cls;
  // Constructed last so that deleting it leaves every other parameter's
  // random draw — and therefore every inference output — untouched.
  std::unique_ptr<AuxHead<T>> aux;

  CpDetr() = default;
  CpDetr(const ModelConfig& config, TextVocabulary vocabulary)
      : cfg(config), vocab(std::move(vocabulary)) {
    Rng rng(cfg.seed);
    backbone = ToyBackbone<T>(cfg.d, rng);
    text = ToyTextEncoder<T>(vocab, cfg.d, rng);
    visual = VisualPromptEncoder<T>(cfg.d, cfg.heads, cfg.sample_points, rng);
    encoder = HybridEncoder<T>(cfg.d, cfg.heads, cfg.sample_points, rng);
    decoder = DetrDecoder<T>(cfg.d, cfg.heads, cfg.queries, cfg.decoder_layers,
                             cfg.sample_points, rng);
    prompt_cls = PromptClassifier<T>(cfg.d, rng);
    aux = std::make_unique<AuxHead<T>>(cfg.d, rng);
  }

  void drop_aux() { aux.reset(); }

  void params(const ParamVisitor<T>& v) {
    backbone.params(v.scoped("backbone"));
    text.params(v.scoped("text"));
    visual.params(v.scoped("visual"));
    encoder.params(v.scoped("encoder"));
    decoder.params(v.scoped("decoder"));
    prompt_cls.params(v.scoped("prompt_cls"));
    if (aux) aux->params(v.scoped("aux"));
  }

  std::vector<std::pair<std::string, Tensor<T>>> named_params() {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    ParamVisitor<T> v{[&out](const std::string& n, Tensor<T>& t) { out.emplace_back(n, t); }, ""};
    params(v);
    return out;
  }

  // Mark exactly the parameters matching `trainable` as gradient leaves.
  // Freezing is structural: a frozen tensor never records into the graph, so
  // no gradient is ever materialized for it.
  template <typename Pred>
  void set_trainable(Pred trainable) {
    ParamVisitor<T> v{[&trainable](const std::string& n, Tensor<T>& t) {
                        t.set_requires_grad(trainable(n));
                      },
                      ""};
    params(v);
  }

  // ----- prompt generators -------------------------------------------------

  ConceptPromptSet<T> text_prompts(const std::vector<std::string>& phrases) const {
    if (phrases.empty()) throw InputError("text prompting needs at least one phrase");
    std::vector<Tensor<T>> rows;
    ConceptPromptSet<T> set;
    for (size_t i = 0; i < phrases.size(); ++i) {
      rows.push_back(text.encode(phrases[i]));
      set.row_class.push_back(i);
    }
    set.rows = concat_rows(rows);
    set.labels = phrases;
    set.source = PromptSource::kText;
    return set;
  }

  MultiScaleFeatures<T> backbone_features(const Tensor<T>& image) const {
    return backbone.forward(image);
  }

  ConceptPromptSet<T> visual_prompts(const std::vector<BoxCxcywh>& boxes,
                                     const std::vector<size_t>& box_class,
                                     const std::vector<std::string>& labels,
                                     const Tensor<T>& image) const {
    return visual.forward(boxes, box_class, labels, backbone_features(image));
  }

  // ----- forward -----------------------------------------------------------

  struct FixedChoices {
    std::vector<size_t> selection;  // decoder query proposals
    std::vector<size_t> match;      // ground truth -> query assignment
  };

  struct ForwardOut {
    MultiScaleFeatures<T> backbone_maps;
    EncoderOut<T> enc;
    std::vector<Anchor> anchors;
    DecoderOut<T> dec;  // layer_scores collapsed to [Q, num_classes]
  };

  EncoderOut<T> encode_features(const MultiScaleFeatures<T>& feats, const Tensor<T>& prompt_rows,
                                FusionTrace* trace = nullptr) const {
    if (cfg.use_psf && cfg.use_mfg) return encoder.forward(feats, prompt_rows, trace);
    EncoderOut<T> out;
    if (cfg.use_psf && !cfg.use_mfg) {
      PsfOut<T> ps = encoder.psf.forward(feats, prompt_rows, trace);
      out.maps = ps.maps;
      out.tokens = flatten_tokens(ps.maps);
      out.p_end = ps.prompts;
    } else if (!cfg.use_psf && cfg.use_mfg) {
      MfgOut<T> mg = encoder.mfg.forward(feats, prompt_rows, trace);
      out.maps = mg.maps;
      out.tokens = mg.tokens;
      out.p_end = mg.p_end;
    } else {
      out.maps = feats;
      out.tokens = flatten_tokens(feats);
      out.p_end = prompt_rows;
    }
    return out;
  }

  ForwardOut forward_features(const MultiScaleFeatures<T>& feats, size_t img_h, size_t img_w,
                              const ConceptPromptSet<T>& prompts,
                              const FixedChoices* fixed = nullptr) const {
    if (prompts.row_class.size() != prompts.rows.dim(0))
      throw ContractError("one class id per prompt row required");
    ForwardOut out;
    out.backbone_maps = feats;
    out.enc = encode_features(feats, prompts.rows);
    out.anchors = generate_anchors(out.enc.maps, img_h, img_w);
    out.dec = decoder.forward(out.enc.tokens, out.enc.maps, out.enc.p_end, out.anchors,
                              fixed ? &fixed->selection : nullptr);
    // With several rows per class (optimized prompts), fold row scores into
    // class scores so matching and losses run per class.
    if (prompts.rows.dim(0) != prompts.num_classes())
      for (auto& s : out.dec.layer_scores)
        s = superclass_scores(s, prompts.row_class, prompts.num_classes());
    return out;
  }

  ForwardOut forward(const Tensor<T>& image, const ConceptPromptSet<T>& prompts,
                     const FixedChoices* fixed = nullptr) const {
    return forward_features(backbone.forward(image), image.dim(1), image.dim(2), prompts, fixed);
  }

  // ----- inference ---------------------------------------------------------

  // One detection per query: the best-scoring class under the prompt set.
  // Runs entirely without gradient recording and never touches the
  // training-only heads.
  std::vector<Detection> detect(const Tensor<T>& image, const ConceptPromptSet<T>& prompts,
                                size_t image_id = 0, double min_score = 0.0) const {
    NoGradGuard ng;
    ForwardOut out = forward(image, prompts);
    const Tensor<T>& scores = out.dec.layer_scores.back();
    const Tensor<T>& boxes = out.dec.layer_boxes.back();
    size_t q = scores.dim(0), k = scores.dim(1);
    std::vector<Detection> dets;
    for (size_t i = 0; i < q; ++i) {
      size_t best = 0;
      for (size_t c = 1; c < k; ++c)
        if (scores.data()[i * k + c] > scores.data()[i * k + best]) best = c;
      double logit = static_cast<double>(scores.data()[i * k + best]);
      double s = 1.0 / (1.0 + std::exp(-logit));
      if (s < min_score) continue;
      BoxCxcywh b{static_cast<double>(boxes.data()[i * 4 + 0]),
                  static_cast<double>(boxes.data()[i * 4 + 1]),
                  static_cast<double>(boxes.data()[i * 4 + 2]),
                  static_cast<double>(boxes.data()[i * 4 + 3])};
      dets.push_back({image_id, best, s, b.to_xyxy()});
    }
    return dets;
  }
};

// ---------------------------------------------------------------------------
// Model serialization: every named parameter plus enough metadata (dims,
// vocabulary, training step, frozen set) to reconstruct the model exactly.
// ---------------------------------------------------------------------------

template <typename T>
Checkpoint model_checkpoint(CpDetr<T>& model, uint64_t step = 0,
                            const std::string& regime = "pretrain",
                            const std::vector<std::string>& frozen = {}) {
  Checkpoint ckpt;
  for (auto& [name, tensor] : model.named_params()) ckpt.add(name, tensor);
  ordered_json mc = ordered_json::object();
  mc["d"] = model.cfg.d;
  mc["heads"] = model.cfg.heads;
  mc["queries"] = model.cfg.queries;
  mc["decoder_layers"] = model.cfg.decoder_layers;
  mc["sample_points"] = model.cfg.sample_points;
  mc["atss_topk"] = model.cfg.atss_topk;
  mc["seed"] = model.cfg.seed;
  mc["use_psf"] = model.cfg.use_psf;
  mc["use_mfg"] = model.cfg.use_mfg;
  mc["has_aux"] = static_cast<bool>(model.aux);
  ckpt.meta["kind"] = "cpdet-model";
  ckpt.meta["model"] = std::move(mc);
  ckpt.meta["vocab"] = model.vocab.tokens;
  ckpt.meta["step"] = step;
  ckpt.meta["regime"] = regime;
  ckpt.meta["frozen"] = frozen;
  return ckpt;
}

template <typename T>
CpDetr<T> model_from_checkpoint(const Checkpoint& ckpt) {
  if (!ckpt.meta.contains("kind") || ckpt.meta.at("kind") != "cpdet-model")
    throw InputError("checkpoint does not hold a detector model");
  const ordered_json& mc = ckpt.meta.at("model");
  ModelConfig cfg;
  cfg.d = mc.at("d").get<size_t>();
  cfg.heads = mc.at("heads").get<size_t>();
  cfg.queries = mc.at("queries").get<size_t>();
  cfg.decoder_layers = mc.at("decoder_layers").get<size_t>();
  cfg.sample_points = mc.at("sample_points").get<size_t>();
  cfg.atss_topk = mc.at("atss_topk").get<size_t>();
  cfg.seed = mc.at("seed").get<uint64_t>();
  cfg.use_psf = mc.at("use_psf").get<bool>();
  cfg.use_mfg = mc.at("use_mfg").get<bool>();
  TextVocabulary vocab(ckpt.meta.at("vocab").get<std::vector<std::string>>());
  CpDetr<T> model(cfg, std::move(vocab));
  if (!mc.at("has_aux").get<bool>()) model.drop_aux();
  for (auto& [name, tensor] : model.named_params()) ckpt.copy_into(name, tensor);
  return model;
}

// Hash of every parameter whose name satisfies `pred`; used to verify that
// frozen subsets stay bit-identical across training steps.
template <typename T, typename Pred>
uint64_t params_hash_where(CpDetr<T>& model, Pred pred) {
  uint64_t h = 1469598103934665603ull;
  for (auto& [name, tensor] : model.named_params()) {
    if (!pred(name)) continue;
    uint64_t th = tensor_bytes_hash(tensor);
    for (int i = 0; i < 8; ++i) {
      h ^= (th >> (8 * i)) & 0xff;
      h *= 1099511628211ull;
    }
  }
  return h;
}

// Build the token table for a category dictionary: id 0 is the unknown
// token, then each distinct word of each phrase in first-appearance order.
inline TextVocabulary vocabulary_from_phrases(const std::vector<std::string>& phrases) {
  std::vector<std::string> toks = {"<unk>"};
  for (const std::string& phrase : phrases)
    for (const std::string& t : tokenize(normalize_phrase(phrase)))
      if (std::find(toks.begin(), toks.end(), t) == toks.end()) toks.push_back(t);
  return TextVocabulary(std::move(toks));
}

}  // namespace cpdet
