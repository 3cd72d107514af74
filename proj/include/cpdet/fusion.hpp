#pragma once

#include <array>
#include <string>
#include <utility>
#include <vector>

#include "cpdet/deform.hpp"
#include "cpdet/encoders.hpp"
#include "cpdet/errors.hpp"
#include "cpdet/nn.hpp"
#include "cpdet/ops.hpp"
#include "cpdet/tensor.hpp"

namespace cpdet {

// Applies a linear layer tokenwise over a [C,H,W] map.
template <typename T>
Tensor<T> map_linear(const Linear<T>& lin, const Tensor<T>& m) {
  size_t c = m.dim(0), h = m.dim(1), w = m.dim(2);
  Tensor<T> rows = lin.forward(transpose2d(reshape(m, {c, h * w})));
  return reshape(transpose2d(rows), {rows.dim(1), h, w});
}

// Inverse of flatten_tokens given the spatial layout in `like`.
template <typename T>
MultiScaleFeatures<T> unflatten_tokens(const Tensor<T>& tokens, const MultiScaleFeatures<T>& like) {
  MultiScaleFeatures<T> out;
  size_t row = 0, d = tokens.dim(1);
  for (size_t s = 0; s < 4; ++s) {
    size_t h = like.maps[s].dim(1), w = like.maps[s].dim(2);
    out.maps[s] = reshape(transpose2d(slice_rows(tokens, row, h * w)), {d, h, w});
    row += h * w;
  }
  if (row != tokens.dim(0)) throw ShapeError("token count does not match spatial layout");
  return out;
}

// Counts cross-attention applications across the encoder; the step index
// increases by exactly one every time image tokens and prompts exchange.
struct FusionTrace {
  size_t applications = 0;
  std::vector<size_t> step_after;
  std::vector<std::string> events;

  void record(const std::string& ev) {
    ++applications;
    step_after.push_back(applications);
    events.push_back(ev);
  }
};

template <typename T>
struct XMhaResult {
  Tensor<T> image;
  Tensor<T> prompts;
};

// Bidirectional cross-attention between image tokens and prompt rows. One
// shared logit matrix per head, read row-wise for the image update and
// column-wise for the prompt update; the same projections provide the
// values. Output projections start at zero, so an untrained module is an
// exact identity on both streams.
template <typename T>
struct XMha {
  size_t d = 0, heads = 0;
  Linear<T> wi, wp;
  Linear<T> out_i, out_p;

  XMha() = default;
  XMha(size_t d_, size_t heads_, Rng& rng) : d(d_), heads(heads_) {
    if (d % heads != 0) throw ContractError("cross-attention width must divide into heads");
    wi = Linear<T>(d, d, rng);
    wp = Linear<T>(d, d, rng);
    out_i = Linear<T>(d, d, rng, /*zero_init=*/true);
    out_p = Linear<T>(d, d, rng, /*zero_init=*/true);
  }

  XMhaResult<T> forward(const Tensor<T>& image, const Tensor<T>& prompts) const {
    if (image.rank() != 2 || image.dim(1) != d) throw ShapeError("cross-attention image tokens must be [S,D]");
    if (prompts.rank() != 2 || prompts.dim(1) != d) throw ShapeError("cross-attention prompts must be [K,D]");
    if (prompts.dim(0) == 0) throw ShapeError("cross-attention needs at least one prompt row");
    size_t dh = d / heads;
    T scale = T(1) / std::sqrt(static_cast<T>(dh));

    Tensor<T> ii = wi.forward(image);
    Tensor<T> pp = wp.forward(prompts);
    std::vector<Tensor<T>> img_upd, prm_upd;
    for (size_t h = 0; h < heads; ++h) {
      Tensor<T> ih = slice_cols(ii, h * dh, dh);
      Tensor<T> ph = slice_cols(pp, h * dh, dh);
      Tensor<T> logits = mul_scalar(matmul(ih, transpose2d(ph)), scale);  // [S,K]
      img_upd.push_back(matmul(softmax_lastdim(logits), ph));
      prm_upd.push_back(matmul(softmax_lastdim(transpose2d(logits)), ih));
    }
    XMhaResult<T> out;
    out.image = add(image, out_i.forward(concat_cols(img_upd)));
    out.prompts = add(prompts, out_p.forward(concat_cols(prm_upd)));
    return out;
  }

  void params(const ParamVisitor<T>& v) {
    wi.params(v.scoped("wi"));
    wp.params(v.scoped("wp"));
    out_i.params(v.scoped("out_i"));
    out_p.params(v.scoped("out_p"));
  }
};

// Residual pair of convolutions (3x3 and 1x1) summed with the input, ReLU.
template <typename T>
struct ConvBlock {
  Tensor<T> w3, b3, w1, b1;

  ConvBlock() = default;
  ConvBlock(size_t d, Rng& rng) {
    w3 = xavier_uniform<T>({d, d, 3, 3}, d * 9, d * 9, rng);
    b3 = Tensor<T>::zeros({d}).set_requires_grad();
    w1 = xavier_uniform<T>({d, d, 1, 1}, d, d, rng);
    b1 = Tensor<T>::zeros({d}).set_requires_grad();
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    return relu(add(add(conv2d(x, w3, b3, 1, 1), conv2d(x, w1, b1, 1, 0)), x));
  }

  void params(const ParamVisitor<T>& v) {
    v("w3", w3);
    v("b3", b3);
    v("w1", w1);
    v("b1", b1);
  }
};

// One cross-scale fusion step: resize the source map to the target's grid,
// concatenate along channels, mix down to width D, run the conv block, then
// exchange with the prompts. The fused map is the exchanged tokens plus a
// second linear view of the concatenated pair.
template <typename T>
struct SingleFusionLayer {
  enum class Resize { kUp, kDown };

  Resize dir = Resize::kUp;
  size_t d = 0;
  Tensor<T> down_w, down_b;  // only used when dir == kDown
  Linear<T> mix;             // 2D -> D, before the conv block
  Linear<T> skip;            // 2D -> D, summed with the exchanged tokens
  ConvBlock<T> block;
  XMha<T> xmha;

  SingleFusionLayer() = default;
  SingleFusionLayer(size_t d_, size_t heads, Resize dir_, Rng& rng) : dir(dir_), d(d_) {
    if (dir == Resize::kDown) {
      down_w = xavier_uniform<T>({d, d, 3, 3}, d * 9, d * 9, rng);
      down_b = Tensor<T>::zeros({d}).set_requires_grad();
    }
    mix = Linear<T>(2 * d, d, rng);
    skip = Linear<T>(2 * d, d, rng);
    block = ConvBlock<T>(d, rng);
    xmha = XMha<T>(d, heads, rng);
  }

  struct Out {
    Tensor<T> map;
    Tensor<T> prompts;
  };

  Out forward(const Tensor<T>& source, const Tensor<T>& target, const Tensor<T>& prompts,
              FusionTrace* trace, const std::string& tag) const {
    Tensor<T> resized = dir == Resize::kUp ? upsample_nearest2x(source)
                                           : conv2d(source, down_w, down_b, 2, 1);
    if (resized.dim(1) != target.dim(1) || resized.dim(2) != target.dim(2))
      throw ShapeError("resized source does not match target grid");
    size_t h = target.dim(1), w = target.dim(2), hw = h * w;
    Tensor<T> pair = concat_rows(std::vector<Tensor<T>>{reshape(resized, {d, hw}), reshape(target, {d, hw})});
    Tensor<T> pair_tokens = transpose2d(pair);                        // [HW, 2D]
    Tensor<T> mixed = reshape(transpose2d(mix.forward(pair_tokens)), {d, h, w});
    Tensor<T> blocked = block.forward(mixed);
    XMhaResult<T> ex = xmha.forward(transpose2d(reshape(blocked, {d, hw})), prompts);
    if (trace) trace->record(tag);
    Tensor<T> fused_tokens = add(ex.image, skip.forward(pair_tokens));
    Out out;
    out.map = reshape(transpose2d(fused_tokens), {d, h, w});
    out.prompts = ex.prompts;
    return out;
  }

  void params(const ParamVisitor<T>& v) {
    if (dir == Resize::kDown) {
      v("down_w", down_w);
      v("down_b", down_b);
    }
    mix.params(v.scoped("mix"));
    skip.params(v.scoped("skip"));
    block.params(v.scoped("block"));
    xmha.params(v.scoped("xmha"));
  }
};

template <typename T>
struct PsfOut {
  MultiScaleFeatures<T> maps;
  Tensor<T> prompts;
};

// Pyramid fusion schedule: exchange on the deepest map first, then a
// top-down sweep and a bottom-up sweep, seven prompt exchanges in all.
template <typename T>
struct Psf {
  size_t d = 0;
  XMha<T> deepest;
  std::array<SingleFusionLayer<T>, 3> top_down;
  std::array<SingleFusionLayer<T>, 3> bottom_up;

  Psf() = default;
  Psf(size_t d_, size_t heads, Rng& rng) : d(d_) {
    deepest = XMha<T>(d, heads, rng);
    for (auto& l : top_down) l = SingleFusionLayer<T>(d, heads, SingleFusionLayer<T>::Resize::kUp, rng);
    for (auto& l : bottom_up) l = SingleFusionLayer<T>(d, heads, SingleFusionLayer<T>::Resize::kDown, rng);
  }

  PsfOut<T> forward(const MultiScaleFeatures<T>& feats, const Tensor<T>& prompts,
                    FusionTrace* trace = nullptr) const {
    const Tensor<T>& c3 = feats.maps[0];
    const Tensor<T>& c4 = feats.maps[1];
    const Tensor<T>& c5 = feats.maps[2];
    const Tensor<T>& c6 = feats.maps[3];
    size_t h6 = c6.dim(1), w6 = c6.dim(2);

    XMhaResult<T> ex = deepest.forward(transpose2d(reshape(c6, {d, h6 * w6})), prompts);
    if (trace) trace->record("deepest");
    Tensor<T> c6_1 = reshape(transpose2d(ex.image), {d, h6, w6});
    Tensor<T> p = ex.prompts;

    auto td0 = top_down[0].forward(c6_1, c5, p, trace, "top_down c5");
    auto td1 = top_down[1].forward(td0.map, c4, td0.prompts, trace, "top_down c4");
    auto td2 = top_down[2].forward(td1.map, c3, td1.prompts, trace, "top_down c3");
    auto bu0 = bottom_up[0].forward(td2.map, td1.map, td2.prompts, trace, "bottom_up c4");
    auto bu1 = bottom_up[1].forward(bu0.map, td0.map, bu0.prompts, trace, "bottom_up c5");
    auto bu2 = bottom_up[2].forward(bu1.map, c6_1, bu1.prompts, trace, "bottom_up c6");

    PsfOut<T> out;
    out.maps.maps = {td2.map, bu0.map, bu1.map, bu2.map};
    out.prompts = bu2.prompts;
    return out;
  }

  void params(const ParamVisitor<T>& v) {
    deepest.params(v.scoped("deepest"));
    for (size_t i = 0; i < 3; ++i) top_down[i].params(v.scoped("td" + std::to_string(i)));
    for (size_t i = 0; i < 3; ++i) bottom_up[i].params(v.scoped("bu" + std::to_string(i)));
  }
};

template <typename T>
struct MfgOut {
  Tensor<T> tokens;               // [S,D] final image token matrix
  MultiScaleFeatures<T> maps;     // same data, per-scale layout
  Tensor<T> p_end;                // [K,D] gated prompt output
  Tensor<T> prompts_exchanged;    // [K,D] prompt state after the exchange, pre-gate
};

// Final aggregation: one exchange over the concatenated multi-scale tokens,
// a multiplicative gate that folds the pre-exchange prompts into the
// updated ones, and deformable self-attention over the token matrix.
template <typename T>
struct Mfg {
  size_t d = 0;
  bool relu_before_product = false;  // alternative gate reading, off by default
  XMha<T> xmha;
  Linear<T> gate_a, gate_b;
  LayerNorm<T> gate_norm;
  DeformableAttention<T> self_attn;

  Mfg() = default;
  Mfg(size_t d_, size_t heads, size_t sample_points, Rng& rng) : d(d_) {
    xmha = XMha<T>(d, heads, rng);
    gate_a = Linear<T>(d, d, rng);
    gate_b = Linear<T>(d, d, rng);
    gate_norm = LayerNorm<T>(d);
    self_attn = DeformableAttention<T>(d, heads, sample_points, rng);
  }

  MfgOut<T> forward(const MultiScaleFeatures<T>& feats, const Tensor<T>& prompts,
                    FusionTrace* trace = nullptr) const {
    Tensor<T> c_all = flatten_tokens(feats);
    XMhaResult<T> ex = xmha.forward(c_all, prompts);
    if (trace) trace->record("aggregate");

    Tensor<T> u = gate_a.forward(ex.prompts);
    Tensor<T> gated = relu_before_product ? mul(relu(u), prompts) : relu(mul(u, prompts));
    Tensor<T> p_end = gate_norm.forward(gate_b.forward(gated));

    std::vector<double> centers = token_centers(feats);
    Tensor<T> refs = Tensor<T>::from_vector({c_all.dim(0), 2},
                                            std::vector<T>(centers.begin(), centers.end()));
    MultiScaleFeatures<T> mid = unflatten_tokens(ex.image, feats);
    Tensor<T> tokens = add(ex.image, self_attn.forward(ex.image, refs, mid));

    MfgOut<T> out;
    out.tokens = tokens;
    out.maps = unflatten_tokens(tokens, feats);
    out.p_end = p_end;
    out.prompts_exchanged = ex.prompts;
    return out;
  }

  void params(const ParamVisitor<T>& v) {
    xmha.params(v.scoped("xmha"));
    gate_a.params(v.scoped("gate_a"));
    gate_b.params(v.scoped("gate_b"));
    gate_norm.params(v.scoped("gate_norm"));
    self_attn.params(v.scoped("self_attn"));
  }
};

template <typename T>
struct EncoderOut {
  Tensor<T> tokens;            // [S,D] fused image tokens
  MultiScaleFeatures<T> maps;  // per-scale view of the same tokens
  Tensor<T> p_end;             // [K,D] final prompt matrix
};

// Full prompt-visual hybrid encoder: pyramid fusion then aggregation.
template <typename T>
struct HybridEncoder {
  Psf<T> psf;
  Mfg<T> mfg;

  HybridEncoder() = default;
  HybridEncoder(size_t d, size_t heads, size_t sample_points, Rng& rng)
      : psf(d, heads, rng), mfg(d, heads, sample_points, rng) {}

  EncoderOut<T> forward(const MultiScaleFeatures<T>& feats, const Tensor<T>& prompts,
                        FusionTrace* trace = nullptr) const {
    PsfOut<T> ps = psf.forward(feats, prompts, trace);
    MfgOut<T> mg = mfg.forward(ps.maps, ps.prompts, trace);
    EncoderOut<T> out;
    out.tokens = mg.tokens;
    out.maps = mg.maps;
    out.p_end = mg.p_end;
    return out;
  }

  void params(const ParamVisitor<T>& v) {
    psf.params(v.scoped("psf"));
    mfg.params(v.scoped("mfg"));
  }
};

}  // namespace cpdet
