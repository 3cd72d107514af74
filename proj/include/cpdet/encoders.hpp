#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <fstream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "cpdet/conv.hpp"
#include "cpdet/errors.hpp"
#include "cpdet/nn.hpp"
#include "cpdet/ops.hpp"
#include "cpdet/rng.hpp"
#include "cpdet/tensor.hpp"

namespace cpdet {

inline constexpr std::array<size_t, 4> kScaleStrides = {8, 16, 32, 64};

template <typename T>
struct MultiScaleFeatures {
  std::array<Tensor<T>, 4> maps;  // C3..C6, strides 8/16/32/64, channel width D each

  size_t width() const { return maps[0].dim(0); }
  size_t token_count() const {
    size_t s = 0;
    for (const auto& m : maps) s += m.dim(1) * m.dim(2);
    return s;
  }
};

// Image stand-in: a stack of stride-2 3x3 convs with ReLU, one channel width
// throughout. Three stages reach stride 8, then one more conv per additional
// scale; the deepest map comes from strided downsampling of its neighbour.
template <typename T>
struct ToyBackbone {
  struct Stage {
    Tensor<T> w, b;
  };
  std::vector<Stage> stages;  // 6 stride-2 convs: /2 /4 /8 /16 /32 /64
  size_t d = 0;

  ToyBackbone() = default;
  ToyBackbone(size_t d_, Rng& rng) : d(d_) {
    size_t in = 3;
    for (int i = 0; i < 6; ++i) {
      Stage s;
      s.w = xavier_uniform<T>({d, in, 3, 3}, in * 9, d * 9, rng);
      s.b = Tensor<T>::zeros({d}).set_requires_grad();
      stages.push_back(std::move(s));
      in = d;
    }
  }

  MultiScaleFeatures<T> forward(const Tensor<T>& image) const {
    if (image.rank() != 3 || image.dim(0) != 3) throw ShapeError("backbone expects [3,H,W]");
    if (image.dim(1) % 64 != 0 || image.dim(2) % 64 != 0)
      throw ShapeError("image sides must be divisible by 64, got " + shape_str(image.shape()));
    MultiScaleFeatures<T> out;
    Tensor<T> h = image;
    size_t scale_idx = 0;
    for (size_t i = 0; i < stages.size(); ++i) {
      h = relu(conv2d(h, stages[i].w, stages[i].b, 2, 1));
      if (i >= 2) out.maps[scale_idx++] = h;
    }
    return out;
  }

  void params(const ParamVisitor<T>& v) {
    for (size_t i = 0; i < stages.size(); ++i) {
      v("conv" + std::to_string(i) + ".w", stages[i].w);
      v("conv" + std::to_string(i) + ".b", stages[i].b);
    }
  }
};

inline std::string normalize_phrase(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r\n");
  std::string out = s.substr(b, e - b + 1);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

inline std::vector<std::string> tokenize(const std::string& phrase) {
  std::istringstream is(normalize_phrase(phrase));
  std::vector<std::string> toks;
  std::string t;
  while (is >> t) toks.push_back(t);
  return toks;
}

// Token table: line number = id, line 0 reserved for unknowns.
struct TextVocabulary {
  std::vector<std::string> tokens;
  std::unordered_map<std::string, size_t> ids;

  static constexpr size_t kUnknownId = 0;

  explicit TextVocabulary(std::vector<std::string> toks = {"<unk>"}) : tokens(std::move(toks)) {
    if (tokens.empty()) tokens = {"<unk>"};
    for (size_t i = 0; i < tokens.size(); ++i) ids[tokens[i]] = i;
  }

  static TextVocabulary from_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw InputError("cannot open vocabulary '" + path + "'");
    std::vector<std::string> toks;
    std::string line;
    while (std::getline(f, line)) toks.push_back(normalize_phrase(line));
    return TextVocabulary(std::move(toks));
  }

  void write_file(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw InputError("cannot write vocabulary '" + path + "'");
    for (const auto& t : tokens) f << t << "\n";
  }

  size_t id_of(const std::string& token) const {
    auto it = ids.find(token);
    return it == ids.end() ? kUnknownId : it->second;
  }

  size_t size() const { return tokens.size(); }
};

// Text stand-in: embedding lookup, mean pooling over tokens, then one linear
// projection with layer norm. Pooling makes the encoding order-invariant.
template <typename T>
struct ToyTextEncoder {
  TextVocabulary vocab;
  Embedding<T> embed;
  Linear<T> proj;
  LayerNorm<T> norm;

  ToyTextEncoder() = default;
  ToyTextEncoder(TextVocabulary v, size_t d, Rng& rng)
      : vocab(std::move(v)), embed(vocab.size(), d, rng), proj(d, d, rng), norm(d) {}

  // Returns a [1, D] concept vector.
  Tensor<T> encode(const std::string& phrase) const {
    std::vector<std::string> toks = tokenize(phrase);
    if (toks.empty()) throw InputError("cannot encode an empty phrase");
    std::vector<size_t> ids;
    ids.reserve(toks.size());
    for (const auto& t : toks) ids.push_back(vocab.id_of(t));
    Tensor<T> vecs = embed.lookup(ids);
    Tensor<T> pooled = reshape(mean_rows(vecs), {1, vecs.dim(1)});
    return norm.forward(proj.forward(pooled));
  }

  void params(const ParamVisitor<T>& v) {
    embed.params(v.scoped("embed"));
    proj.params(v.scoped("proj"));
    norm.params(v.scoped("norm"));
  }
};

// Ring buffer of normalized phrases with exact-match de-duplication. A
// duplicate insert is a no-op; a fresh insert evicts the oldest entry once
// the bank is full.
class MemoryBank {
 public:
  explicit MemoryBank(size_t capacity = 1000) : capacity_(capacity) {}

  void insert(const std::string& phrase) {
    std::string p = normalize_phrase(phrase);
    if (p.empty()) return;
    for (const auto& q : buf_)
      if (q == p) return;
    if (buf_.size() == capacity_) buf_.erase(buf_.begin());
    buf_.push_back(std::move(p));
  }

  size_t size() const { return buf_.size(); }
  size_t capacity() const { return capacity_; }
  const std::vector<std::string>& phrases() const { return buf_; }

 private:
  size_t capacity_;
  std::vector<std::string> buf_;  // oldest first
};

// Draws up to n phrases, disjoint from the positives, without replacement
// from the bank joined with a static dictionary.
inline std::vector<std::string> sample_negatives(const MemoryBank& bank,
                                                 const std::vector<std::string>& dictionary,
                                                 const std::vector<std::string>& positives, size_t n,
                                                 Rng& rng) {
  std::vector<std::string> pos_norm;
  for (const auto& p : positives) pos_norm.push_back(normalize_phrase(p));
  std::vector<std::string> pool;
  auto add = [&](const std::string& raw) {
    std::string p = normalize_phrase(raw);
    if (p.empty()) return;
    for (const auto& q : pos_norm)
      if (q == p) return;
    for (const auto& q : pool)
      if (q == p) return;
    pool.push_back(p);
  };
  for (const auto& p : bank.phrases()) add(p);
  for (const auto& p : dictionary) add(p);
  rng.shuffle(pool);
  if (pool.size() > n) pool.resize(n);
  return pool;
}

}  // namespace cpdet
