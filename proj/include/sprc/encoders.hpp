#pragma once

// Toy transformer encoders: the frozen image encoder (shared by the reference
// and target sides, each with its own output head) and the prompt-aware text
// encoder, plus the EMA shadow of the text encoder.

#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <unordered_map>

#include "sprc/autograd.hpp"
#include "sprc/dataset.hpp"

namespace sprc {

struct ModelConfig {
  std::size_t vocab_size = 16;
  std::size_t d_img = 32;
  std::size_t d_model = 32;  // also the text-token (prompt) width
  std::size_t d_embed = 32;
  std::size_t n_heads = 2;
  std::size_t d_ff = 64;
  std::size_t n_layers_text = 1;
  std::size_t n_layers_img = 1;
  std::size_t gen_layers = 1;
  std::size_t mlp_layers = 2;
  std::size_t prompt_length = 8;
  std::size_t max_caption_len = kDefaultMaxCaptionLen;
  std::size_t inversion_hidden = 32;
  double tau = 100.0;
  bool tau_trainable = false;

  std::size_t max_text_len() const { return prompt_length + max_caption_len; }

  void validate() const {
    if (d_model == 0 || d_embed == 0 || d_img == 0 || vocab_size == 0 || d_ff == 0)
      throw ConfigError("model: dimensions must be positive");
    if (n_heads == 0 || d_model % n_heads != 0) throw ConfigError("model: d_model must be divisible by n_heads");
    if (mlp_layers == 0) throw ConfigError("model: mlp_layers must be >= 1");
    if (!(tau > 0)) throw ConfigError("model: tau must be positive");
  }
};

template <class T>
using ParamMap = std::map<std::string, Parameter<T>>;

template <class T>
struct Model {
  ModelConfig cfg;
  ParamMap<T> params;

  const Matrix<T>& value(const std::string& name) const {
    auto it = params.find(name);
    if (it == params.end()) throw StructuralError("missing parameter '" + name + "'");
    return it->second.value;
  }
  T tau() const { return value("tau")[0]; }
};

/// Per-tape binding of named parameters to Vars. Binding a const map (the EMA
/// shadow) yields constants only, so nothing can flow back into it.
template <class T>
class Bound {
 public:
  Bound(Tape<T>& tape, ParamMap<T>& params) : tape_(tape), mut_(&params), cst_(&params) {}
  Bound(Tape<T>& tape, const ParamMap<T>& params) : tape_(tape), cst_(&params) {}

  Var<T> operator()(const std::string& name) {
    if (auto it = cache_.find(name); it != cache_.end()) return it->second;
    Var<T> v;
    if (mut_ != nullptr) {
      auto it = mut_->find(name);
      if (it == mut_->end()) throw StructuralError("missing parameter '" + name + "'");
      v = tape_.parameter(it->second);
    } else {
      auto it = cst_->find(name);
      if (it == cst_->end()) throw StructuralError("missing parameter '" + name + "'");
      v = tape_.constant(it->second.value);
    }
    cache_.emplace(name, v);
    return v;
  }

  bool has(const std::string& name) const { return cst_->count(name) != 0; }
  Tape<T>& tape() { return tape_; }

 private:
  Tape<T>& tape_;
  ParamMap<T>* mut_ = nullptr;
  const ParamMap<T>* cst_ = nullptr;
  std::unordered_map<std::string, Var<T>> cache_;
};

namespace detail {

template <class T>
void add_param(ParamMap<T>& m, const std::string& name, Matrix<T> value, bool frozen = false) {
  Parameter<T> p;
  p.value = std::move(value);
  p.frozen = frozen;
  p.zero_grad();
  m[name] = std::move(p);
}

template <class T>
Matrix<T> init_weight(std::size_t in, std::size_t out, std::mt19937_64& rng) {
  return random_normal<T>(in, out, rng, 1.0 / std::sqrt(double(in)));
}

}  // namespace detail

template <class T>
void init_block(ParamMap<T>& m, const std::string& pre, std::size_t d, std::size_t d_ff, std::mt19937_64& rng,
                bool frozen) {
  detail::add_param(m, pre + "ln1_g", Matrix<T>(1, d, T(1)), frozen);
  detail::add_param(m, pre + "ln1_b", Matrix<T>(1, d), frozen);
  for (const char* w : {"wq", "wk", "wv", "wo"}) detail::add_param(m, pre + w, detail::init_weight<T>(d, d, rng), frozen);
  detail::add_param(m, pre + "ln2_g", Matrix<T>(1, d, T(1)), frozen);
  detail::add_param(m, pre + "ln2_b", Matrix<T>(1, d), frozen);
  detail::add_param(m, pre + "w1", detail::init_weight<T>(d, d_ff, rng), frozen);
  detail::add_param(m, pre + "b1", Matrix<T>(1, d_ff), frozen);
  detail::add_param(m, pre + "w2", detail::init_weight<T>(d_ff, d, rng), frozen);
  detail::add_param(m, pre + "b2", Matrix<T>(1, d), frozen);
}

/// Text encoder (text/...), frozen image encoder (image/...), and the
/// trainable target projection (target_head/proj).
template <class T>
void init_encoder_params(Model<T>& model, std::mt19937_64& rng) {
  const ModelConfig& c = model.cfg;
  auto& m = model.params;
  detail::add_param(m, "text/tok_emb", random_normal<T>(c.vocab_size, c.d_model, rng, 1.0));
  detail::add_param(m, "text/pos_emb", random_normal<T>(c.max_text_len(), c.d_model, rng, 0.1));
  for (std::size_t l = 0; l < c.n_layers_text; ++l)
    init_block(m, "text/blk" + std::to_string(l) + "/", c.d_model, c.d_ff, rng, false);
  detail::add_param(m, "text/proj", detail::init_weight<T>(c.d_model, c.d_embed, rng));

  detail::add_param(m, "image/in_proj", detail::init_weight<T>(c.d_img, c.d_model, rng), true);
  detail::add_param(m, "image/in_bias", Matrix<T>(1, c.d_model), true);
  for (std::size_t l = 0; l < c.n_layers_img; ++l)
    init_block(m, "image/blk" + std::to_string(l) + "/", c.d_model, c.d_ff, rng, true);
  detail::add_param(m, "image/ref_head", detail::init_weight<T>(c.d_model, c.d_embed, rng), true);
  detail::add_param(m, "target_head/proj", detail::init_weight<T>(c.d_model, c.d_embed, rng));

  detail::add_param(m, "tau", Matrix<T>(1, 1, static_cast<T>(c.tau)), !c.tau_trainable);
}

// -- building blocks ---------------------------------------------------------

template <class T>
Var<T> multi_head_attention(Bound<T>& P, const std::string& pre, Var<T> xq, Var<T> xkv, std::size_t n_heads) {
  using namespace ad;
  Var<T> q = matmul(xq, P(pre + "wq"));
  Var<T> k = matmul(xkv, P(pre + "wk"));
  Var<T> v = matmul(xkv, P(pre + "wv"));
  const std::size_t d = q.cols();
  const std::size_t dh = d / n_heads;
  const T inv_sqrt = T(1) / std::sqrt(T(dh));
  if (n_heads == 1) return matmul(matmul(softmax_rows(scale(matmul_nt(q, k), inv_sqrt)), v), P(pre + "wo"));
  std::vector<Var<T>> heads;
  for (std::size_t h = 0; h < n_heads; ++h) {
    Var<T> qh = slice_cols(q, h * dh, dh);
    Var<T> kh = slice_cols(k, h * dh, dh);
    Var<T> vh = slice_cols(v, h * dh, dh);
    heads.push_back(matmul(softmax_rows(scale(matmul_nt(qh, kh), inv_sqrt)), vh));
  }
  return matmul(concat_cols(heads), P(pre + "wo"));
}

template <class T>
Var<T> feed_forward(Bound<T>& P, const std::string& pre, Var<T> x) {
  using namespace ad;
  Var<T> h = gelu(add_row(matmul(x, P(pre + "w1")), P(pre + "b1")));
  return add_row(matmul(h, P(pre + "w2")), P(pre + "b2"));
}

/// Pre-norm transformer block: self-attention then feed-forward, residual.
template <class T>
Var<T> transformer_block(Bound<T>& P, const std::string& pre, Var<T> x, std::size_t n_heads) {
  using namespace ad;
  Var<T> h = layer_norm(x, P(pre + "ln1_g"), P(pre + "ln1_b"));
  x = add(x, multi_head_attention(P, pre, h, h, n_heads));
  return add(x, feed_forward(P, pre, layer_norm(x, P(pre + "ln2_g"), P(pre + "ln2_b"))));
}

// -- image side --------------------------------------------------------------

enum class ImageHead { Reference, Target };

template <class T>
struct ImageEncoding {
  Matrix<T> patch_states;  // [n_patches x d_model]
  Matrix<T> pooled;        // [1 x d_embed], unit norm
};

template <class T>
Var<T> image_patch_states(Bound<T>& P, const ImageFeatures& features, const ModelConfig& cfg) {
  using namespace ad;
  if (!all_finite(features.patches)) throw NumericError("non-finite image features");
  Var<T> x = P.tape().constant(features.patches.template cast<T>());
  x = add_row(matmul(x, P("image/in_proj")), P("image/in_bias"));
  for (std::size_t l = 0; l < cfg.n_layers_img; ++l)
    x = transformer_block(P, "image/blk" + std::to_string(l) + "/", x, cfg.n_heads);
  return x;
}

/// Pooled embedding: mean patch state through the selected head, L2-normalized.
template <class T>
Var<T> pooled_image_embedding(Bound<T>& P, Var<T> mean_state, ImageHead head) {
  using namespace ad;
  return l2_normalize_rows(matmul(mean_state, P(head == ImageHead::Reference ? "image/ref_head" : "target_head/proj")));
}

template <class T>
ImageEncoding<T> encode_image(const ImageFeatures& features, const Model<T>& model, ImageHead head) {
  Tape<T> tape;
  Bound<T> P(tape, model.params);
  Var<T> states = image_patch_states(P, features, model.cfg);
  Var<T> pooled = pooled_image_embedding(P, ad::mean_rows(states), head);
  return {states.value(), pooled.value()};
}

// -- text side ---------------------------------------------------------------

/// f_zeta over (prompt rows ⊕ caption tokens): mean-pooled, projected,
/// L2-normalized. `prompt` may be absent (zero-length prompt).
template <class T>
Var<T> encode_text(Bound<T>& P, std::optional<Var<T>> prompt, const TokenSequence& caption, const ModelConfig& cfg) {
  using namespace ad;
  if (caption.size() == 0) throw LengthError("empty caption");
  const std::size_t lp = prompt ? prompt->rows() : 0;
  const std::size_t total = lp + caption.size();
  if (total > cfg.max_text_len())
    throw LengthError("augmented query length " + std::to_string(total) + " exceeds " +
                      std::to_string(cfg.max_text_len()));
  for (auto id : caption.ids)
    if (id >= cfg.vocab_size) throw VocabularyError("token id " + std::to_string(id) + " out of range");
  Var<T> x = gather_rows(P("text/tok_emb"), caption.ids);
  if (prompt && lp > 0) {
    if (prompt->cols() != cfg.d_model) throw StructuralError("prompt width must equal d_model");
    x = concat_rows<T>({*prompt, x});
  }
  x = add(x, slice_rows(P("text/pos_emb"), 0, total));
  for (std::size_t l = 0; l < cfg.n_layers_text; ++l)
    x = transformer_block(P, "text/blk" + std::to_string(l) + "/", x, cfg.n_heads);
  return l2_normalize_rows(matmul(mean_rows(x), P("text/proj")));
}

// -- EMA shadow --------------------------------------------------------------

/// Copies every text-encoder tensor (text/...) into a gradient-free shadow.
template <class T>
ParamMap<T> params_clone_for_ema(const ParamMap<T>& params) {
  ParamMap<T> shadow;
  for (const auto& [name, p] : params) {
    if (name.rfind("text/", 0) != 0) continue;
    Parameter<T> s;
    s.value = p.value;
    s.frozen = true;
    s.zero_grad();
    shadow.emplace(name, std::move(s));
  }
  return shadow;
}

/// shadow <- m * shadow + (1 - m) * live, element-wise.
template <class T>
void apply_ema(ParamMap<T>& shadow, const ParamMap<T>& live, T decay) {
  if (!(decay >= T(0) && decay <= T(1))) throw ConfigError("EMA decay must lie in [0, 1]");
  for (const auto& [name, s] : shadow) {
    auto it = live.find(name);
    if (it == live.end()) throw StructuralError("EMA: live parameters lack '" + name + "'");
    if (!it->second.value.same_shape(s.value)) throw StructuralError("EMA: shape mismatch for '" + name + "'");
  }
  const T keep = decay, mix = T(1) - decay;
  for (auto& [name, s] : shadow) {
    const Matrix<T>& l = live.at(name).value;
    for (std::size_t i = 0; i < s.value.size(); ++i) s.value[i] = keep * s.value[i] + mix * l[i];
  }
}

}  // namespace sprc
