#pragma once

// Sentence-level prompt generation from (reference patch states, caption),
// the three baseline query mechanisms, and the shared query-embedding entry
// point used by both training and evaluation.

#include <algorithm>
#include <string_view>

#include "sprc/encoders.hpp"

namespace sprc {

enum class Mechanism { Sprc, LateFusion, TextInversion, FixedPrompt };
enum class PromptMode { Full, RcOnly, RiOnly };

inline std::string_view to_string(Mechanism m) {
  switch (m) {
    case Mechanism::Sprc: return "SPRC";
    case Mechanism::LateFusion: return "LATE_FUSION";
    case Mechanism::TextInversion: return "TEXT_INVERSION";
    case Mechanism::FixedPrompt: return "FIXED_PROMPT";
  }
  return "?";
}

inline std::string_view to_string(PromptMode m) {
  switch (m) {
    case PromptMode::Full: return "FULL";
    case PromptMode::RcOnly: return "RC_ONLY";
    case PromptMode::RiOnly: return "RI_ONLY";
  }
  return "?";
}

inline constexpr std::string_view kMechanismNames = "SPRC, LATE_FUSION, TEXT_INVERSION, FIXED_PROMPT";
inline constexpr std::string_view kPromptModeNames = "FULL, RC_ONLY, RI_ONLY";

inline Mechanism parse_mechanism(std::string_view s) {
  for (auto m : {Mechanism::Sprc, Mechanism::LateFusion, Mechanism::TextInversion, Mechanism::FixedPrompt})
    if (to_string(m) == s) return m;
  throw ConfigError("unknown mechanism '" + std::string(s) + "' (valid: " + std::string(kMechanismNames) + ")");
}

inline PromptMode parse_prompt_mode(std::string_view s) {
  for (auto m : {PromptMode::Full, PromptMode::RcOnly, PromptMode::RiOnly})
    if (to_string(m) == s) return m;
  throw ConfigError("unknown prompt mode '" + std::string(s) + "' (valid: " + std::string(kPromptModeNames) + ")");
}

/// Prompt-generator (prompt_gen/...), textual-inversion head (inversion/...)
/// and static prompt (static_prompt/tokens).
template <class T>
void init_prompt_params(Model<T>& model, std::mt19937_64& rng) {
  const ModelConfig& c = model.cfg;
  auto& m = model.params;
  const std::size_t d = c.d_model;
  detail::add_param(m, "prompt_gen/query", random_normal<T>(c.prompt_length, d, rng, 1.0));
  detail::add_param(m, "prompt_gen/cap_pos", random_normal<T>(c.max_caption_len, d, rng, 0.1));
  for (std::size_t l = 0; l < c.gen_layers; ++l) {
    const std::string pre = "prompt_gen/blk" + std::to_string(l) + "/";
    init_block(m, pre, d, c.d_ff, rng, false);
    detail::add_param(m, pre + "ca_ln_g", Matrix<T>(1, d, T(1)));
    detail::add_param(m, pre + "ca_ln_b", Matrix<T>(1, d));
    detail::add_param(m, pre + "kv_ln_g", Matrix<T>(1, d, T(1)));
    detail::add_param(m, pre + "kv_ln_b", Matrix<T>(1, d));
    for (const char* w : {"ca/wq", "ca/wk", "ca/wv", "ca/wo"})
      detail::add_param(m, pre + w, detail::init_weight<T>(d, d, rng));
  }
  for (std::size_t j = 0; j < c.mlp_layers; ++j) {
    const std::string pre = "prompt_gen/mlp" + std::to_string(j) + "/";
    detail::add_param(m, pre + "w", detail::init_weight<T>(d, d, rng));
    detail::add_param(m, pre + "b", Matrix<T>(1, d));
  }
  detail::add_param(m, "inversion/w1", detail::init_weight<T>(c.d_embed, c.inversion_hidden, rng));
  detail::add_param(m, "inversion/b1", Matrix<T>(1, c.inversion_hidden));
  detail::add_param(m, "inversion/w2", detail::init_weight<T>(c.inversion_hidden, d, rng));
  detail::add_param(m, "inversion/b2", Matrix<T>(1, d));
  if (c.prompt_length > 0)
    detail::add_param(m, "static_prompt/tokens", random_normal<T>(c.prompt_length, d, rng, 1.0));
}

/// Subnets a mechanism does not use are frozen so optimizer steps (including
/// weight decay) leave them untouched.
template <class T>
void freeze_unused(Model<T>& model, Mechanism mech) {
  auto uses = [mech](std::string_view name) {
    if (name.starts_with("prompt_gen/")) return mech == Mechanism::Sprc;
    if (name.starts_with("inversion/")) return mech == Mechanism::TextInversion;
    if (name.starts_with("static_prompt/")) return mech == Mechanism::FixedPrompt;
    return true;
  };
  for (auto& [name, p] : model.params)
    if (!uses(name)) p.frozen = true;
}

template <class T>
Model<T> make_model(const ModelConfig& cfg, std::uint64_t seed, Mechanism mech = Mechanism::Sprc) {
  cfg.validate();
  Model<T> model;
  model.cfg = cfg;
  std::mt19937_64 rng(seed);
  init_encoder_params(model, rng);
  init_prompt_params(model, rng);
  freeze_unused(model, mech);
  return model;
}

// -- prompt generation -------------------------------------------------------

/// Rows sorted lexicographically, making cross-attention over patches exactly
/// independent of their input order.
template <class T>
Matrix<T> canonical_patch_order(const Matrix<T>& patches) {
  std::vector<std::size_t> order(patches.rows());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    auto ra = patches.row(a), rb = patches.row(b);
    return std::lexicographical_compare(ra.begin(), ra.end(), rb.begin(), rb.end());
  });
  Matrix<T> out(patches.rows(), patches.cols());
  for (std::size_t i = 0; i < order.size(); ++i)
    std::copy(patches.row(order[i]).begin(), patches.row(order[i]).end(), out.row(i).begin());
  return out;
}

/// Learnable queries self-attend together with the caption embeddings, cross-
/// attend to the reference patch states, pass a feed-forward layer, and the
/// query positions are projected by an MLP into prompt rows.
template <class T>
Var<T> generate_prompt(Bound<T>& P, const Matrix<T>& patch_states, const TokenSequence& caption,
                       const ModelConfig& cfg, PromptMode mode) {
  using namespace ad;
  Var<T> q = P("prompt_gen/query");
  const std::size_t lp = cfg.prompt_length;
  if (lp == 0 || q.rows() != lp)
    throw StructuralError("prompt generator has " + std::to_string(q.rows()) + " queries, configured prompt length " +
                          std::to_string(lp));
  Var<T> h = q;
  if (mode != PromptMode::RiOnly) {
    if (caption.size() > cfg.max_caption_len) throw LengthError("caption longer than max_caption_len");
    Var<T> cap = add(gather_rows(P("text/tok_emb"), caption.ids), slice_rows(P("prompt_gen/cap_pos"), 0, caption.size()));
    h = concat_rows<T>({q, cap});
  }
  std::optional<Var<T>> kv;
  if (mode != PromptMode::RcOnly) {
    if (patch_states.rows() == 0) throw StructuralError("no patch states");
    kv = P.tape().constant(canonical_patch_order(patch_states));
  }
  for (std::size_t l = 0; l < cfg.gen_layers; ++l) {
    const std::string pre = "prompt_gen/blk" + std::to_string(l) + "/";
    Var<T> n1 = layer_norm(h, P(pre + "ln1_g"), P(pre + "ln1_b"));
    h = add(h, multi_head_attention(P, pre, n1, n1, cfg.n_heads));
    if (kv) {
      Var<T> qpart = slice_rows(h, 0, lp);
      Var<T> kvn = layer_norm(*kv, P(pre + "kv_ln_g"), P(pre + "kv_ln_b"));
      Var<T> qn = layer_norm(qpart, P(pre + "ca_ln_g"), P(pre + "ca_ln_b"));
      qpart = add(qpart, multi_head_attention(P, pre + "ca/", qn, kvn, cfg.n_heads));
      h = h.rows() > lp ? concat_rows<T>({qpart, slice_rows(h, lp, h.rows() - lp)}) : qpart;
    }
    h = add(h, feed_forward(P, pre, layer_norm(h, P(pre + "ln2_g"), P(pre + "ln2_b"))));
  }
  Var<T> out = slice_rows(h, 0, lp);
  for (std::size_t j = 0; j < cfg.mlp_layers; ++j) {
    const std::string pre = "prompt_gen/mlp" + std::to_string(j) + "/";
    if (j > 0) out = gelu(out);
    out = add_row(matmul(out, P(pre + "w")), P(pre + "b"));
  }
  return out;
}

template <class T>
Matrix<T> generate_prompt(const Matrix<T>& patch_states, const TokenSequence& caption, const Model<T>& model,
                          PromptMode mode) {
  Tape<T> tape;
  Bound<T> P(tape, model.params);
  return generate_prompt(P, patch_states, caption, model.cfg, mode).value();
}

/// Q̃ = prompt rows followed by caption tokens.
template <class T>
struct AugmentedQuery {
  Matrix<T> prompt;  // [L_p x d_model], L_p may be 0
  TokenSequence caption;

  std::size_t length() const { return prompt.rows() + caption.size(); }
};

template <class T>
AugmentedQuery<T> compose_query(Matrix<T> prompt, TokenSequence caption,
                                std::size_t max_len = std::numeric_limits<std::size_t>::max()) {
  AugmentedQuery<T> q{std::move(prompt), std::move(caption)};
  if (q.length() > max_len)
    throw LengthError("augmented query length " + std::to_string(q.length()) + " exceeds " + std::to_string(max_len));
  return q;
}

template <class T>
Matrix<T> encode_text(const AugmentedQuery<T>& query, const Model<T>& model) {
  Tape<T> tape;
  Bound<T> P(tape, model.params);
  std::optional<Var<T>> prompt;
  if (query.prompt.rows() > 0) prompt = tape.constant(query.prompt);
  return encode_text(P, prompt, query.caption, model.cfg).value();
}

// -- baseline mechanisms -----------------------------------------------------

/// normalize(text(caption) + reference). An antipodal (zero) sum falls back to
/// the caption embedding with a warning.
template <class T>
Var<T> late_fusion_embed(Bound<T>& P, const Matrix<T>& reference_pooled, const TokenSequence& caption,
                         const ModelConfig& cfg) {
  using namespace ad;
  Var<T> text = encode_text<T>(P, std::nullopt, caption, cfg);
  Var<T> sum = add(text, P.tape().constant(reference_pooled));
  const T norm = l2_norm<T>(sum.value().flat());
  if (!(norm > T(1e-12) * std::sqrt(T(cfg.d_embed)))) {
    warn("late fusion: reference cancels the caption embedding; falling back to the caption embedding");
    return text;
  }
  return l2_normalize_rows(sum);
}

/// Pseudo-word token from the reference embedding via a 2-layer MLP.
template <class T>
Var<T> inversion_token(Bound<T>& P, const Matrix<T>& reference_pooled) {
  using namespace ad;
  Var<T> x = P.tape().constant(reference_pooled);
  Var<T> h = gelu(add_row(matmul(x, P("inversion/w1")), P("inversion/b1")));
  return add_row(matmul(h, P("inversion/w2")), P("inversion/b2"));
}

template <class T>
Var<T> textual_inversion_embed(Bound<T>& P, const Matrix<T>& reference_pooled, const TokenSequence& caption,
                               const ModelConfig& cfg) {
  return encode_text(P, std::optional<Var<T>>(inversion_token(P, reference_pooled)), caption, cfg);
}

template <class T>
Var<T> fixed_prompt_embed(Bound<T>& P, const TokenSequence& caption, const ModelConfig& cfg) {
  std::optional<Var<T>> prompt;
  if (P.has("static_prompt/tokens")) prompt = P("static_prompt/tokens");
  return encode_text(P, prompt, caption, cfg);
}

/// Everything a query needs from its reference image.
template <class T>
struct ReferenceView {
  const Matrix<T>* patch_states = nullptr;  // for SPRC
  const Matrix<T>* pooled = nullptr;        // reference-head embedding, for the baselines
};

template <class T>
struct QueryOutput {
  Var<T> embedding;
  std::optional<Var<T>> prompt;  // set for SPRC only
};

template <class T>
QueryOutput<T> query_embedding(Bound<T>& P, const ReferenceView<T>& ref, const TokenSequence& caption,
                               const ModelConfig& cfg, Mechanism mech, PromptMode mode) {
  switch (mech) {
    case Mechanism::Sprc: {
      Var<T> p = generate_prompt(P, *ref.patch_states, caption, cfg, mode);
      return {encode_text(P, std::optional<Var<T>>(p), caption, cfg), p};
    }
    case Mechanism::LateFusion: return {late_fusion_embed(P, *ref.pooled, caption, cfg), std::nullopt};
    case Mechanism::TextInversion: return {textual_inversion_embed(P, *ref.pooled, caption, cfg), std::nullopt};
    case Mechanism::FixedPrompt: return {fixed_prompt_embed(P, caption, cfg), std::nullopt};
  }
  throw ConfigError("unknown mechanism");
}

}  // namespace sprc
