#pragma once

// Outer training loop: batch assembly, AdamW with decoupled weight decay,
// cosine learning-rate schedule, EMA maintenance and checkpoints.

#include <cmath>
#include <numbers>
#include <random>
#include <span>
#include <sstream>

#include <json.hpp>

#include "sprc/config.hpp"

namespace sprc {

/// base_lr * 0.5 * (1 + cos(pi * step / total)); steps past the end clamp to 0.
inline double cosine_lr(std::size_t step, std::size_t total_steps, double base_lr) {
  if (total_steps == 0) return base_lr;
  if (step > total_steps) {
    warn("cosine_lr: step " + std::to_string(step) + " beyond schedule end " + std::to_string(total_steps) +
         "; using 0");
    return 0.0;
  }
  if (step == total_steps) return 0.0;
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * double(step) / double(total_steps)));
}

template <class T>
struct AdamWState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t t = 0;
  std::map<std::string, Matrix<T>> m, v;
};

/// One AdamW update over every non-frozen parameter: decay first, then the
/// bias-corrected adaptive step.
template <class T>
void adamw_step(ParamMap<T>& params, AdamWState<T>& st, double lr, double weight_decay) {
  ++st.t;
  const T b1 = static_cast<T>(st.beta1), b2 = static_cast<T>(st.beta2);
  const T c1 = T(1) - static_cast<T>(std::pow(st.beta1, double(st.t)));
  const T c2 = T(1) - static_cast<T>(std::pow(st.beta2, double(st.t)));
  const T lr_t = static_cast<T>(lr);
  const T shrink = T(1) - static_cast<T>(lr * weight_decay);
  const T eps = static_cast<T>(st.eps);
  for (auto& [name, p] : params) {
    if (p.frozen) continue;
    if (p.grad.empty()) p.zero_grad();
    auto& m = st.m[name];
    auto& v = st.v[name];
    if (m.empty()) m = Matrix<T>(p.value.rows(), p.value.cols());
    if (v.empty()) v = Matrix<T>(p.value.rows(), p.value.cols());
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const T g = p.grad[i];
      m[i] = b1 * m[i] + (T(1) - b1) * g;
      v[i] = b2 * v[i] + (T(1) - b2) * g * g;
      const T mhat = m[i] / c1;
      const T vhat = v[i] / c2;
      p.value[i] = p.value[i] * shrink - lr_t * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

/// Scales all trainable gradients so their global L2 norm is at most
/// `max_norm` (0 disables). Returns the norm before clipping.
template <class T>
T clip_grad_norm(ParamMap<T>& params, double max_norm) {
  T sq = 0;
  for (auto& [_, p] : params)
    if (!p.frozen && !p.grad.empty())
      for (T g : p.grad.flat()) sq += g * g;
  const T norm = std::sqrt(sq);
  if (max_norm > 0 && norm > T(max_norm)) {
    const T s = T(max_norm) / norm;
    for (auto& [_, p] : params)
      if (!p.frozen && !p.grad.empty())
        for (T& g : p.grad.flat()) g *= s;
  }
  return norm;
}

template <class T>
void zero_grads(ParamMap<T>& params) {
  for (auto& [_, p] : params) p.zero_grad();
}

struct LossComponents {
  double contrastive = 0;
  double alignment = 0;
  double total = 0;
  double lr = 0;
};

/// Frozen-encoder outputs per corpus image. The image encoder never trains,
/// so these are computed once.
template <class T>
struct EncodedCorpus {
  std::vector<Matrix<T>> patch_states;
  std::vector<Matrix<T>> mean_state;  // [1 x d_model]
  std::vector<Matrix<T>> ref_pooled;  // [1 x d_embed]
};

template <class T>
EncodedCorpus<T> encode_frozen(const Corpus& corpus, const Model<T>& model) {
  EncodedCorpus<T> out;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    Tape<T> tape;
    Bound<T> P(tape, model.params);
    Var<T> states;
    try {
      states = image_patch_states(P, corpus.features(i), model.cfg);
    } catch (const Error& e) {
      throw NumericError("image '" + corpus.id(i) + "': " + e.what());
    }
    Var<T> mean = ad::mean_rows(states);
    out.patch_states.push_back(states.value());
    out.mean_state.push_back(mean.value());
    out.ref_pooled.push_back(pooled_image_embedding(P, mean, ImageHead::Reference).value());
  }
  return out;
}

/// Extra observations from the last step, used by leak and contract checks.
template <class T>
struct StepDiagnostics {
  std::vector<Matrix<T>> prompts;
  std::vector<Matrix<T>> aux_prompts;
  std::vector<Matrix<T>> aux_prompt_grads;  // gradient reaching each p_aux leaf
  T grad_norm = 0;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::string_view kCheckpointMagic = "SPRCCKPT";

namespace detail {

inline nlohmann::json read_checkpoint_preamble(io::Reader& rd, std::string_view bytes) {
  if (bytes.size() < kCheckpointMagic.size() || bytes.substr(0, kCheckpointMagic.size()) != kCheckpointMagic)
    throw FormatError("checkpoint: bad magic bytes");
  rd.take(kCheckpointMagic.size());
  const std::uint32_t version = rd.u32();
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint format_version " + std::to_string(version) + " is not supported (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  const std::uint64_t hlen = rd.u64();
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(rd.take(hlen));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header: ") + e.what());
  }
  if (h.at("format_version").get<std::uint32_t>() != version)
    throw FormatError("checkpoint: header format_version disagrees with preamble");
  return h;
}

}  // namespace detail

template <class T>
class Trainer {
 public:
  Trainer(TrainConfig cfg, const Corpus& corpus, std::vector<Triplet> triplets, std::size_t vocab_size)
      : cfg_(std::move(cfg)), corpus_(&corpus), triplets_(std::move(triplets)) {
    cfg_.normalize();
    cfg_.validate();
    if (corpus.size() == 0) throw ConfigError("training corpus is empty");
    if (triplets_.size() < cfg_.batch_size)
      throw ConfigError("batch_size " + std::to_string(cfg_.batch_size) + " exceeds the " +
                        std::to_string(triplets_.size()) + " training triplets");
    for (const auto& t : triplets_) validate_triplet(t, corpus_);
    model_ = make_model<T>(cfg_.model_config(vocab_size, corpus.features(0).patches.cols()), cfg_.seed,
                           cfg_.mechanism);
    ema_ = params_clone_for_ema(model_.params);
    rng_.seed(cfg_.seed ^ 0x9e3779b97f4a7c15ULL);
    order_.resize(triplets_.size());
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    cursor_ = order_.size();
    frozen_ = encode_frozen(corpus, model_);
  }

  const TrainConfig& config() const { return cfg_; }
  const Model<T>& model() const { return model_; }
  Model<T>& model() { return model_; }
  const ParamMap<T>& ema() const { return ema_; }
  ParamMap<T>& ema() { return ema_; }
  const AdamWState<T>& optimizer() const { return opt_; }
  std::size_t step() const { return step_; }
  const StepDiagnostics<T>& diagnostics() const { return diag_; }
  const EncodedCorpus<T>& frozen_encodings() const { return frozen_; }

  /// Next batch in epoch order; the order is reshuffled at each epoch start.
  std::vector<Triplet> next_batch() {
    std::vector<Triplet> batch;
    while (batch.size() < cfg_.batch_size) {
      if (cursor_ >= order_.size()) {
        std::shuffle(order_.begin(), order_.end(), rng_);
        cursor_ = 0;
      }
      batch.push_back(triplets_[order_[cursor_++]]);
    }
    return batch;
  }

  /// Query and target embeddings plus the contrastive term for `batch`.
  struct LossGraph {
    Var<T> contrastive, alignment, total;
    std::vector<Var<T>> prompts;
    std::vector<Var<T>> aux_leaves;
    Matrix<T> targets;
  };

  LossGraph build_contrastive(Tape<T>& tape, std::span<const Triplet> batch) {
    using namespace ad;
    Bound<T> P(tape, model_.params);
    const ModelConfig& mc = model_.cfg;
    LossGraph g;
    std::vector<Var<T>> us, vs;
    for (const auto& t : batch) {
      const std::size_t ref = corpus_->index_of(t.reference_id);
      const std::size_t tgt = corpus_->index_of(t.target_id);
      ReferenceView<T> view{&frozen_.patch_states[ref], &frozen_.ref_pooled[ref]};
      auto q = query_embedding(P, view, t.caption, mc, cfg_.mechanism, cfg_.prompt_mode);
      us.push_back(q.embedding);
      if (q.prompt) g.prompts.push_back(*q.prompt);
      vs.push_back(pooled_image_embedding(P, tape.constant(frozen_.mean_state[tgt]), ImageHead::Target));
    }
    Var<T> V = concat_rows(vs);
    g.targets = V.value();
    g.contrastive = contrastive_loss(concat_rows(us), V, P("tau"));
    return g;
  }

  /// Completes L = Lc + gamma * La given already-solved auxiliary prompts (one
  /// per generated prompt, or none for La = 0). With p' fixed, L is a plain
  /// function of the live parameters.
  void attach_alignment(Tape<T>& tape, LossGraph& g, const std::vector<Matrix<T>>& aux_prompts) {
    using namespace ad;
    if (!aux_prompts.empty()) {
      if (aux_prompts.size() != g.prompts.size()) throw StructuralError("one auxiliary prompt per sample required");
      std::vector<Var<T>> terms;
      for (std::size_t i = 0; i < g.prompts.size(); ++i) {
        // p' enters as a leaf so that a gradient leak would be observable on it
        Var<T> leaf = tape.variable(aux_prompts[i]);
        g.aux_leaves.push_back(leaf);
        const Matrix<T> target = stop_gradient(leaf).value();
        terms.push_back(alignment_loss(g.prompts[i], target, cfg_.align_norm));
      }
      g.alignment = scale(add_n(terms), T(1) / T(terms.size()));
    } else {
      g.alignment = tape.constant(Matrix<T>(1, 1));
    }
    g.total = total_loss(g.contrastive, g.alignment, static_cast<T>(cfg_.gamma));
  }

  LossGraph build_loss(Tape<T>& tape, std::span<const Triplet> batch, const std::vector<Matrix<T>>& aux_prompts) {
    LossGraph g = build_contrastive(tape, batch);
    attach_alignment(tape, g, aux_prompts);
    return g;
  }

  std::vector<Matrix<T>> solve_auxiliary(const LossGraph& g, std::span<const Triplet> batch) const {
    std::vector<Matrix<T>> aux;
    for (std::size_t i = 0; i < g.prompts.size(); ++i) {
      try {
        aux.push_back(solve_auxiliary_prompt(g.prompts[i].value(), batch[i].caption, g.targets, i, ema_,
                                             model_.tau(), model_.cfg, cfg_.aux));
      } catch (const NumericError& e) {
        // the caller attaches the training step
        throw NumericError("sample " + std::to_string(i) + ", inner " + e.what());
      }
    }
    return aux;
  }

  bool uses_alignment() const { return cfg_.mechanism == Mechanism::Sprc && cfg_.gamma > 0.0; }

  LossComponents train_step(std::span<const Triplet> batch) {
    if (batch.size() != cfg_.batch_size)
      throw StructuralError("batch of " + std::to_string(batch.size()) + " != batch_size " +
                            std::to_string(cfg_.batch_size));
    const long step_idx = static_cast<long>(step_);
    try {
      const double lr = cosine_lr(std::min(step_, cfg_.steps), cfg_.steps, cfg_.lr);
      diag_ = {};
      Tape<T> tape;
      LossGraph g = build_contrastive(tape, batch);
      std::vector<Matrix<T>> aux;
      if (uses_alignment()) aux = solve_auxiliary(g, batch);
      attach_alignment(tape, g, aux);
      const T total = g.total.scalar();
      if (!std::isfinite(total)) throw NumericError("loss is not finite", step_idx);
      zero_grads(model_.params);
      tape.backward(g.total);
      for (auto& p : g.prompts) diag_.prompts.push_back(p.value());
      diag_.aux_prompts = aux;
      for (auto& leaf : g.aux_leaves) diag_.aux_prompt_grads.push_back(tape.grad(leaf));
      diag_.grad_norm = clip_grad_norm(model_.params, cfg_.clip_norm);
      if (!std::isfinite(diag_.grad_norm)) throw NumericError("gradient is not finite", step_idx);
      adamw_step(model_.params, opt_, lr, cfg_.weight_decay);
      apply_ema(ema_, model_.params, static_cast<T>(cfg_.ema_decay));
      ++step_;
      return {static_cast<double>(g.contrastive.scalar()), static_cast<double>(g.alignment.scalar()),
              static_cast<double>(total), lr};
    } catch (const NumericError& e) {
      if (e.step() >= 0) throw;
      throw NumericError(e.what(), step_idx);
    } catch (const StructuralError& e) {
      throw StructuralError("step " + std::to_string(step_idx) + ": " + e.what());
    }
  }

  LossComponents train_step() {
    auto batch = next_batch();
    return train_step(batch);
  }

  // -- checkpointing --

  std::string serialize() const {
    nlohmann::json h;
    h["format_version"] = kCheckpointVersion;
    h["dtype"] = sizeof(T) == 8 ? "f64" : "f32";
    h["step"] = step_;
    h["config"] = config_map(cfg_);
    h["model"] = {{"vocab_size", model_.cfg.vocab_size}, {"d_img", model_.cfg.d_img}};
    std::ostringstream rs;
    rs << rng_;
    h["rng"] = rs.str();
    h["sampler"] = {{"order", order_}, {"cursor", cursor_}};
    h["optimizer"] = {{"t", opt_.t}, {"beta1", opt_.beta1}, {"beta2", opt_.beta2}, {"eps", opt_.eps}};
    nlohmann::json tensors = nlohmann::json::array();
    std::string payload;
    auto add = [&](const std::string& key, const Matrix<T>& m, std::optional<bool> frozen) {
      nlohmann::json e{{"key", key}, {"shape", {m.rows(), m.cols()}}};
      if (frozen) e["frozen"] = *frozen;
      tensors.push_back(e);
      for (T v : m.flat()) {
        if constexpr (sizeof(T) == 8)
          io::put_f64(payload, v);
        else
          io::put_f32(payload, v);
      }
    };
    for (const auto& [name, p] : model_.params) add(name, p.value, p.frozen);
    for (const auto& [name, p] : ema_) add("ema/" + name, p.value, std::nullopt);
    for (const auto& [name, m] : opt_.m) add("optim/m/" + name, m, std::nullopt);
    for (const auto& [name, v] : opt_.v) add("optim/v/" + name, v, std::nullopt);
    h["tensors"] = tensors;
    const std::string header = h.dump();
    std::string out(kCheckpointMagic);
    io::put_u32(out, kCheckpointVersion);
    io::put_u64(out, header.size());
    out += header;
    out += payload;
    return out;
  }

  void save(const std::filesystem::path& path) const { io::write_file_atomic(path, serialize()); }

  /// Restores a trainer from checkpoint bytes; `corpus` and `triplets` must be
  /// the training data the checkpoint was produced with.
  static Trainer deserialize(std::string_view bytes, const Corpus& corpus, std::vector<Triplet> triplets) {
    io::Reader rd(bytes);
    nlohmann::json h = detail::read_checkpoint_preamble(rd, bytes);
    const bool f64 = h.at("dtype").get<std::string>() == "f64";

    TrainConfig cfg;
    for (auto it = h.at("config").begin(); it != h.at("config").end(); ++it)
      set_config_value(cfg, it.key(), it.value().template get<std::string>());
    Trainer tr(cfg, corpus, std::move(triplets), h.at("model").at("vocab_size").get<std::size_t>());
    tr.step_ = h.at("step").get<std::size_t>();
    std::istringstream rs(h.at("rng").get<std::string>());
    rs >> tr.rng_;
    tr.order_ = h.at("sampler").at("order").get<std::vector<std::size_t>>();
    tr.cursor_ = h.at("sampler").at("cursor").get<std::size_t>();
    if (tr.order_.size() != tr.triplets_.size()) throw StructuralError("checkpoint: sampler does not match the data");
    tr.opt_.t = h.at("optimizer").at("t").get<std::uint64_t>();
    tr.opt_.m.clear();
    tr.opt_.v.clear();

    for (const auto& e : h.at("tensors")) {
      const std::string key = e.at("key").get<std::string>();
      const auto shape = e.at("shape").get<std::vector<std::size_t>>();
      Matrix<T> m(shape.at(0), shape.at(1));
      for (auto& v : m.flat()) v = f64 ? static_cast<T>(rd.f64()) : static_cast<T>(rd.f32());
      auto strip = [&](std::string_view prefix) { return key.substr(prefix.size()); };
      if (key.starts_with("ema/")) {
        auto it = tr.ema_.find(strip("ema/"));
        if (it == tr.ema_.end() || !it->second.value.same_shape(m))
          throw StructuralError("checkpoint: unexpected tensor '" + key + "'");
        it->second.value = std::move(m);
      } else if (key.starts_with("optim/m/")) {
        tr.opt_.m[strip("optim/m/")] = std::move(m);
      } else if (key.starts_with("optim/v/")) {
        tr.opt_.v[strip("optim/v/")] = std::move(m);
      } else {
        auto it = tr.model_.params.find(key);
        if (it == tr.model_.params.end() || !it->second.value.same_shape(m))
          throw StructuralError("checkpoint: unexpected tensor '" + key + "'");
        it->second.value = std::move(m);
        it->second.frozen = e.at("frozen").get<bool>();
      }
    }
    if (rd.remaining() != 0) throw FormatError("checkpoint: trailing bytes");
    // cached frozen encodings follow the restored image-encoder weights
    tr.frozen_ = encode_frozen(corpus, tr.model_);
    return tr;
  }

  static Trainer load(const std::filesystem::path& path, const Corpus& corpus, std::vector<Triplet> triplets) {
    return deserialize(io::read_file(path), corpus, std::move(triplets));
  }

 private:
  TrainConfig cfg_;
  const Corpus* corpus_;
  std::vector<Triplet> triplets_;
  Model<T> model_;
  ParamMap<T> ema_;
  AdamWState<T> opt_;
  std::mt19937_64 rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::size_t step_ = 0;
  EncodedCorpus<T> frozen_;
  StepDiagnostics<T> diag_;
};

/// Reads only the header of a checkpoint (config echo, dtype, step).
inline nlohmann::json read_checkpoint_header(const std::filesystem::path& path) {
  const std::string bytes = io::read_file(path);
  io::Reader rd(bytes);
  return detail::read_checkpoint_preamble(rd, bytes);
}

inline TrainConfig config_from_header(const nlohmann::json& h) {
  TrainConfig cfg;
  for (auto it = h.at("config").begin(); it != h.at("config").end(); ++it)
    set_config_value(cfg, it.key(), it.value().template get<std::string>());
  return cfg;
}

/// Restores only the model parameters of a checkpoint, in precision T.
template <class T>
Model<T> load_model(const std::filesystem::path& path) {
  const std::string bytes = io::read_file(path);
  io::Reader rd(bytes);
  const nlohmann::json h = detail::read_checkpoint_preamble(rd, bytes);
  const bool f64 = h.at("dtype").get<std::string>() == "f64";
  const TrainConfig cfg = config_from_header(h);
  Model<T> model = make_model<T>(cfg.model_config(h.at("model").at("vocab_size").get<std::size_t>(),
                                                  h.at("model").at("d_img").get<std::size_t>()),
                                 cfg.seed, cfg.mechanism);
  for (const auto& e : h.at("tensors")) {
    const std::string key = e.at("key").get<std::string>();
    const auto shape = e.at("shape").get<std::vector<std::size_t>>();
    Matrix<T> m(shape.at(0), shape.at(1));
    for (auto& v : m.flat()) v = f64 ? static_cast<T>(rd.f64()) : static_cast<T>(rd.f32());
    if (key.starts_with("ema/") || key.starts_with("optim/")) continue;
    auto it = model.params.find(key);
    if (it == model.params.end() || !it->second.value.same_shape(m))
      throw StructuralError("checkpoint: unexpected tensor '" + key + "'");
    it->second.value = std::move(m);
    it->second.frozen = e.at("frozen").get<bool>();
  }
  if (rd.remaining() != 0) throw FormatError("checkpoint: trailing bytes");
  return model;
}

}  // namespace sprc
