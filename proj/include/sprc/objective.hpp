#pragma once

// Training losses: batch contrastive loss between query and target
// embeddings, the prompt alignment loss against an auxiliary prompt, and the
// inner gradient-descent solve that produces that auxiliary prompt through the
// EMA text encoder.

#include <cmath>
#include <optional>
#include <vector>

#include "sprc/prompting.hpp"

namespace sprc {

template <class T>
struct BatchEmbeddings {
  Matrix<T> U;  // query side, [B x d]
  Matrix<T> V;  // target side, [B x d]
  T tau = T(100);

  void validate(T norm_tol = T(1e-6)) const {
    if (U.rows() == 0) throw DomainError("contrastive loss over an empty batch");
    if (!U.same_shape(V)) throw StructuralError("U and V must have equal shapes");
    if (!(tau > T(0))) throw DomainError("temperature multiplier must be positive");
    for (const Matrix<T>* m : {&U, &V})
      for (std::size_t r = 0; r < m->rows(); ++r)
        if (std::abs(l2_norm<T>(m->row(r)) - T(1)) > norm_tol) throw DomainError("embedding rows must be unit-norm");
  }
};

/// -(1/B) sum_i log softmax_j(tau u_i.v_j)[i].
template <class T>
Var<T> contrastive_loss(Var<T> U, Var<T> V, Var<T> tau) {
  using namespace ad;
  if (U.rows() == 0) throw DomainError("contrastive loss over an empty batch");
  std::vector<std::size_t> diag(U.rows());
  for (std::size_t i = 0; i < diag.size(); ++i) diag[i] = i;
  return softmax_cross_entropy(scale_by(matmul_nt(U, V), tau), std::move(diag));
}

template <class T>
T contrastive_loss(const BatchEmbeddings<T>& batch) {
  batch.validate();
  Tape<T> tape;
  return contrastive_loss(tape.constant(batch.U), tape.constant(batch.V), tape.constant(Matrix<T>(1, 1, batch.tau)))
      .scalar();
}

enum class AlignNorm { Frobenius, PerTokenMean };

/// ||p - p_aux||; p_aux is a constant target.
template <class T>
Var<T> alignment_loss(Var<T> p, const Matrix<T>& p_aux, AlignNorm norm = AlignNorm::Frobenius) {
  return norm == AlignNorm::Frobenius ? ad::frobenius_distance(p, p_aux) : ad::row_distance_mean(p, p_aux);
}

template <class T>
T alignment_loss(const Matrix<T>& p, const Matrix<T>& p_aux, AlignNorm norm = AlignNorm::Frobenius) {
  if (!p.same_shape(p_aux)) throw StructuralError("alignment loss: " + shape_str(p) + " vs " + shape_str(p_aux));
  Tape<T> tape;
  return alignment_loss(tape.constant(p), p_aux, norm).scalar();
}

template <class T>
T total_loss(T contrastive, T alignment, T gamma) {
  return contrastive + gamma * alignment;
}

template <class T>
Var<T> total_loss(Var<T> contrastive, Var<T> alignment, T gamma) {
  return ad::add(contrastive, ad::scale(alignment, gamma));
}

enum class AuxInit { FromCurrentPrompt, Zero };

struct AuxiliaryConfig {
  int inner_steps = 5;
  double inner_lr = 0.1;
  AuxInit init_mode = AuxInit::FromCurrentPrompt;
  bool backtracking = true;

  static constexpr int kMaxHalvings = 10;

  void validate() const {
    if (inner_steps < 0) throw ConfigError("aux: inner_steps must be >= 0");
    if (!(inner_lr > 0.0) || inner_lr > 1.0) throw ConfigError("aux: inner_lr must lie in (0, 1]");
  }
};

/// Per-sample retrieval objective of the auxiliary prompt:
/// -log softmax_j(tau v_j . u')[row], u' = f_ema(p' ⊕ caption).
template <class T>
Var<T> auxiliary_objective(Bound<T>& ema, Var<T> prompt, const TokenSequence& caption, const Matrix<T>& targets,
                           std::size_t row, T tau, const ModelConfig& cfg) {
  using namespace ad;
  Var<T> u = encode_text(ema, std::optional<Var<T>>(prompt), caption, cfg);
  Var<T> logits = scale(matmul_nt(u, ema.tape().constant(targets)), tau);
  return softmax_cross_entropy(logits, {row});
}

template <class T>
T auxiliary_objective(const Matrix<T>& prompt, const TokenSequence& caption, const Matrix<T>& targets,
                      std::size_t row, const ParamMap<T>& ema_params, T tau, const ModelConfig& cfg) {
  Tape<T> tape;
  Bound<T> ema(tape, ema_params);
  return auxiliary_objective(ema, tape.constant(prompt), caption, targets, row, tau, cfg).scalar();
}

/// Gradient descent on the prompt alone against the EMA encoder. With
/// backtracking, each step is halved (at most kMaxHalvings times) until the
/// objective does not increase; if no such step is found the solve stops.
/// Returns a plain matrix, i.e. detached from any outer tape. `trace`, when
/// given, receives the objective at the start and after each accepted step.
/// A non-finite objective is a NumericError whose step is 0 for the initial
/// prompt and k for the candidate of inner step k.
template <class T>
Matrix<T> solve_auxiliary_prompt(const Matrix<T>& p_init, const TokenSequence& caption, const Matrix<T>& batch_targets,
                                 std::size_t row, const ParamMap<T>& ema_params, T tau, const ModelConfig& cfg,
                                 const AuxiliaryConfig& aux, std::vector<T>* trace = nullptr) {
  aux.validate();
  if (row >= batch_targets.rows()) throw StructuralError("aux: row index outside the batch");
  if (aux.inner_steps == 0 || batch_targets.rows() == 1) return p_init;

  Matrix<T> p = aux.init_mode == AuxInit::Zero ? Matrix<T>(p_init.rows(), p_init.cols()) : p_init;

  struct Eval {
    T value;
    Matrix<T> grad;
  };
  auto evaluate = [&](const Matrix<T>& x, bool want_grad, int k) {
    Tape<T> tape;
    Bound<T> ema(tape, ema_params);
    Var<T> pv = want_grad ? tape.variable(x) : tape.constant(x);
    std::optional<Var<T>> f;
    try {
      f = auxiliary_objective(ema, pv, caption, batch_targets, row, tau, cfg);
    } catch (const NumericError& err) {
      throw NumericError(std::string("auxiliary objective: ") + err.what(), k);
    }
    Eval e{f->scalar(), {}};
    if (want_grad) {
      tape.backward(*f);
      e.grad = tape.grad(pv);
    }
    return e;
  };

  Eval cur = evaluate(p, true, 0);
  if (!std::isfinite(cur.value)) throw NumericError("auxiliary objective is not finite", 0);
  if (trace) trace->push_back(cur.value);
  const T lr = static_cast<T>(aux.inner_lr);
  for (int k = 0; k < aux.inner_steps; ++k) {
    if (std::all_of(cur.grad.flat().begin(), cur.grad.flat().end(), [](T g) { return g == T(0); })) break;
    const bool need_grad = k + 1 < aux.inner_steps;
    T step = lr;
    bool accepted = false;
    for (int h = 0; h <= (aux.backtracking ? AuxiliaryConfig::kMaxHalvings : 0); ++h, step /= T(2)) {
      Matrix<T> cand = p;
      for (std::size_t i = 0; i < cand.size(); ++i) cand[i] -= step * cur.grad[i];
      Eval next;
      try {
        next = evaluate(cand, need_grad, k + 1);
      } catch (const NumericError&) {
        if (aux.backtracking) continue;
        throw;
      }
      if (!std::isfinite(next.value)) {
        if (aux.backtracking) continue;
        throw NumericError("auxiliary objective is not finite", k + 1);
      }
      if (aux.backtracking && next.value > cur.value) continue;
      p = std::move(cand);
      cur = std::move(next);
      if (trace) trace->push_back(cur.value);
      accepted = true;
      break;
    }
    if (!accepted) break;
  }
  return p;
}

}  // namespace sprc
