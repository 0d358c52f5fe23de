#pragma once

// Retrieval evaluation: corpus embedding, ranking, Recall@K and
// Recall_subset@K, class averages, result export and two-stage re-ranking.

#include <algorithm>
#include <map>
#include <memory>
#include <numeric>
#include <sstream>
#include <optional>

#include <json.hpp>

#include "sprc/training.hpp"

namespace sprc {

template <class T>
struct CorpusEmbeddings {
  std::vector<std::string> ids;
  Matrix<T> values;  // [N x d_embed], target head, unit rows
};

template <class T>
CorpusEmbeddings<T> embed_corpus(const Corpus& corpus, const Model<T>& model) {
  CorpusEmbeddings<T> out{corpus.ids(), Matrix<T>(corpus.size(), model.cfg.d_embed)};
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    Matrix<T> pooled;
    try {
      pooled = encode_image(corpus.features(i), model, ImageHead::Target).pooled;
    } catch (const Error& e) {
      throw NumericError("image '" + corpus.id(i) + "': " + e.what());
    }
    std::copy(pooled.flat().begin(), pooled.flat().end(), out.values.row(i).begin());
  }
  return out;
}

struct RankedResult {
  std::string query_id;
  std::vector<std::string> ranked_ids;  // best first
  std::vector<double> scores;           // parallel to ranked_ids
  std::size_t target_rank = 0;          // 1-based
  std::optional<std::size_t> subset_rank;

  friend bool operator==(const RankedResult&, const RankedResult&) = default;
};

namespace detail {

inline void fill_ranks(RankedResult& r, const Triplet& t) {
  r.target_rank = 0;
  r.subset_rank.reset();
  std::size_t in_subset = 0;
  for (std::size_t k = 0; k < r.ranked_ids.size(); ++k) {
    const std::string& id = r.ranked_ids[k];
    if (id == t.target_id) r.target_rank = k + 1;
    if (t.subset_ids && std::find(t.subset_ids->begin(), t.subset_ids->end(), id) != t.subset_ids->end()) {
      ++in_subset;
      if (id == t.target_id) r.subset_rank = in_subset;
    }
  }
  if (r.target_rank == 0) throw ReferentialError(t.query_id + ": target '" + t.target_id + "' is not a candidate");
}

}  // namespace detail

/// Ranks all candidates by descending score; ties go to the lower corpus
/// index. The reference image is dropped from the pool when requested.
inline RankedResult rank_by_scores(const Triplet& t, const std::vector<std::string>& ids,
                                   std::span<const double> scores, bool exclude_reference = true) {
  if (scores.size() != ids.size()) throw StructuralError("rank: one score per candidate required");
  if (std::find(ids.begin(), ids.end(), t.target_id) == ids.end())
    throw ReferentialError(t.query_id + ": target '" + t.target_id + "' not in corpus");
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < ids.size(); ++i)
    if (!(exclude_reference && ids[i] == t.reference_id)) order.push_back(i);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  });
  RankedResult r;
  r.query_id = t.query_id;
  for (auto i : order) {
    r.ranked_ids.push_back(ids[i]);
    r.scores.push_back(scores[i]);
  }
  detail::fill_ranks(r, t);
  return r;
}

/// Binds a trained model to an evaluation corpus.
template <class T>
class Retriever {
 public:
  Retriever(const Model<T>& model, const Corpus& corpus)
      : model_(&model), corpus_(&corpus), frozen_(encode_frozen(corpus, model)), embs_(embed_corpus(corpus, model)) {}

  const CorpusEmbeddings<T>& corpus_embeddings() const { return embs_; }

  Matrix<T> query_vector(const Triplet& t, Mechanism mech, PromptMode mode) const {
    const std::size_t ref = corpus_->index_of(t.reference_id);
    Tape<T> tape;
    Bound<T> P(tape, model_->params);
    ReferenceView<T> view{&frozen_.patch_states[ref], &frozen_.ref_pooled[ref]};
    return query_embedding(P, view, t.caption, model_->cfg, mech, mode).embedding.value();
  }

  std::vector<double> scores(const Matrix<T>& q) const {
    std::vector<double> s(embs_.values.rows());
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = static_cast<double>(dot<T>(q.row(0), embs_.values.row(i)));
    return s;
  }

  RankedResult rank(const Triplet& t, Mechanism mech, PromptMode mode, bool exclude_reference = true) const {
    if (!corpus_->find(t.target_id)) throw ReferentialError(t.query_id + ": target '" + t.target_id + "' not in corpus");
    const auto s = scores(query_vector(t, mech, mode));
    return rank_by_scores(t, embs_.ids, s, exclude_reference);
  }

  std::vector<RankedResult> rank_all(const std::vector<Triplet>& ts, Mechanism mech, PromptMode mode,
                                     bool exclude_reference = true) const {
    std::vector<RankedResult> out;
    out.reserve(ts.size());
    for (const auto& t : ts) out.push_back(rank(t, mech, mode, exclude_reference));
    return out;
  }

  const EncodedCorpus<T>& frozen() const { return frozen_; }
  const Corpus& corpus() const { return *corpus_; }
  const Model<T>& model() const { return *model_; }

 private:
  const Model<T>* model_;
  const Corpus* corpus_;
  EncodedCorpus<T> frozen_;
  CorpusEmbeddings<T> embs_;
};

struct RecallTable {
  std::map<int, double> recall_at;
  std::map<int, double> subset_recall_at;
  std::size_t n_queries = 0;
  std::size_t n_subset_queries = 0;

  friend bool operator==(const RecallTable&, const RecallTable&) = default;
};

inline const std::vector<int>& default_ks() {
  static const std::vector<int> ks{1, 5, 10, 50};
  return ks;
}

inline const std::vector<int>& default_subset_ks() {
  static const std::vector<int> ks{1, 2, 3};
  return ks;
}

/// Fraction of queries whose target ranks within the top K; subset recall is
/// taken over the queries that carry a subset.
inline RecallTable compute_recall(const std::vector<RankedResult>& results, const std::vector<int>& ks,
                                  const std::vector<int>& subset_ks = default_subset_ks()) {
  if (results.empty()) throw DomainError("recall over an empty result set");
  for (int k : ks)
    if (k <= 0) throw DomainError("K must be positive");
  for (int k : subset_ks)
    if (k <= 0) throw DomainError("K must be positive");
  RecallTable tab;
  tab.n_queries = results.size();
  for (int k : ks) {
    const auto hits = std::count_if(results.begin(), results.end(),
                                    [k](const RankedResult& r) { return r.target_rank <= static_cast<std::size_t>(k); });
    tab.recall_at[k] = double(hits) / double(results.size());
  }
  for (const auto& r : results)
    if (r.subset_rank) ++tab.n_subset_queries;
  if (tab.n_subset_queries > 0) {
    for (int k : subset_ks) {
      const auto hits = std::count_if(results.begin(), results.end(), [k](const RankedResult& r) {
        return r.subset_rank && *r.subset_rank <= static_cast<std::size_t>(k);
      });
      tab.subset_recall_at[k] = double(hits) / double(tab.n_subset_queries);
    }
  }
  return tab;
}

/// Per-metric unweighted means over classes and the overall average.
/// `avg_cells` is the mean over every class-metric cell; `avg_of_means` the
/// mean of the per-metric means after rounding them to `round_digits`
/// decimals, i.e. what one gets from a table's printed average columns.
struct ClassAverage {
  std::map<int, double> mean_at;
  double avg_cells = 0;
  double avg_of_means = 0;
};

inline ClassAverage fashioniq_average(const std::map<std::string, RecallTable>& per_class,
                                      const std::vector<int>& ks = {10, 50}, int round_digits = 2) {
  if (per_class.empty()) throw DomainError("no classes to average");
  ClassAverage out;
  double cell_sum = 0;
  std::size_t cells = 0;
  for (int k : ks) {
    double s = 0;
    for (const auto& [name, tab] : per_class) {
      auto it = tab.recall_at.find(k);
      if (it == tab.recall_at.end()) throw StructuralError("class '" + name + "' lacks R@" + std::to_string(k));
      s += it->second;
      cell_sum += it->second;
      ++cells;
    }
    out.mean_at[k] = s / double(per_class.size());
  }
  out.avg_cells = cell_sum / double(cells);
  const double scale = std::pow(10.0, round_digits);
  double rounded = 0;
  for (const auto& [k, m] : out.mean_at) rounded += std::round(m * scale) / scale;
  out.avg_of_means = rounded / double(out.mean_at.size());
  return out;
}

// -- export ------------------------------------------------------------------

/// Rows of a results table: label -> RecallTable. Columns R@{K} and Rs@{K}
/// in percent.
inline std::string recall_rows_csv(const std::vector<std::pair<std::string, RecallTable>>& rows, char sep = ',') {
  std::vector<int> ks, sks;
  for (const auto& [_, t] : rows) {
    for (const auto& [k, v] : t.recall_at)
      if (std::find(ks.begin(), ks.end(), k) == ks.end()) ks.push_back(k);
    for (const auto& [k, v] : t.subset_recall_at)
      if (std::find(sks.begin(), sks.end(), k) == sks.end()) sks.push_back(k);
  }
  std::sort(ks.begin(), ks.end());
  std::sort(sks.begin(), sks.end());
  std::ostringstream out;
  out << "name";
  for (int k : ks) out << sep << "R@" << k;
  for (int k : sks) out << sep << "Rs@" << k;
  out << sep << "queries\n";
  out.setf(std::ios::fixed);
  out.precision(2);
  for (const auto& [name, t] : rows) {
    out << name;
    for (int k : ks) {
      out << sep;
      if (auto it = t.recall_at.find(k); it != t.recall_at.end()) out << 100.0 * it->second;
    }
    for (int k : sks) {
      out << sep;
      if (auto it = t.subset_recall_at.find(k); it != t.subset_recall_at.end()) out << 100.0 * it->second;
    }
    out << sep << t.n_queries << "\n";
  }
  return out.str();
}

inline nlohmann::json recall_to_json(const RecallTable& t) {
  nlohmann::json j;
  for (const auto& [k, v] : t.recall_at) j["R@" + std::to_string(k)] = v;
  for (const auto& [k, v] : t.subset_recall_at) j["Rs@" + std::to_string(k)] = v;
  j["queries"] = t.n_queries;
  j["subset_queries"] = t.n_subset_queries;
  return j;
}

inline nlohmann::json class_average_to_json(const ClassAverage& a) {
  nlohmann::json j;
  for (const auto& [k, v] : a.mean_at) j["R@" + std::to_string(k)] = v;
  j["Avg"] = a.avg_cells;
  j["Avg_convention"] = "mean over all class-metric cells";
  j["Avg_of_rounded_means"] = a.avg_of_means;
  return j;
}

// -- two-stage re-ranking ----------------------------------------------------

struct RerankCandidate {
  const Triplet* query;
  std::string candidate_id;
  double first_stage_score;
  std::size_t position;  // 0-based in the first-stage ranking
};

/// Second-stage scorer over (query, candidate). Throwing marks the query as
/// failed; it then keeps its first-stage ranking.
class JointScorer {
 public:
  virtual ~JointScorer() = default;
  virtual double score(const RerankCandidate& c) = 0;
};

/// Returns the first-stage score, so re-ranking is the identity.
class IdentityScorer final : public JointScorer {
 public:
  double score(const RerankCandidate& c) override { return c.first_stage_score; }
};

struct RerankOutcome {
  std::vector<RankedResult> results;
  std::vector<std::string> failed_queries;
};

/// Re-scores each query's top_M candidates and re-sorts that prefix (stable,
/// descending); the tail keeps its order.
inline RerankOutcome rerank_two_stage(const std::vector<RankedResult>& results, const std::vector<Triplet>& triplets,
                                      std::size_t top_m, JointScorer& scorer) {
  if (top_m == 0) throw DomainError("top_M must be >= 1");
  if (results.size() != triplets.size()) throw StructuralError("rerank: one triplet per result required");
  RerankOutcome out;
  out.results.reserve(results.size());
  for (std::size_t q = 0; q < results.size(); ++q) {
    const RankedResult& r = results[q];
    const std::size_t m = std::min(top_m, r.ranked_ids.size());
    std::vector<std::pair<double, std::size_t>> rescored;
    try {
      for (std::size_t k = 0; k < m; ++k)
        rescored.emplace_back(scorer.score({&triplets[q], r.ranked_ids[k], r.scores[k], k}), k);
    } catch (const std::exception& e) {
      warn("rerank: query " + r.query_id + " skipped: " + e.what());
      out.failed_queries.push_back(r.query_id);
      out.results.push_back(r);
      continue;
    }
    std::stable_sort(rescored.begin(), rescored.end(), [](auto& a, auto& b) { return a.first > b.first; });
    RankedResult nr = r;
    for (std::size_t k = 0; k < m; ++k) {
      nr.ranked_ids[k] = r.ranked_ids[rescored[k].second];
      nr.scores[k] = rescored[k].first;
    }
    detail::fill_ranks(nr, triplets[q]);
    out.results.push_back(std::move(nr));
  }
  return out;
}


/// Trainable second stage: the query embedding attends over the candidate's
/// patch states; the attended summary adds alpha * (u . c) to the first-stage
/// score. alpha starts at 0, so an unfitted model keeps the first-stage order.
template <class T>
class CrossAttentionReranker {
 public:
  CrossAttentionReranker(const ModelConfig& cfg, std::uint64_t seed) : d_model_(cfg.d_model), tau_(T(cfg.tau)) {
    std::mt19937_64 rng(seed);
    detail::add_param(params_, "rerank/wq", detail::init_weight<T>(cfg.d_embed, cfg.d_model, rng));
    detail::add_param(params_, "rerank/wk", detail::init_weight<T>(cfg.d_model, cfg.d_model, rng));
    detail::add_param(params_, "rerank/wv", detail::init_weight<T>(cfg.d_model, cfg.d_embed, rng));
    detail::add_param(params_, "rerank/alpha", Matrix<T>(1, 1));
  }

  const ParamMap<T>& params() const { return params_; }

  Var<T> score(Bound<T>& P, const Matrix<T>& query, const Matrix<T>& patch_states, T first_stage) const {
    using namespace ad;
    Tape<T>& tape = P.tape();
    Var<T> u = tape.constant(query);
    Var<T> s = tape.constant(patch_states);
    Var<T> q = matmul(u, P("rerank/wq"));
    Var<T> att = softmax_rows(scale(matmul_nt(q, matmul(s, P("rerank/wk"))), T(1) / std::sqrt(T(d_model_))));
    Var<T> c = l2_normalize_rows(matmul(matmul(att, s), P("rerank/wv")));
    Var<T> residual = scale_by(matmul_nt(u, c), P("rerank/alpha"));
    return add(tape.constant(Matrix<T>(1, 1, first_stage)), residual);
  }

  T score(const Matrix<T>& query, const Matrix<T>& patch_states, T first_stage) const {
    Tape<T> tape;
    Bound<T> P(tape, params_);
    return score(P, query, patch_states, first_stage).scalar();
  }

  /// Softmax cross-entropy over each training query's first-stage top_m
  /// (plus its target when missing). Returns the mean loss of every epoch.
  std::vector<double> fit(const Retriever<T>& r, const std::vector<Triplet>& train, Mechanism mech, PromptMode mode,
                          std::size_t top_m, std::size_t epochs, double lr) {
    if (train.empty()) throw DomainError("re-ranker needs training queries");
    if (top_m < 2) throw DomainError("re-ranker training needs top_M >= 2");
    struct Example {
      Matrix<T> query;
      std::vector<std::size_t> cands;
      std::vector<T> first;
      std::size_t label;
    };
    std::vector<Example> ex;
    for (const auto& t : train) {
      Matrix<T> q = r.query_vector(t, mech, mode);
      RankedResult rr = rank_by_scores(t, r.corpus_embeddings().ids, r.scores(q));
      Example e{std::move(q), {}, {}, 0};
      const std::size_t m = std::min(top_m, rr.ranked_ids.size());
      bool has_target = false;
      for (std::size_t k = 0; k < m; ++k) {
        e.cands.push_back(r.corpus().index_of(rr.ranked_ids[k]));
        e.first.push_back(static_cast<T>(rr.scores[k]));
        if (rr.ranked_ids[k] == t.target_id) {
          e.label = k;
          has_target = true;
        }
      }
      if (!has_target) {
        e.label = e.cands.size();
        e.cands.push_back(r.corpus().index_of(t.target_id));
        e.first.push_back(static_cast<T>(rr.scores[rr.target_rank - 1]));
      }
      ex.push_back(std::move(e));
    }
    AdamWState<T> opt;
    std::vector<double> losses;
    for (std::size_t ep = 0; ep < epochs; ++ep) {
      double sum = 0;
      for (const auto& e : ex) {
        Tape<T> tape;
        Bound<T> P(tape, params_);
        std::vector<Var<T>> logits;
        for (std::size_t k = 0; k < e.cands.size(); ++k)
          logits.push_back(score(P, e.query, r.frozen().patch_states[e.cands[k]], e.first[k]));
        Var<T> loss = ad::softmax_cross_entropy(ad::scale(ad::concat_cols(logits), tau_), {e.label});
        zero_grads(params_);
        tape.backward(loss);
        adamw_step(params_, opt, lr, 0.0);
        sum += static_cast<double>(loss.scalar());
      }
      losses.push_back(sum / double(ex.size()));
    }
    return losses;
  }

 private:
  ParamMap<T> params_;
  std::size_t d_model_;
  T tau_;
};

/// Adapts a CrossAttentionReranker to the scorer interface for one gallery.
template <class T>
class CrossAttentionScorer final : public JointScorer {
 public:
  CrossAttentionScorer(const CrossAttentionReranker<T>& model, const Retriever<T>& r, Mechanism mech, PromptMode mode)
      : model_(&model), r_(&r), mech_(mech), mode_(mode) {}

  double score(const RerankCandidate& c) override {
    auto it = queries_.find(c.query->query_id);
    if (it == queries_.end()) it = queries_.emplace(c.query->query_id, r_->query_vector(*c.query, mech_, mode_)).first;
    const std::size_t idx = r_->corpus().index_of(c.candidate_id);
    return static_cast<double>(
        model_->score(it->second, r_->frozen().patch_states[idx], static_cast<T>(c.first_stage_score)));
  }

 private:
  const CrossAttentionReranker<T>* model_;
  const Retriever<T>* r_;
  Mechanism mech_;
  PromptMode mode_;
  std::map<std::string, Matrix<T>> queries_;
};

}  // namespace sprc
