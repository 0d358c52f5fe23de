#pragma once

// Train-then-evaluate runs, the synthetic benchmark protocol and sweeps.

#include <array>
#include <atomic>
#include <functional>
#include <future>
#include <mutex>
#include <thread>

#include "sprc/evaluation.hpp"

namespace sprc {

/// One retrieval gallery and the queries ranked against it.
struct EvalSet {
  Corpus corpus;
  std::vector<Triplet> triplets;
};

struct ExperimentData {
  Corpus train_corpus;
  std::vector<Triplet> train_triplets;
  std::size_t vocab_size = 0;
  std::vector<EvalSet> eval;
};

/// Ranks every query against its own gallery; results are concatenated in
/// gallery order.
template <class T>
std::vector<RankedResult> evaluate_galleries(const Model<T>& model, const std::vector<EvalSet>& eval, Mechanism mech,
                                             PromptMode mode, bool exclude_reference = true) {
  std::vector<RankedResult> out;
  for (const auto& g : eval) {
    Retriever<T> r(model, g.corpus);
    auto part = r.rank_all(g.triplets, mech, mode, exclude_reference);
    out.insert(out.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
  }
  return out;
}

struct RunResult {
  RecallTable table;
  std::vector<LossComponents> log;
};

template <class T>
RunResult train_and_evaluate(const TrainConfig& cfg, const ExperimentData& data, const std::vector<int>& ks,
                             const std::function<void(std::size_t, const LossComponents&)>& on_step = {}) {
  Trainer<T> tr(cfg, data.train_corpus, data.train_triplets, data.vocab_size);
  RunResult out;
  out.log.reserve(cfg.steps);
  while (tr.step() < tr.config().steps) {
    out.log.push_back(tr.train_step());
    if (on_step) on_step(tr.step(), out.log.back());
  }
  const auto& c = tr.config();
  out.table = compute_recall(evaluate_galleries(tr.model(), data.eval, c.mechanism, c.prompt_mode, c.exclude_reference), ks);
  return out;
}

/// Desk-scale benchmark: one large training split and several small
/// galleries, all drawn from the same slot-embedding world.
struct SyntheticProtocol {
  SyntheticSpec gallery;  // shape of each evaluation gallery
  int train_corpus_size = 3500;
  int train_triplets = 3400;
  int eval_galleries = 8;
  int eval_queries = 16;
};

namespace detail {

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream)};
  std::array<std::uint32_t, 2> w{};
  seq.generate(w.begin(), w.end());
  return (std::uint64_t(w[0]) << 32) | w[1];
}

}  // namespace detail

inline ExperimentData make_synthetic_experiment(const SyntheticProtocol& p, std::uint64_t seed) {
  SyntheticSpec tr = p.gallery;
  tr.corpus_size = p.train_corpus_size;
  tr.n_triplets = p.train_triplets;
  tr.seed = detail::mix_seed(seed, 0);
  auto train = generate_synthetic(tr);
  ExperimentData d{std::move(train.corpus), std::move(train.triplets), train.vocab.size(), {}};
  for (int g = 0; g < p.eval_galleries; ++g) {
    SyntheticSpec ev = p.gallery;
    ev.n_triplets = p.eval_queries;
    ev.seed = detail::mix_seed(seed, 1 + static_cast<std::uint64_t>(g));
    auto ds = generate_synthetic(ev);
    d.eval.push_back({std::move(ds.corpus), std::move(ds.triplets)});
  }
  return d;
}

// -- sweeps ------------------------------------------------------------------

inline const std::vector<std::string>& sweep_axes() {
  static const std::vector<std::string> axes{"gamma", "prompt_length", "mechanism", "prompt_mode"};
  return axes;
}

struct SweepCell {
  std::string value;
  std::uint64_t seed = 0;
  std::optional<RecallTable> table;
  std::vector<LossComponents> log;
  std::string error;
};

struct SweepRow {
  std::string value;
  std::vector<SweepCell> cells;
  std::optional<RecallTable> mean;  // over the cells that succeeded
};

struct SweepTable {
  std::string axis;
  std::vector<SweepRow> rows;

  bool any_failed() const {
    for (const auto& r : rows)
      for (const auto& c : r.cells)
        if (!c.table) return true;
    return false;
  }
};

inline RecallTable mean_table(const std::vector<const RecallTable*>& tabs) {
  RecallTable m;
  for (const RecallTable* t : tabs) {
    for (const auto& [k, v] : t->recall_at) m.recall_at[k] += v / double(tabs.size());
    for (const auto& [k, v] : t->subset_recall_at) m.subset_recall_at[k] += v / double(tabs.size());
    m.n_queries += t->n_queries;
    m.n_subset_queries += t->n_subset_queries;
  }
  return m;
}

/// Trains and evaluates one run per (value, seed), from scratch. `data` maps a
/// seed to its experiment data. Cells run on up to `workers` threads; a
/// failing cell records its error and the sweep continues.
template <class T>
SweepTable sweep(const std::string& axis, const std::vector<std::string>& values, const TrainConfig& base,
                 const std::vector<std::uint64_t>& seeds,
                 const std::function<ExperimentData(std::uint64_t)>& data, const std::vector<int>& ks,
                 std::size_t workers = 1) {
  if (std::find(sweep_axes().begin(), sweep_axes().end(), axis) == sweep_axes().end())
    throw ConfigError("unknown sweep axis '" + axis + "' (valid: gamma, prompt_length, mechanism, prompt_mode)");
  if (values.empty()) throw ConfigError("sweep needs at least one value");
  if (seeds.empty()) throw ConfigError("sweep needs at least one seed");

  SweepTable table{axis, {}};
  for (const auto& v : values) {
    SweepRow row{v, {}, std::nullopt};
    for (auto s : seeds) row.cells.push_back({v, s, std::nullopt, {}, ""});
    table.rows.push_back(std::move(row));
  }

  std::map<std::uint64_t, std::shared_future<ExperimentData>> cache;
  std::mutex cache_mu;
  auto data_for = [&](std::uint64_t seed) {
    std::shared_future<ExperimentData> f;
    {
      std::lock_guard lock(cache_mu);
      auto it = cache.find(seed);
      if (it == cache.end())
        it = cache.emplace(seed, std::async(std::launch::deferred, data, seed).share()).first;
      f = it->second;
    }
    return f;
  };

  std::vector<SweepCell*> jobs;
  for (auto& r : table.rows)
    for (auto& c : r.cells) jobs.push_back(&c);

  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t j; (j = next++) < jobs.size();) {
      SweepCell& cell = *jobs[j];
      try {
        TrainConfig cfg = base;
        set_config_value(cfg, axis, cell.value);
        cfg.seed = cell.seed;
        cfg.normalize();
        cfg.validate();
        auto f = data_for(cell.seed);
        RunResult r = train_and_evaluate<T>(cfg, f.get(), ks);
        cell.table = std::move(r.table);
        cell.log = std::move(r.log);
      } catch (const std::exception& e) {
        cell.error = e.what();
        warn("sweep cell " + axis + "=" + cell.value + " seed " + std::to_string(cell.seed) + " failed: " + e.what());
      }
    }
  };
  workers = std::max<std::size_t>(1, std::min(workers, jobs.size()));
  if (workers == 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
  }

  for (auto& r : table.rows) {
    std::vector<const RecallTable*> ok;
    for (auto& c : r.cells)
      if (c.table) ok.push_back(&*c.table);
    if (!ok.empty()) r.mean = mean_table(ok);
  }
  return table;
}

inline std::string sweep_csv(const SweepTable& t, char sep = ',') {
  std::vector<std::pair<std::string, RecallTable>> rows;
  for (const auto& r : t.rows) {
    for (const auto& c : r.cells)
      if (c.table) rows.emplace_back(t.axis + "=" + r.value + "/seed=" + std::to_string(c.seed), *c.table);
    if (r.mean) rows.emplace_back(t.axis + "=" + r.value + "/mean", *r.mean);
  }
  if (rows.empty()) return "name\n";
  return recall_rows_csv(rows, sep);
}

inline nlohmann::json sweep_to_json(const SweepTable& t) {
  nlohmann::json j{{"axis", t.axis}, {"rows", nlohmann::json::array()}};
  for (const auto& r : t.rows) {
    nlohmann::json row{{"value", r.value}, {"cells", nlohmann::json::array()}};
    for (const auto& c : r.cells) {
      nlohmann::json cell{{"seed", c.seed}};
      if (c.table)
        cell["recall"] = recall_to_json(*c.table);
      else
        cell["error"] = c.error;
      row["cells"].push_back(cell);
    }
    if (r.mean) row["mean"] = recall_to_json(*r.mean);
    j["rows"].push_back(row);
  }
  return j;
}

}  // namespace sprc
