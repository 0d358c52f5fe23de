// sprc: generate synthetic data, train, evaluate and sweep.
//
// Exit codes: 0 ok, 1 I/O or data error, 2 configuration error,
// 3 numeric failure, 4 sweep finished with failed cells.

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <iostream>

#include <CLI11.hpp>

#include "sprc/sprc.hpp"

#ifndef SPRC_VERSION
#define SPRC_VERSION "unknown"
#endif

namespace fs = std::filesystem;
using namespace sprc;

namespace {

enum Exit { kOk = 0, kIo = 1, kConfig = 2, kNumeric = 3, kPartial = 4 };

const char* const kCorpusFile = "corpus.bin";
const char* const kTripletsFile = "triplets.tsv";
const char* const kVocabFile = "vocab.txt";

std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream s;
  s << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return s.str();
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create output directory " + dir.string());
}

struct Manifest {
  std::string command;
  std::vector<std::string> argv;
  std::string started = utc_now();
  nlohmann::json config = nlohmann::json::object();
  std::uint64_t seed = 0;
  std::vector<fs::path> outputs;

  void write(const fs::path& dir) {
    nlohmann::json j{{"command", command},
                     {"argv", argv},
                     {"version", SPRC_VERSION},
                     {"seed", seed},
                     {"config", config},
                     {"started", started},
                     {"finished", utc_now()}};
    nlohmann::json outs = nlohmann::json::array();
    for (const auto& p : outputs) {
      if (!fs::exists(p)) throw IoError("manifest names missing output " + p.string());
      outs.push_back(p.string());
    }
    j["outputs"] = outs;
    io::write_file_atomic(dir / "manifest.json", j.dump(2) + "\n");
  }
};

struct DataDir {
  Corpus corpus;
  std::vector<Triplet> triplets;
  Vocabulary vocab;
};

DataDir load_data(const fs::path& dir, std::size_t max_caption_len) {
  DataDir d;
  d.vocab = load_vocabulary(dir / kVocabFile);
  d.corpus = read_corpus(dir / kCorpusFile);
  d.triplets = load_triplets(dir / kTripletsFile, d.vocab, &d.corpus, max_caption_len);
  return d;
}

std::vector<int> parse_ks(const std::string& s) {
  std::vector<int> ks;
  std::stringstream in(s);
  for (std::string part; std::getline(in, part, ',');) {
    try {
      std::size_t pos = 0;
      const int k = std::stoi(part, &pos);
      if (pos != part.size() || k <= 0) throw std::invalid_argument(part);
      ks.push_back(k);
    } catch (const std::exception&) {
      throw ConfigError("--ks: '" + part + "' is not a positive integer");
    }
  }
  if (ks.empty()) throw ConfigError("--ks must list at least one K");
  std::sort(ks.begin(), ks.end());
  ks.erase(std::unique(ks.begin(), ks.end()), ks.end());
  return ks;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  for (std::string part; std::getline(in, part, ',');)
    if (!part.empty()) out.push_back(part);
  return out;
}

std::size_t num_workers() {
  const char* env = std::getenv("SPRC_NUM_WORKERS");
  if (env == nullptr || *env == '\0') return 1;
  try {
    const long n = std::stol(env);
    if (n < 1) throw std::invalid_argument(env);
    return static_cast<std::size_t>(n);
  } catch (const std::exception&) {
    throw ConfigError(std::string("SPRC_NUM_WORKERS must be a positive integer, got '") + env + "'");
  }
}

TrainConfig build_config(const std::string& config_path, const std::vector<std::string>& overrides,
                         std::optional<std::uint64_t> seed) {
  TrainConfig cfg;
  if (!config_path.empty()) cfg = load_config(config_path);
  std::string extra;
  for (const auto& o : overrides) extra += o + "\n";
  cfg = parse_config(extra, cfg);
  if (seed) cfg.seed = *seed;
  cfg.normalize();
  cfg.validate();
  return cfg;
}

nlohmann::json config_json(const TrainConfig& cfg) {
  nlohmann::json j;
  for (const auto& [k, v] : config_map(cfg)) j[k] = v;
  return j;
}

std::string metrics_line(std::size_t step, const LossComponents& l) {
  return nlohmann::json{{"step", step}, {"Lc", l.contrastive}, {"La", l.alignment}, {"L", l.total}, {"lr", l.lr}}.dump() +
         "\n";
}

void print_table(const std::vector<std::pair<std::string, RecallTable>>& rows) {
  std::cout << recall_rows_csv(rows, '\t');
}

// -- synth -------------------------------------------------------------------

struct SynthArgs {
  fs::path out;
  std::uint64_t seed = 0;
  std::uint64_t world_seed = 0;
  SyntheticSpec spec;
  std::string edit_mix = "1,1,1";
};

int cmd_synth(const SynthArgs& a, Manifest& m) {
  SyntheticSpec spec = a.spec;
  spec.seed = a.seed;
  spec.world_seed = a.world_seed;
  const auto mix = split_list(a.edit_mix);
  if (mix.size() != 3) throw ConfigError("--edit-mix takes three weights: ADD,REMOVE,MODIFY");
  double w[3];
  for (int i = 0; i < 3; ++i) {
    try {
      w[i] = std::stod(mix[i]);
    } catch (const std::exception&) {
      throw ConfigError("--edit-mix: '" + mix[i] + "' is not a number");
    }
  }
  const double total = w[0] + w[1] + w[2];
  if (!(total > 0) || w[0] < 0 || w[1] < 0 || w[2] < 0) throw ConfigError("--edit-mix weights must be >= 0, not all 0");
  spec.edit_mix = {w[0] / total, w[1] / total, w[2] / total};

  const auto ds = generate_synthetic(spec);
  ensure_dir(a.out);
  write_corpus(a.out / kCorpusFile, ds.corpus);
  write_triplets(a.out / kTripletsFile, ds.triplets, ds.vocab);
  write_vocabulary(a.out / kVocabFile, ds.vocab);
  m.seed = a.seed;
  m.config = {{"n_slots", spec.n_slots},       {"n_object_types", spec.n_object_types},
              {"n_attr_values", spec.n_attr_values}, {"corpus_size", spec.corpus_size},
              {"n_triplets", spec.triplet_count()}, {"d_img", spec.d_img},
              {"k_subset", spec.k_subset},     {"world_seed", spec.world_seed},
              {"edit_mix", {spec.edit_mix.add, spec.edit_mix.remove, spec.edit_mix.modify}}};
  m.outputs = {a.out / kCorpusFile, a.out / kTripletsFile, a.out / kVocabFile};
  m.write(a.out);
  std::cout << "images\t" << ds.corpus.size() << "\ntriplets\t" << ds.triplets.size() << "\nvocabulary\t"
            << ds.vocab.size() << "\n";
  return kOk;
}

// -- train -------------------------------------------------------------------

struct TrainArgs {
  std::string config;
  fs::path data;
  fs::path out;
  std::optional<std::uint64_t> seed;
  std::string resume;
  std::vector<std::string> overrides;
  std::size_t log_every = 1;
  std::optional<std::size_t> max_steps;
};

template <class T>
int cmd_train(const TrainArgs& a, Manifest& m) {
  TrainConfig cfg = build_config(a.config, a.overrides, a.seed);
  ensure_dir(a.out);
  const fs::path metrics = a.out / "metrics.jsonl";
  const fs::path ckpt = a.out / "checkpoint.bin";

  std::optional<DataDir> data;
  std::optional<Trainer<T>> tr;
  if (!a.resume.empty()) {
    if (!a.overrides.empty() || !a.config.empty())
      warn("--resume continues with the checkpoint's config; --config and --set are ignored");
    cfg = config_from_header(read_checkpoint_header(a.resume));
    data = load_data(a.data, cfg.max_caption_len);
    tr.emplace(Trainer<T>::load(a.resume, data->corpus, data->triplets));
  } else {
    data = load_data(a.data, cfg.max_caption_len);
    tr.emplace(cfg, data->corpus, data->triplets, data->vocab.size());
    io::write_file_atomic(metrics, "");
  }
  m.seed = cfg.seed;
  m.config = config_json(tr->config());

  std::ofstream log(metrics, std::ios::app);
  if (!log) throw IoError("cannot open " + metrics.string());
  const std::size_t stop =
      a.max_steps ? std::min(tr->config().steps, tr->step() + *a.max_steps) : tr->config().steps;
  while (tr->step() < stop) {
    const LossComponents l = tr->train_step();
    if (tr->step() % a.log_every == 0 || tr->step() == stop) log << metrics_line(tr->step(), l) << std::flush;
    if (!log) throw IoError("cannot write " + metrics.string());
  }
  log.close();
  tr->save(ckpt);
  m.outputs = {ckpt, metrics};
  m.write(a.out);
  std::cerr << "trained " << tr->step() << " steps; checkpoint " << ckpt.string() << "\n";
  return kOk;
}

// -- eval --------------------------------------------------------------------

struct EvalArgs {
  fs::path checkpoint;
  std::vector<std::string> data;
  fs::path out;
  std::string ks = "1,5,10,50";
  std::string mechanism;
  std::string prompt_mode;
  std::string rerank = "none";
  std::size_t top_m = 10;
  std::string rerank_train;
  std::size_t rerank_epochs = 5;
  double rerank_lr = 1e-3;
};

template <class T>
int cmd_eval(const EvalArgs& a, Manifest& m) {
  const auto ks = parse_ks(a.ks);
  const auto header = read_checkpoint_header(a.checkpoint);
  const TrainConfig cfg = config_from_header(header);
  const Mechanism mech = a.mechanism.empty() ? cfg.mechanism : parse_mechanism(a.mechanism);
  const PromptMode mode = a.prompt_mode.empty() ? cfg.prompt_mode : parse_prompt_mode(a.prompt_mode);
  if (mech != cfg.mechanism)
    warn("evaluating with " + std::string(to_string(mech)) + " although the checkpoint was trained with " +
         std::string(to_string(cfg.mechanism)));
  if (a.rerank != "none" && a.rerank != "identity" && a.rerank != "joint")
    throw ConfigError("--rerank must be none, identity or joint");
  if (a.rerank == "joint" && a.rerank_train.empty()) throw ConfigError("--rerank joint needs --rerank-train");
  if (a.top_m == 0) throw ConfigError("--top-m must be >= 1");
  const Model<T> model = load_model<T>(a.checkpoint);

  std::optional<CrossAttentionReranker<T>> joint;
  if (a.rerank == "joint") {
    const DataDir train = load_data(a.rerank_train, cfg.max_caption_len);
    Retriever<T> r(model, train.corpus);
    joint.emplace(model.cfg, cfg.seed);
    const auto losses = joint->fit(r, train.triplets, mech, mode, a.top_m, a.rerank_epochs, a.rerank_lr);
    std::cerr << "re-ranker loss " << losses.front() << " -> " << losses.back() << "\n";
  }

  std::vector<RankedResult> all;
  std::vector<std::string> failed;
  for (const auto& dir : a.data) {
    const DataDir d = load_data(dir, cfg.max_caption_len);
    Retriever<T> r(model, d.corpus);
    auto results = r.rank_all(d.triplets, mech, mode, cfg.exclude_reference);
    if (a.rerank != "none") {
      IdentityScorer identity;
      std::optional<CrossAttentionScorer<T>> cross;
      if (joint) cross.emplace(*joint, r, mech, mode);
      JointScorer& scorer = cross ? static_cast<JointScorer&>(*cross) : identity;
      auto outcome = rerank_two_stage(results, d.triplets, a.top_m, scorer);
      results = std::move(outcome.results);
      failed.insert(failed.end(), outcome.failed_queries.begin(), outcome.failed_queries.end());
    }
    all.insert(all.end(), results.begin(), results.end());
  }
  const RecallTable tab = compute_recall(all, ks);
  const std::string label = std::string(to_string(mech)) + "/" + std::string(to_string(mode));

  ensure_dir(a.out);
  const fs::path csv = a.out / "recall.csv", json = a.out / "recall.json";
  io::write_file_atomic(csv, recall_rows_csv({{label, tab}}));
  nlohmann::json doc = recall_to_json(tab);
  doc["mechanism"] = to_string(mech);
  doc["prompt_mode"] = to_string(mode);
  doc["rerank"] = a.rerank;
  if (a.rerank != "none") doc["top_M"] = a.top_m;
  doc["rerank_failed_queries"] = failed;
  io::write_file_atomic(json, doc.dump(2) + "\n");
  m.seed = cfg.seed;
  m.config = config_json(cfg);
  m.outputs = {csv, json};
  m.write(a.out);
  print_table({{label, tab}});
  return kOk;
}

// -- sweep -------------------------------------------------------------------

struct SweepArgs {
  std::string axis;
  std::string values;
  std::string seeds = "0";
  std::string config;
  fs::path train_data;
  std::vector<std::string> data;
  fs::path out;
  std::string ks = "1,5,10,50";
  std::vector<std::string> overrides;
};

template <class T>
int cmd_sweep(const SweepArgs& a, Manifest& m) {
  const TrainConfig base = build_config(a.config, a.overrides, std::nullopt);
  const auto ks = parse_ks(a.ks);
  const auto values = split_list(a.values);
  std::vector<std::uint64_t> seeds;
  for (const auto& s : split_list(a.seeds)) {
    try {
      seeds.push_back(std::stoull(s));
    } catch (const std::exception&) {
      throw ConfigError("--seeds: '" + s + "' is not an integer");
    }
  }
  ExperimentData data;
  {
    DataDir train = load_data(a.train_data, base.max_caption_len);
    data.train_corpus = std::move(train.corpus);
    data.train_triplets = std::move(train.triplets);
    data.vocab_size = train.vocab.size();
    for (const auto& dir : a.data) {
      DataDir e = load_data(dir, base.max_caption_len);
      data.eval.push_back({std::move(e.corpus), std::move(e.triplets)});
    }
  }
  const SweepTable t =
      sweep<T>(a.axis, values, base, seeds, [&](std::uint64_t) { return data; }, ks, num_workers());

  ensure_dir(a.out);
  std::vector<fs::path> outputs;
  for (const auto& row : t.rows)
    for (const auto& c : row.cells) {
      const fs::path cell = a.out / "cells" / (a.axis + "=" + row.value + "_seed" + std::to_string(c.seed));
      ensure_dir(cell);
      std::string log;
      for (std::size_t i = 0; i < c.log.size(); ++i) log += metrics_line(i + 1, c.log[i]);
      io::write_file_atomic(cell / "metrics.jsonl", log);
      nlohmann::json doc{{"axis", a.axis}, {"value", row.value}, {"seed", c.seed}};
      if (c.table)
        doc["recall"] = recall_to_json(*c.table);
      else
        doc["error"] = c.error;
      io::write_file_atomic(cell / "result.json", doc.dump(2) + "\n");
      outputs.push_back(cell / "metrics.jsonl");
      outputs.push_back(cell / "result.json");
    }
  const fs::path csv = a.out / "sweep.csv", json = a.out / "sweep.json";
  io::write_file_atomic(csv, sweep_csv(t));
  io::write_file_atomic(json, sweep_to_json(t).dump(2) + "\n");
  outputs.push_back(csv);
  outputs.push_back(json);
  m.seed = base.seed;
  m.config = config_json(base);
  m.config["sweep_axis"] = a.axis;
  m.config["sweep_values"] = values;
  m.config["sweep_seeds"] = seeds;
  m.outputs = outputs;
  m.write(a.out);
  std::cout << sweep_csv(t, '\t');
  if (t.any_failed()) {
    std::cerr << "sweep: some cells failed\n";
    return kPartial;
  }
  return kOk;
}

template <class F>
int guarded(F&& f) {
  try {
    return f();
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const DomainError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const NumericError& e) {
    std::cerr << "numeric error";
    if (e.step() >= 0) std::cerr << " at step " << e.step();
    std::cerr << ": " << e.what() << "\n";
    return kNumeric;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIo;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Composed image retrieval with sentence-level prompts"};
  app.set_version_flag("--version", std::string(SPRC_VERSION));
  app.require_subcommand(1);
  std::string precision = "f32";
  auto add_precision = [&](CLI::App* sub) {
    sub->add_option("--precision", precision, "Floating-point precision")->check(CLI::IsMember({"f32", "f64"}));
  };

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Generate a synthetic compositional-edit dataset");
  s->add_option("--out", synth.out, "Output directory")->required();
  s->add_option("--seed", synth.seed, "Dataset seed");
  s->add_option("--world-seed", synth.world_seed, "Seed of the slot-embedding table (shared feature space)");
  s->add_option("--n-slots", synth.spec.n_slots);
  s->add_option("--n-objects", synth.spec.n_object_types);
  s->add_option("--n-attrs", synth.spec.n_attr_values);
  s->add_option("--corpus-size", synth.spec.corpus_size);
  s->add_option("--n-triplets", synth.spec.n_triplets, "0 selects corpus-size / 2");
  s->add_option("--edit-mix", synth.edit_mix, "Weights ADD,REMOVE,MODIFY");
  s->add_option("--d-img", synth.spec.d_img);
  s->add_option("--k-subset", synth.spec.k_subset);
  std::string unused_config;
  s->add_option("--config", unused_config, "Accepted for uniformity; synth reads no config");
  add_precision(s);

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Train a model on a dataset directory");
  t->add_option("--config", train.config, "Config file (key = value)");
  t->add_option("--data", train.data, "Dataset directory")->required();
  t->add_option("--out", train.out, "Output directory")->required();
  t->add_option("--seed", train.seed, "Overrides the config seed");
  t->add_option("--resume", train.resume, "Continue from a checkpoint");
  t->add_option("--set", train.overrides, "Config override key=value (repeatable)");
  t->add_option("--log-every", train.log_every, "Write a metrics record every N steps")->check(CLI::PositiveNumber);
  t->add_option("--max-steps", train.max_steps, "Stop after N steps in this invocation; the schedule is unchanged");
  add_precision(t);

  EvalArgs eval;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint");
  e->add_option("--checkpoint", eval.checkpoint)->required();
  e->add_option("--data", eval.data, "Gallery directory (repeatable)")->required();
  e->add_option("--out", eval.out, "Output directory")->required();
  e->add_option("--ks", eval.ks, "Comma-separated K values");
  e->add_option("--mechanism", eval.mechanism, "SPRC, LATE_FUSION, TEXT_INVERSION or FIXED_PROMPT");
  e->add_option("--prompt-mode", eval.prompt_mode, "FULL, RC_ONLY or RI_ONLY");
  e->add_option("--rerank", eval.rerank, "none, identity or joint");
  e->add_option("--top-M,--top-m", eval.top_m, "Candidates re-scored per query");
  e->add_option("--rerank-train", eval.rerank_train, "Dataset used to fit the joint re-ranker");
  e->add_option("--rerank-epochs", eval.rerank_epochs);
  e->add_option("--rerank-lr", eval.rerank_lr);
  std::string eval_config;
  std::optional<std::uint64_t> eval_seed;
  e->add_option("--config", eval_config, "Accepted for uniformity; the checkpoint carries its config");
  e->add_option("--seed", eval_seed, "Accepted for uniformity");
  add_precision(e);

  SweepArgs sw;
  auto* w = app.add_subcommand("sweep", "Train and evaluate one run per (value, seed)");
  w->add_option("--axis", sw.axis, "gamma, prompt_length, mechanism or prompt_mode")->required();
  w->add_option("--values", sw.values, "Comma-separated values")->required();
  w->add_option("--seeds", sw.seeds, "Comma-separated seeds");
  w->add_option("--config", sw.config, "Base config file");
  w->add_option("--train-data", sw.train_data, "Training dataset directory")->required();
  w->add_option("--data", sw.data, "Gallery directory (repeatable)")->required();
  w->add_option("--out", sw.out, "Output directory")->required();
  w->add_option("--ks", sw.ks, "Comma-separated K values");
  w->add_option("--set", sw.overrides, "Config override key=value (repeatable)");
  add_precision(w);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int rc = app.exit(err);
    return rc == 0 ? kOk : kConfig;
  }

  Manifest m;
  m.argv.assign(argv, argv + argc);
  const bool f64 = precision == "f64";
  if (*s) {
    m.command = "synth";
    return guarded([&] { return cmd_synth(synth, m); });
  }
  if (*t) {
    m.command = "train";
    return guarded([&] { return f64 ? cmd_train<double>(train, m) : cmd_train<float>(train, m); });
  }
  if (*e) {
    m.command = "eval";
    return guarded([&] { return f64 ? cmd_eval<double>(eval, m) : cmd_eval<float>(eval, m); });
  }
  m.command = "sweep";
  return guarded([&] { return f64 ? cmd_sweep<double>(sw, m) : cmd_sweep<float>(sw, m); });
}
