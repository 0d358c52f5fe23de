#pragma once

// Triplet manifests, vocabularies, the synthetic compositional-edit task and
// the binary embedding cache.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "sprc/io.hpp"
#include "sprc/tensor.hpp"

namespace sprc {

using TokenId = std::size_t;

struct TokenSequence {
  std::vector<TokenId> ids;

  std::size_t size() const noexcept { return ids.size(); }
  friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
};

class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      if (!index_.emplace(tokens_[i], i).second) throw VocabularyError("duplicate token '" + tokens_[i] + "'");
    }
  }

  std::size_t size() const noexcept { return tokens_.size(); }
  const std::string& token(TokenId id) const { return tokens_.at(id); }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }

  TokenId id(const std::string& token) const {
    auto it = index_.find(token);
    if (it == index_.end()) throw VocabularyError("unknown token '" + token + "'");
    return it->second;
  }
  bool contains(const std::string& token) const { return index_.count(token) != 0; }

  TokenSequence encode(const std::string& words) const {
    TokenSequence seq;
    std::istringstream ss(words);
    std::string w;
    while (ss >> w) seq.ids.push_back(id(w));
    return seq;
  }

  std::string decode(const TokenSequence& seq) const {
    std::string out;
    for (std::size_t i = 0; i < seq.ids.size(); ++i) {
      if (i) out += ' ';
      out += token(seq.ids[i]);
    }
    return out;
  }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

inline Vocabulary load_vocabulary(const std::filesystem::path& path) {
  std::istringstream in(io::read_file(path));
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    tokens.push_back(line);
  }
  return Vocabulary(std::move(tokens));
}

inline void write_vocabulary(const std::filesystem::path& path, const Vocabulary& vocab) {
  std::string out;
  for (const auto& t : vocab.tokens()) out += t + "\n";
  io::write_file_atomic(path, out);
}

/// Per-image patch features. Values are stored as doubles but are always
/// exactly representable in binary32 so the on-disk cache round-trips.
struct ImageFeatures {
  Matrix<double> patches;
};

class Corpus {
 public:
  void add(std::string id, ImageFeatures f) {
    if (f.patches.rows() == 0) throw StructuralError("image '" + id + "' has no patches");
    if (!all_finite(f.patches)) throw NumericError("image '" + id + "' has non-finite features");
    if (!index_.emplace(id, ids_.size()).second) throw StructuralError("duplicate image id '" + id + "'");
    ids_.push_back(std::move(id));
    features_.push_back(std::move(f));
  }

  std::size_t size() const noexcept { return ids_.size(); }
  const std::vector<std::string>& ids() const noexcept { return ids_; }
  const std::string& id(std::size_t i) const { return ids_.at(i); }
  const ImageFeatures& features(std::size_t i) const { return features_.at(i); }

  std::optional<std::size_t> find(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }
  std::size_t index_of(const std::string& id) const {
    auto i = find(id);
    if (!i) throw ReferentialError("image id '" + id + "' not in corpus");
    return *i;
  }

  friend bool operator==(const Corpus& a, const Corpus& b) {
    if (a.ids_ != b.ids_) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
      if (!(a.features_[i].patches == b.features_[i].patches)) return false;
    return true;
  }

 private:
  std::vector<std::string> ids_;
  std::vector<ImageFeatures> features_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct Triplet {
  std::string query_id;
  std::string reference_id;
  TokenSequence caption;
  std::string target_id;
  std::optional<std::vector<std::string>> subset_ids;

  friend bool operator==(const Triplet&, const Triplet&) = default;
};

inline constexpr std::size_t kDefaultMaxCaptionLen = 16;

inline void validate_triplet(const Triplet& t, const Corpus* corpus) {
  if (t.subset_ids) {
    const auto& s = *t.subset_ids;
    if (s.size() < 2) throw ReferentialError(t.query_id + ": subset must hold at least 2 ids");
    if (std::find(s.begin(), s.end(), t.target_id) == s.end())
      throw ReferentialError(t.query_id + ": subset does not contain the target");
    if (std::find(s.begin(), s.end(), t.reference_id) != s.end())
      throw ReferentialError(t.query_id + ": subset contains the reference");
  }
  if (corpus == nullptr) return;
  for (const auto* id : {&t.reference_id, &t.target_id})
    if (!corpus->find(*id)) throw ReferentialError(t.query_id + ": dangling image id '" + *id + "'");
  if (t.subset_ids)
    for (const auto& id : *t.subset_ids)
      if (!corpus->find(id)) throw ReferentialError(t.query_id + ": dangling subset id '" + id + "'");
}

/// Reads a tab-separated triplet manifest:
/// `query_id \t reference_id \t caption words \t target_id [\t subset,ids]`.
inline std::vector<Triplet> load_triplets(const std::filesystem::path& path, const Vocabulary& vocab,
                                          const Corpus* corpus = nullptr,
                                          std::size_t max_caption_len = kDefaultMaxCaptionLen) {
  std::istringstream in(io::read_file(path));
  std::vector<Triplet> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::vector<std::string> fields;
    std::size_t start = 0;
    for (;;) {
      const auto tab = line.find('\t', start);
      fields.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (fields.size() < 4 || fields.size() > 5)
      throw ParseError(lineno, "expected 4 or 5 tab-separated fields, got " + std::to_string(fields.size()));
    for (std::size_t f = 0; f < 4; ++f)
      if (fields[f].empty()) throw ParseError(lineno, "field " + std::to_string(f + 1) + " is empty");

    Triplet t;
    t.query_id = fields[0];
    t.reference_id = fields[1];
    try {
      t.caption = vocab.encode(fields[2]);
    } catch (const VocabularyError& e) {
      throw VocabularyError("line " + std::to_string(lineno) + ": " + e.what());
    }
    if (t.caption.size() == 0 || t.caption.size() > max_caption_len)
      throw ParseError(lineno, "caption length " + std::to_string(t.caption.size()) + " outside [1, " +
                                   std::to_string(max_caption_len) + "]");
    t.target_id = fields[3];
    if (fields.size() == 5 && !fields[4].empty()) {
      std::vector<std::string> ids;
      std::istringstream ss(fields[4]);
      std::string id;
      while (std::getline(ss, id, ',')) ids.push_back(id);
      t.subset_ids = std::move(ids);
    }
    try {
      validate_triplet(t, corpus);
    } catch (const ReferentialError& e) {
      throw ReferentialError("line " + std::to_string(lineno) + ": " + e.what());
    }
    out.push_back(std::move(t));
  }
  return out;
}

inline void write_triplets(const std::filesystem::path& path, const std::vector<Triplet>& triplets,
                           const Vocabulary& vocab) {
  std::string out;
  for (const auto& t : triplets) {
    out += t.query_id + '\t' + t.reference_id + '\t' + vocab.decode(t.caption) + '\t' + t.target_id;
    if (t.subset_ids) {
      out += '\t';
      for (std::size_t i = 0; i < t.subset_ids->size(); ++i) {
        if (i) out += ',';
        out += (*t.subset_ids)[i];
      }
    }
    out += '\n';
  }
  io::write_file_atomic(path, out);
}

// ---------------------------------------------------------------------------
// Embedding cache: magic "SPRCEMB1", u32 n, u32 d, n NUL-terminated ids, then
// n*d binary32 values row-major, all little-endian.

inline constexpr std::string_view kEmbeddingMagic = "SPRCEMB1";

struct EmbeddingCache {
  std::vector<std::string> ids;
  Matrix<float> values;
};

inline std::string encode_embedding_cache(const std::vector<std::string>& ids, const Matrix<float>& values) {
  if (ids.size() != values.rows()) throw StructuralError("embedding cache: ids/rows mismatch");
  if (values.cols() == 0) throw StructuralError("embedding cache: dimension must be >= 1");
  std::string out(kEmbeddingMagic);
  io::put_u32(out, static_cast<std::uint32_t>(ids.size()));
  io::put_u32(out, static_cast<std::uint32_t>(values.cols()));
  for (const auto& id : ids) {
    if (id.find('\0') != std::string::npos) throw FormatError("embedding cache: id contains NUL");
    out += id;
    out.push_back('\0');
  }
  for (float v : values.flat()) io::put_f32(out, v);
  return out;
}

inline EmbeddingCache decode_embedding_cache(std::string_view bytes) {
  io::Reader rd(bytes);
  if (bytes.size() < kEmbeddingMagic.size() || bytes.substr(0, kEmbeddingMagic.size()) != kEmbeddingMagic)
    throw FormatError("embedding cache: bad magic bytes");
  rd.take(kEmbeddingMagic.size());
  const std::uint32_t n = rd.u32();
  const std::uint32_t d = rd.u32();
  if (d == 0) throw FormatError("embedding cache: dimension 0");
  EmbeddingCache c;
  c.ids.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) c.ids.push_back(rd.cstring());
  const std::size_t count = std::size_t{n} * d;
  if (rd.remaining() < count * 4)
    throw LengthError("embedding cache: expected " + std::to_string(count * 4) + " payload bytes, found " +
                      std::to_string(rd.remaining()));
  c.values = Matrix<float>(n, d);
  for (std::size_t i = 0; i < count; ++i) c.values[i] = rd.f32();
  if (rd.remaining() != 0) throw FormatError("embedding cache: trailing bytes");
  return c;
}

template <class T>
void write_embedding_cache(const std::filesystem::path& path, const std::vector<std::string>& ids,
                           const Matrix<T>& values) {
  io::write_file_atomic(path, encode_embedding_cache(ids, values.template cast<float>()));
}

inline EmbeddingCache read_embedding_cache(const std::filesystem::path& path) {
  return decode_embedding_cache(io::read_file(path));
}

/// A corpus is stored as an embedding cache with one row per patch; the id
/// column repeats the image id for each of its patches.
inline void write_corpus(const std::filesystem::path& path, const Corpus& corpus) {
  std::vector<std::string> ids;
  std::size_t rows = 0, d = 0;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    rows += corpus.features(i).patches.rows();
    d = corpus.features(i).patches.cols();
  }
  Matrix<float> values(rows, d == 0 ? 1 : d);
  std::size_t r = 0;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto& p = corpus.features(i).patches;
    if (p.cols() != d) throw StructuralError("corpus: inconsistent feature width");
    for (std::size_t k = 0; k < p.rows(); ++k, ++r) {
      ids.push_back(corpus.id(i));
      for (std::size_t c = 0; c < d; ++c) values(r, c) = static_cast<float>(p(k, c));
    }
  }
  io::write_file_atomic(path, encode_embedding_cache(ids, values));
}

inline Corpus read_corpus(const std::filesystem::path& path) {
  EmbeddingCache c = read_embedding_cache(path);
  Corpus corpus;
  std::size_t r = 0;
  while (r < c.ids.size()) {
    std::size_t e = r;
    while (e < c.ids.size() && c.ids[e] == c.ids[r]) ++e;
    Matrix<double> patches(e - r, c.values.cols());
    for (std::size_t k = r; k < e; ++k)
      for (std::size_t j = 0; j < c.values.cols(); ++j) patches(k - r, j) = c.values(k, j);
    corpus.add(c.ids[r], ImageFeatures{std::move(patches)});
    r = e;
  }
  return corpus;
}

// ---------------------------------------------------------------------------
// Synthetic compositional-edit task.

enum class EditOp { Add, Remove, Modify };

struct EditMix {
  double add = 1.0 / 3.0;
  double remove = 1.0 / 3.0;
  double modify = 1.0 / 3.0;
};

struct SyntheticSpec {
  int n_slots = 3;
  int n_object_types = 8;
  int n_attr_values = 4;
  EditMix edit_mix;
  int corpus_size = 64;
  /// 0 selects corpus_size / 2.
  int n_triplets = 0;
  std::uint64_t seed = 0;
  /// Seeds the slot-embedding table; datasets sharing it share a feature space.
  std::uint64_t world_seed = 0;
  int d_img = 32;
  int k_subset = 6;

  int triplet_count() const { return n_triplets > 0 ? n_triplets : std::max(1, corpus_size / 2); }

  /// Number of distinct slot multisets, capped at `cap`.
  double distinct_images(double cap = 1e12) const {
    double total = 0, choose = 1, pow = 1;
    for (int k = 0; k <= std::min(n_slots, n_object_types); ++k) {
      total += choose * pow;
      if (total >= cap) return cap;
      choose = choose * (n_object_types - k) / (k + 1);
      pow *= n_attr_values;
    }
    return total;
  }

  void validate() const {
    if (n_slots < 1 || n_object_types < 1 || n_attr_values < 1 || corpus_size < 1 || d_img < 1 || n_triplets < 0)
      throw ConfigError("synthetic spec: all counts must be >= 1");
    const double s = edit_mix.add + edit_mix.remove + edit_mix.modify;
    if (edit_mix.add < 0 || edit_mix.remove < 0 || edit_mix.modify < 0 || std::abs(s - 1.0) > 1e-9)
      throw ConfigError("synthetic spec: edit_mix proportions must be non-negative and sum to 1");
    if (triplet_count() > corpus_size - 1)
      throw ConfigError("synthetic spec: corpus_size " + std::to_string(corpus_size) + " cannot host " +
                        std::to_string(triplet_count()) + " triplet targets");
    if (distinct_images() < corpus_size)
      throw ConfigError("synthetic spec: only " + std::to_string(static_cast<long long>(distinct_images())) +
                        " distinct images exist, corpus_size is " + std::to_string(corpus_size));
    if (edit_mix.add == 0 && edit_mix.remove == 0 && n_attr_values < 2)
      throw ConfigError("synthetic spec: MODIFY-only mix needs at least 2 attribute values");
  }
};

struct Slot {
  int object = -1;  // -1 marks an empty slot
  int attr = -1;

  bool empty() const noexcept { return object < 0; }
  friend auto operator<=>(const Slot&, const Slot&) = default;
};

/// Canonical (sorted) slot multiset.
using SlotSet = std::vector<Slot>;

inline SlotSet canonical(SlotSet s) {
  std::sort(s.begin(), s.end());
  return s;
}

inline std::size_t slot_overlap(const SlotSet& a, const SlotSet& b) {
  SlotSet x = canonical(a), y = canonical(b), common;
  std::set_intersection(x.begin(), x.end(), y.begin(), y.end(), std::back_inserter(common));
  return common.size();
}

struct Edit {
  EditOp op;
  int object;
  int attr;  // unused for Remove
};

/// Applies an edit program; nullopt when it is not applicable to `ref`.
inline std::optional<SlotSet> apply_edit(const SlotSet& ref, const Edit& e) {
  SlotSet out = ref;
  auto holder = std::find_if(out.begin(), out.end(), [&](const Slot& s) { return s.object == e.object; });
  switch (e.op) {
    case EditOp::Add: {
      if (holder != out.end()) return std::nullopt;
      auto free = std::find_if(out.begin(), out.end(), [](const Slot& s) { return s.empty(); });
      if (free == out.end()) return std::nullopt;
      *free = Slot{e.object, e.attr};
      break;
    }
    case EditOp::Remove:
      if (holder == out.end()) return std::nullopt;
      *holder = Slot{};
      break;
    case EditOp::Modify:
      if (holder == out.end() || holder->attr == e.attr) return std::nullopt;
      holder->attr = e.attr;
      break;
  }
  return out;
}

inline Vocabulary synthetic_vocabulary(int n_object_types, int n_attr_values) {
  std::vector<std::string> toks{"PAD", "ADD", "REMOVE", "MODIFY"};
  for (int o = 0; o < n_object_types; ++o) toks.push_back("obj" + std::to_string(o));
  for (int a = 0; a < n_attr_values; ++a) toks.push_back("attr" + std::to_string(a));
  return Vocabulary(std::move(toks));
}

inline TokenSequence edit_caption(const Edit& e, const Vocabulary& vocab) {
  static constexpr const char* kOps[] = {"ADD", "REMOVE", "MODIFY"};
  TokenSequence seq;
  seq.ids.push_back(vocab.id(kOps[static_cast<int>(e.op)]));
  seq.ids.push_back(vocab.id("obj" + std::to_string(e.object)));
  seq.ids.push_back(e.op == EditOp::Remove ? vocab.id("PAD") : vocab.id("attr" + std::to_string(e.attr)));
  return seq;
}

/// Inverse of edit_caption; nullopt when the sequence is not a valid program.
inline std::optional<Edit> parse_edit(const TokenSequence& seq, const Vocabulary& vocab) {
  if (seq.size() != 3) return std::nullopt;
  const std::string& op = vocab.token(seq.ids[0]);
  const std::string& obj = vocab.token(seq.ids[1]);
  const std::string& arg = vocab.token(seq.ids[2]);
  if (obj.rfind("obj", 0) != 0) return std::nullopt;
  Edit e{EditOp::Add, std::stoi(obj.substr(3)), -1};
  if (op == "REMOVE") {
    e.op = EditOp::Remove;
    return arg == "PAD" ? std::optional<Edit>(e) : std::nullopt;
  }
  if (arg.rfind("attr", 0) != 0) return std::nullopt;
  e.attr = std::stoi(arg.substr(4));
  if (op == "ADD") return e;
  if (op == "MODIFY") {
    e.op = EditOp::Modify;
    return e;
  }
  return std::nullopt;
}

/// Seeded embedding for every slot value: row 0 is EMPTY, row
/// 1 + object * n_attr + attr holds (object, attr). Rounded to binary32.
inline Matrix<double> slot_embedding_table(const SyntheticSpec& spec) {
  std::mt19937_64 rng(spec.world_seed ^ 0x5eedf00dcafeULL);
  const std::size_t rows = 1 + static_cast<std::size_t>(spec.n_object_types) * spec.n_attr_values;
  Matrix<double> table = random_normal<double>(rows, spec.d_img, rng, 1.0 / std::sqrt(double(spec.d_img)));
  for (auto& v : table.flat()) v = static_cast<double>(static_cast<float>(v));
  return table;
}

inline std::size_t slot_row(const Slot& s, int n_attr_values) {
  return s.empty() ? 0 : 1 + static_cast<std::size_t>(s.object) * n_attr_values + s.attr;
}

struct SyntheticDataset {
  Corpus corpus;
  std::vector<Triplet> triplets;
  Vocabulary vocab;
  /// Slot layout (patch order) of each corpus image, parallel to corpus ids.
  std::vector<SlotSet> slots;
  Matrix<double> slot_table;
};

/// Rebuilds the slot layout of an image by exact lookup of each patch in the
/// slot table; nullopt if some patch matches no row.
inline std::optional<SlotSet> decode_slots(const ImageFeatures& f, const Matrix<double>& table, int n_attr_values) {
  SlotSet out;
  for (std::size_t r = 0; r < f.patches.rows(); ++r) {
    std::optional<std::size_t> hit;
    for (std::size_t k = 0; k < table.rows() && !hit; ++k)
      if (std::equal(table.row(k).begin(), table.row(k).end(), f.patches.row(r).begin())) hit = k;
    if (!hit) return std::nullopt;
    if (*hit == 0) {
      out.push_back(Slot{});
    } else {
      const int k = static_cast<int>(*hit) - 1;
      out.push_back(Slot{k / n_attr_values, k % n_attr_values});
    }
  }
  return out;
}

namespace detail {

inline std::string pad_id(const char* prefix, std::size_t i, std::size_t total) {
  std::string n = std::to_string(i);
  const std::size_t width = std::max<std::size_t>(5, std::to_string(total).size());
  return prefix + std::string(width > n.size() ? width - n.size() : 0, '0') + n;
}

}  // namespace detail

/// Generates corpus, triplets and vocabulary; a pure function of `spec`.
inline SyntheticDataset generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  auto uniform = [&](int n) { return std::uniform_int_distribution<int>(0, n - 1)(rng); };
  auto coin = [&] { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); };

  const int max_objects = std::min(spec.n_slots, spec.n_object_types);
  auto random_image = [&] {
    std::vector<int> objs(spec.n_object_types);
    for (int i = 0; i < spec.n_object_types; ++i) objs[i] = i;
    std::shuffle(objs.begin(), objs.end(), rng);
    const int k = uniform(max_objects + 1);
    SlotSet s(spec.n_slots);
    for (int i = 0; i < k; ++i) s[i] = Slot{objs[i], uniform(spec.n_attr_values)};
    std::shuffle(s.begin(), s.end(), rng);
    return s;
  };
  auto sample_edit = [&](const SlotSet& ref) -> std::optional<Edit> {
    const double u = coin();
    const EditOp op = u < spec.edit_mix.add                          ? EditOp::Add
                      : u < spec.edit_mix.add + spec.edit_mix.remove ? EditOp::Remove
                                                                     : EditOp::Modify;
    std::vector<int> present, absent;
    for (int o = 0; o < spec.n_object_types; ++o) {
      const bool has = std::any_of(ref.begin(), ref.end(), [o](const Slot& s) { return s.object == o; });
      (has ? present : absent).push_back(o);
    }
    if (op == EditOp::Add) {
      if (absent.empty()) return std::nullopt;
      return Edit{op, absent[uniform(static_cast<int>(absent.size()))], uniform(spec.n_attr_values)};
    }
    if (present.empty()) return std::nullopt;
    const int o = present[uniform(static_cast<int>(present.size()))];
    if (op == EditOp::Remove) return Edit{op, o, -1};
    if (spec.n_attr_values < 2) return std::nullopt;
    const int cur = std::find_if(ref.begin(), ref.end(), [o](const Slot& s) { return s.object == o; })->attr;
    int a = uniform(spec.n_attr_values - 1);
    if (a >= cur) ++a;
    return Edit{op, o, a};
  };

  std::vector<SlotSet> images;
  std::map<SlotSet, std::size_t> by_content;
  struct Pending {
    std::size_t ref, target;
    Edit edit;
  };
  std::vector<Pending> pending;

  const int n_trip = spec.triplet_count();
  constexpr int kMaxAttempts = 10000;
  for (int t = 0; t < n_trip; ++t) {
    const std::size_t reserve_after = static_cast<std::size_t>(n_trip - t - 1);
    const std::size_t budget = static_cast<std::size_t>(spec.corpus_size) - reserve_after - images.size();
    bool placed = false;
    for (int attempt = 0; attempt < kMaxAttempts && !placed; ++attempt) {
      SlotSet ref;
      std::optional<std::size_t> ref_idx;
      if (!images.empty() && coin() < 0.5) {
        ref_idx = static_cast<std::size_t>(uniform(static_cast<int>(images.size())));
        ref = images[*ref_idx];
      } else {
        ref = random_image();
        if (auto it = by_content.find(canonical(ref)); it != by_content.end()) {
          ref_idx = it->second;
          ref = images[it->second];
        }
      }
      auto edit = sample_edit(ref);
      if (!edit) continue;  // resample: edit not applicable to this reference
      auto target = apply_edit(ref, *edit);
      if (!target) continue;
      auto hit = by_content.find(canonical(*target));
      const std::size_t needed = (ref_idx ? 0u : 1u) + (hit == by_content.end() ? 1u : 0u);
      if (needed > budget) continue;
      if (!ref_idx) {
        ref_idx = images.size();
        by_content.emplace(canonical(ref), images.size());
        images.push_back(ref);
      }
      std::size_t target_idx;
      if (hit != by_content.end()) {
        target_idx = hit->second;
      } else {
        SlotSet laid_out = *target;
        std::shuffle(laid_out.begin(), laid_out.end(), rng);
        target_idx = images.size();
        by_content.emplace(canonical(laid_out), images.size());
        images.push_back(laid_out);
      }
      pending.push_back({*ref_idx, target_idx, *edit});
      placed = true;
    }
    if (!placed) throw ConfigError("synthetic spec: could not place triplet " + std::to_string(t));
  }

  for (int attempt = 0; images.size() < static_cast<std::size_t>(spec.corpus_size); ++attempt) {
    if (attempt > kMaxAttempts * spec.corpus_size)
      throw ConfigError("synthetic spec: not enough distinct images for corpus_size " +
                        std::to_string(spec.corpus_size));
    // Distractors are near misses: one edit away from some target. A random
    // image is used when the neighbour already exists.
    if (!pending.empty()) {
      const SlotSet& base = images[pending[static_cast<std::size_t>(uniform(static_cast<int>(pending.size())))].target];
      if (auto e = sample_edit(base))
        if (auto s = apply_edit(base, *e); s && by_content.emplace(canonical(*s), images.size()).second) {
          images.push_back(*s);
          continue;
        }
    }
    SlotSet s = random_image();
    if (by_content.emplace(canonical(s), images.size()).second) images.push_back(s);
  }

  // Shuffle corpus order so that targets do not sit next to their references.
  std::vector<std::size_t> perm(images.size());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<std::size_t> position(images.size());
  for (std::size_t i = 0; i < perm.size(); ++i) position[perm[i]] = i;

  SyntheticDataset ds;
  ds.vocab = synthetic_vocabulary(spec.n_object_types, spec.n_attr_values);
  ds.slot_table = slot_embedding_table(spec);
  ds.slots.resize(images.size());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    const SlotSet& s = images[perm[i]];
    Matrix<double> patches(s.size(), spec.d_img);
    for (std::size_t k = 0; k < s.size(); ++k) {
      auto src = ds.slot_table.row(slot_row(s[k], spec.n_attr_values));
      std::copy(src.begin(), src.end(), patches.row(k).begin());
    }
    ds.corpus.add(detail::pad_id("img", i, images.size()), ImageFeatures{std::move(patches)});
    ds.slots[i] = s;
  }

  const std::size_t subset_size = std::min<std::size_t>(spec.k_subset, images.size() - 1);
  for (std::size_t q = 0; q < pending.size(); ++q) {
    const std::size_t ref = position[pending[q].ref];
    const std::size_t tgt = position[pending[q].target];
    Triplet t;
    t.query_id = detail::pad_id("q", q, pending.size());
    t.reference_id = ds.corpus.id(ref);
    t.caption = edit_caption(pending[q].edit, ds.vocab);
    t.target_id = ds.corpus.id(tgt);
    if (subset_size >= 2) {
      // target plus the hardest negatives by slot overlap, ties by corpus index
      std::vector<std::pair<std::size_t, std::size_t>> cands;
      for (std::size_t i = 0; i < ds.slots.size(); ++i)
        if (i != ref && i != tgt) cands.emplace_back(slot_overlap(ds.slots[i], ds.slots[tgt]), i);
      std::stable_sort(cands.begin(), cands.end(), [](auto& a, auto& b) { return a.first > b.first; });
      std::vector<std::size_t> members{tgt};
      for (std::size_t k = 0; k + 1 < subset_size; ++k) members.push_back(cands[k].second);
      std::sort(members.begin(), members.end());
      std::vector<std::string> ids;
      for (auto m : members) ids.push_back(ds.corpus.id(m));
      t.subset_ids = std::move(ids);
    }
    ds.triplets.push_back(std::move(t));
  }
  return ds;
}

}  // namespace sprc
