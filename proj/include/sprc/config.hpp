#pragma once

// Training configuration and its flat `key = value` file format.

#include <charconv>
#include <type_traits>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "sprc/objective.hpp"

namespace sprc {

struct TrainConfig {
  double gamma = 0.8;
  std::size_t prompt_length = 32;
  double lr = 1e-3;
  double weight_decay = 0.05;
  std::string schedule = "cosine";
  std::size_t batch_size = 16;
  std::size_t steps = 2000;
  std::uint64_t seed = 0;
  double ema_decay = 0.999;
  AuxiliaryConfig aux;
  Mechanism mechanism = Mechanism::Sprc;
  PromptMode prompt_mode = PromptMode::Full;
  double tau = 100.0;
  bool tau_trainable = false;
  double clip_norm = 1.0;
  AlignNorm align_norm = AlignNorm::Frobenius;
  bool exclude_reference = true;

  // architecture
  std::size_t d_model = 32;
  std::size_t d_embed = 32;
  std::size_t n_heads = 2;
  std::size_t d_ff = 64;
  std::size_t n_layers_text = 1;
  std::size_t n_layers_img = 1;
  std::size_t gen_layers = 1;
  std::size_t mlp_layers = 2;
  std::size_t inversion_hidden = 32;
  std::size_t max_caption_len = kDefaultMaxCaptionLen;

  // Real-image preprocessing constants; inert on synthetic features.
  std::size_t image_size = 224;
  double padding_ratio = 1.25;

  /// Non-SPRC mechanisms have no generated prompt, hence no auxiliary prompt
  /// and no alignment term.
  void normalize() {
    if (mechanism != Mechanism::Sprc) {
      aux.inner_steps = 0;
      gamma = 0.0;
    }
  }

  void validate() const {
    if (!(gamma >= 0.0)) throw ConfigError("gamma must be >= 0");
    if (prompt_length == 0 && mechanism == Mechanism::Sprc) throw ConfigError("prompt_length must be >= 1 for SPRC");
    if (!(lr > 0.0)) throw ConfigError("lr must be positive");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
    if (schedule != "cosine") throw ConfigError("schedule must be 'cosine'");
    if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
    if (!(ema_decay >= 0.0 && ema_decay <= 1.0)) throw ConfigError("ema_decay must lie in [0, 1]");
    if (!(tau > 0.0)) throw ConfigError("tau must be positive");
    if (!(clip_norm >= 0.0)) throw ConfigError("clip_norm must be >= 0");
    if (!(padding_ratio > 0.0) || image_size == 0) throw ConfigError("image preprocessing constants must be positive");
    aux.validate();
    model_config(1, 1).validate();
  }

  ModelConfig model_config(std::size_t vocab_size, std::size_t d_img) const {
    ModelConfig m;
    m.vocab_size = vocab_size;
    m.d_img = d_img;
    m.d_model = d_model;
    m.d_embed = d_embed;
    m.n_heads = n_heads;
    m.d_ff = d_ff;
    m.n_layers_text = n_layers_text;
    m.n_layers_img = n_layers_img;
    m.gen_layers = gen_layers;
    m.mlp_layers = mlp_layers;
    m.prompt_length = prompt_length;
    m.max_caption_len = max_caption_len;
    m.inversion_hidden = inversion_hidden;
    m.tau = tau;
    m.tau_trainable = tau_trainable;
    return m;
  }
};

namespace detail {

template <class N>
N parse_number(const std::string& key, const std::string& v) {
  N out{};
  if constexpr (std::is_floating_point_v<N>) {
    try {
      std::size_t pos = 0;
      out = static_cast<N>(std::stod(v, &pos));
      if (pos != v.size()) throw std::invalid_argument(v);
    } catch (const std::exception&) {
      throw ConfigError("config key '" + key + "': not a number: '" + v + "'");
    }
  } else {
    auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size())
      throw ConfigError("config key '" + key + "': not an integer: '" + v + "'");
  }
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" + v + "'");
}

inline std::string fmt_double(double v) {
  std::ostringstream ss;
  ss.precision(17);
  ss << v;
  return ss.str();
}

struct Field {
  std::function<void(TrainConfig&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

inline const std::map<std::string, Field>& config_fields() {
  static const std::map<std::string, Field> fields = [] {
    std::map<std::string, Field> f;
    auto num = [&f](const std::string& key, auto member) {
      using M = std::remove_reference_t<decltype(std::declval<TrainConfig&>().*member)>;
      f[key] = Field{[key, member](TrainConfig& c, const std::string& v) { c.*member = parse_number<M>(key, v); },
                     [member](const TrainConfig& c) {
                       if constexpr (std::is_floating_point_v<M>)
                         return fmt_double(c.*member);
                       else
                         return std::to_string(c.*member);
                     }};
    };
    auto flag = [&f](const std::string& key, bool TrainConfig::*member) {
      f[key] = Field{[key, member](TrainConfig& c, const std::string& v) { c.*member = parse_bool(key, v); },
                     [member](const TrainConfig& c) { return std::string(c.*member ? "true" : "false"); }};
    };
    num("gamma", &TrainConfig::gamma);
    num("prompt_length", &TrainConfig::prompt_length);
    num("lr", &TrainConfig::lr);
    num("weight_decay", &TrainConfig::weight_decay);
    num("batch_size", &TrainConfig::batch_size);
    num("steps", &TrainConfig::steps);
    num("seed", &TrainConfig::seed);
    num("ema_decay", &TrainConfig::ema_decay);
    num("tau", &TrainConfig::tau);
    num("clip_norm", &TrainConfig::clip_norm);
    num("d_model", &TrainConfig::d_model);
    num("d_embed", &TrainConfig::d_embed);
    num("n_heads", &TrainConfig::n_heads);
    num("d_ff", &TrainConfig::d_ff);
    num("n_layers_text", &TrainConfig::n_layers_text);
    num("n_layers_img", &TrainConfig::n_layers_img);
    num("gen_layers", &TrainConfig::gen_layers);
    num("mlp_layers", &TrainConfig::mlp_layers);
    num("inversion_hidden", &TrainConfig::inversion_hidden);
    num("max_caption_len", &TrainConfig::max_caption_len);
    num("image_size", &TrainConfig::image_size);
    num("padding_ratio", &TrainConfig::padding_ratio);
    flag("tau_trainable", &TrainConfig::tau_trainable);
    flag("exclude_reference", &TrainConfig::exclude_reference);
    f["schedule"] = Field{[](TrainConfig& c, const std::string& v) { c.schedule = v; },
                          [](const TrainConfig& c) { return c.schedule; }};
    f["mechanism"] = Field{[](TrainConfig& c, const std::string& v) { c.mechanism = parse_mechanism(v); },
                           [](const TrainConfig& c) { return std::string(to_string(c.mechanism)); }};
    f["prompt_mode"] = Field{[](TrainConfig& c, const std::string& v) { c.prompt_mode = parse_prompt_mode(v); },
                             [](const TrainConfig& c) { return std::string(to_string(c.prompt_mode)); }};
    f["align_norm"] = Field{
        [](TrainConfig& c, const std::string& v) {
          if (v == "frobenius")
            c.align_norm = AlignNorm::Frobenius;
          else if (v == "per_token_mean")
            c.align_norm = AlignNorm::PerTokenMean;
          else
            throw ConfigError("align_norm must be frobenius or per_token_mean");
        },
        [](const TrainConfig& c) {
          return std::string(c.align_norm == AlignNorm::Frobenius ? "frobenius" : "per_token_mean");
        }};
    f["aux_inner_steps"] = Field{[](TrainConfig& c, const std::string& v) { c.aux.inner_steps = parse_number<int>("aux_inner_steps", v); },
                                 [](const TrainConfig& c) { return std::to_string(c.aux.inner_steps); }};
    f["aux_inner_lr"] = Field{[](TrainConfig& c, const std::string& v) { c.aux.inner_lr = parse_number<double>("aux_inner_lr", v); },
                              [](const TrainConfig& c) { return fmt_double(c.aux.inner_lr); }};
    f["aux_backtracking"] = Field{[](TrainConfig& c, const std::string& v) { c.aux.backtracking = parse_bool("aux_backtracking", v); },
                                  [](const TrainConfig& c) { return std::string(c.aux.backtracking ? "true" : "false"); }};
    f["aux_init"] = Field{
        [](TrainConfig& c, const std::string& v) {
          if (v == "FROM_CURRENT_PROMPT")
            c.aux.init_mode = AuxInit::FromCurrentPrompt;
          else if (v == "ZERO")
            c.aux.init_mode = AuxInit::Zero;
          else
            throw ConfigError("aux_init must be FROM_CURRENT_PROMPT or ZERO");
        },
        [](const TrainConfig& c) {
          return std::string(c.aux.init_mode == AuxInit::Zero ? "ZERO" : "FROM_CURRENT_PROMPT");
        }};
    return f;
  }();
  return fields;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

inline std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& [k, _] : detail::config_fields()) keys.push_back(k);
  return keys;
}

inline void set_config_value(TrainConfig& cfg, const std::string& key, const std::string& value) {
  const auto& fields = detail::config_fields();
  auto it = fields.find(key);
  if (it == fields.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second.set(cfg, value);
}

inline std::string get_config_value(const TrainConfig& cfg, const std::string& key) {
  const auto& fields = detail::config_fields();
  auto it = fields.find(key);
  if (it == fields.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second.get(cfg);
}

/// Applies `key = value` lines on top of `base`. '#' starts a comment.
inline TrainConfig parse_config(const std::string& text, TrainConfig base = {}) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    set_config_value(base, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
  base.normalize();
  base.validate();
  return base;
}

inline TrainConfig load_config(const std::filesystem::path& path, TrainConfig base = {}) {
  return parse_config(io::read_file(path), std::move(base));
}

inline std::string format_config(const TrainConfig& cfg) {
  std::string out;
  for (const auto& [k, f] : detail::config_fields()) out += k + " = " + f.get(cfg) + "\n";
  return out;
}

inline std::map<std::string, std::string> config_map(const TrainConfig& cfg) {
  std::map<std::string, std::string> out;
  for (const auto& [k, f] : detail::config_fields()) out[k] = f.get(cfg);
  return out;
}

}  // namespace sprc
