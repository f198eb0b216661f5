#pragma once

// Experiment configuration.
//
// File grammar (a TOML subset):
//   line     := blank | comment | section | pair
//   comment  := '#' anything
//   section  := '[' name ']'           name: [a-z0-9_.]+
//   pair     := key '=' value [comment]
//   value    := integer | real | true | false | '"' chars '"'
// Keys are looked up as "section.key". Every key must be known; a key may
// appear once. `preset = "paper" | "desk"` (top level) selects the base values
// and must come before any other key.

#include <cctype>
#include <charconv>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>

#include "etk/checkpoint.hpp"
#include "etk/encoders.hpp"
#include "etk/ethd.hpp"
#include "etk/mec.hpp"
#include "etk/scheduler.hpp"
#include "etk/synth_world.hpp"
#include "etk/vaid.hpp"

namespace etk {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DataConfig {
  std::size_t vaid_sequences = 128, vaid_length = 220;
  std::size_t ethd_sequences = 64, ethd_length = 40;
  std::uint64_t seed = 5;
};

struct InferenceConfig {
  std::size_t window = sched::kDefaultWindows.window;
  std::size_t overlap = sched::kDefaultWindows.overlap;
  int steps = 25;
  double eta = 0.0;
};

struct MecConfig {
  std::size_t codebook_samples = 1000;
  std::size_t classifier_steps = 400, classifier_batch = 64;
  mec::SynonymTable synonyms = mec::default_synonyms();
};

struct Config {
  std::string preset = "paper";
  synth::WorldParams world;
  DataConfig data;
  PretrainOptions encoders;
  JointTrainOptions vaid;
  std::size_t dicte_d_model = 32;
  EthdDims ethd_dims;
  EthdTrainOptions ethd;
  InferenceConfig inference;
  MecConfig mec;
  std::uint64_t model_seed = 3;

  /// Values stated for the full-scale system: Di-CTE lr 1e-4 with batch 16,
  /// backbone lr 1e-5 with batch 1, p_gt 0.6, prefix ratio 0.8, 25 steps,
  /// window 120 / overlap 24.
  static Config paper() {
    Config c;
    c.preset = "paper";
    c.vaid.dicte_lr = 1e-4;
    c.vaid.seq_batch = 16;
    c.ethd.lr = 1e-5;
    c.ethd.batch = 1;
    return c;
  }

  /// Learning rates and batches that train the desk-scale models in minutes.
  static Config desk() {
    Config c;
    c.preset = "desk";
    return c;
  }

  /// Canonical key=value dump; its FNV-1a hash identifies the config.
  std::string canonical() const;
  std::string hash() const { return ckpt::hex64(ckpt::fnv1a(canonical())); }
};

namespace detail {

struct Value {
  std::string text;
  bool quoted = false;
  std::size_t line = 0;
};

inline std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

inline bool valid_name(const std::string& s) {
  if (s.empty()) return false;
  for (char ch : s)
    if (!(std::islower(static_cast<unsigned char>(ch)) || std::isdigit(static_cast<unsigned char>(ch)) || ch == '_' ||
          ch == '.'))
      return false;
  return true;
}

/// Ordered "section.key" -> raw value.
inline std::vector<std::pair<std::string, Value>> parse_pairs(const std::string& text) {
  std::vector<std::pair<std::string, Value>> out;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string line, section;
  for (std::size_t no = 1; std::getline(in, line); ++no) {
    auto err = [&](const std::string& m) { return ConfigError("line " + std::to_string(no) + ": " + m); };
    std::string s = trim(line);
    if (s.empty() || s[0] == '#') continue;
    if (s[0] == '[') {
      if (s.back() != ']') throw err("unterminated section header");
      section = trim(s.substr(1, s.size() - 2));
      if (!valid_name(section)) throw err("bad section name '" + section + "'");
      continue;
    }
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw err("expected key = value");
    const std::string key = trim(s.substr(0, eq));
    if (!valid_name(key)) throw err("bad key '" + key + "'");
    std::string rest = trim(s.substr(eq + 1));
    Value v{"", false, no};
    if (!rest.empty() && rest[0] == '"') {
      const auto close = rest.find('"', 1);
      if (close == std::string::npos) throw err("unterminated string");
      v.text = rest.substr(1, close - 1);
      v.quoted = true;
      rest = trim(rest.substr(close + 1));
    } else {
      const auto hash = rest.find('#');
      v.text = trim(rest.substr(0, hash));
      rest = hash == std::string::npos ? "" : rest.substr(hash);
      if (v.text.empty()) throw err("missing value for '" + key + "'");
    }
    if (!rest.empty() && rest[0] != '#') throw err("trailing characters after value");
    const std::string full = section.empty() ? key : section + "." + key;
    if (!seen.insert(full).second) throw err("duplicate key '" + full + "'");
    out.emplace_back(full, v);
  }
  return out;
}

template <class T>
T parse_number(const std::string& key, const Value& v) {
  if (v.quoted) throw ConfigError("line " + std::to_string(v.line) + ": '" + key + "' expects a number");
  T out{};
  const char* b = v.text.data();
  const char* e = b + v.text.size();
  auto [p, ec] = std::from_chars(b, e, out);
  if (ec != std::errc() || p != e)
    throw ConfigError("line " + std::to_string(v.line) + ": bad number '" + v.text + "' for '" + key + "'");
  return out;
}

/// Binds config keys to fields, both for parsing and for the canonical dump.
template <class Visitor>
void visit_fields(Config& c, Visitor&& f) {
  auto& w = c.world;
  f("world.d_audio", w.d_audio);
  f("world.window", w.window);
  f("world.d_lip", w.d_lip);
  f("world.d_exp", w.d_exp);
  f("world.h", w.h);
  f("world.w", w.w_sp);
  f("world.c", w.c);
  f("world.identity_rank", w.identity_rank);
  f("world.d_emotion_features", w.d_emotion_features);
  f("world.audio_smoothness", w.audio_smoothness);
  f("world.seed", w.seed);
  f("data.vaid_sequences", c.data.vaid_sequences);
  f("data.vaid_length", c.data.vaid_length);
  f("data.ethd_sequences", c.data.ethd_sequences);
  f("data.ethd_length", c.data.ethd_length);
  f("data.seed", c.data.seed);
  f("encoders.steps", c.encoders.steps);
  f("encoders.batch", c.encoders.batch);
  f("encoders.lr", c.encoders.lr);
  f("encoders.seed", c.encoders.seed);
  f("vaid.steps", c.vaid.steps);
  f("vaid.batch", c.vaid.seq_batch);
  f("vaid.lip_batch", c.vaid.lip_batch);
  f("vaid.lr", c.vaid.lr);
  f("vaid.dicte_lr", c.vaid.dicte_lr);
  f("vaid.club_lr", c.vaid.club_lr);
  f("vaid.club_inner", c.vaid.club_inner);
  f("vaid.club_warmup", c.vaid.club_warmup);
  f("vaid.prefix_ratio", c.vaid.prefix_ratio);
  f("vaid.tau", c.vaid.weights.tau);
  f("vaid.alpha", c.vaid.weights.alpha);
  f("vaid.beta", c.vaid.weights.beta);
  f("vaid.club_weight", c.vaid.weights.club);
  f("vaid.seed", c.vaid.seed);
  f("vaid.d_model", c.dicte_d_model);
  f("ethd.steps", c.ethd.steps);
  f("ethd.batch", c.ethd.batch);
  f("ethd.clip", c.ethd.clip);
  f("ethd.lr", c.ethd.lr);
  f("ethd.p_gt", c.ethd.p_gt);
  f("ethd.seed", c.ethd.seed);
  f("ethd.d_model", c.ethd_dims.d_model);
  f("ethd.heads", c.ethd_dims.heads);
  f("ethd.stages", c.ethd_dims.stages);
  f("inference.window", c.inference.window);
  f("inference.overlap", c.inference.overlap);
  f("inference.steps", c.inference.steps);
  f("inference.eta", c.inference.eta);
  f("mec.codebook_samples", c.mec.codebook_samples);
  f("mec.classifier_steps", c.mec.classifier_steps);
  f("mec.classifier_batch", c.mec.classifier_batch);
  f("seeds.model", c.model_seed);
}

template <class T>
std::string format_value(const T& v) {
  if constexpr (std::is_floating_point_v<T>) {
    char buf[64];
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, p);
  } else {
    return std::to_string(v);
  }
}

}  // namespace detail

inline std::string Config::canonical() const {
  Config copy = *this;
  std::ostringstream os;
  os << "preset=" << preset << '\n';
  detail::visit_fields(copy, [&](const char* key, const auto& v) { os << key << '=' << detail::format_value(v) << '\n'; });
  for (const auto& [k, syn] : mec.synonyms) {
    os << "mec.synonyms." << k << '=';
    for (const auto& s : syn) os << s << ',';
    os << '\n';
  }
  return os.str();
}

/// Parses a config text. Unknown keys, duplicates and malformed values throw ConfigError.
inline Config parse_config(const std::string& text) {
  const auto pairs = detail::parse_pairs(text);
  Config c = Config::paper();
  std::size_t i = 0;
  if (!pairs.empty() && pairs[0].first == "preset") {
    const auto& v = pairs[0].second;
    if (v.text == "paper") c = Config::paper();
    else if (v.text == "desk") c = Config::desk();
    else throw ConfigError("line " + std::to_string(v.line) + ": unknown preset '" + v.text + "'");
    i = 1;
  }
  for (; i < pairs.size(); ++i) {
    const auto& [key, v] = pairs[i];
    if (key == "preset") throw ConfigError("line " + std::to_string(v.line) + ": preset must be the first key");
    if (key.rfind("mec.synonyms.", 0) == 0) {
      const std::string emo = key.substr(13);
      if (!mec::emotion_index(emo)) throw ConfigError("line " + std::to_string(v.line) + ": unknown emotion '" + emo + "'");
      if (!v.quoted) throw ConfigError("line " + std::to_string(v.line) + ": synonyms must be a quoted list");
      std::istringstream ss(v.text);
      for (std::string w; std::getline(ss, w, ',');)
        if (auto t = detail::trim(w); !t.empty()) c.mec.synonyms[emo].push_back(t);
      continue;
    }
    bool found = false;
    detail::visit_fields(c, [&](const char* name, auto& field) {
      if (found || key != name) return;
      found = true;
      field = detail::parse_number<std::remove_reference_t<decltype(field)>>(key, v);
    });
    if (!found) throw ConfigError("line " + std::to_string(v.line) + ": unknown key '" + key + "'");
  }
  try {
    c.world.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("invalid world: ") + e.what());
  }
  if (c.inference.overlap >= c.inference.window) throw ConfigError("inference.overlap must be < inference.window");
  if (c.inference.steps < 1) throw ConfigError("inference.steps must be >= 1");
  if (!(c.ethd.p_gt >= 0 && c.ethd.p_gt <= 1)) throw ConfigError("ethd.p_gt must be in [0, 1]");
  if (c.ethd_dims.d_model % c.ethd_dims.heads != 0) throw ConfigError("ethd.d_model must be divisible by ethd.heads");
  return c;
}

inline Config load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

}  // namespace etk
