#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "cpdet/errors.hpp"

namespace cpdet {

// ---------------------------------------------------------------------------
// Flat key = value configuration files. Lines are `key = value`; blank lines
// and lines starting with '#' are ignored; whitespace around keys and values
// is trimmed. Command-line flags override file entries by setting the same
// key afterwards.
// ---------------------------------------------------------------------------

struct KvConfig {
  std::map<std::string, std::string> values;

  static std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
  }

  static KvConfig from_text(const std::string& text) {
    KvConfig cfg;
    std::istringstream in(text);
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      std::string t = trim(line);
      if (t.empty() || t[0] == '#') continue;
      size_t eq = t.find('=');
      if (eq == std::string::npos)
        throw InputError("config line " + std::to_string(lineno) + " is not `key = value`: " + t);
      std::string key = trim(t.substr(0, eq));
      std::string value = trim(t.substr(eq + 1));
      if (key.empty()) throw InputError("config line " + std::to_string(lineno) + " has an empty key");
      cfg.values[key] = value;
    }
    return cfg;
  }

  static KvConfig from_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw InputError("cannot open config '" + path + "'");
    std::ostringstream ss;
    ss << f.rdbuf();
    return from_text(ss.str());
  }

  bool has(const std::string& key) const { return values.count(key) > 0; }
  void set(const std::string& key, const std::string& value) { values[key] = value; }

  // Inverse of from_text (keys come back sorted; comments are not kept).
  std::string to_text() const {
    std::ostringstream out;
    for (const auto& [key, value] : values) out << key << " = " << value << "\n";
    return out.str();
  }

  std::string get_str(const std::string& key, const std::string& fallback) const {
    auto it = values.find(key);
    return it == values.end() ? fallback : it->second;
  }

  double get_double(const std::string& key, double fallback) const {
    auto it = values.find(key);
    if (it == values.end()) return fallback;
    try {
      size_t pos = 0;
      double v = std::stod(it->second, &pos);
      if (pos != it->second.size()) throw InputError("");
      return v;
    } catch (...) {
      throw InputError("config key '" + key + "' is not a number: " + it->second);
    }
  }

  int64_t get_int(const std::string& key, int64_t fallback) const {
    auto it = values.find(key);
    if (it == values.end()) return fallback;
    try {
      size_t pos = 0;
      long long v = std::stoll(it->second, &pos);
      if (pos != it->second.size()) throw InputError("");
      return static_cast<int64_t>(v);
    } catch (...) {
      throw InputError("config key '" + key + "' is not an integer: " + it->second);
    }
  }

  size_t get_size(const std::string& key, size_t fallback) const {
    int64_t v = get_int(key, static_cast<int64_t>(fallback));
    if (v < 0) throw InputError("config key '" + key + "' must be non-negative");
    return static_cast<size_t>(v);
  }

  bool get_bool(const std::string& key, bool fallback) const {
    auto it = values.find(key);
    if (it == values.end()) return fallback;
    const std::string& v = it->second;
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw InputError("config key '" + key + "' is not a boolean: " + v);
  }

  std::vector<double> get_doubles(const std::string& key, std::vector<double> fallback) const {
    auto it = values.find(key);
    if (it == values.end()) return fallback;
    std::vector<double> out;
    std::istringstream in(it->second);
    std::string tok;
    while (std::getline(in, tok, ',')) {
      tok = trim(tok);
      if (tok.empty()) continue;
      try {
        out.push_back(std::stod(tok));
      } catch (...) {
        throw InputError("config key '" + key + "' has a bad list entry: " + tok);
      }
    }
    return out;
  }

  std::vector<std::string> get_list(const std::string& key, std::vector<std::string> fallback) const {
    auto it = values.find(key);
    if (it == values.end()) return fallback;
    std::vector<std::string> out;
    std::istringstream in(it->second);
    std::string tok;
    while (std::getline(in, tok, ',')) {
      tok = trim(tok);
      if (!tok.empty()) out.push_back(tok);
    }
    return out;
  }
};

// ---------------------------------------------------------------------------
// Training configuration: one structure for all three regimes.
// ---------------------------------------------------------------------------

struct TrainConfig {
  std::string regime = "pretrain";  // pretrain | visual-prompt | tune-prompt

  // Optimization.
  double lr = 1e-3;          // every non-prompt parameter group
  double lr_prompt = 5e-2;   // learnable prompt embeddings (tune-prompt)
  double weight_decay = 1e-4;
  std::vector<double> milestones = {0.8, 0.9};  // fractions of total steps
  double decay = 0.1;
  size_t steps = 400;
  size_t batch_size = 4;
  uint64_t seed = 0;
  size_t num_negatives = 80;

  // Toy model dimensions.
  size_t d = 32;
  size_t heads = 2;
  size_t queries = 20;
  size_t decoder_layers = 2;
  size_t sample_points = 4;

  // Loss / structure toggles (ablation harness).
  bool use_psf = true;
  bool use_mfg = true;
  bool use_aux_loss = true;
  double prompt_loss_weight = 6.0;
  size_t super_class_m = 10;

  // Data.
  size_t image_size = 64;
  size_t train_scenes = 32;
  uint64_t data_seed = 1000;
  size_t min_objects = 1;
  size_t max_objects = 3;
  std::vector<std::string> colors;    // palette subset by name; empty = all
  std::vector<std::string> held_out;  // category phrases excluded from scenes

  void validate() const {
    if (!(lr > 0) || !(lr_prompt > 0)) throw InputError("learning rates must be positive");
    if (regime != "pretrain" && regime != "visual-prompt" && regime != "tune-prompt")
      throw InputError("unknown regime '" + regime + "'");
    double prev = 0.0;
    for (double m : milestones) {
      if (!(m > prev) || !(m < 1.0))
        throw InputError("milestones must be strictly increasing within (0, 1)");
      prev = m;
    }
    if (batch_size == 0) throw InputError("batch size must be positive");
    if (super_class_m == 0) throw InputError("super-class width must be positive");
  }

  static TrainConfig from_kv(const KvConfig& kv) {
    static const std::vector<std::string> known = {
        "regime",       "lr",           "lr_prompt",     "weight_decay", "milestones",
        "decay",        "steps",        "batch_size",    "seed",         "num_negatives",
        "d",            "heads",        "queries",       "decoder_layers", "sample_points",
        "use_psf",      "use_mfg",      "use_aux_loss",  "prompt_loss_weight",
        "super_class_m", "image_size",  "train_scenes",  "data_seed",
        "min_objects",  "max_objects",   "colors",        "held_out"};
    for (const auto& [key, value] : kv.values) {
      bool ok = false;
      for (const std::string& k : known)
        if (k == key) ok = true;
      if (!ok) throw InputError("unknown config key '" + key + "'");
    }
    TrainConfig c;
    c.regime = kv.get_str("regime", c.regime);
    c.lr = kv.get_double("lr", c.lr);
    c.lr_prompt = kv.get_double("lr_prompt", c.lr_prompt);
    c.weight_decay = kv.get_double("weight_decay", c.weight_decay);
    c.milestones = kv.get_doubles("milestones", c.milestones);
    c.decay = kv.get_double("decay", c.decay);
    c.steps = kv.get_size("steps", c.steps);
    c.batch_size = kv.get_size("batch_size", c.batch_size);
    c.seed = static_cast<uint64_t>(kv.get_int("seed", static_cast<int64_t>(c.seed)));
    c.num_negatives = kv.get_size("num_negatives", c.num_negatives);
    c.d = kv.get_size("d", c.d);
    c.heads = kv.get_size("heads", c.heads);
    c.queries = kv.get_size("queries", c.queries);
    c.decoder_layers = kv.get_size("decoder_layers", c.decoder_layers);
    c.sample_points = kv.get_size("sample_points", c.sample_points);
    c.use_psf = kv.get_bool("use_psf", c.use_psf);
    c.use_mfg = kv.get_bool("use_mfg", c.use_mfg);
    c.use_aux_loss = kv.get_bool("use_aux_loss", c.use_aux_loss);
    c.prompt_loss_weight = kv.get_double("prompt_loss_weight", c.prompt_loss_weight);
    c.super_class_m = kv.get_size("super_class_m", c.super_class_m);
    c.image_size = kv.get_size("image_size", c.image_size);
    c.train_scenes = kv.get_size("train_scenes", c.train_scenes);
    c.data_seed = static_cast<uint64_t>(kv.get_int("data_seed", static_cast<int64_t>(c.data_seed)));
    c.min_objects = kv.get_size("min_objects", c.min_objects);
    c.max_objects = kv.get_size("max_objects", c.max_objects);
    c.colors = kv.get_list("colors", c.colors);
    c.held_out = kv.get_list("held_out", c.held_out);
    c.validate();
    return c;
  }

  KvConfig to_kv() const {
    KvConfig kv;
    kv.set("regime", regime);
    auto num = [](double v) {
      std::ostringstream ss;
      ss.precision(17);
      ss << v;
      return ss.str();
    };
    kv.set("lr", num(lr));
    kv.set("lr_prompt", num(lr_prompt));
    kv.set("weight_decay", num(weight_decay));
    {
      std::ostringstream ss;
      for (size_t i = 0; i < milestones.size(); ++i) ss << (i ? "," : "") << milestones[i];
      kv.set("milestones", ss.str());
    }
    kv.set("decay", num(decay));
    kv.set("steps", std::to_string(steps));
    kv.set("batch_size", std::to_string(batch_size));
    kv.set("seed", std::to_string(seed));
    kv.set("num_negatives", std::to_string(num_negatives));
    kv.set("d", std::to_string(d));
    kv.set("heads", std::to_string(heads));
    kv.set("queries", std::to_string(queries));
    kv.set("decoder_layers", std::to_string(decoder_layers));
    kv.set("sample_points", std::to_string(sample_points));
    kv.set("use_psf", use_psf ? "true" : "false");
    kv.set("use_mfg", use_mfg ? "true" : "false");
    kv.set("use_aux_loss", use_aux_loss ? "true" : "false");
    kv.set("prompt_loss_weight", num(prompt_loss_weight));
    kv.set("super_class_m", std::to_string(super_class_m));
    kv.set("image_size", std::to_string(image_size));
    kv.set("train_scenes", std::to_string(train_scenes));
    kv.set("data_seed", std::to_string(data_seed));
    kv.set("min_objects", std::to_string(min_objects));
    kv.set("max_objects", std::to_string(max_objects));
    auto join = [](const std::vector<std::string>& parts) {
      std::string out;
      for (const std::string& p : parts) {
        if (!out.empty()) out += ',';
        out += p;
      }
      return out;
    };
    kv.set("colors", join(colors));
    kv.set("held_out", join(held_out));
    return kv;
  }
};

}  // namespace cpdet
