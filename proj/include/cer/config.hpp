#pragma once

// Layered key=value configuration: defaults < preset < config file <
// environment (CER_<KEY>) < command-line flags.

#include <cctype>
#include <charconv>
#include <cstdlib>
#include <map>
#include <string>
#include <vector>

#include "cer/csv.hpp"
#include "cer/error.hpp"
#include "cer/fusion.hpp"
#include "cer/io.hpp"
#include "cer/training.hpp"

namespace cer {

using ConfigMap = std::map<std::string, std::string>;

enum class ValueType { count, real, boolean };

struct ConfigKey {
  const char* name;
  ValueType type;
  const char* help;
};

inline const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = {
      {"epochs", ValueType::count, "training epochs"},
      {"batch_size", ValueType::count, "samples per optimisation step"},
      {"base_lr", ValueType::real, "learning rate after warmup"},
      {"warmup_frac", ValueType::real, "warmup length as a fraction of all steps"},
      {"warmup_steps", ValueType::count, "explicit warmup length (overrides warmup_frac)"},
      {"seed", ValueType::count, "seed for initialisation, shuffling and augmentation"},
      {"freeze_encoders", ValueType::boolean, "train the fusion head only"},
      {"grad_clip", ValueType::real, "global gradient-norm clip, 0 disables"},
      {"flip_prob", ValueType::real, "horizontal flip probability"},
      {"beta1", ValueType::real, "Adam beta1"},
      {"beta2", ValueType::real, "Adam beta2"},
      {"eps", ValueType::real, "Adam epsilon"},
      {"dropout", ValueType::real, "fusion head dropout"},
      {"val_fraction", ValueType::real, "validation share for merge-datasets"},
      {"workers", ValueType::count, "image decoding threads"},
  };
  return keys;
}

inline const ConfigKey* find_config_key(const std::string& name) {
  for (const auto& k : config_keys()) {
    if (name == k.name) return &k;
  }
  return nullptr;
}

inline ConfigMap default_config() {
  return {{"epochs", "100"},      {"batch_size", "128"}, {"base_lr", "5e-05"}, {"warmup_frac", "0.05"},
          {"seed", "0"},          {"freeze_encoders", "true"}, {"grad_clip", "0"}, {"flip_prob", "0.5"},
          {"beta1", "0.9"},       {"beta2", "0.999"},    {"eps", "1e-08"},    {"dropout", "0.3"},
          {"val_fraction", "0.023"}, {"workers", "1"}};
}

/// Toy scale trains tiny models on tiny sets, so it uses a larger step
/// size and smaller batches than the full preset.
inline ConfigMap preset_config(const std::string& preset) {
  if (preset == "full") return {};
  if (preset == "toy") return {{"epochs", "30"}, {"batch_size", "16"}, {"base_lr", "0.001"}, {"dropout", "0.1"}};
  throw ConfigError("unknown preset '" + preset + "' (expected toy or full)");
}

/// Lines of `key = value`; `#` starts a comment.
inline ConfigMap parse_config_text(const std::string& text, const std::string& origin) {
  ConfigMap out;
  std::vector<std::string> problems;
  std::size_t number = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t end = std::min(text.find('\n', pos), text.size());
    std::string line = text.substr(pos, end - pos);
    pos = end + 1;
    ++number;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = std::string(csv::trim(line));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      problems.push_back(origin + ":" + std::to_string(number) + ": expected key = value");
      continue;
    }
    out[std::string(csv::trim(line.substr(0, eq)))] = std::string(csv::trim(line.substr(eq + 1)));
  }
  if (!problems.empty()) {
    std::string msg = "invalid config file:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ConfigError(msg);
  }
  return out;
}

inline ConfigMap load_config_file(const fs::path& path) { return parse_config_text(read_text_file(path), path.string()); }

inline std::string env_name(const std::string& key) {
  std::string out = "CER_";
  for (char c : key) out += static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return out;
}

inline ConfigMap env_config() {
  ConfigMap out;
  for (const auto& k : config_keys()) {
    if (const char* v = std::getenv(env_name(k.name).c_str())) out[k.name] = v;
  }
  return out;
}

inline void overlay(ConfigMap& base, const ConfigMap& top) {
  for (const auto& [k, v] : top) base[k] = v;
}

inline std::string config_hash(const ConfigMap& cfg) {
  std::string canon;
  for (const auto& [k, v] : cfg) canon += k + "=" + v + "\n";
  return hex64(fnv1a64(canon)).substr(0, 8);
}

struct ResolvedConfig {
  TrainConfig train;
  double dropout = 0.3;
  double val_fraction = 0.023;
  std::size_t workers = 1;
};

namespace detail {

inline bool parse_count(const std::string& s, std::size_t& out) {
  const char* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && p == end && !s.empty();
}

inline bool parse_real(const std::string& s, double& out) {
  if (s.empty()) return false;
  char* end = nullptr;
  out = std::strtod(s.c_str(), &end);
  return end == s.c_str() + s.size();
}

inline bool parse_bool(const std::string& s, bool& out) {
  if (s == "true" || s == "1" || s == "yes" || s == "on") return out = true, true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return out = false, true;
  return false;
}

}  // namespace detail

/// Converts a merged map into typed settings. Every problem (unknown
/// key, unparsable value, out-of-range value) is reported in one error.
inline ResolvedConfig resolve_config(const ConfigMap& cfg) {
  std::vector<std::string> problems;
  std::map<std::string, std::size_t> counts;
  std::map<std::string, double> reals;
  std::map<std::string, bool> flags;
  for (const auto& [key, value] : cfg) {
    const ConfigKey* k = find_config_key(key);
    if (!k) {
      problems.push_back("unknown key '" + key + "'");
      continue;
    }
    bool ok = false;
    switch (k->type) {
      case ValueType::count: ok = detail::parse_count(value, counts[key]); break;
      case ValueType::real: ok = detail::parse_real(value, reals[key]); break;
      case ValueType::boolean: ok = detail::parse_bool(value, flags[key]); break;
    }
    if (!ok) problems.push_back(key + ": cannot parse '" + value + "'");
  }
  ResolvedConfig out;
  TrainConfig& t = out.train;
  auto count = [&](const char* k, std::size_t& dst) { if (auto it = counts.find(k); it != counts.end()) dst = it->second; };
  auto real = [&](const char* k, double& dst) { if (auto it = reals.find(k); it != reals.end()) dst = it->second; };
  count("epochs", t.epochs);
  count("batch_size", t.batch_size);
  real("base_lr", t.base_lr);
  real("warmup_frac", t.warmup_frac);
  if (auto it = counts.find("warmup_steps"); it != counts.end()) t.warmup_steps = it->second;
  std::size_t seed = t.seed;
  count("seed", seed);
  t.seed = seed;
  if (auto it = flags.find("freeze_encoders"); it != flags.end()) t.freeze_encoders = it->second;
  real("grad_clip", t.grad_clip);
  real("flip_prob", t.flip_prob);
  real("beta1", t.adam.beta1);
  real("beta2", t.adam.beta2);
  real("eps", t.adam.eps);
  real("dropout", out.dropout);
  real("val_fraction", out.val_fraction);
  count("workers", out.workers);
  t.workers = out.workers;
  try {
    t.validate();
  } catch (const ConfigError& e) {
    problems.push_back(e.what());
  }
  if (!(out.dropout >= 0.0 && out.dropout < 1.0)) problems.push_back("dropout must lie in [0, 1)");
  if (!(out.val_fraction >= 0.0 && out.val_fraction <= 1.0)) problems.push_back("val_fraction must lie in [0, 1]");
  if (out.workers < 1) problems.push_back("workers must be >= 1");
  if (!problems.empty()) {
    std::string msg = "invalid configuration:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ConfigError(msg);
  }
  return out;
}

}  // namespace cer
