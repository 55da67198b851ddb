#pragma once

// Training configuration and its flat `key = value` text form.

#include <charconv>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "iclea/aggregator.hpp"
#include "iclea/error.hpp"
#include "iclea/kg.hpp"

namespace iclea {

struct Ablation {
  bool no_icl = false;   // drop the ICL term
  bool no_mcl = false;   // drop the queue NCE term, ICL only
  bool no_rel = false;   // entity GAT branch only
  bool no_desc = false;  // zero description block
  bool no_name = false;  // zero name block

  friend bool operator==(const Ablation&, const Ablation&) = default;
};

struct TrainConfig {
  std::size_t epochs = 300;
  std::size_t batch_size = 64;
  std::size_t queue_length = 32;
  double momentum = 0.9999;
  double temperature = 0.08;
  double lambda = 1.0;
  double beta = 0.9;
  double learning_rate = 1e-6;
  double lr_decay = 1.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  std::size_t neighbor_cap = 15;
  NeighborOrder neighbor_order = NeighborOrder::ascending_id;
  std::uint64_t seed = 37;
  std::size_t patience = 20;
  double validation_fraction = 0.05;

  // Architecture. Zero dims resolve to their defaults.
  std::size_t heads = 1;
  std::size_t head_dim = 0;
  std::size_t relation_embedding_dim = 0;
  std::size_t gate_hidden_dim = 0;
  std::size_t output_dim = 0;
  FusionExtra fusion_extra = FusionExtra::none;
  double leaky_slope = 0.01;
  bool normalize_output = true;

  Ablation ablation;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;

  // Value checks that do not depend on the data. Throws ConfigError.
  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError(m); };
    if (batch_size == 0) fail("batch_size must be positive");
    if (!(temperature > 0.0)) fail("temperature must be > 0");
    if (!(beta >= 0.0 && beta <= 1.0)) fail("beta must lie in [0, 1]");
    if (!(momentum >= 0.0 && momentum < 1.0)) fail("momentum must lie in [0, 1)");
    if (!(learning_rate > 0.0)) fail("learning_rate must be > 0");
    if (!(lr_decay > 0.0)) fail("lr_decay must be > 0");
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) fail("adam betas must lie in [0, 1)");
    if (!(adam_epsilon > 0.0)) fail("adam_epsilon must be > 0");
    if (!(validation_fraction >= 0.0 && validation_fraction < 1.0)) fail("validation_fraction must lie in [0, 1)");
    if (heads == 0) fail("heads must be positive");
    if (!(leaky_slope >= 0.0 && leaky_slope < 1.0)) fail("leaky_slope must lie in [0, 1)");
    if (ablation.no_name && ablation.no_desc) fail("no_name and no_desc together leave no input signal");
    if (ablation.no_icl && ablation.no_mcl) fail("no_icl and no_mcl together leave no loss");
  }
};

namespace detail {

inline std::string format_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

struct ConfigField {
  std::function<void(TrainConfig&, std::string_view)> set;  // throws std::invalid_argument on a bad value
  std::function<std::string(const TrainConfig&)> get;
};

inline std::size_t parse_size(std::string_view s) {
  std::size_t v = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw std::invalid_argument("expected a non-negative integer");
  return v;
}

inline double parse_double(std::string_view s) {
  double v = 0.0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw std::invalid_argument("expected a number");
  return v;
}

inline bool parse_bool(std::string_view s) {
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw std::invalid_argument("expected true or false");
}

inline const std::vector<std::pair<std::string, ConfigField>>& config_fields() {
  static const auto fields = [] {
    std::vector<std::pair<std::string, ConfigField>> f;
    auto size_field = [&](const char* key, std::size_t TrainConfig::*m) {
      f.push_back({key, {[m](TrainConfig& c, std::string_view s) { c.*m = parse_size(s); }, [m](const TrainConfig& c) { return std::to_string(c.*m); }}});
    };
    auto double_field = [&](const char* key, double TrainConfig::*m) {
      f.push_back({key, {[m](TrainConfig& c, std::string_view s) { c.*m = parse_double(s); }, [m](const TrainConfig& c) { return format_double(c.*m); }}});
    };
    auto bool_field = [&](const char* key, bool Ablation::*m) {
      f.push_back({key, {[m](TrainConfig& c, std::string_view s) { c.ablation.*m = parse_bool(s); },
                         [m](const TrainConfig& c) { return std::string(c.ablation.*m ? "true" : "false"); }}});
    };
    size_field("epochs", &TrainConfig::epochs);
    size_field("batch_size", &TrainConfig::batch_size);
    size_field("queue_length", &TrainConfig::queue_length);
    double_field("momentum", &TrainConfig::momentum);
    double_field("temperature", &TrainConfig::temperature);
    double_field("lambda", &TrainConfig::lambda);
    double_field("beta", &TrainConfig::beta);
    double_field("learning_rate", &TrainConfig::learning_rate);
    double_field("lr_decay", &TrainConfig::lr_decay);
    double_field("adam_beta1", &TrainConfig::adam_beta1);
    double_field("adam_beta2", &TrainConfig::adam_beta2);
    double_field("adam_epsilon", &TrainConfig::adam_epsilon);
    size_field("neighbor_cap", &TrainConfig::neighbor_cap);
    f.push_back({"neighbor_order",
                 {[](TrainConfig& c, std::string_view s) {
                    if (s == "ascending_id") c.neighbor_order = NeighborOrder::ascending_id;
                    else if (s == "degree_first") c.neighbor_order = NeighborOrder::degree_first;
                    else throw std::invalid_argument("expected ascending_id or degree_first");
                  },
                  [](const TrainConfig& c) { return std::string(c.neighbor_order == NeighborOrder::ascending_id ? "ascending_id" : "degree_first"); }}});
    f.push_back({"seed", {[](TrainConfig& c, std::string_view s) { c.seed = parse_size(s); }, [](const TrainConfig& c) { return std::to_string(c.seed); }}});
    size_field("patience", &TrainConfig::patience);
    double_field("validation_fraction", &TrainConfig::validation_fraction);
    size_field("heads", &TrainConfig::heads);
    size_field("head_dim", &TrainConfig::head_dim);
    size_field("relation_embedding_dim", &TrainConfig::relation_embedding_dim);
    size_field("gate_hidden_dim", &TrainConfig::gate_hidden_dim);
    size_field("output_dim", &TrainConfig::output_dim);
    f.push_back({"fusion_extra",
                 {[](TrainConfig& c, std::string_view s) {
                    if (s == "none") c.fusion_extra = FusionExtra::none;
                    else if (s == "name") c.fusion_extra = FusionExtra::name;
                    else if (s == "input") c.fusion_extra = FusionExtra::input;
                    else throw std::invalid_argument("expected none, name or input");
                  },
                  [](const TrainConfig& c) {
                    switch (c.fusion_extra) {
                      case FusionExtra::none: return std::string("none");
                      case FusionExtra::name: return std::string("name");
                      case FusionExtra::input: return std::string("input");
                    }
                    return std::string("none");
                  }}});
    double_field("leaky_slope", &TrainConfig::leaky_slope);
    f.push_back({"normalize_output", {[](TrainConfig& c, std::string_view s) { c.normalize_output = parse_bool(s); },
                                      [](const TrainConfig& c) { return std::string(c.normalize_output ? "true" : "false"); }}});
    bool_field("no_icl", &Ablation::no_icl);
    bool_field("no_mcl", &Ablation::no_mcl);
    bool_field("no_rel", &Ablation::no_rel);
    bool_field("no_desc", &Ablation::no_desc);
    bool_field("no_name", &Ablation::no_name);
    return f;
  }();
  return fields;
}

}  // namespace detail

// Sets one key. Unknown keys and unparsable values raise ParseError.
inline void set_config_value(TrainConfig& cfg, std::string_view key, std::string_view value, const std::string& source = "<config>",
                             std::size_t line = 0) {
  for (const auto& [name, field] : detail::config_fields()) {
    if (name != key) continue;
    try {
      field.set(cfg, detail::trim(value));
    } catch (const std::invalid_argument& e) {
      throw ParseError(source, line, "bad value for '" + std::string(key) + "': " + e.what());
    }
    return;
  }
  throw ParseError(source, line, "unknown config key '" + std::string(key) + "'");
}

// Applies `key = value` lines on top of `base`. '#' starts a comment line.
inline TrainConfig parse_config(std::string_view text, TrainConfig base = {}, const std::string& source = "<config>") {
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto nl = text.find('\n', start);
    const auto raw = text.substr(start, nl == std::string_view::npos ? std::string_view::npos : nl - start);
    ++line_no;
    const auto line = detail::trim(raw);
    if (!line.empty() && line.front() != '#') {
      const auto eq = line.find('=');
      if (eq == std::string_view::npos) throw ParseError(source, line_no, "expected key = value");
      const auto key = detail::trim(line.substr(0, eq));
      if (key.empty()) throw ParseError(source, line_no, "empty key");
      set_config_value(base, key, line.substr(eq + 1), source, line_no);
    }
    if (nl == std::string_view::npos) break;
    start = nl + 1;
  }
  return base;
}

inline TrainConfig load_config(const std::string& path, TrainConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), std::move(base), path);
}

// Every key in a fixed order; parse_config(to_text(c)) == c.
inline std::string to_text(const TrainConfig& cfg) {
  std::string out;
  for (const auto& [name, field] : detail::config_fields()) out += name + " = " + field.get(cfg) + "\n";
  return out;
}

}  // namespace iclea
