#pragma once

// JSON experiment configuration.
//
// {
//   "suite":   {"num_sources": 3, ..., "seed": 0}            synthetic, or
//              {"csv": "data.csv", "domain_column": "domain", "label_column": "label",
//               "num_classes": 0, "split_seed": 0, "standardize": true}
//   "methods": [{"kind": "LFME", "alpha_half": 1, "train": {...}}, ...]
//   "train":   {"optimizer": "adam", "lr": 0.001, ...}        defaults for every method
//   "seeds":   [0, 1, 2]
//   "held_out": []                                           domain indices; empty = all
//   "output":  "runs",
//   "formats": ["csv", "md"],
//   "probe":   "all" | "none",
//   "jobs":    1
// }
//
// Unknown keys are rejected. Errors name the offending path.

#include <cstdint>
#include <cstdlib>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <json.hpp>

#include "lfme/domains.hpp"
#include "lfme/errors.hpp"
#include "lfme/method.hpp"

namespace lfme {

using Json = nlohmann::ordered_json;

struct CsvSuiteSource {
  std::string path;
  std::string domain_column = "domain";
  std::string label_column = "label";
  std::size_t num_classes = 0;  // 0 infers from the labels
  std::uint64_t split_seed = 0;
  bool standardize = true;

  bool operator==(const CsvSuiteSource&) const = default;
};

using SuiteSource = std::variant<SuiteSpec, CsvSuiteSource>;

struct MethodRun {
  MethodSpec spec;
  std::optional<TrainConfig> train;  // replaces the shared train block when set

  bool operator==(const MethodRun&) const = default;
};

enum class ProbeOutput { All, None };

struct ExperimentConfig {
  SuiteSource suite = SuiteSpec{};
  std::vector<MethodRun> methods;
  TrainConfig train;
  std::vector<std::uint64_t> seeds{0};
  std::vector<std::size_t> held_out;  // empty: every domain in turn
  std::string output = "runs";
  std::vector<std::string> formats{"csv", "md"};
  ProbeOutput probe = ProbeOutput::All;
  std::size_t jobs = 1;

  TrainConfig train_for(const MethodRun& m, std::uint64_t seed) const {
    TrainConfig t = m.train.value_or(train);
    t.seed = seed;
    return t;
  }

  bool wants_format(std::string_view f) const {
    for (const auto& x : formats)
      if (x == f) return true;
    return false;
  }

  void validate() const {
    if (methods.empty()) throw ValidationError("methods: must not be empty");
    if (seeds.empty()) throw ValidationError("seeds: must not be empty");
    if (output.empty()) throw ValidationError("output: must not be empty");
    if (jobs == 0) throw ValidationError("jobs: must be positive");
    if (auto* s = std::get_if<SuiteSpec>(&suite)) s->validate();
    if (auto* c = std::get_if<CsvSuiteSource>(&suite); c && c->path.empty()) throw ValidationError("suite.csv: must not be empty");
    train.validate();
    for (std::size_t i = 0; i < methods.size(); ++i) {
      try {
        methods[i].spec.validate();
        if (methods[i].train) methods[i].train->validate();
      } catch (const ValidationError& e) {
        throw ValidationError("methods[" + std::to_string(i) + "]: " + e.what());
      }
    }
    for (const auto& f : formats)
      if (f != "csv" && f != "md") throw ValidationError("formats: unknown format '" + f + "' (expected csv or md)");
  }

  bool operator==(const ExperimentConfig&) const = default;
};

namespace config_detail {

// JSON built in code stores small integers as signed; text parsing as unsigned.
inline bool is_non_negative_integer(const Json& v) {
  return v.is_number_unsigned() || (v.is_number_integer() && v.get<long long>() >= 0);
}

class Reader {
 public:
  Reader(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ValidationError(path_ + ": expected an object");
  }

  bool has(const char* key) const { return j_.contains(key); }
  std::string at(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.push_back(key);
    if (!j_.contains(key)) return;
    const Json& v = j_[key];
    try {
      if constexpr (std::is_same_v<T, double>) {
        if (!v.is_number()) throw ValidationError("expected a number");
        out = v.get<double>();
      } else if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw ValidationError("expected true or false");
        out = v.get<bool>();
      } else if constexpr (std::is_integral_v<T>) {
        if (!is_non_negative_integer(v)) {
          throw ValidationError("expected a non-negative integer");
        }
        out = v.get<T>();
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) throw ValidationError("expected a string");
        out = v.get<std::string>();
      } else {
        out = v.get<T>();
      }
    } catch (const ValidationError& e) {
      throw ValidationError(at(key) + ": " + e.what());
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(at(key) + ": " + e.what());
    }
  }

  const Json* child(const char* key) {
    seen_.push_back(key);
    return j_.contains(key) ? &j_[key] : nullptr;
  }

  void reject_unknown() const {
    for (const auto& [k, v] : j_.items()) {
      bool known = false;
      for (const auto& s : seen_) known = known || s == k;
      if (!known) throw ValidationError(at(k.c_str()) + ": unknown key");
    }
  }

 private:
  const Json& j_;
  std::string path_;
  std::vector<std::string> seen_;
};

inline std::string lower(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

inline TrainConfig parse_train(const Json& j, const std::string& path, TrainConfig t) {
  Reader r(j, path);
  std::string opt = t.optimizer == OptimizerKind::Adam ? "adam" : "sgd";
  r.get("optimizer", opt);
  opt = lower(opt);
  if (opt == "adam") {
    t.optimizer = OptimizerKind::Adam;
  } else if (opt == "sgd") {
    t.optimizer = OptimizerKind::Sgd;
  } else {
    throw ValidationError(r.at("optimizer") + ": expected adam or sgd");
  }
  r.get("lr", t.lr);
  r.get("weight_decay", t.weight_decay);
  r.get("steps", t.steps);
  r.get("batch_per_domain", t.batch_per_domain);
  r.get("eval_every", t.eval_every);
  if (const Json* h = r.child("hidden")) {
    if (!h->is_array()) throw ValidationError(r.at("hidden") + ": expected an array");
    t.hidden.clear();
    for (const auto& w : *h) {
      if (!is_non_negative_integer(w)) throw ValidationError(r.at("hidden") + ": expected non-negative integers");
      t.hidden.push_back(w.get<std::size_t>());
    }
  }
  r.get("probe_per_domain", t.probe_per_domain);
  std::string split = t.probe_split == ProbeSplit::Train ? "train" : "val";
  r.get("probe_split", split);
  split = lower(split);
  if (split == "train") {
    t.probe_split = ProbeSplit::Train;
  } else if (split == "val") {
    t.probe_split = ProbeSplit::Val;
  } else {
    throw ValidationError(r.at("probe_split") + ": expected train or val");
  }
  r.reject_unknown();
  try {
    t.validate();
  } catch (const ValidationError& e) {
    if (path == "train") throw;
    throw ValidationError(path + ": " + e.what());
  }
  return t;
}

inline Json train_to_json(const TrainConfig& t) {
  Json j;
  j["optimizer"] = t.optimizer == OptimizerKind::Adam ? "adam" : "sgd";
  j["lr"] = t.lr;
  j["weight_decay"] = t.weight_decay;
  j["steps"] = t.steps;
  j["batch_per_domain"] = t.batch_per_domain;
  j["eval_every"] = t.eval_every;
  j["hidden"] = t.hidden;
  j["probe_per_domain"] = t.probe_per_domain;
  j["probe_split"] = t.probe_split == ProbeSplit::Train ? "train" : "val";
  return j;
}

}  // namespace config_detail

inline ExperimentConfig parse_config(const Json& doc) {
  using config_detail::Reader;
  ExperimentConfig cfg;
  cfg.methods.clear();
  Reader root(doc, "");

  if (const Json* s = root.child("suite")) {
    if (!s->is_object()) throw ValidationError("suite: expected an object");
    if (s->contains("csv")) {
      CsvSuiteSource c;
      Reader r(*s, "suite");
      r.get("csv", c.path);
      r.get("domain_column", c.domain_column);
      r.get("label_column", c.label_column);
      r.get("num_classes", c.num_classes);
      r.get("split_seed", c.split_seed);
      r.get("standardize", c.standardize);
      r.reject_unknown();
      cfg.suite = c;
    } else {
      SuiteSpec sp;
      Reader r(*s, "suite");
      r.get("num_sources", sp.num_sources);
      r.get("num_classes", sp.num_classes);
      r.get("n_per_domain", sp.n_per_domain);
      r.get("d_inv", sp.d_inv);
      r.get("d_spu", sp.d_spu);
      r.get("rho", sp.rho);
      r.get("sigma", sp.sigma);
      r.get("seed", sp.seed);
      r.reject_unknown();
      try {
        sp.validate();
      } catch (const ValidationError& e) {
        throw ValidationError(std::string("suite: ") + e.what());
      }
      cfg.suite = sp;
    }
  }

  if (const Json* t = root.child("train")) cfg.train = config_detail::parse_train(*t, "train", cfg.train);

  if (const Json* ms = root.child("methods")) {
    if (!ms->is_array()) throw ValidationError("methods: expected an array");
    for (std::size_t i = 0; i < ms->size(); ++i) {
      const std::string path = "methods[" + std::to_string(i) + "]";
      const Json& mj = (*ms)[i];
      MethodRun run;
      if (mj.is_string()) {
        const auto kind = parse_method_kind(mj.get<std::string>());
        if (!kind) throw ValidationError(path + ": unknown method '" + mj.get<std::string>() + "'");
        run.spec.kind = *kind;
      } else {
        Reader r(mj, path);
        std::string kind;
        r.get("kind", kind);
        if (kind.empty()) throw ValidationError(path + ".kind: required");
        const auto k = parse_method_kind(kind);
        if (!k) throw ValidationError(path + ".kind: unknown method '" + kind + "'");
        run.spec.kind = *k;
        r.get("alpha_half", run.spec.alpha_half);
        r.get("ls_epsilon", run.spec.ls_epsilon);
        r.get("ramp_steps", run.spec.ramp_steps);
        r.get("hard_weight_beta", run.spec.hard_weight_beta);
        if (const Json* t = r.child("train")) run.train = config_detail::parse_train(*t, path + ".train", cfg.train);
        r.reject_unknown();
      }
      try {
        run.spec.validate();
      } catch (const ValidationError& e) {
        throw ValidationError(path + ": " + e.what());
      }
      cfg.methods.push_back(std::move(run));
    }
  }

  if (const Json* s = root.child("seeds")) {
    if (!s->is_array()) throw ValidationError("seeds: expected an array");
    cfg.seeds.clear();
    for (const auto& v : *s) {
      if (!config_detail::is_non_negative_integer(v)) throw ValidationError("seeds: expected non-negative integers");
      cfg.seeds.push_back(v.get<std::uint64_t>());
    }
  }
  if (const Json* h = root.child("held_out")) {
    if (!h->is_array()) throw ValidationError("held_out: expected an array");
    for (const auto& v : *h) {
      if (!config_detail::is_non_negative_integer(v)) throw ValidationError("held_out: expected non-negative integers");
      cfg.held_out.push_back(v.get<std::size_t>());
    }
  }
  root.get("output", cfg.output);
  if (const Json* f = root.child("formats")) {
    if (!f->is_array()) throw ValidationError("formats: expected an array");
    cfg.formats.clear();
    for (const auto& v : *f) {
      if (!v.is_string()) throw ValidationError("formats: expected strings");
      cfg.formats.push_back(v.get<std::string>());
    }
  }
  std::string probe = "all";
  root.get("probe", probe);
  if (probe == "all") {
    cfg.probe = ProbeOutput::All;
  } else if (probe == "none") {
    cfg.probe = ProbeOutput::None;
  } else {
    throw ValidationError("probe: expected all or none");
  }
  root.get("jobs", cfg.jobs);
  root.reject_unknown();
  cfg.validate();
  return cfg;
}

inline Json to_json(const ExperimentConfig& cfg) {
  Json j;
  if (const auto* s = std::get_if<SuiteSpec>(&cfg.suite)) {
    j["suite"] = {{"num_sources", s->num_sources}, {"num_classes", s->num_classes}, {"n_per_domain", s->n_per_domain},
                  {"d_inv", s->d_inv},           {"d_spu", s->d_spu},             {"rho", s->rho},
                  {"sigma", s->sigma},           {"seed", s->seed}};
  } else {
    const auto& c = std::get<CsvSuiteSource>(cfg.suite);
    j["suite"] = {{"csv", c.path},
                  {"domain_column", c.domain_column},
                  {"label_column", c.label_column},
                  {"num_classes", c.num_classes},
                  {"split_seed", c.split_seed},
                  {"standardize", c.standardize}};
  }
  j["methods"] = Json::array();
  for (const auto& m : cfg.methods) {
    Json mj{{"kind", std::string(to_string(m.spec.kind))},
            {"alpha_half", m.spec.alpha_half},
            {"ls_epsilon", m.spec.ls_epsilon},
            {"ramp_steps", m.spec.ramp_steps},
            {"hard_weight_beta", m.spec.hard_weight_beta}};
    if (m.train) mj["train"] = config_detail::train_to_json(*m.train);
    j["methods"].push_back(std::move(mj));
  }
  j["train"] = config_detail::train_to_json(cfg.train);
  j["seeds"] = cfg.seeds;
  j["held_out"] = cfg.held_out;
  j["output"] = cfg.output;
  j["formats"] = cfg.formats;
  j["probe"] = cfg.probe == ProbeOutput::All ? "all" : "none";
  j["jobs"] = cfg.jobs;
  return j;
}

inline Json parse_json_text(std::string_view text, const std::string& what) {
  try {
    return Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(what + ": invalid JSON: " + e.what());
  }
}

/// Applies "a.b.c=value" to `doc`. Numeric segments index arrays. The value is
/// parsed as JSON when possible and taken as a string otherwise.
inline void apply_override(Json& doc, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) {
    throw ValidationError("override '" + std::string(assignment) + "': expected key.path=value");
  }
  const std::string key(assignment.substr(0, eq));
  const std::string text(assignment.substr(eq + 1));
  Json value;
  try {
    value = Json::parse(text);
  } catch (const nlohmann::json::parse_error&) {
    value = text;
  }
  Json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string seg = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (seg.empty()) throw ValidationError("override '" + key + "': empty path segment");
    Json* next = nullptr;
    if (node->is_array()) {
      const auto idx = csv::parse_int(seg);
      if (!idx || *idx < 0 || static_cast<std::size_t>(*idx) >= node->size()) {
        throw ValidationError("override '" + key + "': index '" + seg + "' out of range");
      }
      next = &(*node)[static_cast<std::size_t>(*idx)];
    } else {
      if (node->is_null()) *node = Json::object();
      if (!node->is_object()) throw ValidationError("override '" + key + "': '" + seg + "' is not inside an object");
      next = &(*node)[seg];
    }
    if (dot == std::string::npos) {
      *next = value;
      return;
    }
    node = next;
    start = dot + 1;
  }
}

/// LFME_SEED: a single seed, a comma-separated list, or a JSON array.
inline std::optional<std::vector<std::uint64_t>> seeds_from_env(const char* name = "LFME_SEED") {
  const char* raw = std::getenv(name);
  if (!raw || !*raw) return std::nullopt;
  std::string text(raw);
  if (!text.empty() && text.front() == '[') {
    const Json j = parse_json_text(text, name);
    std::vector<std::uint64_t> out;
    if (!j.is_array()) throw ValidationError(std::string(name) + ": expected a list of seeds");
    for (const auto& v : j) {
      if (!config_detail::is_non_negative_integer(v)) throw ValidationError(std::string(name) + ": expected non-negative integers");
      out.push_back(v.get<std::uint64_t>());
    }
    return out;
  }
  std::vector<std::uint64_t> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto comma = text.find(',', start);
    const std::string part = text.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
    const auto v = csv::parse_int(part);
    if (!v || *v < 0) throw ValidationError(std::string(name) + ": cannot parse seed '" + part + "'");
    out.push_back(static_cast<std::uint64_t>(*v));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

inline std::vector<std::string> preset_names() { return {"paper-tables", "quick"}; }

/// Built-in configurations. "paper-tables" covers the baseline and ablation
/// families over 10 seeds; "quick" is a short two-method run.
inline Json preset(std::string_view name) {
  ExperimentConfig cfg;
  if (name == "paper-tables") {
    for (MethodKind k : {MethodKind::Erm, MethodKind::Lfme, MethodKind::ErmPlus, MethodKind::LabelSmoothing,
                         MethodKind::KdLogitLogit, MethodKind::KdProbLogit, MethodKind::KdProbProb,
                         MethodKind::KdCrossEntropy, MethodKind::AggAverage, MethodKind::AggSoup,
                         MethodKind::AggConfidence, MethodKind::AggDynamic, MethodKind::SelfGuided,
                         MethodKind::ErmPlusExpertWeighted, MethodKind::ErmPlusSelfWeighted}) {
      cfg.methods.push_back({MethodSpec{.kind = k}, std::nullopt});
    }
    cfg.seeds = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
    cfg.output = "paper-tables";
    cfg.probe = ProbeOutput::None;
  } else if (name == "quick") {
    cfg.methods = {{MethodSpec{.kind = MethodKind::Erm}, std::nullopt},
                   {MethodSpec{.kind = MethodKind::Lfme}, std::nullopt}};
    cfg.train.steps = 500;
    cfg.held_out = {3};
    cfg.output = "quick";
  } else {
    throw ValidationError("unknown preset '" + std::string(name) + "'");
  }
  return to_json(cfg);
}

}  // namespace lfme
