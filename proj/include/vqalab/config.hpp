#pragma once

// JSON configuration and run manifests. Every key is optional and falls back to
// its default, but unknown keys are rejected so that typos cannot silently
// change an experiment.

#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vqalab/evaluation.hpp"
#include "vqalab/grpo.hpp"
#include "vqalab/policy.hpp"
#include "vqalab/sft.hpp"
#include "vqalab/synvqa.hpp"

namespace vqalab {

inline constexpr int kSchemaVersion = 1;

namespace detail {

class Fields {
 public:
  Fields(const nlohmann::json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + " must be a JSON object");
  }

  template <class T>
  Fields& get(const char* key, T& out) {
    if (!j_.contains(key)) return *this;
    seen_.insert(key);
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(path(key) + " has the wrong type");
    }
    return *this;
  }

  /// Custom conversion for enums and nested objects.
  template <class F>
  Fields& with(const char* key, F&& f) {
    if (!j_.contains(key)) return *this;
    seen_.insert(key);
    try {
      f(j_.at(key), path(key));
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(path(key) + " has the wrong type");
    }
    return *this;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError("unknown configuration key '" + path(it.key().c_str()) + "'");
  }

 private:
  std::string path(const char* key) const { return where_.empty() ? key : where_ + "." + key; }

  const nlohmann::json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

template <class E, class F>
E parse_enum(const nlohmann::json& j, const std::string& where, F&& from) {
  try {
    return from(j.get<std::string>());
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception&) {
    throw ConfigError(where + ": invalid value " + j.dump());
  }
}

}  // namespace detail

// ----------------------------- sections -----------------------------

struct DataConfig {
  GenConfig gen;
  std::optional<std::string> path;  // pre-generated dataset JSONL instead of generating
};

struct EvalConfig {
  std::vector<PromptMode> modes = {PromptMode::prompting};
  std::size_t max_len = kEvalMaxLen;
  bool each_stage = true;
};

enum class Route { grpo_direct, sft_grpo };

inline std::string to_string(Route r) { return r == Route::grpo_direct ? "grpo_direct" : "sft_grpo"; }
inline Route route_from_string(std::string_view s) {
  if (s == "grpo_direct") return Route::grpo_direct;
  if (s == "sft_grpo") return Route::sft_grpo;
  throw ConfigError("unknown route '" + std::string(s) + "'");
}

struct RunManifest {
  int schema_version = kSchemaVersion;
  Route route = Route::sft_grpo;
  std::vector<Stage> plan = {Stage::A, Stage::B, Stage::C};
  std::uint64_t seed = 0;
  DataConfig data;
  PolicyConfig policy;  // vocab_size is derived from the vocabulary
  BaseConfig base;
  SftConfig sft;
  GrpoConfig grpo;
  EvalConfig eval;
  DynamicsConfig dynamics;
  std::optional<std::string> init_checkpoint;
  std::string dataset_fingerprint;  // filled in when the run starts; checked on replay
  std::string code_version{kCodeVersion};

  void validate() const {
    if (schema_version != kSchemaVersion)
      throw ConfigError("unsupported schema_version " + std::to_string(schema_version));
    if (plan.empty()) throw ConfigError("stage plan is empty");
    const bool single = plan.size() == 1;
    bool prefix = true;
    for (std::size_t i = 0; i < plan.size(); ++i) prefix = prefix && plan[i] == static_cast<Stage>(i);
    if (!single && !prefix) throw ConfigError("stage plan must be a prefix of [A, B, C] or a single stage");
    if (code_version != kCodeVersion)
      throw ConfigError("manifest was written by " + code_version + ", this build is " + std::string(kCodeVersion));
    data.gen.validate();
    sft.validate();
    grpo.validate();
    if (eval.modes.empty()) throw ConfigError("eval.modes is empty");
    if (eval.max_len < 1) throw ConfigError("eval.max_len must be >= 1");
  }

  /// Component seeds are derived from the single root seed.
  void derive_seeds() {
    data.gen.seed = derive_seed(seed, "data");
    base.seed = derive_seed(seed, "base");
    sft.seed = derive_seed(seed, "sft");
    grpo.seed = derive_seed(seed, "grpo");
  }
  std::uint64_t init_seed() const { return derive_seed(seed, "init"); }
};

// ----------------------------- to JSON -----------------------------

inline nlohmann::ordered_json to_json(const DataConfig& d) {
  const auto& g = d.gen;
  nlohmann::ordered_json j;
  j["n_total"] = g.n_total;
  nlohmann::ordered_json sr, st;
  for (std::size_t i = 0; i < g.split_ratios.size(); ++i) sr[std::string(to_string(static_cast<Split>(i)))] = g.split_ratios[i];
  for (std::size_t i = 0; i < g.stage_ratios.size(); ++i) st[std::string(to_string(static_cast<Stage>(i)))] = g.stage_ratios[i];
  j["split_ratios"] = sr;
  j["stage_ratios"] = st;
  j["min_side"] = g.min_side;
  j["max_side"] = g.max_side;
  j["max_objects"] = g.max_objects;
  j["context_budget"] = g.context_budget;
  j["path"] = d.path ? nlohmann::ordered_json(*d.path) : nlohmann::ordered_json();
  return j;
}

inline nlohmann::ordered_json model_to_json(const PolicyConfig& c) {
  return {{"width", c.width}, {"layers", c.layers}, {"heads", c.heads}, {"mlp_hidden", c.mlp_hidden},
          {"context", c.context}, {"embed_init_std", c.embed_init_std}};
}

inline nlohmann::ordered_json to_json(const BaseConfig& c) {
  return {{"steps", c.steps}, {"lr", c.lr}, {"batch", c.batch}, {"think_prob", c.think_prob}};
}

inline nlohmann::ordered_json to_json(const SftConfig& c) {
  nlohmann::ordered_json j;
  j["lr"] = c.lr;
  j["batch_size"] = c.batch_size;
  j["grad_accum"] = c.grad_accum;
  j["epochs"] = c.epochs;
  j["patience"] = c.patience;
  j["val_fraction"] = c.val_fraction;
  j["split"] = to_string(c.split);
  j["use_adapter"] = c.use_adapter;
  j["adapter_rank"] = c.adapter_rank;
  j["adapter_alpha"] = c.adapter_alpha;
  j["train_embeddings"] = c.train_embeddings;
  j["max_steps"] = c.max_steps;
  j["optimizer"] = optimizer_record(AdamConfig{}, c.lr);
  return j;
}

inline nlohmann::ordered_json to_json(const GrpoConfig& c) {
  nlohmann::ordered_json j;
  j["group_size"] = c.group_size;
  j["clip_eps"] = c.clip_eps;
  j["kl_beta"] = c.kl_beta;
  j["lr"] = c.lr;
  j["batch_size"] = c.batch_size;
  j["grad_accum"] = c.grad_accum;
  j["epochs"] = c.epochs;
  j["temperature"] = c.temperature;
  j["max_completion"] = c.max_completion;
  j["inner_iters"] = c.inner_iters;
  j["baseline"] = to_string(c.baseline);
  j["mode"] = to_string(c.mode);
  j["max_steps"] = c.max_steps;
  j["optimizer"] = optimizer_record(AdamConfig{}, c.lr);
  return j;
}

inline nlohmann::ordered_json to_json(const EvalConfig& c) {
  nlohmann::ordered_json modes = nlohmann::ordered_json::array();
  for (auto m : c.modes) modes.push_back(to_string(m));
  return {{"modes", modes}, {"max_len", c.max_len}, {"each_stage", c.each_stage}};
}

inline nlohmann::ordered_json to_json(const DynamicsConfig& c) {
  return {{"window", c.window}, {"format_threshold", c.format_threshold}, {"rise_factor", c.rise_factor},
          {"margin", c.margin}};
}

inline nlohmann::ordered_json to_json(const RunManifest& m) {
  nlohmann::ordered_json j;
  j["schema_version"] = m.schema_version;
  j["code_version"] = m.code_version;
  j["route"] = to_string(m.route);
  nlohmann::ordered_json plan = nlohmann::ordered_json::array();
  for (Stage s : m.plan) plan.push_back(to_string(s));
  j["plan"] = plan;
  j["seed"] = m.seed;
  j["dataset_fingerprint"] = m.dataset_fingerprint;
  j["init_checkpoint"] = m.init_checkpoint ? nlohmann::ordered_json(*m.init_checkpoint) : nlohmann::ordered_json();
  j["data"] = to_json(m.data);
  j["model"] = model_to_json(m.policy);
  j["base"] = to_json(m.base);
  j["sft"] = to_json(m.sft);
  j["grpo"] = to_json(m.grpo);
  j["eval"] = to_json(m.eval);
  j["dynamics"] = to_json(m.dynamics);
  return j;
}

// ----------------------------- from JSON -----------------------------

inline void from_json_strict(const nlohmann::json& j, DataConfig& d, const std::string& where) {
  auto& g = d.gen;
  detail::Fields f(j, where);
  f.get("n_total", g.n_total).get("min_side", g.min_side).get("max_side", g.max_side)
      .get("max_objects", g.max_objects).get("context_budget", g.context_budget);
  f.with("split_ratios", [&](const nlohmann::json& v, const std::string& w) {
    detail::Fields r(v, w);
    for (std::size_t i = 0; i < g.split_ratios.size(); ++i) {
      const std::string key(to_string(static_cast<Split>(i)));
      r.get(key.c_str(), g.split_ratios[i]);
    }
    r.finish();
  });
  f.with("stage_ratios", [&](const nlohmann::json& v, const std::string& w) {
    detail::Fields r(v, w);
    for (std::size_t i = 0; i < g.stage_ratios.size(); ++i) {
      const std::string key(to_string(static_cast<Stage>(i)));
      r.get(key.c_str(), g.stage_ratios[i]);
    }
    r.finish();
  });
  f.with("path", [&](const nlohmann::json& v, const std::string&) {
    d.path = v.is_null() ? std::nullopt : std::optional<std::string>(v.get<std::string>());
  });
  f.finish();
}

inline void from_json_strict(const nlohmann::json& j, PolicyConfig& c, const std::string& where) {
  detail::Fields f(j, where);
  f.get("width", c.width).get("layers", c.layers).get("heads", c.heads).get("mlp_hidden", c.mlp_hidden)
      .get("context", c.context).get("embed_init_std", c.embed_init_std);
  f.finish();
}

inline void from_json_strict(const nlohmann::json& j, BaseConfig& c, const std::string& where) {
  detail::Fields f(j, where);
  f.get("steps", c.steps).get("lr", c.lr).get("batch", c.batch).get("think_prob", c.think_prob);
  f.finish();
}

inline void check_optimizer(const nlohmann::json& v, const std::string& w, double lr) {
  // The optimizer record is informational; it must agree with the config.
  if (!(v == nlohmann::json(optimizer_record(AdamConfig{}, lr))))
    throw ConfigError(w + " does not match the configured optimizer");
}

inline void from_json_strict(const nlohmann::json& j, SftConfig& c, const std::string& where) {
  detail::Fields f(j, where);
  f.get("lr", c.lr).get("batch_size", c.batch_size).get("grad_accum", c.grad_accum).get("epochs", c.epochs)
      .get("patience", c.patience).get("val_fraction", c.val_fraction).get("use_adapter", c.use_adapter)
      .get("adapter_rank", c.adapter_rank).get("adapter_alpha", c.adapter_alpha)
      .get("train_embeddings", c.train_embeddings).get("max_steps", c.max_steps);
  f.with("split", [&](const nlohmann::json& v, const std::string& w) {
    c.split = detail::parse_enum<Split>(v, w, [](const std::string& s) { return split_from_string(s); });
  });
  f.with("optimizer", [&](const nlohmann::json& v, const std::string& w) { check_optimizer(v, w, c.lr); });
  f.finish();
}

inline void from_json_strict(const nlohmann::json& j, GrpoConfig& c, const std::string& where) {
  detail::Fields f(j, where);
  f.get("group_size", c.group_size).get("clip_eps", c.clip_eps).get("kl_beta", c.kl_beta).get("lr", c.lr)
      .get("batch_size", c.batch_size).get("grad_accum", c.grad_accum).get("epochs", c.epochs)
      .get("temperature", c.temperature).get("max_completion", c.max_completion)
      .get("inner_iters", c.inner_iters).get("max_steps", c.max_steps);
  f.with("baseline", [&](const nlohmann::json& v, const std::string& w) {
    c.baseline = detail::parse_enum<AdvantageBaseline>(v, w, [](const std::string& s) {
      return advantage_baseline_from_string(s);
    });
  });
  f.with("mode", [&](const nlohmann::json& v, const std::string& w) {
    c.mode = detail::parse_enum<PromptMode>(v, w, [](const std::string& s) { return prompt_mode_from_string(s); });
  });
  f.with("optimizer", [&](const nlohmann::json& v, const std::string& w) { check_optimizer(v, w, c.lr); });
  f.finish();
}

inline void from_json_strict(const nlohmann::json& j, EvalConfig& c, const std::string& where) {
  detail::Fields f(j, where);
  f.get("max_len", c.max_len).get("each_stage", c.each_stage);
  f.with("modes", [&](const nlohmann::json& v, const std::string& w) {
    if (!v.is_array()) throw ConfigError(w + " must be an array");
    c.modes.clear();
    for (const auto& m : v)
      c.modes.push_back(detail::parse_enum<PromptMode>(m, w, [](const std::string& s) { return prompt_mode_from_string(s); }));
  });
  f.finish();
}

inline void from_json_strict(const nlohmann::json& j, DynamicsConfig& c, const std::string& where) {
  detail::Fields f(j, where);
  f.get("window", c.window).get("format_threshold", c.format_threshold).get("rise_factor", c.rise_factor)
      .get("margin", c.margin);
  f.finish();
}

/// Parses a manifest or config file body. `schema_version` is required.
inline RunManifest manifest_from_json(const nlohmann::json& j) {
  RunManifest m;
  if (!j.is_object() || !j.contains("schema_version")) throw ConfigError("config must declare schema_version");
  detail::Fields f(j, "");
  f.get("schema_version", m.schema_version).get("seed", m.seed).get("code_version", m.code_version)
      .get("dataset_fingerprint", m.dataset_fingerprint);
  if (m.schema_version != kSchemaVersion)
    throw ConfigError("unsupported schema_version " + std::to_string(m.schema_version));
  f.with("route", [&](const nlohmann::json& v, const std::string& w) {
    m.route = detail::parse_enum<Route>(v, w, [](const std::string& s) { return route_from_string(s); });
  });
  f.with("plan", [&](const nlohmann::json& v, const std::string& w) {
    if (!v.is_array()) throw ConfigError(w + " must be an array");
    m.plan.clear();
    for (const auto& s : v)
      m.plan.push_back(detail::parse_enum<Stage>(s, w, [](const std::string& x) { return stage_from_string(x); }));
  });
  f.with("init_checkpoint", [&](const nlohmann::json& v, const std::string&) {
    m.init_checkpoint = v.is_null() ? std::nullopt : std::optional<std::string>(v.get<std::string>());
  });
  f.with("data", [&](const nlohmann::json& v, const std::string& w) { from_json_strict(v, m.data, w); });
  f.with("model", [&](const nlohmann::json& v, const std::string& w) { from_json_strict(v, m.policy, w); });
  f.with("base", [&](const nlohmann::json& v, const std::string& w) { from_json_strict(v, m.base, w); });
  f.with("sft", [&](const nlohmann::json& v, const std::string& w) { from_json_strict(v, m.sft, w); });
  f.with("grpo", [&](const nlohmann::json& v, const std::string& w) { from_json_strict(v, m.grpo, w); });
  f.with("eval", [&](const nlohmann::json& v, const std::string& w) { from_json_strict(v, m.eval, w); });
  f.with("dynamics", [&](const nlohmann::json& v, const std::string& w) { from_json_strict(v, m.dynamics, w); });
  f.finish();
  m.derive_seeds();
  m.validate();
  return m;
}

inline RunManifest manifest_from_text(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("malformed JSON: ") + e.what());
  }
  return manifest_from_json(j);
}

inline RunManifest read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return manifest_from_text(ss.str());
}

/// A manifest with defaults and derived seeds, as written to a run directory.
inline RunManifest default_manifest(std::uint64_t seed = 0) {
  RunManifest m;
  m.seed = seed;
  m.derive_seeds();
  return m;
}

}  // namespace vqalab
