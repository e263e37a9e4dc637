#pragma once

// Exact-match accuracy (100 * correct / N) per task, per stage and overall,
// cross-task transfer matrices, and reward-dynamics analysis of GRPO logs.

#include <array>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vqalab/grpo.hpp"
#include "vqalab/policy.hpp"
#include "vqalab/structured_io.hpp"
#include "vqalab/synvqa.hpp"

namespace vqalab {

// ----------------------------- answer extraction -----------------------------

/// The answer tag's content; in plain mode, when no answer tag exists, the last
/// whitespace-delimited token of the output.
inline std::optional<std::string> extract_answer(std::string_view raw, PromptMode mode) {
  StructuredResponse r = parse_structured(raw);
  if (r.answer) return r.answer;
  if (mode != PromptMode::plain) return std::nullopt;
  auto words = split_words(raw);
  if (words.empty()) return std::nullopt;
  return words.back();
}

struct Prediction {
  std::string sample_id;
  std::string raw_output;
  std::optional<std::string> parsed_answer;
  std::string gold;
  bool correct = false;
};

inline Prediction score_prediction(const VqaSample& s, std::string raw, PromptMode mode) {
  Prediction p;
  p.sample_id = s.id;
  p.parsed_answer = extract_answer(raw, mode);
  p.raw_output = std::move(raw);
  p.gold = s.gold_answer;
  p.correct = p.parsed_answer && normalize_answer(*p.parsed_answer) == normalize_answer(s.gold_answer);
  return p;
}

inline std::string to_jsonl(const Prediction& p) {
  nlohmann::ordered_json j;
  j["sample_id"] = p.sample_id;
  j["raw_output"] = p.raw_output;
  j["parsed_answer"] = p.parsed_answer ? nlohmann::ordered_json(*p.parsed_answer) : nlohmann::ordered_json();
  j["gold"] = p.gold;
  j["correct"] = p.correct;
  return j.dump();
}

inline std::string predictions_to_jsonl(const std::vector<Prediction>& ps) {
  std::string out;
  for (const auto& p : ps) out += to_jsonl(p) + "\n";
  return out;
}

// ----------------------------- reports -----------------------------

struct Cell {
  std::size_t correct = 0;
  std::size_t total = 0;
  std::optional<double> accuracy() const {
    if (total == 0) return std::nullopt;
    return 100.0 * static_cast<double>(correct) / static_cast<double>(total);
  }
};

struct EvalReport {
  std::string checkpoint_id;
  PromptMode mode = PromptMode::prompting;
  std::array<Cell, 8> per_task{};
  std::array<Cell, 3> per_stage{};
  Cell overall;

  std::optional<double> task_accuracy(TaskKind t) const { return per_task[static_cast<std::size_t>(t)].accuracy(); }
  std::optional<double> stage_accuracy(Stage s) const { return per_stage[static_cast<std::size_t>(s)].accuracy(); }
  double overall_accuracy() const { return overall.accuracy().value_or(0.0); }
};

inline nlohmann::ordered_json to_json(const EvalReport& r) {
  auto cell = [](const Cell& c) {
    nlohmann::ordered_json j;
    auto a = c.accuracy();
    j["accuracy"] = a ? nlohmann::ordered_json(*a) : nlohmann::ordered_json();
    j["correct"] = c.correct;
    j["n"] = c.total;
    return j;
  };
  nlohmann::ordered_json j;
  j["checkpoint"] = r.checkpoint_id;
  j["mode"] = to_string(r.mode);
  j["overall"] = cell(r.overall);
  nlohmann::ordered_json st, tk;
  for (Stage s : {Stage::A, Stage::B, Stage::C}) st[std::string(to_string(s))] = cell(r.per_stage[static_cast<std::size_t>(s)]);
  for (TaskKind t : kAllTasks) tk[std::string(to_string(t))] = cell(r.per_task[static_cast<std::size_t>(t)]);
  j["per_stage"] = st;
  j["per_task"] = tk;
  return j;
}

inline EvalReport aggregate(const std::vector<const VqaSample*>& samples, const std::vector<Prediction>& preds,
                            PromptMode mode, std::string checkpoint_id) {
  if (samples.size() != preds.size()) throw InternalError("prediction count mismatch");
  EvalReport r;
  r.mode = mode;
  r.checkpoint_id = std::move(checkpoint_id);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const std::size_t ok = preds[i].correct ? 1 : 0;
    for (Cell* c : {&r.per_task[static_cast<std::size_t>(samples[i]->task)],
                    &r.per_stage[static_cast<std::size_t>(samples[i]->stage())], &r.overall}) {
      c->correct += ok;
      c->total += 1;
    }
  }
  return r;
}

/// Maps a sample to the raw text a policy produced for it.
using Responder = std::function<std::string(const VqaSample&)>;

struct EvalResult {
  EvalReport report;
  std::vector<Prediction> predictions;
};

inline EvalResult evaluate(const Responder& respond, const std::vector<const VqaSample*>& samples,
                           PromptMode mode, std::string checkpoint_id = "") {
  if (samples.empty()) throw ConfigError("evaluation split is empty");
  EvalResult res;
  res.predictions.resize(samples.size());
  parallel_for(samples.size(), [&](std::size_t i) {
    res.predictions[i] = score_prediction(*samples[i], respond(*samples[i]), mode);
  });
  res.report = aggregate(samples, res.predictions, mode, std::move(checkpoint_id));
  return res;
}

inline constexpr std::size_t kEvalMaxLen = 48;

/// Greedy decoding of the policy under the given prompt regime.
inline Responder greedy_responder(std::shared_ptr<const InferenceModel> im, const Vocab& vocab, PromptMode mode,
                                  std::size_t max_len = kEvalMaxLen) {
  return [im = std::move(im), &vocab, mode, max_len](const VqaSample& s) {
    auto prompt = build_prompt(s, mode, vocab, im->config().context);
    return vocab.decode(greedy_completion(*im, prompt, max_len, vocab.eos()).tokens);
  };
}

inline EvalResult evaluate(const Model& m, const Vocab& vocab, const std::vector<const VqaSample*>& samples,
                           PromptMode mode, std::string checkpoint_id = "") {
  if (m.base.config.vocab_size != vocab.size()) throw ConfigError("checkpoint vocabulary does not match");
  return evaluate(greedy_responder(std::make_shared<InferenceModel>(m), vocab, mode), samples, mode,
                  std::move(checkpoint_id));
}

inline EvalResult evaluate(const Checkpoint& ck, const Vocab& vocab, const std::vector<const VqaSample*>& samples,
                           PromptMode mode, std::string checkpoint_id = "") {
  if (ck.vocab_hash != vocab.hash()) throw ConfigError("checkpoint vocabulary hash does not match");
  return evaluate(ck.model, vocab, samples, mode, std::move(checkpoint_id));
}

/// Offline scoring of {sample_id, raw_output} lines against a dataset.
inline EvalResult evaluate_predictions(std::istream& lines, const std::vector<const VqaSample*>& samples,
                                       PromptMode mode) {
  std::map<std::string, std::string> raw;
  std::string line;
  std::size_t n = 0;
  while (std::getline(lines, line)) {
    ++n;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
      raw[j.at("sample_id").get<std::string>()] = j.at("raw_output").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw InputError("prediction line " + std::to_string(n) + ": " + e.what());
    }
  }
  std::vector<const VqaSample*> used;
  for (const auto* s : samples)
    if (raw.count(s->id)) used.push_back(s);
  if (used.size() != raw.size()) throw InputError("predictions reference unknown sample ids");
  return evaluate([&](const VqaSample& s) { return raw.at(s.id); }, used, mode, "offline");
}

// ----------------------------- cross-task matrix -----------------------------

struct CrossTaskMatrix {
  std::vector<Stage> trained;                      // row labels
  std::vector<std::array<double, 3>> accuracy;     // eval stage columns A, B, C
  std::vector<double> row_mean;
};

inline nlohmann::ordered_json to_json(const CrossTaskMatrix& m) {
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < m.trained.size(); ++i) {
    nlohmann::ordered_json r;
    r["trained_on"] = to_string(m.trained[i]);
    r["A"] = m.accuracy[i][0];
    r["B"] = m.accuracy[i][1];
    r["C"] = m.accuracy[i][2];
    r["overall"] = m.row_mean[i];
    rows.push_back(r);
  }
  return rows;
}

inline CrossTaskMatrix cross_task_matrix(const std::vector<std::pair<Stage, Responder>>& policies,
                                         const std::vector<const VqaSample*>& test, PromptMode mode) {
  CrossTaskMatrix m;
  for (const auto& [stage, respond] : policies) {
    const EvalReport r = evaluate(respond, test, mode, std::string(to_string(stage))).report;
    std::array<double, 3> row{};
    for (std::size_t s = 0; s < 3; ++s) {
      auto a = r.per_stage[s].accuracy();
      if (!a) throw ConfigError("test split lacks samples for stage " + std::string(to_string(static_cast<Stage>(s))));
      row[s] = *a;
    }
    m.trained.push_back(stage);
    m.accuracy.push_back(row);
    m.row_mean.push_back((row[0] + row[1] + row[2]) / 3.0);
  }
  return m;
}

// ----------------------------- reward dynamics -----------------------------

struct DynamicsConfig {
  std::size_t window = 20;
  double format_threshold = 0.45;
  double rise_factor = 2.0;
  double margin = 0.0;
};

struct DynamicsReport {
  std::size_t steps = 0;
  std::optional<std::size_t> format_saturation_step;
  double accuracy_baseline = 0.0;
  std::optional<std::size_t> accuracy_rise_step;
  std::optional<double> kl_accuracy_correlation;
  int correlation_sign = 0;
  /// Format saturates strictly before accuracy rises.
  bool format_first() const {
    return format_saturation_step && accuracy_rise_step && *format_saturation_step < *accuracy_rise_step;
  }
};

inline nlohmann::ordered_json to_json(const DynamicsReport& r) {
  auto opt = [](const auto& o) { return o ? nlohmann::ordered_json(*o) : nlohmann::ordered_json(); };
  nlohmann::ordered_json j;
  j["steps"] = r.steps;
  j["format_saturation_step"] = opt(r.format_saturation_step);
  j["accuracy_baseline"] = r.accuracy_baseline;
  j["accuracy_rise_step"] = opt(r.accuracy_rise_step);
  j["kl_accuracy_correlation"] = opt(r.kl_accuracy_correlation);
  j["correlation_sign"] = r.correlation_sign;
  j["format_first"] = r.format_first();
  return j;
}

/// Trailing moving average; early steps average over what is available.
inline std::vector<double> rolling_mean(std::span<const double> x, std::size_t w) {
  std::vector<double> out(x.size());
  double s = 0.0;
  for (std::size_t t = 0; t < x.size(); ++t) {
    s += x[t];
    if (t >= w) s -= x[t - w];
    out[t] = s / static_cast<double>(std::min(t + 1, w));
  }
  return out;
}

inline std::optional<double> pearson(std::span<const double> a, std::span<const double> b) {
  const std::size_t n = a.size();
  if (n < 2 || b.size() != n) return std::nullopt;
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < n; ++i) ma += a[i], mb += b[i];
  ma /= static_cast<double>(n);
  mb /= static_cast<double>(n);
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa <= 0.0 || sbb <= 0.0) return std::nullopt;
  return sab / std::sqrt(saa * sbb);
}

inline DynamicsReport analyze_dynamics(std::span<const double> format, std::span<const double> accuracy,
                                       std::span<const double> kl, const DynamicsConfig& cfg = {}) {
  if (format.empty() || accuracy.empty() || kl.empty()) throw InputError("metrics log is missing a series");
  if (format.size() != accuracy.size() || format.size() != kl.size())
    throw InputError("metrics series have different lengths");
  if (cfg.window < 1) throw ConfigError("dynamics window must be >= 1");
  const std::size_t n = format.size(), w = std::min(cfg.window, n);
  DynamicsReport r;
  r.steps = n;
  const auto fm = rolling_mean(format, w), am = rolling_mean(accuracy, w), km = rolling_mean(kl, w);
  for (std::size_t t = 0; t < n; ++t)
    if (fm[t] >= cfg.format_threshold) {
      r.format_saturation_step = t;
      break;
    }
  r.accuracy_baseline = am[w - 1];
  const double bar = cfg.rise_factor * r.accuracy_baseline + cfg.margin;
  for (std::size_t t = w - 1; t < n; ++t)
    if (am[t] > bar) {
      r.accuracy_rise_step = t;
      break;
    }
  std::vector<double> dk, da;
  for (std::size_t t = 1; t < n; ++t) {
    dk.push_back(km[t] - km[t - 1]);
    da.push_back(am[t] - am[t - 1]);
  }
  r.kl_accuracy_correlation = pearson(dk, da);
  if (r.kl_accuracy_correlation) r.correlation_sign = (*r.kl_accuracy_correlation > 0) - (*r.kl_accuracy_correlation < 0);
  return r;
}

inline DynamicsReport analyze_dynamics(const std::vector<GrpoMetrics>& log, const DynamicsConfig& cfg = {}) {
  std::vector<double> f, a, k;
  for (const auto& m : log) {
    f.push_back(m.reward_format_mean);
    a.push_back(m.reward_acc_mean);
    k.push_back(m.kl);
  }
  return analyze_dynamics(f, a, k, cfg);
}

/// Reads GRPO metrics JSONL; records lacking any of the three series are an input error.
inline std::vector<GrpoMetrics> read_metrics_jsonl(std::istream& in) {
  std::vector<GrpoMetrics> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      for (const char* key : {"reward_format_mean", "reward_acc_mean", "kl"})
        if (!j.contains(key)) throw InputError("metrics line " + std::to_string(n) + " lacks '" + key + "'");
      GrpoMetrics m;
      m.step = j.value("step", out.size());
      m.stage = j.value("stage", std::string());
      m.loss = j.value("loss", 0.0);
      m.kl = j.at("kl").get<double>();
      m.reward_format_mean = j.at("reward_format_mean").get<double>();
      m.reward_acc_mean = j.at("reward_acc_mean").get<double>();
      m.clip_frac = j.value("clip_frac", 0.0);
      out.push_back(m);
    } catch (const nlohmann::json::exception& e) {
      throw InputError("metrics line " + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace vqalab
