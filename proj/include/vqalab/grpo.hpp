#pragma once

// Group Relative Policy Optimization: sample G completions per prompt from the
// old policy, score them with the rule-based reward, standardize the rewards
// within the group, and ascend a clipped ratio surrogate with a KL penalty
// towards a per-stage reference policy.

#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vqalab/optim.hpp"
#include "vqalab/policy.hpp"
#include "vqalab/rewards.hpp"
#include "vqalab/structured_io.hpp"

namespace vqalab {

enum class AdvantageBaseline { mean, max };

inline std::string to_string(AdvantageBaseline b) { return b == AdvantageBaseline::mean ? "mean" : "max"; }
inline AdvantageBaseline advantage_baseline_from_string(std::string_view s) {
  if (s == "mean") return AdvantageBaseline::mean;
  if (s == "max") return AdvantageBaseline::max;
  throw ConfigError("unknown advantage baseline '" + std::string(s) + "'");
}

struct GrpoConfig {
  std::size_t group_size = 8;
  double clip_eps = 0.2;
  double kl_beta = 0.04;
  double lr = 3e-4;
  std::size_t batch_size = 1;
  std::size_t grad_accum = 2;
  std::size_t epochs = 2;
  double temperature = 1.0;
  std::size_t max_completion = 32;
  std::size_t inner_iters = 1;  // optimization passes per rollout batch
  AdvantageBaseline baseline = AdvantageBaseline::mean;
  PromptMode mode = PromptMode::prompting;
  std::uint64_t seed = 0;
  std::size_t max_steps = 0;  // per stage; 0: no cap

  void validate() const {
    if (group_size < 2) throw ConfigError("grpo group_size must be >= 2");
    if (!(clip_eps > 0.0 && clip_eps < 1.0)) throw ConfigError("grpo clip_eps must be in (0, 1)");
    if (!(kl_beta >= 0.0)) throw ConfigError("grpo kl_beta must be >= 0");
    if (!(lr >= 0.0)) throw ConfigError("grpo lr must be >= 0");
    if (!(temperature > 0.0)) throw ConfigError("grpo temperature must be > 0");
    if (batch_size < 1 || grad_accum < 1 || epochs < 1 || inner_iters < 1 || max_completion < 1)
      throw ConfigError("grpo batch_size, grad_accum, epochs, inner_iters, max_completion must be >= 1");
  }
};

// ----------------------------- advantages / KL -----------------------------

inline constexpr double kStdFloor = 1e-8;

/// (r_i - b) / std(r) with the population std; b is the group mean (or the
/// group max under the alternative baseline). Zero-std groups give all zeros.
inline std::vector<double> group_advantages(std::span<const double> rewards,
                                            AdvantageBaseline baseline = AdvantageBaseline::mean) {
  const std::size_t g = rewards.size();
  if (g < 2) throw ConfigError("group_advantages needs at least 2 rewards");
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= static_cast<double>(g);
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double sd = std::sqrt(var / static_cast<double>(g));
  std::vector<double> a(g, 0.0);
  if (sd < kStdFloor) return a;
  double b = mean;
  if (baseline == AdvantageBaseline::max) b = *std::max_element(rewards.begin(), rewards.end());
  for (std::size_t i = 0; i < g; ++i) a[i] = (rewards[i] - b) / sd;
  return a;
}

inline std::vector<double> group_advantages(std::span<const Reward> rewards,
                                            AdvantageBaseline baseline = AdvantageBaseline::mean) {
  std::vector<double> r;
  for (Reward x : rewards) r.push_back(x.value());
  return group_advantages(r, baseline);
}

/// q - log q - 1 with q = exp(ref - theta), evaluated as expm1(d) - d.
inline double kl_term(double logp_theta, double logp_ref) {
  const double d = logp_ref - logp_theta;
  return std::max(0.0, std::expm1(d) - d);
}

inline std::vector<double> kl_estimate(std::span<const double> logp_theta, std::span<const double> logp_ref) {
  if (logp_theta.size() != logp_ref.size()) throw InternalError("kl_estimate length mismatch");
  std::vector<double> out(logp_theta.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = kl_term(logp_theta[i], logp_ref[i]);
  return out;
}

namespace ad {
/// Per-token KL penalty of a column of log-probs against fixed reference values.
inline Var kl_penalty(Var logp, std::vector<double> ref) {
  Tape& t = tape_of(logp);
  const Matrix& x = t.value(logp);
  if (x.size() != ref.size()) throw InternalError("kl_penalty length mismatch");
  Matrix out(x.rows, x.cols);
  for (std::size_t i = 0; i < x.size(); ++i) out.data[i] = kl_term(x.data[i], ref[i]);
  return t.push(std::move(out), t.needs_grad(logp), [logp, ref = std::move(ref)](Tape& t, const Matrix&, const Matrix& g) {
    const Matrix& x = t.value(logp);
    Matrix d(x.rows, x.cols);
    for (std::size_t i = 0; i < x.size(); ++i) d.data[i] = -std::expm1(ref[i] - x.data[i]) * g.data[i];
    t.accumulate(logp, d);
  });
}
}  // namespace ad

// ----------------------------- rollouts -----------------------------

struct Rollout {
  std::vector<int> tokens;
  std::vector<double> old_logprobs;
  std::vector<double> ref_logprobs;
  std::string text;
  RewardBreakdown reward;
};

struct RolloutGroup {
  std::string sample_id;
  std::vector<int> prompt;
  std::vector<Rollout> completions;
  std::vector<double> advantages;

  void validate() const {
    if (completions.size() != advantages.size()) throw InternalError("advantage count mismatch");
    for (const auto& c : completions)
      if (c.tokens.empty() || c.tokens.size() != c.old_logprobs.size() ||
          c.tokens.size() != c.ref_logprobs.size())
        throw InternalError("rollout log-prob length mismatch");
  }
};

/// Samples G completions from `old_policy` and scores them.
inline RolloutGroup collect_group(const InferenceModel& old_policy, const InferenceModel& ref_policy,
                                  const VqaSample& sample, const Vocab& vocab, const GrpoConfig& cfg,
                                  std::uint64_t seed) {
  RolloutGroup g;
  g.sample_id = sample.id;
  g.prompt = build_prompt(sample, cfg.mode, vocab, old_policy.config().context);
  g.completions.resize(cfg.group_size);
  parallel_for(cfg.group_size, [&](std::size_t i) {
    Completion c = sample_completion(old_policy, g.prompt, cfg.temperature, cfg.max_completion,
                                     derive_seed(seed, "completion", i), vocab.eos());
    Rollout& r = g.completions[i];
    r.tokens = std::move(c.tokens);
    r.old_logprobs = old_policy.logprobs(g.prompt, r.tokens);
    r.ref_logprobs = &ref_policy == &old_policy ? r.old_logprobs : ref_policy.logprobs(g.prompt, r.tokens);
    r.text = vocab.decode(r.tokens);
    r.reward = score_text(r.text, sample.gold_answer);
  });
  std::vector<Reward> rewards;
  for (const auto& r : g.completions) rewards.push_back(r.reward.total);
  g.advantages = group_advantages(rewards, cfg.baseline);
  return g;
}

// ----------------------------- objective -----------------------------

struct ObjectiveStats {
  double kl_sum = 0.0;
  std::size_t tokens = 0;
  std::size_t clipped = 0;
};

/// Records the GRPO objective for one group on `tape` and returns it (1x1).
inline Var record_grpo_objective(Tape& tape, const Model& m, const TapeModel& tm, const RolloutGroup& group,
                                 const GrpoConfig& cfg, ObjectiveStats* stats = nullptr) {
  group.validate();
  const double lo = 1.0 - cfg.clip_eps, hi = 1.0 + cfg.clip_eps;
  std::vector<Var> scores;
  for (std::size_t i = 0; i < group.completions.size(); ++i) {
    const Rollout& r = group.completions[i];
    const double a = group.advantages[i];
    Var lp = forward_logprobs(tape, m, tm, group.prompt, r.tokens);
    Matrix old(r.tokens.size(), 1);
    old.data = r.old_logprobs;
    Var ratio = ad::exp(ad::sub(lp, tape.constant(std::move(old))));
    Var term = ad::minimum(ad::scale(ratio, a), ad::scale(ad::clamp(ratio, lo, hi), a));
    Var kl = ad::kl_penalty(lp, r.ref_logprobs);
    if (cfg.kl_beta != 0.0) term = ad::sub(term, ad::scale(kl, cfg.kl_beta));
    scores.push_back(ad::mean(term));
    if (stats) {
      const Matrix& rv = tape.value(ratio);
      for (double v : rv.data) {
        const bool clipped = (a > 0.0 && v > hi) || (a < 0.0 && v < lo);
        stats->clipped += clipped;
      }
      for (double v : tape.value(kl).data) stats->kl_sum += v;
      stats->tokens += r.tokens.size();
    }
  }
  return ad::scale(ad::add_all(scores), 1.0 / static_cast<double>(scores.size()));
}

struct ObjectiveResult {
  double value = 0.0;
  Gradient grad;  // gradient of the objective (ascent direction)
  ObjectiveStats stats;
};

inline ObjectiveResult grpo_objective(const Model& m, const std::vector<bool>& trainable,
                                      const RolloutGroup& group, const GrpoConfig& cfg,
                                      bool with_grad = true) {
  Tape tape;
  const TapeModel tm = record_model(tape, m, trainable);
  ObjectiveResult out;
  Var obj = record_grpo_objective(tape, m, tm, group, cfg, &out.stats);
  out.value = tape.value(obj).data[0];
  if (with_grad) out.grad = backward(tape, obj, tm);
  return out;
}

// ----------------------------- training step -----------------------------

struct GrpoMetrics {
  std::size_t step = 0;
  std::string stage;
  double loss = 0.0;
  double kl = 0.0;
  double reward_format_mean = 0.0;
  double reward_acc_mean = 0.0;
  double clip_frac = 0.0;
};

inline nlohmann::ordered_json to_json(const GrpoMetrics& m) {
  nlohmann::ordered_json j;
  j["step"] = m.step;
  j["stage"] = m.stage;
  j["loss"] = m.loss;
  j["kl"] = m.kl;
  j["reward_format_mean"] = m.reward_format_mean;
  j["reward_acc_mean"] = m.reward_acc_mean;
  j["clip_frac"] = m.clip_frac;
  return j;
}

inline GrpoMetrics grpo_metrics_from_json(const nlohmann::json& j) {
  GrpoMetrics m;
  m.step = j.at("step").get<std::size_t>();
  m.stage = j.at("stage").get<std::string>();
  m.loss = j.at("loss").get<double>();
  m.kl = j.at("kl").get<double>();
  m.reward_format_mean = j.at("reward_format_mean").get<double>();
  m.reward_acc_mean = j.at("reward_acc_mean").get<double>();
  m.clip_frac = j.at("clip_frac").get<double>();
  return m;
}

inline std::string rollout_dump(const std::vector<RolloutGroup>& groups, const Vocab& vocab) {
  std::string out;
  for (const auto& g : groups)
    for (const auto& r : g.completions) {
      nlohmann::ordered_json j;
      j["prompt"] = vocab.decode(g.prompt);
      j["completion"] = r.text;
      j["rewards"] = {{"format", r.reward.format.value()},
                      {"accuracy", r.reward.accuracy.value()},
                      {"total", r.reward.total.value()}};
      out += j.dump() + "\n";
    }
  return out;
}

/// One optimizer step over a window of prompts. `model` is updated in place;
/// the old policy is the model as it stands on entry.
inline GrpoMetrics grpo_step(Model& model, Adam& opt, const std::vector<bool>& trainable,
                             const InferenceModel& ref, std::span<const VqaSample* const> prompts,
                             const Vocab& vocab, const GrpoConfig& cfg, std::uint64_t step_seed) {
  const InferenceModel old(model);
  std::vector<RolloutGroup> groups(prompts.size());
  for (std::size_t p = 0; p < prompts.size(); ++p)
    groups[p] = collect_group(old, ref, *prompts[p], vocab, cfg, derive_seed(step_seed, "group", p));

  GrpoMetrics met;
  double fmt = 0.0, acc = 0.0;
  std::size_t n = 0;
  for (const auto& g : groups)
    for (const auto& r : g.completions) {
      fmt += r.reward.format.value();
      acc += r.reward.accuracy.value();
      ++n;
    }
  met.reward_format_mean = fmt / static_cast<double>(n);
  met.reward_acc_mean = acc / static_cast<double>(n);

  for (std::size_t it = 0; it < cfg.inner_iters; ++it) {
    std::vector<ObjectiveResult> parts(groups.size());
    for (std::size_t p = 0; p < groups.size(); ++p) parts[p] = grpo_objective(model, trainable, groups[p], cfg);
    Gradient g = zero_gradient(model);
    double obj = 0.0;
    ObjectiveStats st;
    for (const auto& part : parts) {
      add_scaled(g, part.grad, -1.0 / static_cast<double>(parts.size()));
      obj += part.value;
      st.kl_sum += part.stats.kl_sum;
      st.tokens += part.stats.tokens;
      st.clipped += part.stats.clipped;
    }
    obj /= static_cast<double>(parts.size());
    if (!std::isfinite(obj))
      throw NumericalError("non-finite GRPO objective", rollout_dump(groups, vocab));
    if (it == 0) {
      met.loss = 0.0 - obj;  // avoids a signed zero in the log
      met.kl = st.kl_sum / static_cast<double>(st.tokens);
      met.clip_frac = static_cast<double>(st.clipped) / static_cast<double>(st.tokens);
    }
    opt.step(model, g);
  }
  return met;
}

struct GrpoStageResult {
  Model model;
  std::vector<GrpoMetrics> metrics;
  std::size_t steps = 0;
};

/// Runs one curriculum stage: the reference policy is the model on entry, the
/// old policy is refreshed at every step, and the optimizer state is fresh.
inline GrpoStageResult train_grpo_stage(Model model, const std::vector<const VqaSample*>& prompts,
                                        const GrpoConfig& cfg, Stage stage, const Vocab& vocab,
                                        const std::function<void(const GrpoMetrics&)>& on_metrics = {},
                                        std::size_t step_offset = 0) {
  cfg.validate();
  if (prompts.empty()) throw ConfigError("grpo split for stage " + std::string(to_string(stage)) + " is empty");
  if (model.adapter) throw ConfigError("grpo trains full weights; merge the adapter first");
  const std::uint64_t root = derive_seed(cfg.seed, "grpo.stage", static_cast<std::uint64_t>(stage));
  const auto mask = Trainable::all().mask(model);
  const InferenceModel ref(model);
  Adam opt(model, mask, cfg.lr);
  GrpoStageResult res;
  const std::size_t window = cfg.batch_size * cfg.grad_accum;
  bool stop = false;
  for (std::size_t epoch = 0; epoch < cfg.epochs && !stop; ++epoch) {
    auto order = prompts;
    Rng rng(derive_seed(root, "epoch", epoch));
    rng.shuffle(order);
    for (std::size_t b = 0; b < order.size() && !stop; b += window) {
      const std::size_t n = std::min(window, order.size() - b);
      GrpoMetrics m = grpo_step(model, opt, mask, ref, std::span(order.data() + b, n), vocab, cfg,
                                derive_seed(root, "step", res.steps));
      m.step = step_offset + res.steps;
      m.stage = std::string(to_string(stage));
      if (on_metrics) on_metrics(m);
      res.metrics.push_back(m);
      ++res.steps;
      if (cfg.max_steps && res.steps >= cfg.max_steps) stop = true;
    }
  }
  res.model = std::move(model);
  return res;
}

}  // namespace vqalab
