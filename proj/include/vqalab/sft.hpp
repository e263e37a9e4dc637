#pragma once

// Supervised fine-tuning: maximize the likelihood of the reasoning + answer
// target given the scene and question. The loss is the per-token mean of the
// negative log-likelihood over target tokens only; both the mean and the sum
// are reported.

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vqalab/optim.hpp"
#include "vqalab/policy.hpp"
#include "vqalab/structured_io.hpp"

namespace vqalab {

struct SftConfig {
  double lr = 3e-3;
  std::size_t batch_size = 1;
  std::size_t grad_accum = 4;
  std::size_t epochs = 4;
  std::size_t patience = 1;
  double val_fraction = 0.1;
  Split split = Split::sft;
  std::uint64_t seed = 0;
  bool use_adapter = true;
  std::size_t adapter_rank = 4;
  double adapter_alpha = 6.0;
  bool train_embeddings = true;
  std::size_t max_steps = 0;  // 0: no cap

  void validate() const {
    if (epochs < 1) throw ConfigError("sft epochs must be >= 1");
    if (grad_accum < 1 || batch_size < 1) throw ConfigError("sft batch_size and grad_accum must be >= 1");
    if (!(lr >= 0.0)) throw ConfigError("sft lr must be >= 0");
    if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw ConfigError("val_fraction must be in [0, 1)");
    if (use_adapter && adapter_rank < 1) throw ConfigError("adapter rank must be >= 1");
  }
};

struct LossRecord {
  std::size_t step = 0;
  std::string split;  // "train" or "val" (or "base" for warm-up)
  double loss = 0.0;
  double lr = 0.0;
};

inline std::string to_jsonl(const LossRecord& r) {
  nlohmann::ordered_json j;
  j["step"] = r.step;
  j["split"] = r.split;
  j["loss"] = r.loss;
  j["lr"] = r.lr;
  return j.dump();
}

/// A prompt/target token pair.
struct SupervisedExample {
  std::string id;
  std::vector<int> prompt;
  std::vector<int> target;
};

inline SupervisedExample make_example(const VqaSample& s, const Vocab& vocab, std::size_t context,
                                      PromptMode mode = PromptMode::prompting) {
  SupervisedExample e{s.id, build_prompt(s, mode, vocab, context), build_target(s, vocab)};
  if (e.prompt.size() + e.target.size() > context)
    throw EncodingError("sample " + s.id + " does not fit the context budget");
  return e;
}

/// -mean_t log p(y_t | prompt, y_<t), recorded on the tape.
inline Var sft_objective(const Model& m, const TapeModel& tm, Tape& tape,
                         std::span<const int> prompt, std::span<const int> target) {
  return ad::scale(ad::mean(forward_logprobs(tape, m, tm, prompt, target)), -1.0);
}

struct LossAndGrad {
  double loss = 0.0;
  Gradient grad;
};

inline LossAndGrad sft_loss_and_grad(const Model& m, const std::vector<bool>& trainable,
                                     std::span<const int> prompt, std::span<const int> target) {
  Tape tape;
  const TapeModel tm = record_model(tape, m, trainable);
  Var obj = sft_objective(m, tm, tape, prompt, target);
  LossAndGrad out;
  out.loss = tape.value(obj).data[0];
  out.grad = backward(tape, obj, tm);
  return out;
}

/// Mean per-token negative log-likelihood (no gradient).
inline double sft_loss(const Model& m, std::span<const int> prompt, std::span<const int> target) {
  const auto lp = logprobs(m, prompt, target);
  double s = 0.0;
  for (double v : lp) s -= v;
  return s / static_cast<double>(lp.size());
}

inline double sft_loss(const Model& m, const VqaSample& sample, const Vocab& vocab) {
  const auto e = make_example(sample, vocab, m.base.config.context);
  return sft_loss(m, e.prompt, e.target);
}

/// Summed negative log-likelihood, the unnormalized form of the objective.
inline double sft_loss_sum(const Model& m, std::span<const int> prompt, std::span<const int> target) {
  double s = 0.0;
  for (double v : logprobs(m, prompt, target)) s -= v;
  return s;
}

struct SftResult {
  Model model;
  std::vector<LossRecord> curve;
  std::size_t steps = 0;
  bool early_stopped = false;
  std::optional<double> best_val_loss;
};

namespace detail {
inline std::string batch_dump(std::span<const SupervisedExample* const> batch, const Vocab* vocab) {
  std::string out;
  for (const auto* e : batch) {
    nlohmann::ordered_json j;
    j["id"] = e->id;
    j["prompt"] = vocab ? vocab->decode(e->prompt) : "";
    j["target"] = vocab ? vocab->decode(e->target) : "";
    j["prompt_ids"] = e->prompt;
    j["target_ids"] = e->target;
    out += j.dump() + "\n";
  }
  return out;
}
}  // namespace detail

/// Accumulated-gradient Adam training with per-epoch validation and early
/// stopping; returns the best-validation parameters when a validation set exists.
inline SftResult train_sft(Model model, const std::vector<SupervisedExample>& examples,
                           const SftConfig& cfg, const Trainable& trainable,
                           const Vocab* vocab = nullptr,
                           const std::function<void(const LossRecord&)>& on_record = {}) {
  cfg.validate();
  if (examples.empty()) throw ConfigError("sft split is empty");
  const auto mask = trainable.mask(model);

  std::vector<const SupervisedExample*> order;
  for (const auto& e : examples) order.push_back(&e);
  Rng split_rng(derive_seed(cfg.seed, "sft.val_split"));
  split_rng.shuffle(order);
  std::size_t n_val = static_cast<std::size_t>(std::floor(cfg.val_fraction * static_cast<double>(order.size())));
  if (n_val >= order.size()) n_val = order.size() - 1;
  std::vector<const SupervisedExample*> val(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<const SupervisedExample*> train(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());

  SftResult res;
  Adam opt(model, mask, cfg.lr);
  auto emit = [&](LossRecord r) {
    if (on_record) on_record(r);
    res.curve.push_back(std::move(r));
  };
  auto val_loss = [&](const Model& m) {
    std::vector<double> losses(val.size());
    parallel_for(val.size(), [&](std::size_t i) { losses[i] = sft_loss(m, val[i]->prompt, val[i]->target); });
    double s = 0.0;
    for (double v : losses) s += v;
    return s / static_cast<double>(losses.size());
  };

  const std::size_t window = cfg.batch_size * cfg.grad_accum;
  std::optional<Model> best;
  std::size_t bad = 0;
  bool stop = false;
  for (std::size_t epoch = 0; epoch < cfg.epochs && !stop; ++epoch) {
    Rng rng(derive_seed(cfg.seed, "sft.epoch", epoch));
    auto ep = train;
    rng.shuffle(ep);
    for (std::size_t b = 0; b < ep.size() && !stop; b += window) {
      const std::size_t n = std::min(window, ep.size() - b);
      std::span<const SupervisedExample* const> batch(ep.data() + b, n);
      std::vector<LossAndGrad> parts(n);
      parallel_for(n, [&](std::size_t i) {
        parts[i] = sft_loss_and_grad(model, mask, batch[i]->prompt, batch[i]->target);
      });
      Gradient g = zero_gradient(model);
      double loss = 0.0;
      for (const auto& p : parts) {
        add_scaled(g, p.grad, 1.0);
        loss += p.loss;
      }
      loss /= static_cast<double>(n);
      if (!std::isfinite(loss))
        throw NumericalError("non-finite SFT loss at step " + std::to_string(res.steps),
                             detail::batch_dump(batch, vocab));
      for (auto& m : g)
        for (double& v : m.data) v /= static_cast<double>(n);
      opt.step(model, g);
      emit({res.steps, "train", loss, cfg.lr});
      ++res.steps;
      if (cfg.max_steps && res.steps >= cfg.max_steps) stop = true;
    }
    if (!val.empty()) {
      const double vl = val_loss(model);
      emit({res.steps, "val", vl, cfg.lr});
      if (!res.best_val_loss || vl < *res.best_val_loss) {
        res.best_val_loss = vl;
        best = model;
        bad = 0;
      } else if (++bad > cfg.patience) {
        res.early_stopped = true;
        stop = true;
      }
    }
  }
  res.model = best ? std::move(*best) : std::move(model);
  return res;
}

/// Prepares the model for SFT (attaching a fresh adapter if configured) and trains.
inline SftResult run_sft(const PolicyParams& base, const std::vector<const VqaSample*>& samples,
                         const Vocab& vocab, const SftConfig& cfg,
                         const std::function<void(const LossRecord&)>& on_record = {}) {
  cfg.validate();
  Model m{base, std::nullopt};
  Trainable tr = Trainable::all();
  if (cfg.use_adapter) {
    m.adapter = make_adapter(base, default_adapter_targets(base.config), cfg.adapter_rank,
                             cfg.adapter_alpha, derive_seed(cfg.seed, "sft.adapter"));
    tr = Trainable::frozen_base(cfg.train_embeddings);
  }
  std::vector<SupervisedExample> ex;
  for (const auto* s : samples) ex.push_back(make_example(*s, vocab, base.config.context));
  return train_sft(std::move(m), ex, cfg, tr, &vocab, on_record);
}

// ----------------------------- format-prior warm-up -----------------------------

/// Short supervised warm-up that stands in for a pretrained instruction-following
/// backbone: targets are input-independent, use the tag layout with probability
/// `think_prob` (otherwise an answer tag only), and carry an answer drawn from a
/// uniformly chosen task's answer space, so the resulting policy knows the
/// output layout only partially and has no grounding.
struct BaseConfig {
  std::size_t steps = 300;
  double lr = 3e-3;
  std::size_t batch = 4;
  double think_prob = 0.6;
  std::uint64_t seed = 0;
};

inline std::vector<int> warmup_target(Rng& rng, const Vocab& vocab, double think_prob) {
  std::vector<std::string> filler;
  for (const auto& w : template_words()) filler.push_back(w);
  for (auto w : kCategories) filler.emplace_back(w);
  for (auto w : kColors) filler.emplace_back(w);
  std::vector<std::string> w;
  if (rng.bernoulli(think_prob)) {
    w.emplace_back(kThinkOpen);
    const std::size_t n = 1 + rng.below(4);
    for (std::size_t i = 0; i < n; ++i) w.push_back(filler[rng.below(filler.size())]);
    w.emplace_back(kThinkClose);
  }
  w.emplace_back(kAnswerOpen);
  const auto answers = answer_space(kAllTasks[rng.below(kAllTasks.size())]);
  for (auto& a : split_words(answers[rng.below(answers.size())])) w.push_back(a);
  w.emplace_back(kAnswerClose);
  w.emplace_back(kEos);
  return vocab.encode(w);
}

inline SftResult warmup_base(const PolicyParams& init, const std::vector<const VqaSample*>& prompts,
                             const Vocab& vocab, const BaseConfig& cfg,
                             const std::function<void(const LossRecord&)>& on_record = {}) {
  if (prompts.empty()) throw ConfigError("warm-up needs at least one prompt");
  Rng rng(derive_seed(cfg.seed, "base.targets"));
  std::vector<SupervisedExample> ex;
  for (std::size_t i = 0; i < cfg.steps * cfg.batch; ++i) {
    const VqaSample& s = *prompts[i % prompts.size()];
    ex.push_back({s.id, build_prompt(s, PromptMode::prompting, vocab, init.config.context),
                  warmup_target(rng, vocab, cfg.think_prob)});
  }
  SftConfig sc;
  sc.lr = cfg.lr;
  sc.batch_size = cfg.batch;
  sc.grad_accum = 1;
  sc.epochs = 1;
  sc.val_fraction = 0.0;
  sc.seed = derive_seed(cfg.seed, "base.train");
  sc.use_adapter = false;
  auto res = train_sft(Model{init, std::nullopt}, ex, sc, Trainable::all(), &vocab,
                       [&](const LossRecord& r) {
                         if (!on_record) return;
                         LossRecord b = r;
                         b.split = "base";
                         on_record(b);
                       });
  for (auto& r : res.curve) r.split = "base";
  return res;
}

}  // namespace vqalab
