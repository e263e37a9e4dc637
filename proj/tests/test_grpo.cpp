#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "vqalab/grpo.hpp"

using namespace vqalab;

namespace {

PolicyConfig tiny_standard() {
  PolicyConfig c;
  c.vocab_size = Vocab::standard().size();
  c.width = 4;
  c.layers = 1;
  c.heads = 2;
  c.mlp_hidden = 6;
  c.context = 128;
  return c;
}

const Dataset& data() {
  static const Dataset ds = [] {
    GenConfig g;
    g.n_total = 120;
    g.seed = 2;
    return generate_dataset(g);
  }();
  return ds;
}

Model perturbed(Model m, std::uint64_t seed, double scale) {
  Rng rng(seed);
  for (std::size_t i = 0; i < m.tensor_count(); ++i)
    for (double& v : m.tensor(i).data) v += scale * rng.normal();
  return m;
}

GrpoConfig small_cfg() {
  GrpoConfig c;
  c.group_size = 4;
  c.max_completion = 5;
  return c;
}

RolloutGroup sample_group(const Model& old, const Model& ref, std::uint64_t seed) {
  const Vocab v = Vocab::standard();
  const InferenceModel io(old), ir(ref);
  return collect_group(io, ir, data().samples[seed % data().samples.size()], v, small_cfg(), seed);
}

double rel_error(const Gradient& a, const Gradient& b) {
  double d = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < a[i].size(); ++k) {
      d += std::pow(a[i].data[k] - b[i].data[k], 2);
      na += a[i].data[k] * a[i].data[k];
      nb += b[i].data[k] * b[i].data[k];
    }
  return std::sqrt(d) / std::max(std::sqrt(na) + std::sqrt(nb), 1e-12);
}

bool all_zero(const Gradient& g) {
  for (const auto& m : g)
    for (double v : m.data)
      if (v != 0.0) return false;
  return true;
}

}  // namespace

TEST(Advantages, StandardizedForRandomGroups) {
  Rng rng(1);
  for (int trial = 0; trial < 10000; ++trial) {
    const std::size_t g = 2 + rng.below(31);
    std::vector<double> r(g);
    for (double& x : r) x = 0.5 * static_cast<double>(rng.below(5));
    const auto a = group_advantages(r);
    double mean = 0, sd = 0, rm = 0, rv = 0;
    for (double x : r) rm += x;
    rm /= static_cast<double>(g);
    for (double x : r) rv += (x - rm) * (x - rm);
    if (std::sqrt(rv / static_cast<double>(g)) < 1e-8) {
      for (double x : a) ASSERT_EQ(x, 0.0);
      continue;
    }
    for (double x : a) mean += x;
    mean /= static_cast<double>(g);
    for (double x : a) sd += (x - mean) * (x - mean);
    sd = std::sqrt(sd / static_cast<double>(g));
    ASSERT_NEAR(mean, 0.0, 1e-10);
    ASSERT_NEAR(sd, 1.0, 1e-10);
  }
}

TEST(Advantages, ExactCases) {
  EXPECT_EQ(group_advantages(std::vector<double>{0.0, 2.0}), (std::vector<double>{-1.0, 1.0}));
  EXPECT_EQ(group_advantages(std::vector<double>{1.5, 1.5, 1.5}), (std::vector<double>(3, 0.0)));
  const std::vector<Reward> rw = {kFormatReward, Reward{}, kFormatReward + kAccuracyReward, Reward{}};
  const auto a = group_advantages(rw);
  EXPECT_EQ(a.size(), 4u);
  EXPECT_THROW(group_advantages(std::vector<double>{1.0}), ConfigError);
}

TEST(Advantages, ShiftAndScaleInvariant) {
  Rng rng(2);
  for (int t = 0; t < 200; ++t) {
    std::vector<double> r(6), s(6);
    for (std::size_t i = 0; i < 6; ++i) {
      r[i] = rng.uniform();
      s[i] = 3.0 * r[i] + 7.0;
    }
    const auto a = group_advantages(r), b = group_advantages(s);
    for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(a[i], b[i], 1e-9);
  }
}

TEST(Advantages, MaxBaselineIsNonPositive) {
  const auto a = group_advantages(std::vector<double>{0.0, 0.5, 2.0, 2.0}, AdvantageBaseline::max);
  for (double x : a) EXPECT_LE(x, 0.0);
  EXPECT_EQ(a[2], 0.0);
  EXPECT_EQ(advantage_baseline_from_string(to_string(AdvantageBaseline::max)), AdvantageBaseline::max);
}

TEST(KlEstimator, NonNegativeZeroAtEqualityKnownValue) {
  Rng rng(3);
  for (int i = 0; i < 10000; ++i) {
    const double a = -20.0 * rng.uniform(), b = -20.0 * rng.uniform();
    ASSERT_GE(kl_term(a, b), 0.0);
    ASSERT_EQ(kl_term(a, a), 0.0);
  }
  EXPECT_NEAR(kl_term(-2.0, -1.0), std::numbers::e - 2.0, 1e-12);
  EXPECT_NEAR(kl_term(-1.0, -2.0), std::exp(-1.0), 1e-12);
}

TEST(KlEstimator, PenaltyGradientMatchesFiniteDifference) {
  const std::vector<double> ref = {-1.0, -0.3, -2.5};
  Matrix x(3, 1);
  x.data = {-0.7, -0.9, -1.1};
  Tape t;
  Var v = t.leaf(x, true);
  Var s = ad::sum(ad::kl_penalty(v, ref));
  t.backward(s);
  const Matrix g = t.grad(v);
  for (std::size_t i = 0; i < 3; ++i) {
    const double h = 1e-6;
    const double fd = (kl_term(x.data[i] + h, ref[i]) - kl_term(x.data[i] - h, ref[i])) / (2 * h);
    EXPECT_NEAR(g.data[i], fd, 1e-8);
  }
}

TEST(GrpoObjective, OnPolicyValueIsZero) {
  const Model m{init_params(tiny_standard(), 4), std::nullopt};
  for (std::uint64_t s = 0; s < 10; ++s) {
    auto g = sample_group(m, m, s);
    Rng rng(s);
    for (double& a : g.advantages) a = rng.normal();
    double mean = 0;
    for (double a : g.advantages) mean += a;
    for (double& a : g.advantages) a -= mean / static_cast<double>(g.advantages.size());
    const auto r = grpo_objective(m, Trainable::all().mask(m), g, small_cfg(), false);
    EXPECT_NEAR(r.value, 0.0, 1e-10);
  }
}

TEST(GrpoObjective, GradientMatchesFiniteDifferences) {
  const Model ref{init_params(tiny_standard(), 5), std::nullopt};
  const Model old = perturbed(ref, 6, 0.02);
  const Model cur = perturbed(old, 7, 0.02);
  auto g = sample_group(old, ref, 3);
  g.advantages = {1.2, -0.4, -1.1, 0.3};
  GrpoConfig cfg = small_cfg();
  cfg.kl_beta = 0.5;  // large enough that the KL path matters
  const auto mask = Trainable::all().mask(cur);
  const auto r = grpo_objective(cur, mask, g, cfg);
  Gradient num = zero_gradient(cur);
  Model m = cur;
  const double h = 1e-4;
  for (std::size_t i = 0; i < m.tensor_count(); ++i)
    for (std::size_t k = 0; k < m.tensor(i).size(); ++k) {
      const double x = m.tensor(i).data[k];
      m.tensor(i).data[k] = x + h;
      const double up = grpo_objective(m, mask, g, cfg, false).value;
      m.tensor(i).data[k] = x - h;
      const double dn = grpo_objective(m, mask, g, cfg, false).value;
      m.tensor(i).data[k] = x;
      num[i].data[k] = (up - dn) / (2 * h);
    }
  EXPECT_LT(rel_error(r.grad, num), 1e-5);  // central-difference truncation at h = 1e-4
}

TEST(GrpoObjective, ClippedTokenContributesExactlyZero) {
  const Model m{init_params(tiny_standard(), 8), std::nullopt};
  auto base = sample_group(m, m, 1);
  GrpoConfig cfg = small_cfg();
  cfg.kl_beta = 0.0;
  const auto mask = Trainable::all().mask(m);
  for (double sign : {1.0, -1.0}) {
    RolloutGroup g = base;
    g.completions.resize(1);
    Rollout& r = g.completions[0];
    r.tokens.resize(1);
    r.old_logprobs.resize(1);
    r.ref_logprobs.resize(1);
    g.advantages = {sign};
    // ratio = exp(logp - old): 1.5 above 1 + eps for A > 0, 0.5 below 1 - eps for A < 0.
    const double lp = logprobs(m, g.prompt, r.tokens)[0];
    r.old_logprobs[0] = lp - std::log(sign > 0 ? 1.5 : 0.5);
    const auto res = grpo_objective(m, mask, g, cfg);
    EXPECT_TRUE(all_zero(res.grad)) << sign;
    EXPECT_EQ(res.stats.clipped, 1u);
    // Unclipped side of the same token does carry gradient.
    r.old_logprobs[0] = lp - std::log(sign > 0 ? 0.5 : 1.5);
    EXPECT_FALSE(all_zero(grpo_objective(m, mask, g, cfg).grad)) << sign;
  }
}

TEST(GrpoObjective, ClippedTokenDropsOutOfLongerCompletion) {
  const Model m{init_params(tiny_standard(), 9), std::nullopt};
  auto g = sample_group(m, m, 2);
  GrpoConfig cfg = small_cfg();
  cfg.kl_beta = 0.0;
  g.completions.resize(1);
  Rollout& r = g.completions[0];
  ASSERT_GE(r.tokens.size(), 2u) << "pick another seed";
  g.advantages = {1.0};
  const auto lp = logprobs(m, g.prompt, r.tokens);
  r.old_logprobs = lp;
  r.old_logprobs[1] = lp[1] - std::log(1.5);
  const auto mask = Trainable::all().mask(m);
  const auto a = grpo_objective(m, mask, g, cfg);
  r.old_logprobs[1] = lp[1] - std::log(4.0);  // further into the clipped region
  const auto b = grpo_objective(m, mask, g, cfg);
  EXPECT_EQ(a.grad, b.grad);
}

TEST(GrpoObjective, DegenerateGroupAtReferenceHasZeroGradient) {
  const Model m{init_params(tiny_standard(), 10), std::nullopt};
  auto g = sample_group(m, m, 4);
  std::fill(g.advantages.begin(), g.advantages.end(), 0.0);
  const auto r = grpo_objective(m, Trainable::all().mask(m), g, small_cfg());
  EXPECT_TRUE(all_zero(r.grad));
  // Away from the reference only the KL term is left, and it pulls back.
  const Model cur = perturbed(m, 11, 0.05);
  GrpoConfig no_kl = small_cfg();
  no_kl.kl_beta = 0.0;
  EXPECT_TRUE(all_zero(grpo_objective(cur, Trainable::all().mask(cur), g, no_kl).grad));
  EXPECT_FALSE(all_zero(grpo_objective(cur, Trainable::all().mask(cur), g, small_cfg()).grad));
}

TEST(GrpoStage, DeterministicAndZeroLrIsIdentity) {
  const Model m{init_params(tiny_standard(), 12), std::nullopt};
  const Vocab v = Vocab::standard();
  const auto prompts = data().split(Split::rl_a);
  GrpoConfig cfg = small_cfg();
  cfg.max_steps = 3;
  cfg.seed = 5;
  const auto a = train_grpo_stage(m, prompts, cfg, Stage::A, v);
  const auto b = train_grpo_stage(m, prompts, cfg, Stage::A, v);
  EXPECT_EQ(a.model, b.model);
  ASSERT_EQ(a.metrics.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(to_json(a.metrics[i]).dump(), to_json(b.metrics[i]).dump());
  EXPECT_EQ(to_json(grpo_metrics_from_json(to_json(a.metrics[1]))).dump(), to_json(a.metrics[1]).dump());
  cfg.lr = 0.0;
  EXPECT_EQ(train_grpo_stage(m, prompts, cfg, Stage::A, v).model, m);
  Model with_ad = m;
  with_ad.adapter = make_adapter(m.base, default_adapter_targets(m.base.config), 2, 2.0, 1);
  EXPECT_THROW(train_grpo_stage(with_ad, prompts, cfg, Stage::A, v), ConfigError);
}

TEST(GrpoStage, MetricsWithinRange) {
  const Model m{init_params(tiny_standard(), 13), std::nullopt};
  GrpoConfig cfg = small_cfg();
  cfg.max_steps = 4;
  const auto r = train_grpo_stage(m, data().split(Split::rl_a), cfg, Stage::A, Vocab::standard());
  for (const auto& x : r.metrics) {
    EXPECT_GE(x.reward_format_mean, 0.0);
    EXPECT_LE(x.reward_format_mean, 0.5);
    EXPECT_GE(x.reward_acc_mean, 0.0);
    EXPECT_LE(x.reward_acc_mean, 1.5);
    EXPECT_GE(x.kl, 0.0);
    EXPECT_GE(x.clip_frac, 0.0);
    EXPECT_LE(x.clip_frac, 1.0);
  }
  EXPECT_EQ(r.metrics.front().kl, 0.0);  // first step samples from the reference
}

TEST(GrpoConfig, Validation) {
  GrpoConfig c;
  c.group_size = 1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.clip_eps = 1.5;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.kl_beta = -1;
  EXPECT_THROW(c.validate(), ConfigError);
}
