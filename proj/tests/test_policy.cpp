#include <gtest/gtest.h>

#include <cmath>

#include "vqalab/sft.hpp"

using namespace vqalab;

namespace {

PolicyConfig tiny(std::size_t vocab = 11) {
  PolicyConfig c;
  c.vocab_size = vocab;
  c.width = 4;
  c.layers = 2;
  c.heads = 2;
  c.mlp_hidden = 6;
  c.context = 16;
  c.embed_init_std = 0.5;
  return c;
}

Model with_adapter(const PolicyParams& p, std::uint64_t seed, bool perturb_up) {
  Model m{p, make_adapter(p, default_adapter_targets(p.config), 2, 3.0, seed)};
  if (perturb_up) {
    Rng rng(seed + 1);
    for (auto& t : m.adapter->targets)
      for (double& v : t.up.data) v = 0.3 * rng.normal();
  }
  return m;
}

double vector_rel_error(const Gradient& a, const Gradient& b) {
  double diff = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < a[i].size(); ++k) {
      diff += std::pow(a[i].data[k] - b[i].data[k], 2);
      na += a[i].data[k] * a[i].data[k];
      nb += b[i].data[k] * b[i].data[k];
    }
  return std::sqrt(diff) / std::max(std::sqrt(na) + std::sqrt(nb), 1e-12);
}

Gradient numeric_grad(Model m, const std::vector<bool>& mask, const std::function<double(const Model&)>& f) {
  Gradient g = zero_gradient(m);
  const double h = 1e-4;
  for (std::size_t i = 0; i < m.tensor_count(); ++i) {
    if (!mask[i]) continue;
    for (std::size_t k = 0; k < m.tensor(i).size(); ++k) {
      const double x = m.tensor(i).data[k];
      m.tensor(i).data[k] = x + h;
      const double up = f(m);
      m.tensor(i).data[k] = x - h;
      const double dn = f(m);
      m.tensor(i).data[k] = x;
      g[i].data[k] = (up - dn) / (2 * h);
    }
  }
  return g;
}

}  // namespace

TEST(Autodiff, OpsMatchFiniteDifferences) {
  Rng rng(7);
  auto rnd = [&](std::size_t r, std::size_t c) {
    Matrix m(r, c);
    for (double& v : m.data) v = rng.normal();
    return m;
  };
  Matrix a0 = rnd(5, 4), b0 = rnd(4, 4), c0 = rnd(5, 4);
  auto f = [&](const Matrix& a, const Matrix& b, const Matrix& c, Tape& t, Var* va, Var* vb, Var* vc) {
    Var A = t.leaf(a, true), B = t.leaf(b, true), C = t.leaf(c, true);
    if (va) *va = A, *vb = B, *vc = C;
    Var x = ad::rmsnorm(ad::add(ad::matmul(A, B), C));
    Var att = ad::causal_attention(x, ad::relu(ad::add_scalar(C, 0.1)), ad::sub(x, C), 2);
    Var z = ad::log_softmax(ad::matmul_bt(att, B));
    Var g = ad::gather_rows(z, {0, 2, 2, 4});
    Var m1 = ad::minimum(ad::exp(ad::scale(g, 0.1)), ad::clamp(ad::add_scalar(g, 3.0), -1.0, 2.5));
    Var p = ad::pick(ad::slice_rows(z, 1, 4), {0, 3, 1});
    return ad::add(ad::mean(m1), ad::sum(p));
  };
  Tape t;
  Var A, B, C;
  Var obj = f(a0, b0, c0, t, &A, &B, &C);
  t.backward(obj);
  const Matrix ga = t.grad(A), gb = t.grad(B), gc = t.grad(C);
  auto value = [&](const Matrix& a, const Matrix& b, const Matrix& c) {
    Tape u;
    return u.value(f(a, b, c, u, nullptr, nullptr, nullptr)).data[0];
  };
  const double h = 1e-5;
  auto check = [&](Matrix& x, const Matrix& g) {
    for (std::size_t k = 0; k < x.size(); ++k) {
      const double v = x.data[k];
      x.data[k] = v + h;
      const double up = value(a0, b0, c0);
      x.data[k] = v - h;
      const double dn = value(a0, b0, c0);
      x.data[k] = v;
      EXPECT_NEAR(g.data[k], (up - dn) / (2 * h), 1e-6 * std::max(1.0, std::abs(g.data[k])));
    }
  };
  check(a0, ga);
  check(b0, gb);
  check(c0, gc);
}

TEST(Policy, SftGradientMatchesFiniteDifferences) {
  const auto cfg = tiny();
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    Model m = with_adapter(init_params(cfg, seed), seed, true);
    const std::vector<int> prompt = {0, 3, 5}, target = {7, 2, 9, 1};
    const auto mask = Trainable::all().mask(m);
    const auto lg = sft_loss_and_grad(m, mask, prompt, target);
    EXPECT_DOUBLE_EQ(lg.loss, sft_loss(m, prompt, target));
    const auto num = numeric_grad(m, mask, [&](const Model& x) { return sft_loss(x, prompt, target); });
    EXPECT_LT(vector_rel_error(lg.grad, num), 1e-6) << seed;
  }
}

TEST(Policy, FrozenTensorsGetExactZeroGradient) {
  Model m = with_adapter(init_params(tiny(), 3), 3, true);
  const auto mask = Trainable::frozen_base(false).mask(m);
  const auto lg = sft_loss_and_grad(m, mask, std::vector<int>{1, 2}, std::vector<int>{3, 4});
  double adapter_norm = 0;
  for (std::size_t i = 0; i < m.tensor_count(); ++i)
    for (double v : lg.grad[i].data) {
      if (i < m.base.tensors.size()) EXPECT_EQ(v, 0.0);
      else adapter_norm += std::abs(v);
    }
  EXPECT_GT(adapter_norm, 0.0);
}

TEST(Policy, ZeroInitAdapterIsIdentityAndMergeMatches) {
  const auto p = init_params(tiny(), 4);
  const Model plain{p, std::nullopt};
  const Model fresh = with_adapter(p, 9, false);
  const std::vector<int> prompt = {1, 2, 3}, comp = {4, 5, 6};
  EXPECT_EQ(logprobs(plain, prompt, comp), logprobs(fresh, prompt, comp));
  EXPECT_EQ(apply_adapter(p, *fresh.adapter), p);
  const Model trained = with_adapter(p, 9, true);
  const Model merged{apply_adapter(p, *trained.adapter), std::nullopt};
  const auto a = logprobs(trained, prompt, comp), b = logprobs(merged, prompt, comp);
  EXPECT_EQ(a, b);  // the inference path folds the adapter the same way
  EXPECT_NE(a, logprobs(plain, prompt, comp));
}

TEST(Policy, DecoderMatchesFullForwardBitForBit) {
  Model m = with_adapter(init_params(tiny(), 5), 5, true);
  const InferenceModel im(m);
  const std::vector<int> seq = {0, 4, 4, 9, 2, 10, 3, 3, 1};
  const Matrix full = im.all_logprobs(seq);
  auto dec = im.decoder();
  for (std::size_t t = 0; t < seq.size(); ++t) {
    const auto row = dec.feed(seq[t]);
    for (std::size_t v = 0; v < row.size(); ++v) ASSERT_EQ(row[v], full(t, v)) << t << " " << v;
  }
  EXPECT_THROW(InferenceModel(m).all_logprobs(std::vector<int>(17, 1)), EncodingError);
}

TEST(Policy, TapeAndInferenceLogprobsAgreeExactly) {
  Model m = with_adapter(init_params(tiny(), 6), 6, true);
  const std::vector<int> prompt = {1, 7}, comp = {3, 8, 0};
  Tape tape;
  const auto tm = record_model(tape, m, Trainable::all().mask(m));
  const Var lp = forward_logprobs(tape, m, tm, prompt, comp);
  const auto ref = logprobs(m, prompt, comp);
  for (std::size_t i = 0; i < comp.size(); ++i) EXPECT_EQ(tape.value(lp).data[i], ref[i]);
}

TEST(Policy, NextTokenDistributionsNormalize) {
  const InferenceModel im(Model{init_params(tiny(), 8), std::nullopt});
  const std::vector<int> seq = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 0};
  const Matrix lp = im.all_logprobs(seq);
  for (std::size_t t = 0; t < lp.rows; ++t) {
    double s = 0;
    for (double v : lp.row(t)) s += std::exp(v);
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Policy, ExhaustiveCompletionsSumToOne) {
  auto c = tiny(3);
  const Model m{init_params(c, 9), std::nullopt};
  const std::vector<int> prompt = {2};
  double total = 0;
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b) {
      const auto lp = logprobs(m, prompt, std::vector<int>{a, b});
      total += std::exp(lp[0] + lp[1]);
    }
  EXPECT_NEAR(total, 1.0, 1e-12);
}

TEST(Policy, SamplingIsSeededAndGreedyIsArgmax) {
  const InferenceModel im(Model{init_params(tiny(), 10), std::nullopt});
  const std::vector<int> prompt = {0, 1};
  const auto a = sample_completion(im, prompt, 1.0, 8, 42, 10);
  const auto b = sample_completion(im, prompt, 1.0, 8, 42, 10);
  EXPECT_EQ(a.tokens, b.tokens);
  EXPECT_EQ(a.logprobs, im.logprobs(prompt, a.tokens));
  const auto g = greedy_completion(im, prompt, 5, 10);
  auto dec = im.decoder();
  std::vector<double> lp;
  for (int t : prompt) lp = dec.feed(t);
  EXPECT_EQ(g.tokens[0], std::max_element(lp.begin(), lp.end()) - lp.begin());
  EXPECT_LE(g.tokens.size(), 5u);
  EXPECT_THROW(sample_completion(im, prompt, 0.0, 8, 1, 10), ConfigError);
}

TEST(Policy, TokenRangeChecked) {
  const Model m{init_params(tiny(), 1), std::nullopt};
  EXPECT_THROW(logprobs(m, std::vector<int>{0}, std::vector<int>{11}), VocabError);
  EXPECT_THROW(logprobs(m, std::vector<int>{}, std::vector<int>{1}), EncodingError);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  Checkpoint ck{with_adapter(init_params(tiny(), 2), 2, true), 0xabcdefULL, {{"stage", "A"}}};
  const auto bytes = checkpoint_bytes(ck);
  const auto back = checkpoint_from_bytes(bytes, 0xabcdefULL);
  EXPECT_EQ(back.model, ck.model);
  EXPECT_EQ(back.meta, ck.meta);
  EXPECT_EQ(checkpoint_bytes(back), bytes);
  EXPECT_THROW(checkpoint_from_bytes(bytes, 1ULL), ConfigError);
  EXPECT_THROW(checkpoint_from_bytes(bytes.substr(0, bytes.size() - 3), std::nullopt), ConfigError);
  EXPECT_THROW(checkpoint_from_bytes(bytes + "x", std::nullopt), ConfigError);
  EXPECT_THROW(checkpoint_from_bytes("garbage!", std::nullopt), ConfigError);
  std::string bad = bytes;
  bad[8 + 4 + 8 + 4] = '#';  // first header byte
  EXPECT_THROW(checkpoint_from_bytes(bad, std::nullopt), ConfigError);
}

TEST(Checkpoint, InitIsSeedDeterministic) {
  EXPECT_EQ(init_params(tiny(), 3), init_params(tiny(), 3));
  EXPECT_NE(init_params(tiny(), 3), init_params(tiny(), 4));
  PolicyConfig c = tiny();
  c.heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
}
