#pragma once

// Toy autoregressive token policy: token + position embeddings, a stack of
// causal attention / ReLU-MLP mixing layers with RMS normalization, and an
// output projection tied to the token embedding. Optional low-rank adapters
// add (alpha / rank) * down * up to selected layer matrices.

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vqalab/autodiff.hpp"
#include "vqalab/common.hpp"

namespace vqalab {

struct PolicyConfig {
  std::size_t vocab_size = 0;
  std::size_t width = 64;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t mlp_hidden = 128;
  std::size_t context = 256;
  double embed_init_std = 0.1;

  void validate() const {
    if (vocab_size < 2) throw ConfigError("policy vocab_size must be >= 2");
    if (width == 0 || heads == 0 || width % heads != 0)
      throw ConfigError("policy width must be a positive multiple of heads");
    if (layers == 0 || mlp_hidden == 0 || context < 2) throw ConfigError("policy shape invalid");
  }
  friend bool operator==(const PolicyConfig&, const PolicyConfig&) = default;
};

inline constexpr std::size_t kTensorsPerLayer = 6;
enum LayerTensor : std::size_t { kWq, kWk, kWv, kWo, kW1, kW2 };
inline constexpr std::size_t kTokEmb = 0;
inline constexpr std::size_t kPosEmb = 1;

inline std::size_t layer_tensor(std::size_t layer, LayerTensor which) {
  return 2 + layer * kTensorsPerLayer + which;
}

struct PolicyParams {
  PolicyConfig config;
  std::vector<Matrix> tensors;

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += t.size();
    return n;
  }
  friend bool operator==(const PolicyParams&, const PolicyParams&) = default;
};

inline std::string tensor_name(std::size_t i) {
  if (i == kTokEmb) return "tok_emb";
  if (i == kPosEmb) return "pos_emb";
  constexpr const char* names[] = {"wq", "wk", "wv", "wo", "w1", "w2"};
  const std::size_t l = (i - 2) / kTensorsPerLayer;
  return "layers." + std::to_string(l) + "." + names[(i - 2) % kTensorsPerLayer];
}

inline std::size_t tensor_index(const PolicyConfig& cfg, std::string_view name) {
  for (std::size_t i = 0; i < 2 + cfg.layers * kTensorsPerLayer; ++i)
    if (tensor_name(i) == name) return i;
  throw ConfigError("unknown tensor '" + std::string(name) + "'");
}

inline std::vector<std::pair<std::size_t, std::size_t>> tensor_shapes(const PolicyConfig& c) {
  std::vector<std::pair<std::size_t, std::size_t>> s{{c.vocab_size, c.width}, {c.context, c.width}};
  for (std::size_t l = 0; l < c.layers; ++l) {
    for (int k = 0; k < 4; ++k) s.emplace_back(c.width, c.width);
    s.emplace_back(c.width, c.mlp_hidden);
    s.emplace_back(c.mlp_hidden, c.width);
  }
  return s;
}

inline PolicyParams init_params(const PolicyConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  PolicyParams p;
  p.config = cfg;
  Rng rng(derive_seed(seed, "policy.init"));
  const auto shapes = tensor_shapes(cfg);
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    Matrix m(shapes[i].first, shapes[i].second);
    double std = cfg.embed_init_std;
    if (i >= 2) {
      std = 1.0 / std::sqrt(static_cast<double>(m.rows));
      const auto which = (i - 2) % kTensorsPerLayer;
      if (which == kWo || which == kW2) std /= std::sqrt(2.0 * static_cast<double>(cfg.layers));
    }
    for (double& v : m.data) v = std * rng.normal();
    p.tensors.push_back(std::move(m));
  }
  return p;
}

// ----------------------------- low-rank adapter -----------------------------

struct AdapterTarget {
  std::size_t tensor = 0;
  Matrix down;  // d_in x rank
  Matrix up;    // rank x d_out
  friend bool operator==(const AdapterTarget&, const AdapterTarget&) = default;
};

struct LowRankAdapter {
  std::size_t rank = 4;
  double alpha = 6.0;
  std::vector<AdapterTarget> targets;

  double scaling() const { return alpha / static_cast<double>(rank); }
  friend bool operator==(const LowRankAdapter&, const LowRankAdapter&) = default;
};

/// Default targets: every mixing-layer matrix.
inline std::vector<std::string> default_adapter_targets(const PolicyConfig& cfg) {
  std::vector<std::string> out;
  for (std::size_t l = 0; l < cfg.layers; ++l)
    for (std::size_t k = 0; k < kTensorsPerLayer; ++k)
      out.push_back(tensor_name(layer_tensor(l, static_cast<LayerTensor>(k))));
  return out;
}

/// Random down projections, zero up projections: the initial delta is exactly zero.
inline LowRankAdapter make_adapter(const PolicyParams& base, const std::vector<std::string>& targets,
                                   std::size_t rank, double alpha, std::uint64_t seed) {
  if (rank == 0) throw ConfigError("adapter rank must be >= 1");
  LowRankAdapter a;
  a.rank = rank;
  a.alpha = alpha;
  Rng rng(derive_seed(seed, "adapter.init"));
  for (const auto& name : targets) {
    const std::size_t idx = tensor_index(base.config, name);
    if (idx < 2) throw ConfigError("adapters attach only to mixing-layer matrices");
    const Matrix& w = base.tensors[idx];
    AdapterTarget t{idx, Matrix(w.rows, rank), Matrix(rank, w.cols)};
    const double std = 1.0 / std::sqrt(static_cast<double>(w.rows));
    for (double& v : t.down.data) v = std * rng.normal();
    a.targets.push_back(std::move(t));
  }
  return a;
}

inline void check_adapter(const PolicyParams& base, const LowRankAdapter& a) {
  if (a.rank == 0) throw ConfigError("adapter rank must be >= 1");
  std::vector<bool> seen(base.tensors.size(), false);
  for (const auto& t : a.targets) {
    if (t.tensor < 2 || t.tensor >= base.tensors.size())
      throw ConfigError("adapter target is not a mixing-layer matrix");
    if (seen[t.tensor]) throw ConfigError("duplicate adapter target");
    seen[t.tensor] = true;
    const Matrix& w = base.tensors[t.tensor];
    if (t.down.rows != w.rows || t.down.cols != a.rank || t.up.rows != a.rank || t.up.cols != w.cols)
      throw ConfigError("adapter shape mismatch on " + tensor_name(t.tensor));
  }
}

/// A policy: base parameters plus an optional adapter. Flat tensor order is
/// base tensors, then (down, up) per adapter target.
struct Model {
  PolicyParams base;
  std::optional<LowRankAdapter> adapter;

  std::size_t tensor_count() const {
    return base.tensors.size() + (adapter ? 2 * adapter->targets.size() : 0);
  }
  const Matrix& tensor(std::size_t i) const {
    const std::size_t nb = base.tensors.size();
    if (i < nb) return base.tensors[i];
    const auto& t = adapter->targets[(i - nb) / 2];
    return (i - nb) % 2 == 0 ? t.down : t.up;
  }
  Matrix& tensor(std::size_t i) { return const_cast<Matrix&>(std::as_const(*this).tensor(i)); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < tensor_count(); ++i) n += tensor(i).size();
    return n;
  }
  friend bool operator==(const Model&, const Model&) = default;
};

using Gradient = std::vector<Matrix>;

inline Gradient zero_gradient(const Model& m) {
  Gradient g;
  for (std::size_t i = 0; i < m.tensor_count(); ++i) g.emplace_back(m.tensor(i).rows, m.tensor(i).cols);
  return g;
}

/// Which flat tensors receive gradients.
struct Trainable {
  bool embeddings = true;
  bool layers = true;
  bool adapter = true;

  static Trainable all() { return {}; }
  static Trainable frozen_base(bool embeddings) { return {embeddings, false, true}; }

  std::vector<bool> mask(const Model& m) const {
    std::vector<bool> out(m.tensor_count());
    for (std::size_t i = 0; i < out.size(); ++i) {
      if (i < 2) out[i] = embeddings;
      else if (i < m.base.tensors.size()) out[i] = layers;
      else out[i] = adapter;
    }
    return out;
  }
};

namespace detail {
inline const AdapterTarget* adapter_for(const Model& m, std::size_t tensor) {
  if (!m.adapter) return nullptr;
  for (const auto& t : m.adapter->targets)
    if (t.tensor == tensor) return &t;
  return nullptr;
}
}  // namespace detail

/// base + (alpha/r) down up for adapted matrices; the base is never mutated.
inline Matrix effective_weight(const Model& m, std::size_t tensor) {
  const Matrix& w = m.base.tensors[tensor];
  const AdapterTarget* t = detail::adapter_for(m, tensor);
  if (!t) return w;
  return kern::add(w, kern::scale(kern::matmul(t->down, t->up), m.adapter->scaling()));
}

/// Effective parameters with the adapter folded into the base (the merge used
/// at the SFT to RL boundary).
inline PolicyParams apply_adapter(const PolicyParams& base, const LowRankAdapter& adapter) {
  check_adapter(base, adapter);
  Model m{base, adapter};
  PolicyParams out = base;
  for (const auto& t : adapter.targets) out.tensors[t.tensor] = effective_weight(m, t.tensor);
  return out;
}

// ----------------------------- tape forward -----------------------------

struct TapeModel {
  std::vector<Var> leaves;  // flat order
  std::vector<Var> weights; // effective base tensors
};

inline TapeModel record_model(Tape& tape, const Model& m, const std::vector<bool>& trainable) {
  TapeModel tm;
  for (std::size_t i = 0; i < m.tensor_count(); ++i)
    tm.leaves.push_back(tape.leaf(m.tensor(i), trainable.at(i)));
  const std::size_t nb = m.base.tensors.size();
  tm.weights.assign(tm.leaves.begin(), tm.leaves.begin() + static_cast<std::ptrdiff_t>(nb));
  if (m.adapter) {
    check_adapter(m.base, *m.adapter);
    for (std::size_t k = 0; k < m.adapter->targets.size(); ++k) {
      const std::size_t idx = m.adapter->targets[k].tensor;
      Var delta = ad::scale(ad::matmul(tm.leaves[nb + 2 * k], tm.leaves[nb + 2 * k + 1]),
                            m.adapter->scaling());
      tm.weights[idx] = ad::add(tm.leaves[idx], delta);
    }
  }
  return tm;
}

inline void check_tokens(const PolicyConfig& c, std::span<const int> tokens) {
  if (tokens.size() > c.context)
    throw EncodingError("sequence of " + std::to_string(tokens.size()) +
                        " tokens exceeds context " + std::to_string(c.context));
  for (int t : tokens)
    if (t < 0 || static_cast<std::size_t>(t) >= c.vocab_size)
      throw VocabError("token id " + std::to_string(t) + " outside vocabulary");
}

/// Hidden states (T x width) after the final normalization.
inline Var forward_hidden(Tape&, const PolicyConfig& c, const TapeModel& tm,
                          std::span<const int> tokens) {
  std::vector<int> pos(tokens.size());
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<int>(i);
  Var x = ad::add(ad::gather_rows(tm.weights[kTokEmb], {tokens.begin(), tokens.end()}),
                  ad::gather_rows(tm.weights[kPosEmb], pos));
  for (std::size_t l = 0; l < c.layers; ++l) {
    auto w = [&](LayerTensor k) { return tm.weights[layer_tensor(l, k)]; };
    Var h = ad::rmsnorm(x);
    Var att = ad::causal_attention(ad::matmul(h, w(kWq)), ad::matmul(h, w(kWk)),
                                   ad::matmul(h, w(kWv)), c.heads);
    x = ad::add(x, ad::matmul(att, w(kWo)));
    h = ad::rmsnorm(x);
    x = ad::add(x, ad::matmul(ad::relu(ad::matmul(h, w(kW1))), w(kW2)));
  }
  return ad::rmsnorm(x);
}

/// Per-token log-probabilities of `completion` given `prompt` (completion.size() x 1).
inline Var forward_logprobs(Tape& tape, const Model& m, const TapeModel& tm,
                            std::span<const int> prompt, std::span<const int> completion) {
  const auto& c = m.base.config;
  if (prompt.empty()) throw EncodingError("prompt must contain at least one token");
  if (completion.empty()) throw EncodingError("completion must contain at least one token");
  std::vector<int> seq(prompt.begin(), prompt.end());
  seq.insert(seq.end(), completion.begin(), completion.end());
  check_tokens(c, seq);
  Var h = forward_hidden(tape, c, tm, seq);
  Var hs = ad::slice_rows(h, prompt.size() - 1, seq.size() - 1);
  Var lsm = ad::log_softmax(ad::matmul_bt(hs, tm.weights[kTokEmb]));
  return ad::pick(lsm, {completion.begin(), completion.end()});
}

/// Gradient of a recorded scalar with respect to every flat tensor; frozen or
/// unused tensors get exact zeros.
inline Gradient backward(Tape& tape, Var objective, const TapeModel& tm) {
  tape.backward(objective);
  Gradient g;
  for (Var v : tm.leaves) g.push_back(tape.grad(v));
  return g;
}

// ----------------------------- tape-free inference -----------------------------

/// Effective weights for repeated inference, plus an incremental (KV-cached)
/// decoder whose outputs equal the full forward bit for bit.
class InferenceModel {
 public:
  explicit InferenceModel(const Model& m) : cfg_(m.base.config) {
    if (m.adapter) check_adapter(m.base, *m.adapter);
    for (std::size_t i = 0; i < m.base.tensors.size(); ++i) w_.push_back(effective_weight(m, i));
  }

  const PolicyConfig& config() const { return cfg_; }

  class Decoder {
   public:
    explicit Decoder(const InferenceModel& im) : im_(&im) {
      const auto& c = im.cfg_;
      for (std::size_t l = 0; l < c.layers; ++l) {
        k_.emplace_back(c.context, c.width);
        v_.emplace_back(c.context, c.width);
      }
    }

    std::size_t position() const { return pos_; }

    /// Feeds one token and returns the next-token log-probabilities.
    std::vector<double> feed(int token) {
      const auto& c = im_->cfg_;
      if (pos_ >= c.context) throw EncodingError("decoder context exhausted");
      if (token < 0 || static_cast<std::size_t>(token) >= c.vocab_size)
        throw VocabError("token id outside vocabulary");
      const auto& w = im_->w_;
      Matrix x(1, c.width);
      Matrix e(1, c.width), p(1, c.width);
      std::copy_n(w[kTokEmb].row(static_cast<std::size_t>(token)).begin(), c.width, e.data.begin());
      std::copy_n(w[kPosEmb].row(pos_).begin(), c.width, p.data.begin());
      x = kern::add(e, p);
      for (std::size_t l = 0; l < c.layers; ++l) {
        auto W = [&](LayerTensor k) -> const Matrix& { return w[layer_tensor(l, k)]; };
        Matrix h = kern::rmsnorm(x);
        Matrix q = kern::matmul(h, W(kWq));
        Matrix kr = kern::matmul(h, W(kWk));
        Matrix vr = kern::matmul(h, W(kWv));
        std::copy(kr.data.begin(), kr.data.end(), k_[l].row(pos_).begin());
        std::copy(vr.data.begin(), vr.data.end(), v_[l].row(pos_).begin());
        Matrix att(1, c.width);
        kern::attend_row(q.row(0), k_[l], v_[l], pos_, c.heads, att.row(0), nullptr);
        x = kern::add(x, kern::matmul(att, W(kWo)));
        h = kern::rmsnorm(x);
        x = kern::add(x, kern::matmul(kern::relu(kern::matmul(h, W(kW1))), W(kW2)));
      }
      Matrix hn = kern::rmsnorm(x);
      Matrix logits = kern::matmul_bt(hn, w[kTokEmb]);
      std::vector<double> out(c.vocab_size);
      kern::log_softmax_row(logits.row(0), out);
      ++pos_;
      return out;
    }

   private:
    const InferenceModel* im_;
    std::vector<Matrix> k_, v_;
    std::size_t pos_ = 0;
  };

  Decoder decoder() const { return Decoder(*this); }

  /// Full-sequence next-token log-probabilities, one row per position.
  Matrix all_logprobs(std::span<const int> tokens) const {
    check_tokens(cfg_, tokens);
    Tape tape;
    TapeModel tm;
    for (const auto& m : w_) tm.weights.push_back(tape.constant(m));
    Var h = forward_hidden(tape, cfg_, tm, tokens);
    return kern::log_softmax(kern::matmul_bt(tape.value(h), w_[kTokEmb]));
  }

  std::vector<double> logprobs(std::span<const int> prompt, std::span<const int> completion) const {
    if (prompt.empty()) throw EncodingError("prompt must contain at least one token");
    std::vector<int> seq(prompt.begin(), prompt.end());
    seq.insert(seq.end(), completion.begin(), completion.end());
    check_tokens(cfg_, seq);
    if (completion.empty()) return {};
    const Matrix lp = all_logprobs(std::span<const int>(seq).first(seq.size() - 1));
    std::vector<double> out(completion.size());
    for (std::size_t i = 0; i < completion.size(); ++i)
      out[i] = lp(prompt.size() - 1 + i, static_cast<std::size_t>(completion[i]));
    return out;
  }

 private:
  PolicyConfig cfg_;
  std::vector<Matrix> w_;
};

inline std::vector<double> logprobs(const Model& m, std::span<const int> prompt,
                                    std::span<const int> completion) {
  return InferenceModel(m).logprobs(prompt, completion);
}

struct Completion {
  std::vector<int> tokens;
  std::vector<double> logprobs;  // under the sampling policy at temperature 1
};

namespace detail {
inline Completion decode(const InferenceModel& im, std::span<const int> prompt, std::size_t max_len,
                         int eos, const std::function<int(const std::vector<double>&)>& choose) {
  if (prompt.empty()) throw EncodingError("prompt must contain at least one token");
  check_tokens(im.config(), prompt);
  const std::size_t budget = std::min(max_len, im.config().context - prompt.size());
  auto dec = im.decoder();
  std::vector<double> lp;
  for (int t : prompt) lp = dec.feed(t);
  Completion c;
  for (std::size_t i = 0; i < budget; ++i) {
    const int tok = choose(lp);
    c.tokens.push_back(tok);
    c.logprobs.push_back(lp[static_cast<std::size_t>(tok)]);
    if (tok == eos || i + 1 == budget) break;
    lp = dec.feed(tok);
  }
  return c;
}
}  // namespace detail

/// Samples until `eos` or max_len tokens; deterministic given the seed.
inline Completion sample_completion(const InferenceModel& im, std::span<const int> prompt,
                                    double temperature, std::size_t max_len, std::uint64_t seed,
                                    int eos) {
  if (!(temperature > 0.0)) throw ConfigError("sampling temperature must be > 0");
  Rng rng(seed);
  std::vector<double> w;
  return detail::decode(im, prompt, max_len, eos, [&](const std::vector<double>& lp) {
    w.resize(lp.size());
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : lp) mx = std::max(mx, v / temperature);
    double z = 0.0;
    for (std::size_t i = 0; i < lp.size(); ++i) z += (w[i] = std::exp(lp[i] / temperature - mx));
    double u = rng.uniform() * z;
    for (std::size_t i = 0; i < w.size(); ++i) {
      u -= w[i];
      if (u < 0.0) return static_cast<int>(i);
    }
    return static_cast<int>(w.size() - 1);
  });
}

/// Greedy argmax decoding (the zero-temperature limit); ties go to the lower id.
inline Completion greedy_completion(const InferenceModel& im, std::span<const int> prompt,
                                    std::size_t max_len, int eos) {
  return detail::decode(im, prompt, max_len, eos, [](const std::vector<double>& lp) {
    return static_cast<int>(std::max_element(lp.begin(), lp.end()) - lp.begin());
  });
}

// ----------------------------- checkpoints -----------------------------

inline constexpr char kCheckpointMagic[8] = {'V', 'Q', 'L', 'B', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline nlohmann::ordered_json policy_config_to_json(const PolicyConfig& c) {
  nlohmann::ordered_json j;
  j["vocab_size"] = c.vocab_size;
  j["width"] = c.width;
  j["layers"] = c.layers;
  j["heads"] = c.heads;
  j["mlp_hidden"] = c.mlp_hidden;
  j["context"] = c.context;
  j["embed_init_std"] = c.embed_init_std;
  return j;
}

inline PolicyConfig policy_config_from_json(const nlohmann::json& j) {
  PolicyConfig c;
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.width = j.at("width").get<std::size_t>();
  c.layers = j.at("layers").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.mlp_hidden = j.at("mlp_hidden").get<std::size_t>();
  c.context = j.at("context").get<std::size_t>();
  c.embed_init_std = j.at("embed_init_std").get<double>();
  return c;
}

namespace detail {
inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out += static_cast<char>((v >> (8 * i)) & 0xff);
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out += static_cast<char>((v >> (8 * i)) & 0xff);
}
inline void put_block(std::string& out, const Matrix& m) {
  for (double d : m.data) {
    std::uint64_t bits;
    std::memcpy(&bits, &d, 8);
    put_u64(out, bits);
  }
}

class Reader {
 public:
  explicit Reader(std::string_view s) : s_(s) {}
  std::uint64_t u(int bytes) {
    need(static_cast<std::size_t>(bytes));
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(s_[pos_ + static_cast<std::size_t>(i)]))
           << (8 * i);
    pos_ += static_cast<std::size_t>(bytes);
    return v;
  }
  std::string_view take(std::size_t n) {
    need(n);
    auto r = s_.substr(pos_, n);
    pos_ += n;
    return r;
  }
  void block(Matrix& m) {
    for (double& d : m.data) {
      const std::uint64_t bits = u(8);
      std::memcpy(&d, &bits, 8);
    }
  }
  bool done() const { return pos_ == s_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > s_.size()) throw ConfigError("checkpoint truncated");
  }
  std::string_view s_;
  std::size_t pos_ = 0;
};
}  // namespace detail

struct Checkpoint {
  Model model;
  std::uint64_t vocab_hash = 0;
  nlohmann::ordered_json meta = nlohmann::ordered_json::object();
};

/// Header (magic, format version, vocab hash, JSON shape record) followed by
/// row-major little-endian f64 blocks; adapter blocks form a trailing section.
inline std::string checkpoint_bytes(const Checkpoint& ck) {
  const Model& m = ck.model;
  nlohmann::ordered_json h;
  h["format_version"] = kCheckpointVersion;
  char hash[20];
  std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(ck.vocab_hash));
  h["vocab_hash"] = hash;
  h["config"] = policy_config_to_json(m.base.config);
  auto shapes = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < m.base.tensors.size(); ++i)
    shapes.push_back({{"name", tensor_name(i)}, {"rows", m.base.tensors[i].rows},
                      {"cols", m.base.tensors[i].cols}});
  h["tensors"] = shapes;
  if (m.adapter) {
    nlohmann::ordered_json a;
    a["rank"] = m.adapter->rank;
    a["alpha"] = m.adapter->alpha;
    auto t = nlohmann::ordered_json::array();
    for (const auto& x : m.adapter->targets) t.push_back(tensor_name(x.tensor));
    a["targets"] = t;
    h["adapter"] = a;
  } else {
    h["adapter"] = nullptr;
  }
  h["meta"] = ck.meta;
  const std::string header = h.dump();
  std::string out(kCheckpointMagic, 8);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u64(out, ck.vocab_hash);
  detail::put_u32(out, static_cast<std::uint32_t>(header.size()));
  out += header;
  for (const auto& t : m.base.tensors) detail::put_block(out, t);
  if (m.adapter)
    for (const auto& t : m.adapter->targets) {
      detail::put_block(out, t.down);
      detail::put_block(out, t.up);
    }
  return out;
}

inline Checkpoint checkpoint_from_bytes(std::string_view bytes,
                                        std::optional<std::uint64_t> expected_vocab_hash) {
  detail::Reader r(bytes);
  if (r.take(8) != std::string_view(kCheckpointMagic, 8)) throw ConfigError("not a vqalab checkpoint");
  const auto version = static_cast<std::uint32_t>(r.u(4));
  if (version != kCheckpointVersion)
    throw ConfigError("unsupported checkpoint format version " + std::to_string(version));
  Checkpoint ck;
  ck.vocab_hash = r.u(8);
  if (expected_vocab_hash && *expected_vocab_hash != ck.vocab_hash)
    throw ConfigError("checkpoint vocabulary hash does not match the current vocabulary");
  const auto hlen = static_cast<std::size_t>(r.u(4));
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(r.take(hlen));
    h.at("meta");
    h.at("config");
    h.at("tensors");
    h.at("adapter");
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("corrupt checkpoint header: ") + e.what());
  }
  ck.meta = h.at("meta");
  auto& p = ck.model.base;
  p.config = policy_config_from_json(h.at("config"));
  p.config.validate();
  const auto shapes = tensor_shapes(p.config);
  const auto& recorded = h.at("tensors");
  if (recorded.size() != shapes.size()) throw ConfigError("checkpoint tensor count mismatch");
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    if (recorded[i].at("rows").get<std::size_t>() != shapes[i].first ||
        recorded[i].at("cols").get<std::size_t>() != shapes[i].second)
      throw ConfigError("checkpoint shape mismatch on " + tensor_name(i));
    Matrix m(shapes[i].first, shapes[i].second);
    r.block(m);
    p.tensors.push_back(std::move(m));
  }
  if (!h.at("adapter").is_null()) {
    LowRankAdapter a;
    a.rank = h["adapter"].at("rank").get<std::size_t>();
    a.alpha = h["adapter"].at("alpha").get<double>();
    for (const auto& name : h["adapter"].at("targets")) {
      const std::size_t idx = tensor_index(p.config, name.get<std::string>());
      AdapterTarget t{idx, Matrix(p.tensors[idx].rows, a.rank), Matrix(a.rank, p.tensors[idx].cols)};
      r.block(t.down);
      r.block(t.up);
      a.targets.push_back(std::move(t));
    }
    check_adapter(p, a);
    ck.model.adapter = std::move(a);
  }
  if (!r.done()) throw ConfigError("trailing bytes after checkpoint payload");
  return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write checkpoint " + path);
  const auto bytes = checkpoint_bytes(ck);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline Checkpoint load_checkpoint(const std::string& path,
                                  std::optional<std::uint64_t> expected_vocab_hash) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open checkpoint " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return checkpoint_from_bytes(ss.str(), expected_vocab_hash);
}

}  // namespace vqalab
