#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "vqalab/common.hpp"
#include "vqalab/synvqa.hpp"

namespace vqalab {

inline constexpr std::string_view kBos = "<bos>";
inline constexpr std::string_view kEos = "<eos>";
inline constexpr std::string_view kThinkOpen = "<think>";
inline constexpr std::string_view kThinkClose = "</think>";
inline constexpr std::string_view kAnswerOpen = "<answer>";
inline constexpr std::string_view kAnswerClose = "</answer>";

/// Bijective token <-> id table. Ids are positions in `tokens()`.
class Vocab {
 public:
  Vocab() = default;

  explicit Vocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      if (!index_.emplace(tokens_[i], static_cast<int>(i)).second)
        throw VocabError("duplicate token '" + tokens_[i] + "'");
    }
  }

  /// The closed vocabulary of the synthetic VQA domain.
  static Vocab standard() {
    std::vector<std::string> t;
    auto add = [&](std::string_view w) {
      for (const auto& x : t)
        if (x == w) return;
      t.emplace_back(w);
    };
    for (auto w : {kBos, kEos, kThinkOpen, kThinkClose, kAnswerOpen, kAnswerClose})
      add(w);
    add("<scene>");
    add("</scene>");
    add("format");
    for (std::size_t i = 0; i <= kMaxCount; ++i) add(number_word(i));
    for (std::size_t i = 0; i < kMaxSide; ++i) add(row_token(i));
    for (std::size_t i = 0; i < kMaxSide; ++i) add(col_token(i));
    for (auto w : kColors) add(w);
    for (auto w : kSizes) add(w);
    for (auto w : kShapes) add(w);
    for (auto w : kCategories) add(w);
    for (auto w : kSceneClasses) add(w);
    for (auto w : kLocationWords) add(w);
    add("yes");
    add("no");
    for (const auto& w : template_words()) add(w);
    return Vocab(std::move(t));
  }

  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  int id(std::string_view token) const {
    auto it = index_.find(std::string(token));
    if (it == index_.end()) throw VocabError("token '" + std::string(token) + "' not in vocabulary");
    return it->second;
  }
  bool contains(std::string_view token) const { return index_.count(std::string(token)) != 0; }

  const std::string& token(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
      throw VocabError("token id " + std::to_string(id) + " out of range");
    return tokens_[static_cast<std::size_t>(id)];
  }

  std::vector<int> encode(std::span<const std::string> words) const {
    std::vector<int> out;
    out.reserve(words.size());
    for (const auto& w : words) out.push_back(id(w));
    return out;
  }

  /// Space-joined text; stops at the first end-of-sequence token.
  std::string decode(std::span<const int> ids) const {
    std::string out;
    for (int i : ids) {
      const auto& w = token(i);
      if (w == kEos) break;
      if (!out.empty()) out += ' ';
      out += w;
    }
    return out;
  }

  std::uint64_t hash() const {
    std::uint64_t h = fnv1a64("vqalab-vocab");
    for (const auto& t : tokens_) {
      h = fnv1a64(t, h);
      h = fnv1a64("\n", h);
    }
    return h;
  }

  int eos() const { return id(kEos); }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

}  // namespace vqalab
