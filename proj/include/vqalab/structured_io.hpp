#pragma once

// Prompt construction for the two evaluation regimes and parsing of
// completions into <think>/<answer> segments.

#include <array>
#include <cctype>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "vqalab/synvqa.hpp"
#include "vqalab/vocab.hpp"

namespace vqalab {

enum class PromptMode : std::uint8_t { plain, prompting };

inline std::string_view to_string(PromptMode m) { return m == PromptMode::plain ? "plain" : "prompting"; }
inline PromptMode prompt_mode_from_string(std::string_view s) {
  if (s == "plain") return PromptMode::plain;
  if (s == "prompting") return PromptMode::prompting;
  throw ConfigError("unknown prompt mode '" + std::string(s) + "'");
}

/// Tokens appended in prompting mode: the required output layout.
inline std::vector<std::string> format_instruction() {
  return {"format", std::string(kThinkOpen), std::string(kThinkClose), std::string(kAnswerOpen),
          std::string(kAnswerClose)};
}

/// `<bos> <scene>...</scene> question-words [format <think> </think> <answer> </answer>]`
inline std::vector<std::string> prompt_words(const VqaSample& sample, PromptMode mode,
                                             std::size_t context_budget = 256) {
  std::vector<std::string> w{std::string(kBos)};
  for (auto& t : serialize_scene(sample.scene, context_budget)) w.push_back(std::move(t));
  for (auto& t : split_words(sample.question)) w.push_back(std::move(t));
  if (mode == PromptMode::prompting)
    for (auto& t : format_instruction()) w.push_back(std::move(t));
  if (w.size() > context_budget)
    throw EncodingError("prompt of " + std::to_string(w.size()) + " tokens exceeds budget " +
                        std::to_string(context_budget));
  return w;
}

inline std::vector<int> build_prompt(const VqaSample& sample, PromptMode mode, const Vocab& vocab,
                                     std::size_t context_budget = 256) {
  return vocab.encode(prompt_words(sample, mode, context_budget));
}

/// Supervised target: `<think> reasoning </think> <answer> answer </answer> <eos>`.
inline std::vector<int> build_target(const VqaSample& sample, const Vocab& vocab) {
  std::vector<std::string> w{std::string(kThinkOpen)};
  for (auto& t : split_words(sample.gold_reasoning)) w.push_back(std::move(t));
  w.emplace_back(kThinkClose);
  w.emplace_back(kAnswerOpen);
  for (auto& t : split_words(sample.gold_answer)) w.push_back(std::move(t));
  w.emplace_back(kAnswerClose);
  w.emplace_back(kEos);
  return vocab.encode(w);
}

struct StructuredResponse {
  std::string raw;
  std::optional<std::string> think;
  std::optional<std::string> answer;
  bool well_formed = false;
};

namespace detail {

struct Segment {
  std::string inner;
  std::size_t begin = 0;  // position of the opening tag
  std::size_t end = 0;    // one past the closing tag
};

inline bool contains_delimiter(std::string_view s) {
  for (auto tag : {kThinkOpen, kThinkClose, kAnswerOpen, kAnswerClose})
    if (s.find(tag) != std::string_view::npos) return true;
  return false;
}

/// Only the first occurrence of the opening tag is considered. It must be
/// closed, and its inner text may not contain any delimiter.
inline std::optional<Segment> first_segment(std::string_view raw, std::string_view open,
                                            std::string_view close) {
  const auto b = raw.find(open);
  if (b == std::string_view::npos) return std::nullopt;
  const auto inner_begin = b + open.size();
  const auto e = raw.find(close, inner_begin);
  if (e == std::string_view::npos) return std::nullopt;
  const auto inner = raw.substr(inner_begin, e - inner_begin);
  if (contains_delimiter(inner)) return std::nullopt;
  return Segment{std::string(inner), b, e + close.size()};
}

}  // namespace detail

/// Total on any input; malformed text yields well_formed = false.
inline StructuredResponse parse_structured(std::string_view raw) {
  StructuredResponse r;
  r.raw = std::string(raw);
  const auto think = detail::first_segment(raw, kThinkOpen, kThinkClose);
  const auto answer = detail::first_segment(raw, kAnswerOpen, kAnswerClose);
  if (think) r.think = think->inner;
  if (answer) r.answer = answer->inner;
  r.well_formed = think && answer && think->end <= answer->begin;
  return r;
}

/// Lowercase, collapse whitespace runs, strip surrounding whitespace and trailing periods.
inline std::string normalize_answer(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  bool pending_space = false;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out += ' ';
    pending_space = false;
    out += static_cast<char>(std::tolower(c));
  }
  while (!out.empty() && (out.back() == '.' || out.back() == ' ')) out.pop_back();
  return out;
}

}  // namespace vqalab
