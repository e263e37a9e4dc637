#pragma once

// Rule-based reward: format compliance (0 or 0.5) plus answer correctness
// (0 or 1.5). Values are held as integer counts of halves so that sums and
// group statistics stay exact.

#include <string_view>

#include "vqalab/structured_io.hpp"

namespace vqalab {

class Reward {
 public:
  constexpr Reward() = default;
  static constexpr Reward from_halves(int halves) { return Reward(halves); }

  constexpr int halves() const { return halves_; }
  constexpr double value() const { return 0.5 * halves_; }

  friend constexpr Reward operator+(Reward a, Reward b) { return Reward(a.halves_ + b.halves_); }
  friend constexpr bool operator==(Reward, Reward) = default;

 private:
  constexpr explicit Reward(int h) : halves_(h) {}
  int halves_ = 0;
};

inline constexpr Reward kFormatReward = Reward::from_halves(1);    // 0.5
inline constexpr Reward kAccuracyReward = Reward::from_halves(3);  // 1.5

struct RewardBreakdown {
  Reward format;
  Reward accuracy;
  Reward total;
};

inline Reward format_reward(const StructuredResponse& resp) {
  return resp.well_formed ? kFormatReward : Reward{};
}

/// Requires an extracted answer segment; the think segment is not required.
inline Reward accuracy_reward(const StructuredResponse& resp, std::string_view gold) {
  if (!resp.answer) return {};
  return normalize_answer(*resp.answer) == normalize_answer(gold) ? kAccuracyReward : Reward{};
}

inline RewardBreakdown total_reward(const StructuredResponse& resp, std::string_view gold) {
  RewardBreakdown b;
  b.format = format_reward(resp);
  b.accuracy = accuracy_reward(resp, gold);
  b.total = b.format + b.accuracy;
  return b;
}

inline RewardBreakdown score_text(std::string_view raw, std::string_view gold) {
  return total_reward(parse_structured(raw), gold);
}

}  // namespace vqalab
