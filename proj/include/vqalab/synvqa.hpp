#pragma once

// Synthetic aerial-VQA generator: attributed object grids standing in for
// aerial images, eight templated task kinds grouped into three stages, exact
// answer oracle, and token serialization of scenes.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "vqalab/common.hpp"

namespace vqalab {

// ----------------------------- closed vocabulary tables -----------------------------

inline constexpr std::array<std::string_view, 8> kColors = {
    "red", "blue", "green", "yellow", "white", "black", "gray", "orange"};
inline constexpr std::array<std::string_view, 3> kSizes = {"small", "medium", "large"};
inline constexpr std::array<std::string_view, 4> kShapes = {"square", "circle", "triangle",
                                                            "rectangle"};
// The first kVehicleCount categories are transportation kinds.
inline constexpr std::array<std::string_view, 8> kCategories = {
    "car", "truck", "bus", "ship", "airplane", "building", "tree", "pool"};
inline constexpr std::size_t kVehicleCount = 5;
inline constexpr std::array<std::string_view, 4> kSceneClasses = {"residential", "farmland",
                                                                  "harbor", "industrial"};
inline constexpr std::array<std::string_view, 4> kLocationWords = {"top", "bottom", "left",
                                                                   "right"};
inline constexpr std::size_t kMaxCount = 20;
inline constexpr std::size_t kMaxSide = 8;

inline std::string number_word(std::size_t n) { return std::to_string(n); }
inline std::string row_token(std::size_t r) { return "r" + std::to_string(r); }
inline std::string col_token(std::size_t c) { return "c" + std::to_string(c); }

template <std::size_t N>
std::size_t table_index(const std::array<std::string_view, N>& table, std::string_view word,
                        std::string_view what) {
  for (std::size_t i = 0; i < N; ++i)
    if (table[i] == word) return i;
  throw EncodingError("unknown " + std::string(what) + " '" + std::string(word) + "'");
}

// ----------------------------- task kinds -----------------------------

enum class TaskKind : std::uint8_t { color, size, yesno, number, shape, transportation, location, scene };
enum class Stage : std::uint8_t { A, B, C };
enum class Split : std::uint8_t { sft, rl_a, rl_b, rl_c, test };

inline constexpr std::array<TaskKind, 8> kAllTasks = {
    TaskKind::color, TaskKind::size,           TaskKind::yesno,    TaskKind::number,
    TaskKind::shape, TaskKind::transportation, TaskKind::location, TaskKind::scene};
inline constexpr std::array<Stage, 3> kAllStages = {Stage::A, Stage::B, Stage::C};
inline constexpr std::array<Split, 5> kAllSplits = {Split::sft, Split::rl_a, Split::rl_b,
                                                    Split::rl_c, Split::test};

inline constexpr Stage stage_of(TaskKind t) {
  switch (t) {
    case TaskKind::color:
    case TaskKind::size:
    case TaskKind::yesno:
      return Stage::A;
    case TaskKind::number:
    case TaskKind::shape:
    case TaskKind::transportation:
      return Stage::B;
    case TaskKind::location:
    case TaskKind::scene:
      return Stage::C;
  }
  return Stage::A;
}

inline std::vector<TaskKind> tasks_of(Stage s) {
  std::vector<TaskKind> out;
  for (TaskKind t : kAllTasks)
    if (stage_of(t) == s) out.push_back(t);
  return out;
}

inline std::string_view to_string(TaskKind t) {
  constexpr std::array<std::string_view, 8> names = {
      "color", "size", "yesno", "number", "shape", "transportation", "location", "scene"};
  return names[static_cast<std::size_t>(t)];
}
inline std::string_view to_string(Stage s) {
  constexpr std::array<std::string_view, 3> names = {"A", "B", "C"};
  return names[static_cast<std::size_t>(s)];
}
inline std::string_view to_string(Split s) {
  constexpr std::array<std::string_view, 5> names = {"sft", "rl_a", "rl_b", "rl_c", "test"};
  return names[static_cast<std::size_t>(s)];
}

inline TaskKind task_from_string(std::string_view s) {
  for (TaskKind t : kAllTasks)
    if (to_string(t) == s) return t;
  throw ConfigError("unknown task kind '" + std::string(s) + "'");
}
inline Stage stage_from_string(std::string_view s) {
  for (Stage st : kAllStages)
    if (to_string(st) == s) return st;
  throw ConfigError("unknown stage '" + std::string(s) + "'");
}
inline Split split_from_string(std::string_view s) {
  for (Split sp : kAllSplits)
    if (to_string(sp) == s) return sp;
  throw ConfigError("unknown split '" + std::string(s) + "'");
}

inline Split rl_split_of(Stage s) {
  switch (s) {
    case Stage::A:
      return Split::rl_a;
    case Stage::B:
      return Split::rl_b;
    case Stage::C:
      return Split::rl_c;
  }
  return Split::rl_a;
}

// ----------------------------- scenes -----------------------------

struct SceneObject {
  std::size_t row = 0;
  std::size_t col = 0;
  std::size_t color = 0;
  std::size_t size = 0;
  std::size_t shape = 0;
  std::size_t category = 0;

  bool is_vehicle() const { return category < kVehicleCount; }
  friend bool operator==(const SceneObject&, const SceneObject&) = default;
};

/// Objects are kept in strictly increasing row-major cell order, which also
/// enforces at most one object per cell.
struct SceneGrid {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<SceneObject> objects;
  std::size_t scene_class = 0;

  friend bool operator==(const SceneGrid&, const SceneGrid&) = default;

  void validate() const {
    if (width == 0 || height == 0 || width > kMaxSide || height > kMaxSide)
      throw EncodingError("scene dimensions out of range");
    if (scene_class >= kSceneClasses.size()) throw EncodingError("scene class out of range");
    if (objects.size() > width * height) throw EncodingError("more objects than cells");
    std::size_t prev = 0;
    for (std::size_t i = 0; i < objects.size(); ++i) {
      const auto& o = objects[i];
      if (o.row >= height || o.col >= width) throw EncodingError("object outside grid");
      if (o.color >= kColors.size() || o.size >= kSizes.size() || o.shape >= kShapes.size() ||
          o.category >= kCategories.size())
        throw EncodingError("object attribute outside vocabulary");
      const std::size_t cell = o.row * width + o.col;
      if (i > 0 && cell <= prev) throw EncodingError("objects not in strict row-major cell order");
      prev = cell;
    }
  }
};

inline constexpr std::size_t kSceneHeaderTokens = 4;  // <scene> H W class
inline constexpr std::size_t kTokensPerObject = 6;

/// `<scene> H W class (r c category color size shape)* </scene>`
inline std::vector<std::string> serialize_scene(const SceneGrid& scene,
                                                std::size_t context_budget = 256) {
  scene.validate();
  const std::size_t len = kSceneHeaderTokens + kTokensPerObject * scene.objects.size() + 1;
  if (len > context_budget)
    throw EncodingError("scene needs " + std::to_string(len) + " tokens, budget is " +
                        std::to_string(context_budget));
  std::vector<std::string> out;
  out.reserve(len);
  out.emplace_back("<scene>");
  out.push_back(number_word(scene.height));
  out.push_back(number_word(scene.width));
  out.emplace_back(kSceneClasses[scene.scene_class]);
  for (const auto& o : scene.objects) {
    out.push_back(row_token(o.row));
    out.push_back(col_token(o.col));
    out.emplace_back(kCategories[o.category]);
    out.emplace_back(kColors[o.color]);
    out.emplace_back(kSizes[o.size]);
    out.emplace_back(kShapes[o.shape]);
  }
  out.emplace_back("</scene>");
  return out;
}

namespace detail {
inline std::size_t parse_index(std::string_view tok, char prefix, std::size_t limit) {
  if (tok.size() < 2 || tok[0] != prefix) throw EncodingError("bad coordinate token");
  std::size_t v = 0;
  for (char ch : tok.substr(1)) {
    if (ch < '0' || ch > '9') throw EncodingError("bad coordinate token");
    v = v * 10 + static_cast<std::size_t>(ch - '0');
  }
  if (v >= limit) throw EncodingError("coordinate out of range");
  return v;
}
inline std::size_t parse_side(std::string_view tok) {
  std::size_t v = 0;
  if (tok.empty()) throw EncodingError("bad dimension token");
  for (char ch : tok) {
    if (ch < '0' || ch > '9') throw EncodingError("bad dimension token");
    v = v * 10 + static_cast<std::size_t>(ch - '0');
  }
  return v;
}
}  // namespace detail

inline SceneGrid deserialize_scene(std::span<const std::string> tokens) {
  if (tokens.size() < kSceneHeaderTokens + 1 || tokens.front() != "<scene>" ||
      tokens.back() != "</scene>")
    throw EncodingError("not a serialized scene");
  const std::size_t body = tokens.size() - kSceneHeaderTokens - 1;
  if (body % kTokensPerObject != 0) throw EncodingError("truncated object record");
  SceneGrid g;
  g.height = detail::parse_side(tokens[1]);
  g.width = detail::parse_side(tokens[2]);
  g.scene_class = table_index(kSceneClasses, tokens[3], "scene class");
  for (std::size_t i = kSceneHeaderTokens; i + 1 < tokens.size(); i += kTokensPerObject) {
    SceneObject o;
    o.row = detail::parse_index(tokens[i], 'r', kMaxSide);
    o.col = detail::parse_index(tokens[i + 1], 'c', kMaxSide);
    o.category = table_index(kCategories, tokens[i + 2], "category");
    o.color = table_index(kColors, tokens[i + 3], "color");
    o.size = table_index(kSizes, tokens[i + 4], "size");
    o.shape = table_index(kShapes, tokens[i + 5], "shape");
    g.objects.push_back(o);
  }
  g.validate();
  return g;
}

// ----------------------------- questions -----------------------------

/// A question instantiated from one of the fixed per-task templates.
struct Question {
  TaskKind task = TaskKind::scene;
  std::size_t category = 0;
  std::size_t color = 0;
  std::size_t row = 0;
  std::size_t col = 0;

  friend bool operator==(const Question&, const Question&) = default;
};

inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    if (j > i) out.emplace_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

inline std::string join_words(std::span<const std::string> words) {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) out += ' ';
    out += words[i];
  }
  return out;
}

inline std::string question_text(const Question& q) {
  const std::string cat(kCategories[q.category]);
  switch (q.task) {
    case TaskKind::color:
      return "what color is the " + cat + " ?";
    case TaskKind::size:
      return "what size is the " + cat + " ?";
    case TaskKind::yesno:
      return "is there a " + std::string(kColors[q.color]) + " " + cat + " ?";
    case TaskKind::number:
      return "how many " + cat + " are there ?";
    case TaskKind::shape:
      return "what shape is the " + cat + " ?";
    case TaskKind::transportation:
      return "what vehicle is at " + row_token(q.row) + " " + col_token(q.col) + " ?";
    case TaskKind::location:
      return "where is the " + cat + " ?";
    case TaskKind::scene:
      return "what scene is shown ?";
  }
  return {};
}

/// Inverse of question_text; anything not matching a template is unsupported.
inline Question parse_question(std::string_view text) {
  const auto w = split_words(text);
  auto unsupported = [&] {
    return UnsupportedQuestion("no template matches '" + std::string(text) + "'");
  };
  auto cat = [&](std::size_t i) {
    try {
      return table_index(kCategories, w.at(i), "category");
    } catch (const EncodingError&) {
      throw unsupported();
    }
  };
  auto is = [&](std::initializer_list<std::string_view> words) {
    if (w.size() != words.size()) return false;
    std::size_t i = 0;
    for (auto word : words) {
      if (word != "*" && w[i] != word) return false;
      ++i;
    }
    return true;
  };
  Question q;
  if (is({"what", "color", "is", "the", "*", "?"})) {
    q.task = TaskKind::color, q.category = cat(4);
  } else if (is({"what", "size", "is", "the", "*", "?"})) {
    q.task = TaskKind::size, q.category = cat(4);
  } else if (is({"is", "there", "a", "*", "*", "?"})) {
    q.task = TaskKind::yesno, q.category = cat(4);
    try {
      q.color = table_index(kColors, w[3], "color");
    } catch (const EncodingError&) {
      throw unsupported();
    }
  } else if (is({"how", "many", "*", "are", "there", "?"})) {
    q.task = TaskKind::number, q.category = cat(2);
  } else if (is({"what", "shape", "is", "the", "*", "?"})) {
    q.task = TaskKind::shape, q.category = cat(4);
  } else if (is({"what", "vehicle", "is", "at", "*", "*", "?"})) {
    q.task = TaskKind::transportation;
    try {
      q.row = detail::parse_index(w[4], 'r', kMaxSide);
      q.col = detail::parse_index(w[5], 'c', kMaxSide);
    } catch (const EncodingError&) {
      throw unsupported();
    }
  } else if (is({"where", "is", "the", "*", "?"})) {
    q.task = TaskKind::location, q.category = cat(3);
  } else if (is({"what", "scene", "is", "shown", "?"})) {
    q.task = TaskKind::scene;
  } else {
    throw unsupported();
  }
  return q;
}

// ----------------------------- answer oracle -----------------------------

namespace detail {
inline const SceneObject& unique_of_category(const SceneGrid& s, std::size_t category) {
  const SceneObject* found = nullptr;
  for (const auto& o : s.objects) {
    if (o.category != category) continue;
    if (found) throw UnsupportedQuestion("ambiguous referent: several objects of one category");
    found = &o;
  }
  if (!found) throw UnsupportedQuestion("referent missing from scene");
  return *found;
}

inline std::string location_of(const SceneGrid& s, const SceneObject& o) {
  const std::string_view vert = 2 * o.row < s.height ? kLocationWords[0] : kLocationWords[1];
  const std::string_view horiz = 2 * o.col < s.width ? kLocationWords[2] : kLocationWords[3];
  return std::string(vert) + " " + std::string(horiz);
}

inline std::string cell_words(const SceneObject& o) {
  return row_token(o.row) + " " + col_token(o.col);
}
}  // namespace detail

struct OracleResult {
  std::string answer;
  std::string reasoning;
};

/// Derives the gold answer and a mechanical reasoning trace from the scene.
inline OracleResult answer_with_reasoning(const SceneGrid& scene, const Question& q) {
  const std::string cat(kCategories[q.category]);
  switch (q.task) {
    case TaskKind::color: {
      const auto& o = detail::unique_of_category(scene, q.category);
      std::string a(kColors[o.color]);
      return {a, cat + " " + detail::cell_words(o) + " , color " + a};
    }
    case TaskKind::size: {
      const auto& o = detail::unique_of_category(scene, q.category);
      std::string a(kSizes[o.size]);
      return {a, cat + " " + detail::cell_words(o) + " , size " + a};
    }
    case TaskKind::shape: {
      const auto& o = detail::unique_of_category(scene, q.category);
      std::string a(kShapes[o.shape]);
      return {a, cat + " " + detail::cell_words(o) + " , shape " + a};
    }
    case TaskKind::yesno: {
      std::string r = std::string(kColors[q.color]) + " " + cat + " :";
      bool any = false;
      for (const auto& o : scene.objects)
        if (o.category == q.category && o.color == q.color) {
          r += " " + detail::cell_words(o);
          any = true;
        }
      if (!any) r += " none";
      const std::string a = any ? "yes" : "no";
      return {a, r + " , so " + a};
    }
    case TaskKind::number: {
      std::string r = cat + " :";
      std::size_t n = 0;
      for (const auto& o : scene.objects)
        if (o.category == q.category) {
          r += " " + detail::cell_words(o);
          ++n;
        }
      if (n > kMaxCount) throw UnsupportedQuestion("count exceeds the closed answer vocabulary");
      if (n == 0) r += " none";
      return {number_word(n), r + " , count " + number_word(n)};
    }
    case TaskKind::transportation: {
      for (const auto& o : scene.objects)
        if (o.row == q.row && o.col == q.col) {
          if (!o.is_vehicle()) throw UnsupportedQuestion("object at cell is not a vehicle");
          std::string a(kCategories[o.category]);
          return {a, detail::cell_words(o) + " : " + a};
        }
      throw UnsupportedQuestion("no object at queried cell");
    }
    case TaskKind::location: {
      const auto& o = detail::unique_of_category(scene, q.category);
      const std::string a = detail::location_of(scene, o);
      return {a, cat + " " + detail::cell_words(o) + " , " + a};
    }
    case TaskKind::scene: {
      std::string a(kSceneClasses[scene.scene_class]);
      return {a, "scene " + a};
    }
  }
  throw UnsupportedQuestion("unknown task");
}

inline std::string answer_oracle(const SceneGrid& scene, const Question& q) {
  return answer_with_reasoning(scene, q).answer;
}

/// Every word the question templates and reasoning traces can produce, beyond
/// the attribute tables.
inline std::vector<std::string> template_words() {
  return {"what", "color", "is",    "the",   "?",     "size",  "there", "a",    "how",
          "many", "are",   "shape", "vehicle", "at",  "where", "scene", "shown", ",",
          ":",    "none",  "so",    "count"};
}

/// All answer strings a question of the given kind can have.
inline std::vector<std::string> answer_space(TaskKind t) {
  std::vector<std::string> out;
  switch (t) {
    case TaskKind::color:
      for (auto w : kColors) out.emplace_back(w);
      break;
    case TaskKind::size:
      for (auto w : kSizes) out.emplace_back(w);
      break;
    case TaskKind::yesno:
      out = {"yes", "no"};
      break;
    case TaskKind::number:
      for (std::size_t i = 0; i <= kMaxCount; ++i) out.push_back(number_word(i));
      break;
    case TaskKind::shape:
      for (auto w : kShapes) out.emplace_back(w);
      break;
    case TaskKind::transportation:
      for (std::size_t i = 0; i < kVehicleCount; ++i) out.emplace_back(kCategories[i]);
      break;
    case TaskKind::location:
      out = {"top left", "top right", "bottom left", "bottom right"};
      break;
    case TaskKind::scene:
      for (auto w : kSceneClasses) out.emplace_back(w);
      break;
  }
  return out;
}

// ----------------------------- samples & dataset -----------------------------

struct VqaSample {
  std::string id;
  SceneGrid scene;
  std::string question;
  std::string gold_reasoning;
  std::string gold_answer;
  TaskKind task = TaskKind::scene;
  Split split = Split::sft;

  Stage stage() const { return stage_of(task); }
};

/// Split ratios are indexed by Split, stage ratios by Stage. Stage ratios
/// apply to the mixed splits (sft, test); RL splits carry only their stage.
struct GenConfig {
  std::size_t n_total = 500;
  std::array<double, 5> split_ratios = {19187.0 / 50019.0, 5434.0 / 50019.0, 9257.0 / 50019.0,
                                        8587.0 / 50019.0, 7554.0 / 50019.0};
  std::array<double, 3> stage_ratios = {5434.0 / 23278.0, 9257.0 / 23278.0, 8587.0 / 23278.0};
  std::uint64_t seed = 0;
  std::size_t min_side = 3;
  std::size_t max_side = 4;
  std::size_t max_objects = 5;
  std::size_t context_budget = 256;

  void validate() const {
    auto check = [](std::span<const double> r, const char* what) {
      double sum = 0;
      for (double v : r) {
        if (!(v >= 0.0) || !std::isfinite(v))
          throw ConfigError(std::string(what) + " must be finite and non-negative");
        sum += v;
      }
      if (std::abs(sum - 1.0) > 1e-9)
        throw ConfigError(std::string(what) + " must sum to 1 (got " + std::to_string(sum) + ")");
    };
    check(split_ratios, "split_ratios");
    check(stage_ratios, "stage_ratios");
    if (n_total < kAllTasks.size())
      throw ConfigError("n_total must be at least 8 to cover every task kind");
    if (min_side < 2 || max_side < min_side || max_side > kMaxSide)
      throw ConfigError("grid side bounds must satisfy 2 <= min_side <= max_side <= 8");
    if (max_objects < 1 || max_objects > min_side * min_side)
      throw ConfigError("max_objects must be in [1, min_side^2]");
    const std::size_t worst = kSceneHeaderTokens + kTokensPerObject * max_objects + 1 + 32;
    if (worst > context_budget) throw ConfigError("context_budget too small for max_objects");
  }
};

/// Largest-remainder apportionment; ties go to the lower index.
inline std::vector<std::size_t> apportion(std::size_t n, std::span<const double> weights) {
  double total = 0;
  for (double w : weights) total += w;
  std::vector<std::size_t> out(weights.size(), 0);
  if (n == 0 || total <= 0) return out;
  std::vector<std::pair<double, std::size_t>> rema;
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const double exact = static_cast<double>(n) * weights[i] / total;
    out[i] = static_cast<std::size_t>(std::floor(exact));
    assigned += out[i];
    rema.emplace_back(exact - std::floor(exact), i);
  }
  std::stable_sort(rema.begin(), rema.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t k = 0; assigned < n; ++k, ++assigned) ++out[rema[k % rema.size()].second];
  return out;
}

namespace detail {

inline SceneGrid random_scene(Rng& rng, const GenConfig& cfg, std::size_t min_objects) {
  SceneGrid s;
  s.height = cfg.min_side + rng.below(cfg.max_side - cfg.min_side + 1);
  s.width = cfg.min_side + rng.below(cfg.max_side - cfg.min_side + 1);
  s.scene_class = rng.below(kSceneClasses.size());
  const std::size_t n = min_objects + rng.below(cfg.max_objects - min_objects + 1);
  std::vector<std::size_t> cells(s.width * s.height);
  for (std::size_t i = 0; i < cells.size(); ++i) cells[i] = i;
  rng.shuffle(cells);
  for (std::size_t i = 0; i < n; ++i) {
    SceneObject o;
    o.row = cells[i] / s.width;
    o.col = cells[i] % s.width;
    o.color = rng.below(kColors.size());
    o.size = rng.below(kSizes.size());
    o.shape = rng.below(kShapes.size());
    o.category = rng.below(kCategories.size());
    s.objects.push_back(o);
  }
  return s;
}

inline void sort_objects(SceneGrid& s) {
  std::sort(s.objects.begin(), s.objects.end(), [&](const SceneObject& a, const SceneObject& b) {
    return a.row * s.width + a.col < b.row * s.width + b.col;
  });
}

inline std::size_t other_category(Rng& rng, std::size_t avoid) {
  std::size_t c = rng.below(kCategories.size() - 1);
  return c >= avoid ? c + 1 : c;
}

/// Builds a scene and a question of kind `task` that the oracle can answer.
inline std::pair<SceneGrid, Question> make_instance(Rng& rng, const GenConfig& cfg, TaskKind task) {
  const bool needs_object = task != TaskKind::scene && task != TaskKind::number &&
                            task != TaskKind::yesno;
  SceneGrid s = random_scene(rng, cfg, needs_object ? 1 : 0);
  Question q;
  q.task = task;
  switch (task) {
    case TaskKind::color:
    case TaskKind::size:
    case TaskKind::shape:
    case TaskKind::location: {
      const std::size_t t = rng.below(s.objects.size());
      q.category = s.objects[t].category;
      for (std::size_t i = 0; i < s.objects.size(); ++i)
        if (i != t && s.objects[i].category == q.category)
          s.objects[i].category = other_category(rng, q.category);
      break;
    }
    case TaskKind::yesno: {
      q.category = rng.below(kCategories.size());
      q.color = rng.below(kColors.size());
      const bool yes = rng.bernoulli(0.5);
      if (yes) {
        if (s.objects.empty()) s = random_scene(rng, cfg, 1);
        auto& o = s.objects[rng.below(s.objects.size())];
        o.category = q.category;
        o.color = q.color;
      } else {
        for (auto& o : s.objects)
          if (o.category == q.category && o.color == q.color)
            o.color = (o.color + 1 + rng.below(kColors.size() - 1)) % kColors.size();
      }
      break;
    }
    case TaskKind::number: {
      q.category = rng.below(kCategories.size());
      const double p = 0.2 + 0.6 * rng.uniform();
      for (auto& o : s.objects)
        o.category = rng.bernoulli(p) ? q.category : other_category(rng, q.category);
      break;
    }
    case TaskKind::transportation: {
      auto& o = s.objects[rng.below(s.objects.size())];
      o.category = rng.below(kVehicleCount);
      q.row = o.row;
      q.col = o.col;
      break;
    }
    case TaskKind::scene:
      break;
  }
  sort_objects(s);
  return {std::move(s), q};
}

}  // namespace detail

struct Dataset {
  GenConfig config;
  std::vector<VqaSample> samples;

  std::vector<const VqaSample*> split(Split s) const {
    std::vector<const VqaSample*> out;
    for (const auto& x : samples)
      if (x.split == s) out.push_back(&x);
    return out;
  }
  std::size_t count(Split s) const {
    std::size_t n = 0;
    for (const auto& x : samples) n += x.split == s;
    return n;
  }
};

/// Per-split, per-task sample counts implied by the configuration.
inline std::array<std::array<std::size_t, 8>, 5> planned_counts(const GenConfig& cfg) {
  std::array<std::array<std::size_t, 8>, 5> plan{};
  const auto split_counts = apportion(cfg.n_total, cfg.split_ratios);
  for (Split sp : kAllSplits) {
    const std::size_t n = split_counts[static_cast<std::size_t>(sp)];
    std::array<std::size_t, 3> per_stage{};
    switch (sp) {
      case Split::rl_a:
        per_stage = {n, 0, 0};
        break;
      case Split::rl_b:
        per_stage = {0, n, 0};
        break;
      case Split::rl_c:
        per_stage = {0, 0, n};
        break;
      default: {
        const auto c = apportion(n, cfg.stage_ratios);
        per_stage = {c[0], c[1], c[2]};
      }
    }
    for (Stage st : kAllStages) {
      const auto tasks = tasks_of(st);
      const std::vector<double> uniform(tasks.size(), 1.0);
      const auto c = apportion(per_stage[static_cast<std::size_t>(st)], uniform);
      for (std::size_t i = 0; i < tasks.size(); ++i)
        plan[static_cast<std::size_t>(sp)][static_cast<std::size_t>(tasks[i])] = c[i];
    }
  }
  return plan;
}

inline VqaSample make_sample(const GenConfig& cfg, std::size_t index, TaskKind task, Split split) {
  Rng rng(derive_seed(cfg.seed, "synvqa.sample", index));
  auto [scene, q] = detail::make_instance(rng, cfg, task);
  auto oracle = answer_with_reasoning(scene, q);
  char id[32];
  std::snprintf(id, sizeof id, "vqa-%06zu", index);
  VqaSample s;
  s.id = id;
  s.scene = std::move(scene);
  s.question = question_text(q);
  s.gold_reasoning = std::move(oracle.reasoning);
  s.gold_answer = std::move(oracle.answer);
  s.task = task;
  s.split = split;
  return s;
}

/// Pure function of the config: the same config yields byte-identical output.
inline Dataset generate_dataset(const GenConfig& cfg) {
  cfg.validate();
  const auto plan = planned_counts(cfg);
  Dataset ds;
  ds.config = cfg;
  ds.samples.reserve(cfg.n_total);
  for (Split sp : kAllSplits) {
    std::vector<TaskKind> slots;
    for (TaskKind t : kAllTasks)
      for (std::size_t k = 0; k < plan[static_cast<std::size_t>(sp)][static_cast<std::size_t>(t)]; ++k)
        slots.push_back(t);
    Rng order(derive_seed(cfg.seed, "synvqa.order", static_cast<std::uint64_t>(sp)));
    order.shuffle(slots);
    for (TaskKind t : slots) ds.samples.push_back(make_sample(cfg, ds.samples.size(), t, sp));
  }
  return ds;
}

// ----------------------------- JSONL -----------------------------

inline nlohmann::ordered_json scene_to_json(const SceneGrid& s) {
  nlohmann::ordered_json j;
  j["width"] = s.width;
  j["height"] = s.height;
  j["scene_class"] = kSceneClasses[s.scene_class];
  auto objs = nlohmann::ordered_json::array();
  for (const auto& o : s.objects) {
    nlohmann::ordered_json jo;
    jo["row"] = o.row;
    jo["col"] = o.col;
    jo["category"] = kCategories[o.category];
    jo["color"] = kColors[o.color];
    jo["size"] = kSizes[o.size];
    jo["shape"] = kShapes[o.shape];
    objs.push_back(std::move(jo));
  }
  j["objects"] = std::move(objs);
  return j;
}

inline SceneGrid scene_from_json(const nlohmann::json& j) {
  SceneGrid s;
  s.width = j.at("width").get<std::size_t>();
  s.height = j.at("height").get<std::size_t>();
  s.scene_class = table_index(kSceneClasses, j.at("scene_class").get<std::string>(), "scene class");
  for (const auto& jo : j.at("objects")) {
    SceneObject o;
    o.row = jo.at("row").get<std::size_t>();
    o.col = jo.at("col").get<std::size_t>();
    o.category = table_index(kCategories, jo.at("category").get<std::string>(), "category");
    o.color = table_index(kColors, jo.at("color").get<std::string>(), "color");
    o.size = table_index(kSizes, jo.at("size").get<std::string>(), "size");
    o.shape = table_index(kShapes, jo.at("shape").get<std::string>(), "shape");
    s.objects.push_back(o);
  }
  s.validate();
  return s;
}

inline std::string sample_to_jsonl(const VqaSample& s) {
  nlohmann::ordered_json j;
  j["id"] = s.id;
  j["scene"] = scene_to_json(s.scene);
  j["question"] = s.question;
  j["reasoning"] = s.gold_reasoning;
  j["answer"] = s.gold_answer;
  j["task"] = to_string(s.task);
  j["stage"] = to_string(s.stage());
  j["split"] = to_string(s.split);
  return j.dump();
}

inline VqaSample sample_from_json(const nlohmann::json& j) {
  VqaSample s;
  s.id = j.at("id").get<std::string>();
  s.scene = scene_from_json(j.at("scene"));
  s.question = j.at("question").get<std::string>();
  s.gold_reasoning = j.at("reasoning").get<std::string>();
  s.gold_answer = j.at("answer").get<std::string>();
  s.task = task_from_string(j.at("task").get<std::string>());
  s.split = split_from_string(j.at("split").get<std::string>());
  if (j.at("stage").get<std::string>() != to_string(s.stage()))
    throw ConfigError("sample " + s.id + " has a stage inconsistent with its task");
  return s;
}

inline std::string dataset_to_jsonl(std::span<const VqaSample> samples) {
  std::string out;
  for (const auto& s : samples) {
    out += sample_to_jsonl(s);
    out += '\n';
  }
  return out;
}

/// Hash of the canonical JSONL encoding, used to tie runs to their data.
inline std::string dataset_fingerprint(const Dataset& ds) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a64(dataset_to_jsonl(ds.samples))));
  return buf;
}

inline std::vector<VqaSample> read_samples_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open dataset file " + path);
  std::vector<VqaSample> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(sample_from_json(nlohmann::json::parse(line)));
  }
  return out;
}

}  // namespace vqalab
