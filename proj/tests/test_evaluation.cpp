#include <gtest/gtest.h>

#include <sstream>

#include "vqalab/evaluation.hpp"

using namespace vqalab;

namespace {

const Dataset& data() {
  static const Dataset ds = [] {
    GenConfig g;
    g.n_total = 300;
    g.seed = 8;
    return generate_dataset(g);
  }();
  return ds;
}

// Mix of right, wrong, untagged and malformed answers keyed by sample index.
std::string scripted(const VqaSample& s) {
  const auto k = std::stoul(s.id.substr(4));
  switch (k % 5) {
    case 0:
      return "<think> x </think> <answer> " + s.gold_answer + " </answer>";
    case 1:
      return "<answer> " + s.gold_answer + " </answer>";
    case 2:
      return "<answer> wrong </answer>";
    case 3:
      return "the answer is " + s.gold_answer;
    default:
      return "<answer> " + s.gold_answer;
  }
}

}  // namespace

TEST(Extraction, ModesDiffer) {
  EXPECT_EQ(extract_answer("<answer> red </answer>", PromptMode::prompting), " red ");
  EXPECT_EQ(extract_answer("it is red", PromptMode::plain), "red");
  EXPECT_FALSE(extract_answer("it is red", PromptMode::prompting));
  EXPECT_FALSE(extract_answer("   ", PromptMode::plain));
  EXPECT_EQ(extract_answer("x <answer>blue</answer> red", PromptMode::plain), "blue");
}

TEST(Evaluate, ReportMatchesIndependentRecount) {
  const auto test = data().split(Split::test);
  for (PromptMode mode : {PromptMode::plain, PromptMode::prompting}) {
    const auto r = evaluate(Responder(scripted), test, mode, "scripted");
    // Recount straight from the dump with an independent parser.
    std::istringstream dump(predictions_to_jsonl(r.predictions));
    std::map<std::string, const VqaSample*> by_id;
    for (const auto* s : test) by_id[s->id] = s;
    std::size_t correct = 0, total = 0;
    std::array<std::size_t, 3> sc{}, st{};
    std::string line;
    while (std::getline(dump, line)) {
      const auto j = nlohmann::json::parse(line);
      const auto* s = by_id.at(j["sample_id"].get<std::string>());
      EXPECT_EQ(j["gold"], s->gold_answer);
      const std::string raw = j["raw_output"];
      std::string ans;
      bool has = false;
      const auto b = raw.find("<answer>"), e = raw.find("</answer>");
      if (b != std::string::npos && e != std::string::npos && e > b) {
        ans = raw.substr(b + 8, e - b - 8);
        has = true;
      } else if (mode == PromptMode::plain) {
        ans = raw.substr(raw.find_last_of(' ') + 1);
        has = true;
      }
      const bool ok = has && normalize_answer(ans) == normalize_answer(s->gold_answer);
      EXPECT_EQ(j["correct"].get<bool>(), ok) << raw;
      correct += ok;
      ++total;
      sc[static_cast<std::size_t>(s->stage())] += ok;
      ++st[static_cast<std::size_t>(s->stage())];
    }
    EXPECT_EQ(total, test.size());
    EXPECT_EQ(r.report.overall.correct, correct);
    EXPECT_EQ(r.report.overall.total, total);
    EXPECT_EQ(r.report.overall_accuracy(), 100.0 * static_cast<double>(correct) / static_cast<double>(total));
    for (Stage s : kAllStages) {
      EXPECT_EQ(r.report.per_stage[static_cast<std::size_t>(s)].correct, sc[static_cast<std::size_t>(s)]);
      EXPECT_EQ(r.report.per_stage[static_cast<std::size_t>(s)].total, st[static_cast<std::size_t>(s)]);
    }
    std::size_t task_total = 0;
    for (const auto& c : r.report.per_task) task_total += c.total;
    EXPECT_EQ(task_total, total);
  }
}

TEST(Evaluate, OfflinePredictionsRoundTrip) {
  const auto test = data().split(Split::test);
  const auto online = evaluate(Responder(scripted), test, PromptMode::prompting);
  std::istringstream in(predictions_to_jsonl(online.predictions));
  const auto offline = evaluate_predictions(in, test, PromptMode::prompting);
  EXPECT_EQ(predictions_to_jsonl(offline.predictions), predictions_to_jsonl(online.predictions));
  EXPECT_EQ(offline.report.overall.correct, online.report.overall.correct);
  std::istringstream bad("{\"sample_id\": \"nope\", \"raw_output\": \"\"}\n");
  EXPECT_THROW(evaluate_predictions(bad, test, PromptMode::prompting), InputError);
  std::istringstream broken("{not json\n");
  EXPECT_THROW(evaluate_predictions(broken, test, PromptMode::prompting), InputError);
}

TEST(Evaluate, EmptyCellsAreUndefinedNotZero) {
  const auto test = data().split(Split::test);
  std::vector<const VqaSample*> only_a;
  for (const auto* s : test)
    if (s->stage() == Stage::A) only_a.push_back(s);
  const auto r = evaluate(Responder(scripted), only_a, PromptMode::prompting);
  EXPECT_TRUE(r.report.stage_accuracy(Stage::A));
  EXPECT_FALSE(r.report.stage_accuracy(Stage::B));
  EXPECT_TRUE(to_json(r.report)["per_stage"]["B"]["accuracy"].is_null());
  EXPECT_THROW(evaluate(Responder(scripted), {}, PromptMode::prompting), ConfigError);
}

TEST(Evaluate, CheckpointVocabularyMismatchRejected) {
  PolicyConfig c;
  c.vocab_size = Vocab::standard().size();
  c.width = 4;
  c.heads = 1;
  c.layers = 1;
  c.mlp_hidden = 4;
  Checkpoint ck{Model{init_params(c, 1), std::nullopt}, 123, {}};
  EXPECT_THROW(evaluate(ck, Vocab::standard(), data().split(Split::test), PromptMode::prompting), ConfigError);
  ck.vocab_hash = Vocab::standard().hash();
  const auto test = data().split(Split::test);
  const std::vector<const VqaSample*> small(test.begin(), test.begin() + 3);
  const auto r = evaluate(ck, Vocab::standard(), small, PromptMode::prompting);
  EXPECT_EQ(r.report.overall.total, 3u);
}

TEST(CrossTask, MatrixShapeAndRowMeans) {
  const auto test = data().split(Split::test);
  auto only = [](Stage st) {
    return Responder([st](const VqaSample& s) {
      return s.stage() == st ? "<answer>" + s.gold_answer + "</answer>" : std::string("<answer>x</answer>");
    });
  };
  const auto m = cross_task_matrix({{Stage::A, only(Stage::A)}, {Stage::C, only(Stage::C)}}, test,
                                   PromptMode::prompting);
  ASSERT_EQ(m.trained.size(), 2u);
  EXPECT_EQ(m.accuracy[0], (std::array<double, 3>{100.0, 0.0, 0.0}));
  EXPECT_EQ(m.accuracy[1], (std::array<double, 3>{0.0, 0.0, 100.0}));
  EXPECT_DOUBLE_EQ(m.row_mean[0], 100.0 / 3.0);
  EXPECT_EQ(to_json(m).size(), 2u);
}

TEST(Dynamics, RollingMeanAndPearson) {
  const std::vector<double> x = {1, 2, 3, 4, 5};
  EXPECT_EQ(rolling_mean(x, 2), (std::vector<double>{1, 1.5, 2.5, 3.5, 4.5}));
  EXPECT_DOUBLE_EQ(*pearson(x, std::vector<double>{2, 4, 6, 8, 10}), 1.0);
  EXPECT_DOUBLE_EQ(*pearson(x, std::vector<double>{5, 4, 3, 2, 1}), -1.0);
  EXPECT_FALSE(pearson(x, std::vector<double>(5, 1.0)));
}

TEST(Dynamics, FormatFirstOnSyntheticLog) {
  // Format ramps to 0.5 by step 20; accuracy idles at 0.1 then climbs after step 60.
  std::vector<double> f, a, k;
  for (int t = 0; t < 120; ++t) {
    f.push_back(std::min(0.5, 0.025 * t));
    a.push_back(t < 60 ? 0.1 : 0.1 + 0.02 * (t - 60));
    k.push_back(t < 60 ? 0.001 : 0.001 + 0.0005 * (t - 60));
  }
  DynamicsConfig c;
  c.window = 10;
  const auto r = analyze_dynamics(f, a, k, c);
  ASSERT_TRUE(r.format_saturation_step);
  ASSERT_TRUE(r.accuracy_rise_step);
  EXPECT_TRUE(r.format_first());
  EXPECT_NEAR(r.accuracy_baseline, 0.1, 1e-15);
  EXPECT_GT(*r.accuracy_rise_step, 60u);
  EXPECT_LT(*r.format_saturation_step, 25u);
  EXPECT_EQ(r.correlation_sign, 1);

  // Reversed order: accuracy climbs while format is still absent.
  std::vector<double> f2(120, 0.0), a2;
  for (int t = 0; t < 120; ++t) a2.push_back(t < 10 ? 0.1 : 0.5);
  for (int t = 100; t < 120; ++t) f2[t] = 0.5;
  const auto r2 = analyze_dynamics(f2, a2, k, c);
  EXPECT_FALSE(r2.format_first());
  EXPECT_THROW(analyze_dynamics(f, a, std::vector<double>{}, c), InputError);
}

TEST(Dynamics, ReadsMetricsLog) {
  std::stringstream ss;
  for (int t = 0; t < 5; ++t) {
    GrpoMetrics m;
    m.step = t;
    m.stage = "A";
    m.reward_format_mean = 0.1 * t;
    ss << to_json(m).dump() << "\n";
  }
  EXPECT_EQ(read_metrics_jsonl(ss).size(), 5u);
  std::stringstream missing("{\"step\": 0, \"kl\": 0}\n");
  EXPECT_THROW(read_metrics_jsonl(missing), InputError);
}
