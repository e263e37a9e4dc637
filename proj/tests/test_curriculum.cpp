#include <gtest/gtest.h>

#include <unistd.h>

#include "vqalab/curriculum.hpp"

using namespace vqalab;

namespace {

RunManifest tiny_manifest(std::uint64_t seed = 5) {
  RunManifest m = default_manifest(seed);
  m.data.gen.n_total = 240;
  m.policy.width = 8;
  m.policy.heads = 2;
  m.policy.layers = 1;
  m.policy.mlp_hidden = 8;
  m.base.steps = 4;
  m.sft.max_steps = 3;
  m.sft.epochs = 1;
  m.grpo.max_steps = 2;
  m.grpo.group_size = 4;
  m.grpo.batch_size = 2;
  m.grpo.grad_accum = 1;
  m.grpo.max_completion = 8;
  m.eval.max_len = 8;
  m.dynamics.window = 1;
  return m;
}

struct TempDir {
  fs::path path;
  TempDir() {
    std::string tmpl = (fs::temp_directory_path() / "vqalab-test-XXXXXX").string();
    path = mkdtemp(tmpl.data());
  }
  ~TempDir() { fs::remove_all(path); }
};

nlohmann::json base_json() { return nlohmann::json::parse(to_json(tiny_manifest()).dump()); }

std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = read_file(e.path());
  return out;
}

}  // namespace

TEST(Manifest, JsonRoundTripIsExact) {
  const auto m = tiny_manifest();
  const std::string text = to_json(m).dump(2);
  EXPECT_EQ(to_json(manifest_from_text(text)).dump(2), text);
}

TEST(Manifest, UnknownKeysAndBadValuesAreRejected) {
  auto j = base_json();
  j["learning_rate"] = 1;
  EXPECT_THROW(manifest_from_json(j), ConfigError);
  j = base_json();
  j["grpo"]["cliprange"] = 0.2;
  EXPECT_THROW(manifest_from_json(j), ConfigError);
  j = base_json();
  j["sft"]["seed"] = 3;  // component seeds are derived, never set directly
  EXPECT_THROW(manifest_from_json(j), ConfigError);
  j = base_json();
  j["grpo"]["group_size"] = "eight";
  EXPECT_THROW(manifest_from_json(j), ConfigError);
  j = base_json();
  j["route"] = "rl_only";
  EXPECT_THROW(manifest_from_json(j), ConfigError);
  j = base_json();
  j.erase("schema_version");
  EXPECT_THROW(manifest_from_json(j), ConfigError);
  j = base_json();
  j["schema_version"] = 99;
  EXPECT_THROW(manifest_from_json(j), ConfigError);
  j = base_json();
  j["code_version"] = "other";
  EXPECT_THROW(manifest_from_json(j), ConfigError);
  j = base_json();
  j["grpo"]["lr"] = 0.5;  // optimizer record still carries the old lr
  EXPECT_THROW(manifest_from_json(j), ConfigError);
  EXPECT_THROW(manifest_from_text("{\"schema_version\": 1,"), ConfigError);
}

TEST(Manifest, StagePlans) {
  auto j = base_json();
  for (const auto& ok : {nlohmann::json{"A"}, nlohmann::json{"C"}, nlohmann::json{"A", "B"}}) {
    j["plan"] = ok;
    EXPECT_NO_THROW(manifest_from_json(j)) << ok;
  }
  for (const auto& bad : {nlohmann::json::array(), nlohmann::json{"B", "C"}, nlohmann::json{"A", "C"},
                          nlohmann::json{"A", "D"}}) {
    j["plan"] = bad;
    EXPECT_THROW(manifest_from_json(j), ConfigError) << bad;
  }
}

TEST(Manifest, SeedsDeriveFromRoot) {
  const auto a = default_manifest(1), b = default_manifest(2);
  EXPECT_NE(a.data.gen.seed, b.data.gen.seed);
  EXPECT_NE(a.sft.seed, a.grpo.seed);
  EXPECT_NE(a.init_seed(), b.init_seed());
  EXPECT_EQ(a.grpo.seed, default_manifest(1).grpo.seed);
  auto j = base_json();
  j["seed"] = 2;
  EXPECT_EQ(manifest_from_json(j).grpo.seed, derive_seed(2, "grpo"));
}

TEST(Curriculum, WritesRunDirectoryLayout) {
  TempDir d;
  const auto r = run_curriculum(tiny_manifest(), d.path);
  ASSERT_EQ(r.stages.size(), 4u);
  EXPECT_EQ(r.stages[0].name, "sft");
  for (const char* f : {"manifest.json", "report.json", "COMPLETE", "checkpoints/base.ckpt",
                        "checkpoints/stage-sft.ckpt", "checkpoints/stage-A.ckpt", "checkpoints/stage-C.ckpt",
                        "metrics/base.jsonl", "metrics/sft.jsonl", "metrics/grpo-B.jsonl",
                        "evals/stage-C.prompting.jsonl"})
    EXPECT_TRUE(fs::exists(d.path / f)) << f;
  for (const auto& e : fs::recursive_directory_iterator(d.path))
    EXPECT_EQ(e.path().string().find(".partial"), std::string::npos) << e.path();

  // The written manifest replays to the same configuration, fingerprint included.
  const auto back = read_manifest((d.path / "manifest.json").string());
  EXPECT_EQ(back.dataset_fingerprint, r.manifest.dataset_fingerprint);
  EXPECT_FALSE(back.dataset_fingerprint.empty());

  const auto ck = load_checkpoint((d.path / "checkpoints/stage-A.ckpt").string(), Vocab::standard().hash());
  EXPECT_TRUE(ck.meta["init"]["adapter_merged"].get<bool>());
  EXPECT_EQ(ck.meta["init"]["from"], "checkpoints/stage-sft.ckpt");
  EXPECT_FALSE(ck.model.adapter);
  const auto b = load_checkpoint((d.path / "checkpoints/stage-B.ckpt").string(), Vocab::standard().hash());
  EXPECT_EQ(b.meta["init"]["from"], "checkpoints/stage-A.ckpt");

  // One dump line per test sample.
  const auto dump = read_file(d.path / "evals/stage-A.prompting.jsonl");
  Dataset ds = generate_dataset(r.manifest.data.gen);
  EXPECT_EQ(static_cast<std::size_t>(std::count(dump.begin(), dump.end(), '\n')), ds.split(Split::test).size());
}

TEST(Curriculum, RouteOneHasNoSftPhase) {
  TempDir d;
  auto m = tiny_manifest();
  m.route = Route::grpo_direct;
  m.plan = {Stage::A};
  const auto r = run_curriculum(m, d.path);
  ASSERT_EQ(r.stages.size(), 1u);
  EXPECT_FALSE(fs::exists(d.path / "checkpoints/stage-sft.ckpt"));
  const auto ck = load_checkpoint((d.path / "checkpoints/stage-A.ckpt").string(), Vocab::standard().hash());
  EXPECT_EQ(ck.meta["init"]["from"], "checkpoints/base.ckpt");
  EXPECT_THROW(run_curriculum(m, d.path, RunOptions{false, true, {}}), ConfigError);
}

TEST(Curriculum, ReplayIsByteIdentical) {
  TempDir a, b;
  run_curriculum(tiny_manifest(), a.path);
  run_curriculum(read_manifest((a.path / "manifest.json").string()), b.path);
  EXPECT_EQ(tree(a.path), tree(b.path));
}

TEST(Curriculum, ResumeMatchesUninterruptedRun) {
  TempDir full;
  run_curriculum(tiny_manifest(), full.path);
  const auto expected = tree(full.path);
  // Simulate a crash just before each phase: everything it and later phases wrote is gone.
  const std::vector<std::string> phases = {"base", "sft", "A", "B", "C"};
  for (std::size_t cut = 0; cut < phases.size(); ++cut) {
    TempDir d;
    fs::copy(full.path, d.path, fs::copy_options::recursive);
    fs::remove(d.path / "report.json");
    fs::remove(d.path / "COMPLETE");
    for (std::size_t k = cut; k < phases.size(); ++k) {
      const std::string& p = phases[k];
      fs::remove(d.path / (p == "base" ? "checkpoints/base.ckpt" : "checkpoints/stage-" + p + ".ckpt"));
      fs::remove(d.path / "metrics" / (p == "base" || p == "sft" ? p + ".jsonl" : "grpo-" + p + ".jsonl"));
      fs::remove(d.path / "evals" / ("stage-" + p + ".prompting.jsonl"));
    }
    std::vector<std::string> log;
    run_curriculum(tiny_manifest(), d.path, RunOptions{true, false, [&](const std::string& s) { log.push_back(s); }});
    if (cut > 0) EXPECT_EQ(log.front(), "resume: base");
    EXPECT_EQ(tree(d.path), expected) << "cut before " << phases[cut];
  }

  auto other = tiny_manifest();
  other.grpo.kl_beta = 0.5;
  EXPECT_THROW(run_curriculum(other, full.path, RunOptions{true, false, {}}), ConfigError);
}

TEST(Curriculum, FingerprintMismatchIsRejected) {
  TempDir d;
  auto m = tiny_manifest();
  m.dataset_fingerprint = "0000000000000000";
  EXPECT_THROW(run_curriculum(m, d.path), ConfigError);
}

TEST(Curriculum, DatasetFromFile) {
  TempDir d, a, b;
  auto m = tiny_manifest();
  m.plan = {Stage::A};
  const Dataset ds = generate_dataset(m.data.gen);
  write_file(d.path / "data.jsonl", dataset_to_jsonl(ds.samples));
  const auto generated = run_curriculum(m, a.path);
  m.data.path = (d.path / "data.jsonl").string();
  const auto loaded = run_curriculum(m, b.path);
  EXPECT_EQ(generated.manifest.dataset_fingerprint, loaded.manifest.dataset_fingerprint);
  EXPECT_EQ(generated.final_model, loaded.final_model);
}

TEST(Ablation, RowsPerRouteAndPrefix) {
  TempDir d;
  auto m = tiny_manifest();
  m.plan = {Stage::A, Stage::B};
  const auto r = run_ablation(m, d.path);
  ASSERT_EQ(r.rows.size(), 4u);
  EXPECT_EQ(r.rows[0].route, Route::grpo_direct);
  EXPECT_EQ(r.rows[1].trained, (std::vector<Stage>{Stage::A, Stage::B}));
  EXPECT_EQ(r.rows[2].route, Route::sft_grpo);
  const auto j = nlohmann::json::parse(read_file(d.path / "ablation.json"));
  ASSERT_EQ(j["deltas_route2_minus_route1"].size(), 2u);
  EXPECT_DOUBLE_EQ(j["deltas_route2_minus_route1"][1]["overall"].get<double>(), r.rows[3].overall - r.rows[1].overall);
  // Both routes share the base warm-up and the dataset.
  EXPECT_EQ(read_file(d.path / "route-grpo_direct/checkpoints/base.ckpt"),
            read_file(d.path / "route-sft_grpo/checkpoints/base.ckpt"));
}

TEST(CrossTask, OneRunPerStage) {
  TempDir d;
  const auto mat = run_cross_task(tiny_manifest(), d.path);
  ASSERT_EQ(mat.trained.size(), 3u);
  for (const char* s : {"trained-A", "trained-B", "trained-C"}) EXPECT_TRUE(fs::exists(d.path / s / "COMPLETE"));
  EXPECT_FALSE(fs::exists(d.path / "trained-B/checkpoints/stage-A.ckpt"));
  EXPECT_EQ(nlohmann::json::parse(read_file(d.path / "cross_task.json")).size(), 3u);
}
