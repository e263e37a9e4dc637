// vqalab command-line driver.
//
// Exit codes: 0 success, 2 usage error, 3 configuration error, 4 runtime failure.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "vqalab/curriculum.hpp"

namespace fs = std::filesystem;
using namespace vqalab;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitConfig = 3;
constexpr int kExitRuntime = 4;

struct UsageError : Error {
  using Error::Error;
};

struct Common {
  std::string config;
  std::string out;
  bool overwrite = false;
  bool resume = false;
};

RunManifest load_config(const Common& c) {
  return c.config.empty() ? default_manifest() : read_manifest(c.config);
}

/// Refuses to touch a completed run unless --overwrite; an incomplete directory
/// is only reused with --resume.
void prepare_out(const Common& c) {
  if (c.out.empty()) throw UsageError("--out is required");
  const fs::path dir(c.out);
  if (fs::exists(dir) && !fs::is_directory(dir)) throw UsageError(c.out + " exists and is not a directory");
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (c.overwrite) {
      fs::remove_all(dir);
    } else if (fs::exists(dir / kCompleteMarker)) {
      throw UsageError(c.out + " holds a completed run; pass --overwrite to replace it");
    } else if (!c.resume) {
      throw UsageError(c.out + " is not empty; pass --resume to continue or --overwrite to replace it");
    }
  }
  fs::create_directories(dir);
}

void write_command_record(const Common& c, const std::string& name, const nlohmann::ordered_json& extra = {}) {
  nlohmann::ordered_json j;
  j["command"] = name;
  j["config"] = c.config;
  j["code_version"] = kCodeVersion;
  if (!extra.is_null()) j["args"] = extra;
  write_file(fs::path(c.out) / "command.json", j.dump(2) + "\n");
}

void write_manifest(const Common& c, const RunManifest& m) {
  write_file(fs::path(c.out) / "manifest.json", to_json(m).dump(2) + "\n");
}

void mark_complete(const Common& c) { write_file(fs::path(c.out) / kCompleteMarker, "ok\n"); }

RunOptions options(const Common& c) {
  RunOptions o;
  o.resume = c.resume;
  o.log = [](const std::string& s) { std::cerr << "[vqalab] " << s << std::endl; };
  return o;
}

// ----------------------------- commands -----------------------------

void cmd_gen_data(const Common& c) {
  RunManifest m = load_config(c);
  prepare_out(c);
  write_command_record(c, "gen-data");
  write_manifest(c, m);
  Dataset ds = load_dataset(m);
  write_manifest(c, m);  // now carries the fingerprint
  const fs::path dir(c.out);
  write_file(dir / "dataset.jsonl", dataset_to_jsonl(ds.samples));
  nlohmann::ordered_json counts;
  for (Split s : {Split::sft, Split::rl_a, Split::rl_b, Split::rl_c, Split::test}) {
    std::vector<VqaSample> part;
    for (const auto* x : ds.split(s)) part.push_back(*x);
    write_file(dir / "data" / (std::string(to_string(s)) + ".jsonl"), dataset_to_jsonl(part));
    counts[std::string(to_string(s))] = part.size();
  }
  write_file(dir / "report.json",
             nlohmann::ordered_json{{"dataset_fingerprint", m.dataset_fingerprint}, {"counts", counts}}.dump(2) + "\n");
  mark_complete(c);
}

void cmd_curriculum(const Common& c, std::optional<Route> force_route, bool sft_only) {
  RunManifest m = load_config(c);
  if (force_route) m.route = *force_route;
  if (sft_only) {
    m.route = Route::sft_grpo;
    m.plan = {Stage::A};
  }
  prepare_out(c);
  write_command_record(c, sft_only ? "sft" : force_route ? "grpo" : "curriculum");
  RunOptions o = options(c);
  o.sft_only = sft_only;
  run_curriculum(m, c.out, o);
}

void cmd_ablate(const Common& c) {
  RunManifest m = load_config(c);
  prepare_out(c);
  write_command_record(c, "ablate");
  write_manifest(c, m);
  run_ablation(m, c.out, options(c));
  mark_complete(c);
}

void cmd_cross_task(const Common& c) {
  RunManifest m = load_config(c);
  prepare_out(c);
  write_command_record(c, "cross-task");
  write_manifest(c, m);
  run_cross_task(m, c.out, options(c));
  mark_complete(c);
}

void cmd_eval(const Common& c, const std::string& checkpoint, const std::string& predictions) {
  if (checkpoint.empty() == predictions.empty())
    throw UsageError("eval needs exactly one of --checkpoint or --predictions");
  RunManifest m = load_config(c);
  prepare_out(c);
  write_command_record(c, "eval", {{"checkpoint", checkpoint}, {"predictions", predictions}});
  write_manifest(c, m);
  Dataset ds = load_dataset(m);
  write_manifest(c, m);
  const auto test = require_split(ds, Split::test);
  const Vocab vocab = Vocab::standard();
  const fs::path dir(c.out);
  nlohmann::ordered_json reports = nlohmann::ordered_json::array();
  for (PromptMode mode : m.eval.modes) {
    EvalResult r;
    if (!checkpoint.empty()) {
      Checkpoint ck = load_checkpoint(checkpoint, vocab.hash());
      r = evaluate(greedy_responder(std::make_shared<InferenceModel>(ck.model), vocab, mode, m.eval.max_len), test,
                   mode, checkpoint);
    } else {
      std::ifstream in(predictions);
      if (!in) throw InputError("cannot read " + predictions);
      r = evaluate_predictions(in, test, mode);
    }
    write_file(dir / ("predictions." + std::string(to_string(mode)) + ".jsonl"), predictions_to_jsonl(r.predictions));
    reports.push_back(to_json(r.report));
  }
  write_file(dir / "report.json", reports.dump(2) + "\n");
  mark_complete(c);
}

void cmd_dynamics(const Common& c, const std::string& metrics) {
  if (metrics.empty()) throw UsageError("dynamics needs --metrics");
  RunManifest m = load_config(c);
  prepare_out(c);
  write_command_record(c, "dynamics", {{"metrics", metrics}});
  write_manifest(c, m);
  std::ifstream in(metrics);
  if (!in) throw InputError("cannot read " + metrics);
  const auto log = read_metrics_jsonl(in);
  write_file(fs::path(c.out) / "dynamics.json", to_json(analyze_dynamics(log, m.dynamics)).dump(2) + "\n");
  mark_complete(c);
}

int fail(const Common* c, int code, const std::string& kind, const std::string& msg) {
  nlohmann::ordered_json j{{"error", kind}, {"message", msg}, {"exit_code", code}};
  std::cerr << j.dump() << std::endl;
  // Diagnostics go next to the run, but never into a completed run directory.
  if (c && !c->out.empty() && !fs::exists(fs::path(c->out) / kCompleteMarker)) {
    try {
      fs::create_directories(c->out);
      write_file(fs::path(c->out) / "error.json", j.dump(2) + "\n");
    } catch (...) {
    }
  }
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Desk-scale SFT + GRPO laboratory for structured visual question answering"};
  app.require_subcommand(1);
  Common common;
  std::string checkpoint, predictions, metrics;

  auto add_common = [&](CLI::App* sub, bool resumable) {
    sub->add_option("--config", common.config, "JSON config or manifest")->check(CLI::ExistingFile);
    sub->add_option("--out", common.out, "output directory")->required();
    sub->add_flag("--overwrite", common.overwrite, "replace an existing output directory");
    if (resumable) sub->add_flag("--resume", common.resume, "continue an interrupted run");
  };
  auto* gen = app.add_subcommand("gen-data", "generate the synthetic dataset");
  add_common(gen, false);
  auto* sft = app.add_subcommand("sft", "base warm-up then supervised fine-tuning");
  add_common(sft, true);
  auto* grpo = app.add_subcommand("grpo", "GRPO stages without SFT (from init_checkpoint or the base)");
  add_common(grpo, true);
  auto* cur = app.add_subcommand("curriculum", "full run as described by the manifest");
  add_common(cur, true);
  auto* abl = app.add_subcommand("ablate", "Route-1 vs Route-2 over every plan prefix");
  add_common(abl, true);
  auto* ev = app.add_subcommand("eval", "accuracy of a checkpoint or a prediction file on the test split");
  add_common(ev, false);
  ev->add_option("--checkpoint", checkpoint, "policy checkpoint")->check(CLI::ExistingFile);
  ev->add_option("--predictions", predictions, "JSONL of {sample_id, raw_output}")->check(CLI::ExistingFile);
  auto* cross = app.add_subcommand("cross-task", "single-stage training evaluated on every stage");
  add_common(cross, true);
  auto* dyn = app.add_subcommand("dynamics", "reward-dynamics analysis of a GRPO metrics log");
  add_common(dyn, false);
  dyn->add_option("--metrics", metrics, "GRPO metrics JSONL")->required()->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*gen) cmd_gen_data(common);
    else if (*sft) cmd_curriculum(common, std::nullopt, true);
    else if (*grpo) cmd_curriculum(common, Route::grpo_direct, false);
    else if (*cur) cmd_curriculum(common, std::nullopt, false);
    else if (*abl) cmd_ablate(common);
    else if (*ev) cmd_eval(common, checkpoint, predictions);
    else if (*cross) cmd_cross_task(common);
    else if (*dyn) cmd_dynamics(common, metrics);
    return kExitOk;
  } catch (const UsageError& e) {
    return fail(nullptr, kExitUsage, "usage", e.what());
  } catch (const ConfigError& e) {
    return fail(&common, kExitConfig, "config", e.what());
  } catch (const NumericalError& e) {
    return fail(&common, kExitRuntime, "numerical", e.what());
  } catch (const std::exception& e) {
    return fail(&common, kExitRuntime, "runtime", e.what());
  }
}
